"""Reconstruction from a single image and view-based evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .camera import (DEFAULT_INTRINSIC, CameraIntrinsic, SimilarityTransform, build_camera_feature,
                     canonical_camera, look_at, normalize_camera)
from .data import ShapeViews
from .field import Triplane
from .losses import psnr, ssim
from .model import LRM
from .renderer import Field, render_image, transformed_field
from .tensor import no_grad
from .trainer import resize_image


def reconstruct(model: LRM, image: np.ndarray, E: Optional[np.ndarray] = None,
                K: CameraIntrinsic = DEFAULT_INTRINSIC,
                mode: str = "synthetic") -> tuple[Triplane, SimilarityTransform]:
    """Triplane for an [H, W, 3] image.

    Without a known camera the image is assumed to be taken from the canonical
    normalized pose. Returns the triplane and the world similarity that maps
    original world coordinates into the triplane frame.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != image.shape[1]:
        raise ValueError(f"input image must be square [S, S, 3], got {image.shape}; crop/pad it first")
    size = model.cfg.encoder.image_size
    if image.shape[0] != size:
        image = resize_image(image, size)
    if E is None:
        E_norm, K = canonical_camera(K)
        sim = SimilarityTransform.identity()
    else:
        E_norm, sim = normalize_camera(E, mode)
    with no_grad():
        tri = model.triplane(np.transpose(image, (2, 0, 1)), build_camera_feature(E_norm, K))
    return tri, sim


def render_view(field: Field, E: np.ndarray, K: CameraIntrinsic, size: int, samples: int = 32):
    """Midpoint-sampled render of a field (e.g. ``model.field(tri)``)."""
    with no_grad():
        out = render_image(field, E, K, size, size, samples)
    return np.asarray(out.rgb.data, dtype=np.float64), out.depth, out.opacity


def turntable_cameras(n: int, radius: float = 2.0, height: float = 0.5) -> list[np.ndarray]:
    """``n`` cameras circling the z axis, the first at the canonical azimuth."""
    out = []
    for k in range(n):
        phi = -np.pi / 2 + 2 * np.pi * k / n
        out.append(look_at([radius * np.cos(phi), radius * np.sin(phi), height]))
    return out


@dataclass
class ShapeScore:
    shape_id: str
    input_view: int
    psnr: float
    ssim: float
    per_view: list

    def as_dict(self) -> dict:
        return {"shape_id": self.shape_id, "input_view": self.input_view, "psnr": self.psnr,
                "ssim": self.ssim, "per_view": self.per_view}


def evaluate_shape(model: Optional[LRM], shape: ShapeViews, input_view: int = 0, size: int = 32,
                   samples: int = 32, views: Optional[Sequence[int]] = None,
                   oracle: Optional[Field] = None) -> ShapeScore:
    """Reconstruct from ``input_view`` with its true camera; score the other views.

    ``oracle`` replaces the reconstruction by a known field given in the
    dataset's world frame.
    """
    if oracle is None:
        tri, sim = reconstruct(model, shape.images[input_view], shape.extrinsics[input_view],
                               shape.intrinsics[input_view])
        fld = model.field(tri)
    else:
        _, sim = normalize_camera(shape.extrinsics[input_view])
        fld = transformed_field(oracle, sim)
    if views is None:
        views = [v for v in range(len(shape.images)) if v != input_view]
    per_view = []
    for v in views:
        pred, _, _ = render_view(fld, sim.apply_extrinsic(shape.extrinsics[v]), shape.intrinsics[v],
                                 size, samples)
        gt = resize_image(shape.images[v], size)
        per_view.append({"view": int(v), "psnr": psnr(pred, gt), "ssim": ssim(pred, gt)})
    return ShapeScore(shape.shape_id, input_view, float(np.mean([p["psnr"] for p in per_view])),
                      float(np.mean([p["ssim"] for p in per_view])), per_view)


def white_baseline(shape: ShapeViews, input_view: int = 0, size: int = 32,
                   views: Optional[Sequence[int]] = None) -> float:
    """Mean PSNR of an all-white prediction over the evaluated views."""
    if views is None:
        views = [v for v in range(len(shape.images)) if v != input_view]
    return float(np.mean([psnr(np.ones((size, size, 3)), resize_image(shape.images[v], size)) for v in views]))


def evaluate_dataset(model: Optional[LRM], shapes: Sequence[ShapeViews], input_view: int = 0,
                     size: int = 32, samples: int = 32, oracle: Optional[Field] = None) -> dict:
    if not shapes:
        raise ValueError("cannot evaluate an empty dataset")
    scores = [evaluate_shape(model, s, input_view, size, samples, oracle=oracle) for s in shapes]
    return {"psnr_mean": float(np.mean([s.psnr for s in scores])),
            "ssim_mean": float(np.mean([s.ssim for s in scores])),
            "white_psnr_mean": float(np.mean([white_baseline(s, input_view, size) for s in shapes])),
            "per_shape": [s.as_dict() for s in scores]}
