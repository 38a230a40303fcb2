"""Differentiable volume rendering with white-background compositing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import ops
from .camera import CameraIntrinsic, RayBatch, SimilarityTransform, generate_rays
from .tensor import Tensor, as_tensor, default_dtype

Field = Callable[[Tensor], tuple[Tensor, Tensor]]


@dataclass
class RaySamples:
    t: np.ndarray       # [R, S], nondecreasing per ray
    deltas: np.ndarray  # [R, S], t[i+1] - t[i]; last entry runs to t_far


def stratified_sample(t_near: np.ndarray, t_far: np.ndarray, S: int,
                      rng: Optional[np.random.Generator] = None) -> RaySamples:
    """One sample per equal-width bin of [t_near, t_far].

    With ``rng`` None the bin midpoints are used (inference mode). The last
    sample's delta reaches the far bound so the samples cover the interval.
    """
    if S < 1:
        raise ValueError("need at least one sample per ray")
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    if np.any(t_far < t_near):
        raise ValueError("ray interval with t_far < t_near")
    R = len(t_near)
    offsets = np.full((R, S), 0.5) if rng is None else rng.uniform(size=(R, S))
    width = (t_far - t_near)[:, None] / S
    t = t_near[:, None] + (np.arange(S)[None, :] + offsets) * width
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = t_far - t[:, -1]
    return RaySamples(t, np.maximum(deltas, 0.0))


@dataclass
class Composited:
    rgb: Tensor          # [R, 3] after background
    opacity: Tensor      # [R]
    weights: Tensor      # [R, S]
    depth: np.ndarray    # [R], not on the tape


def composite(rgb, sigma, t: np.ndarray, deltas: np.ndarray, background: float = 1.0,
              eps: float = 1e-10) -> Composited:
    """Alpha-composite per-sample colors [R, S, 3] and densities [R, S]."""
    rgb, sigma = as_tensor(rgb), as_tensor(sigma)
    if np.any(sigma.data < 0) or np.any(deltas < 0):
        raise ValueError("composite needs nonnegative densities and deltas")
    R, S = sigma.shape
    dt = Tensor._wrap(np.asarray(deltas, dtype=sigma.dtype))
    tau = sigma * dt
    alpha = 1.0 - ops.exp(-tau)
    trans = ops.exp(-ops.cumsum(tau, axis=1, exclusive=True))
    w = trans * alpha
    color = ops.matmul(w.reshape(R, 1, S), rgb).reshape(R, 3)
    opacity = ops.sum(w, axis=1)
    out = color + (1.0 - opacity.reshape(R, 1)) * background
    depth = (w.data * t).sum(axis=1) / np.maximum(opacity.data, eps)
    return Composited(out, opacity, w, depth)


@dataclass
class RenderOutput:
    rgb: Tensor           # [H, W, 3]
    depth: np.ndarray     # [H, W]
    opacity: np.ndarray   # [H, W]


def render_rays(field: Field, rays: RayBatch, S: int, rng: Optional[np.random.Generator] = None,
                background: float = 1.0) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Render a ray batch; rays missing the box are pure background.

    Returns per-ray rgb [N, 3] (on the tape), depth [N] and opacity [N].
    """
    N = len(rays)
    hit_idx = np.flatnonzero(rays.hit)
    miss_idx = np.flatnonzero(~rays.hit)
    depth = np.zeros(N)
    opacity = np.zeros(N)
    parts = []
    if len(hit_idx):
        sub = rays.subset(hit_idx)
        samples = stratified_sample(sub.t_near, sub.t_far, S, rng)
        pts = sub.origins[:, None, :] + samples.t[..., None] * sub.directions[:, None, :]
        pts_t = Tensor._wrap(pts.reshape(-1, 3).astype(default_dtype()))
        rgb, sigma = field(pts_t)
        comp = composite(rgb.reshape(len(hit_idx), S, 3), sigma.reshape(len(hit_idx), S),
                         samples.t, samples.deltas, background)
        parts.append(comp.rgb)
        depth[hit_idx] = comp.depth
        opacity[hit_idx] = comp.opacity.data
    if len(miss_idx):
        parts.append(Tensor._wrap(np.full((len(miss_idx), 3), background, dtype=parts[0].dtype if parts else default_dtype())))
    order = np.concatenate([hit_idx, miss_idx])
    inv = np.empty(N, dtype=np.int64)
    inv[order] = np.arange(N)
    stacked = ops.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    return ops.permute_rows(stacked, inv), depth, opacity


def render_image(field: Field, E: np.ndarray, K: CameraIntrinsic, width: int, height: int, S: int,
                 rng: Optional[np.random.Generator] = None, box: Optional[SimilarityTransform] = None,
                 background: float = 1.0) -> RenderOutput:
    rays = generate_rays(E, K, width, height, box=box)
    rgb, depth, opacity = render_rays(field, rays, S, rng, background)
    return RenderOutput(rgb.reshape(height, width, 3), depth.reshape(height, width),
                        opacity.reshape(height, width))


def analytic_field(density: Callable[[np.ndarray], np.ndarray],
                   color: Callable[[np.ndarray], np.ndarray]) -> Field:
    """Wrap numpy density/color functions as a (constant) field for oracle renders."""

    def field(points: Tensor) -> tuple[Tensor, Tensor]:
        p = np.asarray(points.data, dtype=np.float64)
        dt = points.dtype
        return Tensor._wrap(np.asarray(color(p), dtype=dt)), Tensor._wrap(np.asarray(density(p), dtype=dt))

    return field


def transformed_field(field: Field, sim: SimilarityTransform) -> Field:
    """The field as seen in the frame ``p' = sim(p)``: same colors, density divided by the scale."""

    def moved(points: Tensor) -> tuple[Tensor, Tensor]:
        p = sim.inverse_points(np.asarray(points.data, dtype=np.float64))
        rgb, sigma = field(Tensor._wrap(p.astype(points.dtype)))
        return rgb, sigma * (1.0 / sim.scale)

    return moved
