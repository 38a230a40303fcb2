"""Pinhole cameras, pose normalization, ray generation and pose sampling.

Conventions: world +z is up. Camera-to-world extrinsics use OpenCV camera
axes (x right, y down, z forward). The canonical input camera sits at
``[0, -2, 0]`` and looks along world +y toward the origin. Intrinsics are
normalized: focal lengths and principal point divided by image width/height.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

CANONICAL_DISTANCE = 2.0
# columns: camera right, down, forward expressed in world coordinates
CANONICAL_ROTATION = np.array([[1.0, 0.0, 0.0],
                               [0.0, 0.0, 1.0],
                               [0.0, -1.0, 0.0]])
WORLD_UP = np.array([0.0, 0.0, 1.0])
POSE_RADIUS = (1.5, 3.0)
POSE_HEIGHT = (-0.75, 1.60)


@dataclass(frozen=True)
class CameraIntrinsic:
    foc_x: float
    foc_y: float
    pp_x: float = 0.5
    pp_y: float = 0.5

    def __post_init__(self):
        for name in ("foc_x", "foc_y", "pp_x", "pp_y"):
            v = getattr(self, name)
            if not 0.0 < v < 10.0:
                raise ValueError(f"normalized intrinsic {name}={v} outside (0, 10)")

    @classmethod
    def from_pixels(cls, fx: float, fy: float, cx: float, cy: float, width: int, height: int):
        return cls(fx / width, fy / height, cx / width, cy / height)

    def as_array(self) -> np.ndarray:
        return np.array([self.foc_x, self.foc_y, self.pp_x, self.pp_y])


DEFAULT_INTRINSIC = CameraIntrinsic(0.9, 0.9, 0.5, 0.5)


def validate_extrinsic(E: np.ndarray, tol: float = 1e-5) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    if E.shape != (4, 4):
        raise ValueError(f"extrinsic must be 4x4, got {E.shape}")
    if not np.array_equal(E[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValueError("extrinsic bottom row must be [0, 0, 0, 1]")
    R = E[:3, :3]
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("extrinsic rotation is not orthonormal with det +1")
    return E


def make_extrinsic(rotation: np.ndarray, origin: np.ndarray) -> np.ndarray:
    E = np.eye(4)
    E[:3, :3] = rotation
    E[:3, 3] = origin
    return E


def look_at(origin, target=(0.0, 0.0, 0.0), up=WORLD_UP) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``origin`` looking at ``target``."""
    origin = np.asarray(origin, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - origin
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera origin coincides with the look-at target")
    forward /= norm
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-6:
        raise ValueError("look direction is parallel to the up axis")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return make_extrinsic(np.stack([right, down, forward], axis=1), origin)


@dataclass(frozen=True)
class SimilarityTransform:
    """World map ``p -> scale * rotation @ p`` (no translation needed here)."""

    rotation: np.ndarray
    scale: float = 1.0

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(np.eye(3), 1.0)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        return M

    def apply_points(self, p: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(p) @ self.rotation.T)

    def inverse_points(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p) @ self.rotation) / self.scale

    def apply_extrinsic(self, E: np.ndarray) -> np.ndarray:
        """Co-transform a camera so camera-space geometry is preserved up to scale."""
        return make_extrinsic(self.rotation @ E[:3, :3], self.scale * (self.rotation @ E[:3, 3]))

    def inverse(self) -> "SimilarityTransform":
        return SimilarityTransform(self.rotation.T, 1.0 / self.scale)

    def is_identity(self, tol: float = 1e-6) -> bool:
        return np.abs(self.rotation - np.eye(3)).max() <= tol and abs(self.scale - 1.0) <= tol


def normalize_camera(E: np.ndarray, mode: str = "synthetic") -> tuple[np.ndarray, SimilarityTransform]:
    """Move the input camera to the canonical pose by a world similarity.

    ``synthetic`` places the camera at ``[0, -2, 0]`` (rotation plus uniform
    scale); ``video`` keeps the distance ``dis`` and places it at
    ``[0, -dis, 0]``. The camera is assumed to look at the world origin; side
    cameras are moved with ``transform.apply_extrinsic``.
    """
    E = validate_extrinsic(E)
    if mode not in ("synthetic", "video"):
        raise ValueError(f"unknown normalization mode {mode!r}")
    R_cam, origin = E[:3, :3], E[:3, 3]
    dis = float(np.linalg.norm(origin))
    if dis < 1e-9:
        raise ValueError("camera sits at the world origin; cannot normalize")
    forward = R_cam[:, 2]
    if abs(forward @ WORLD_UP) > 1.0 - 1e-9:
        raise ValueError("look direction is parallel to the up axis")
    rotation = CANONICAL_ROTATION @ R_cam.T
    scale = CANONICAL_DISTANCE / dis if mode == "synthetic" else 1.0
    sim = SimilarityTransform(rotation, scale)
    E_norm = sim.apply_extrinsic(E)
    # snap round-off so the canonical pose is reproduced exactly
    E_norm[np.abs(E_norm) < 1e-12] = 0.0
    return E_norm, sim


def build_camera_feature(E: np.ndarray, K: CameraIntrinsic) -> np.ndarray:
    """20-vector: row-major extrinsic followed by foc_x, foc_y, pp_x, pp_y."""
    E = np.asarray(E, dtype=np.float64)
    return np.concatenate([E.reshape(16), K.as_array()])


def feature_to_camera(c: np.ndarray) -> tuple[np.ndarray, CameraIntrinsic]:
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (20,):
        raise ValueError(f"camera feature must have 20 entries, got {c.shape}")
    return c[:16].reshape(4, 4), CameraIntrinsic(*c[16:])


def canonical_camera(K: CameraIntrinsic = DEFAULT_INTRINSIC) -> tuple[np.ndarray, CameraIntrinsic]:
    return make_extrinsic(CANONICAL_ROTATION, [0.0, -CANONICAL_DISTANCE, 0.0]), K


@dataclass
class RayBatch:
    origins: np.ndarray      # [N, 3]
    directions: np.ndarray   # [N, 3], unit length
    t_near: np.ndarray       # [N]
    t_far: np.ndarray        # [N]
    hit: np.ndarray          # [N] bool, False where the ray misses the box
    width: int
    height: int

    def __len__(self) -> int:
        return len(self.origins)

    def subset(self, mask: np.ndarray) -> "RayBatch":
        return RayBatch(self.origins[mask], self.directions[mask], self.t_near[mask],
                        self.t_far[mask], self.hit[mask], self.width, self.height)


def ray_box_interval(origins: np.ndarray, directions: np.ndarray, half_extent: float = 1.0,
                     box: Optional[SimilarityTransform] = None):
    """Slab test against ``[-h, h]^3``, optionally the box mapped by ``box``.

    Returns ``(t_near, t_far, hit)``; ``t_near`` is clamped to 0 and missing
    rays get an empty interval ``t_near == t_far``.
    """
    o, d = origins, directions
    if box is not None:
        # the map is linear, so ray parameters t carry over unchanged
        o = box.inverse_points(o)
        d = box.inverse_points(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (-half_extent - o) * inv
        t1 = (half_extent - o) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t0), np.inf, np.maximum(t0, t1))
    # a zero direction component outside the slab never enters it
    parallel_out = (d == 0) & (np.abs(o) > half_extent)
    t_near = np.maximum(lo.max(axis=1), 0.0)
    t_far = hi.min(axis=1)
    hit = (t_far > t_near) & ~parallel_out.any(axis=1)
    t_far = np.where(hit, t_far, t_near)
    return t_near, t_far, hit


def generate_rays(E: np.ndarray, K: CameraIntrinsic, width: int, height: int,
                  box: Optional[SimilarityTransform] = None) -> RayBatch:
    """One ray per pixel center, row-major from the top-left pixel."""
    if width < 1 or height < 1:
        raise ValueError("image size must be positive")
    E = np.asarray(E, dtype=np.float64)
    jj, ii = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    x = ((ii + 0.5) / width - K.pp_x) / K.foc_x
    y = ((jj + 0.5) / height - K.pp_y) / K.foc_y
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    dirs = d_cam @ E[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(E[:3, 3], dirs.shape).copy()
    t_near, t_far, hit = ray_box_interval(origins, dirs, box=box)
    return RayBatch(origins, dirs, t_near, t_far, hit, width, height)


def sample_training_pose(rng: np.random.Generator) -> np.ndarray:
    """Look-at camera with radius in [1.5, 3.0] and height z in [-0.75, 1.60].

    Heights within 10% of the radius are rejected to keep the look direction
    away from the up axis.
    """
    while True:
        r = rng.uniform(*POSE_RADIUS)
        z = rng.uniform(*POSE_HEIGHT)
        if abs(z) <= 0.9 * r:
            break
    phi = rng.uniform(0.0, 2.0 * np.pi)
    rho = np.sqrt(r * r - z * z)
    origin = np.array([rho * np.cos(phi), rho * np.sin(phi), z])
    return look_at(origin)
