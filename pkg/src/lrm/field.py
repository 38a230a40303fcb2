"""Triplane representation and the NeRF MLP decoding point features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Linear, Module
from .tensor import Tensor, as_tensor

# plane order and the point axes (u, v) each plane is indexed by
PLANE_AXES = ((0, 1), (1, 2), (0, 2))  # XY, YZ, XZ
PLANE_NAMES = ("XY", "YZ", "XZ")


@dataclass
class Triplane:
    """Three axis-aligned feature planes stacked as one [3, R, R, d_T] tensor."""

    planes: Tensor

    def __post_init__(self):
        shape = self.planes.shape
        if len(shape) != 4 or shape[0] != 3 or shape[1] != shape[2]:
            raise ValueError(f"triplane tensor must be [3, R, R, d], got {shape}")

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[3]

    def plane(self, i: int) -> Tensor:
        return self.planes[i]


def query_points(T: Triplane, points) -> Tensor:
    """Concatenated (XY, YZ, XZ) bilinear features for points in [-1, 1]^3.

    Projection drops the third coordinate of each plane; out-of-box points
    clamp to the plane border.
    """
    points = as_tensor(points)
    feats = []
    for i, (a, b) in enumerate(PLANE_AXES):
        uv = points[:, [a, b]] if points.requires_grad else Tensor._wrap(points.data[:, [a, b]])
        feats.append(ops.bilinear_grid_sample(T.plane(i), uv))
    return ops.concat(feats, axis=1)


class NerfMLP(Module):
    """ReLU MLP mapping point features to (rgb, sigma)."""

    def __init__(self, d_in: int, hidden: int, layers: int, rng: np.random.Generator):
        if layers < 2:
            raise ValueError("NeRF MLP needs at least 2 linear layers")
        dims = [d_in] + [hidden] * (layers - 1) + [4]
        self.layers = [Linear(dims[i], dims[i + 1], rng, std=None) for i in range(layers)]

    def raw(self, features: Tensor) -> Tensor:
        h = features
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ops.relu(h)
        return h

    def forward(self, features: Tensor) -> tuple[Tensor, Tensor]:
        out = self.raw(features)
        rgb = ops.sigmoid(out[:, 0:3])
        sigma = ops.softplus(out[:, 3])
        return rgb, sigma


class TriplaneField:
    """Callable field ``points -> (rgb, sigma)`` backed by a triplane."""

    def __init__(self, triplane: Triplane, mlp: NerfMLP):
        self.triplane = triplane
        self.mlp = mlp

    def __call__(self, points) -> tuple[Tensor, Tensor]:
        return self.mlp(query_points(self.triplane, points))

    def density(self, points) -> Tensor:
        return self(points)[1]
