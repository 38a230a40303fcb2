"""Density-grid sampling, marching cubes and OBJ I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE
from .tensor import Tensor, default_dtype, no_grad

_TRI = np.full((256, 16), -1, dtype=np.int64)
for _case, _tris in enumerate(TRI_TABLE):
    _TRI[_case, :len(_tris)] = _tris
_CORNERS = np.asarray(CORNER_OFFSETS, dtype=np.int64)
_EDGES = np.asarray(EDGE_CORNERS, dtype=np.int64)
# per cube edge: lattice axis and the offset of its lower endpoint
_EDGE_AXIS = np.argmax(np.abs(_CORNERS[_EDGES[:, 1]] - _CORNERS[_EDGES[:, 0]]), axis=1)
_EDGE_BASE = np.minimum(_CORNERS[_EDGES[:, 0]], _CORNERS[_EDGES[:, 1]])


@dataclass
class DensityGrid:
    """Densities on the lattice ``-1 + 2 i / (n - 1)``; ``values[ix, iy, iz]``."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or not (v.shape[0] == v.shape[1] == v.shape[2]) or v.shape[0] < 2:
            raise ValueError(f"density grid must be [n, n, n] with n >= 2, got {v.shape}")

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def voxel_size(self) -> float:
        return 2.0 / (self.resolution - 1)

    def axis(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.resolution)

    def index_to_point(self, idx) -> np.ndarray:
        return -1.0 + np.asarray(idx, dtype=np.float64) * self.voxel_size


@dataclass
class TriangleMesh:
    vertices: np.ndarray                      # [V, 3]
    triangles: np.ndarray                     # [F, 3] int
    vertex_colors: Optional[np.ndarray] = None

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def edge_counts(self) -> dict:
        """Undirected edge -> number of incident triangles."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        keys, counts = np.unique(e, axis=0, return_counts=True)
        return {tuple(k): int(c) for k, c in zip(keys, counts)}

    def signed_volume(self) -> float:
        v = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def default_iso(resolution: int) -> float:
    """Density whose opacity over one voxel is 0.5."""
    return math.log(2.0) / (2.0 / (resolution - 1))


def lattice_points(resolution: int) -> np.ndarray:
    ax = np.linspace(-1.0, 1.0, resolution)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)


def sample_density_grid(field: Callable, resolution: int = 64, chunk: int = 65536) -> DensityGrid:
    """Query a field ``points -> (rgb, sigma)`` on the lattice, ``chunk`` points at a time."""
    if resolution < 2:
        raise ValueError("grid resolution must be >= 2")
    pts = lattice_points(resolution)
    out = np.empty(len(pts))
    with no_grad():
        for s in range(0, len(pts), chunk):
            _, sigma = field(Tensor._wrap(pts[s:s + chunk].astype(default_dtype())))
            out[s:s + chunk] = sigma.data
    return DensityGrid(out.reshape(resolution, resolution, resolution))


def marching_cubes(grid: DensityGrid, iso: Optional[float] = None) -> TriangleMesh:
    """Iso-surface of the density grid; normals point away from the dense interior.

    Vertices are shared between neighbouring cubes (one per crossed lattice
    edge), so closed surfaces come out watertight. Triangles are ordered by
    cube index, then table order.
    """
    iso = default_iso(grid.resolution) if iso is None else float(iso)
    if iso <= 0:
        raise ValueError("iso level must be > 0")
    v = np.asarray(grid.values, dtype=np.float64)
    n = grid.resolution
    m = n - 1
    below = v < iso
    # table convention: bit c set when corner c is below the level
    case = np.zeros((m, m, m), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        case |= below[dx:dx + m, dy:dy + m, dz:dz + m].astype(np.int64) << c
    cube_flat = np.flatnonzero((case != 0) & (case != 255))
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    if len(cube_flat) == 0:
        return empty
    ci = np.stack(np.unravel_index(cube_flat, (m, m, m)), axis=1)            # [K, 3]
    edges = _TRI[case.reshape(-1)[cube_flat]]                               # [K, 16]
    valid = edges >= 0
    cube_of, slot = np.nonzero(valid)
    local = edges[cube_of, slot]
    lower = ci[cube_of] + _EDGE_BASE[local]
    axis = _EDGE_AXIS[local]
    gid = axis * n ** 3 + np.ravel_multi_index(lower.T, (n, n, n))
    uniq, inverse = np.unique(gid, return_inverse=True)
    u_axis = uniq // n ** 3
    a = np.stack(np.unravel_index(uniq % n ** 3, (n, n, n)), axis=1)
    b = a + np.eye(3, dtype=np.int64)[u_axis]
    va = v[a[:, 0], a[:, 1], a[:, 2]]
    vb = v[b[:, 0], b[:, 1], b[:, 2]]
    t = np.clip((iso - va) / (vb - va), 0.0, 1.0)
    verts = grid.index_to_point(a + t[:, None] * (b - a))
    # with bits marking below-level corners the table winds counter-clockwise
    # seen from the below-level side, i.e. normals leave the dense interior
    return _clean(verts, inverse.reshape(-1, 3))


def _clean(verts: np.ndarray, tris: np.ndarray) -> TriangleMesh:
    """Weld coincident vertices and drop degenerate triangles."""
    verts_u, remap = np.unique(verts, axis=0, return_inverse=True)
    remap = remap.reshape(-1)
    tris = remap[tris]
    distinct = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    tris = tris[distinct]
    p = verts_u[tris]
    area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    tris = tris[area > 1e-12]
    used, compact = np.unique(tris.reshape(-1), return_inverse=True)
    return TriangleMesh(verts_u[used], compact.reshape(-1, 3).astype(np.int64))


def color_vertices(mesh: TriangleMesh, field: Callable, chunk: int = 65536) -> TriangleMesh:
    cols = np.empty((mesh.num_vertices, 3))
    with no_grad():
        for s in range(0, mesh.num_vertices, chunk):
            rgb, _ = field(Tensor._wrap(mesh.vertices[s:s + chunk].astype(default_dtype())))
            cols[s:s + chunk] = rgb.data
    return TriangleMesh(mesh.vertices, mesh.triangles, np.clip(cols, 0.0, 1.0))


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = ["# triplane reconstruction mesh"]
    cols = mesh.vertex_colors
    for i, p in enumerate(mesh.vertices):
        if cols is None:
            lines.append(f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f}")
        else:
            c = cols[i]
            lines.append(f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]:.4f} {c[1]:.4f} {c[2]:.4f}")
    for f in mesh.triangles:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write mesh {path}: {exc}") from exc


def read_obj(path) -> TriangleMesh:
    verts, cols, faces = [], [], []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read mesh {path}: {exc}") from exc
    for line in text.splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
            if len(parts) >= 7:
                cols.append([float(x) for x in parts[4:7]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    colors = np.asarray(cols) if cols and len(cols) == len(verts) else None
    return TriangleMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                        np.asarray(faces, dtype=np.int64).reshape(-1, 3), colors)
