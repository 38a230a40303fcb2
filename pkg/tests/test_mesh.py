import numpy as np
import pytest
from skimage import measure

from lrm.field import NerfMLP, Triplane, TriplaneField
from lrm.mesh import (DensityGrid, TriangleMesh, color_vertices, default_iso, lattice_points, marching_cubes,
                      read_obj, sample_density_grid, write_obj)
from lrm.nn import Parameter
from lrm.renderer import analytic_field
from lrm.tensor import Tensor


def sphere_field(r=0.5, sigma=50.0):
    return analytic_field(lambda p: np.where(np.linalg.norm(p, axis=1) < r, sigma, 0.0),
                          lambda p: np.clip(0.5 + 0.5 * p, 0, 1))


@pytest.fixture(scope="module")
def sphere_mesh():
    grid = sample_density_grid(sphere_field(), 64)
    return grid, marching_cubes(grid)


def area(mesh_v, mesh_f):
    p = mesh_v[mesh_f]
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1).sum()


def test_lattice_corners_exact():
    pts = lattice_points(5)
    assert pts.shape == (125, 3)
    assert np.array_equal(pts[0], [-1, -1, -1]) and np.array_equal(pts[-1], [1, 1, 1])
    assert DensityGrid(np.zeros((5, 5, 5))).index_to_point(4) == 1.0


def test_grid_validation():
    with pytest.raises(ValueError):
        DensityGrid(np.zeros((4, 4, 5)))
    with pytest.raises(ValueError):
        sample_density_grid(sphere_field(), 1)


def test_zero_density_grid_and_empty_mesh():
    grid = sample_density_grid(analytic_field(lambda p: np.zeros(len(p)), lambda p: np.ones((len(p), 3))), 8)
    assert np.all(grid.values == 0)
    assert marching_cubes(grid).num_triangles == 0
    with pytest.raises(ValueError):
        marching_cubes(grid, iso=0.0)


def test_grid_matches_pointwise_queries(rng):
    T = Triplane(Parameter(rng.normal(size=(3, 8, 8, 4))))
    fld = TriplaneField(T, NerfMLP(12, 16, 3, rng))
    grid = sample_density_grid(fld, 9, chunk=100)
    for _ in range(10):
        idx = rng.integers(0, 9, size=3)
        p = grid.index_to_point(idx)[None, :]
        _, sigma = fld(Tensor(p))
        assert abs(grid.values[tuple(idx)] - float(sigma.data[0])) < 1e-6


def test_default_iso_is_half_voxel_opacity():
    iso = default_iso(64)
    assert 1 - np.exp(-iso * 2 / 63) == pytest.approx(0.5)


def test_sphere_vertices_near_radius(sphere_mesh):
    grid, mesh = sphere_mesh
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert mesh.num_triangles > 1000
    assert np.abs(r - 0.5).max() <= 2 * grid.voxel_size


def test_sphere_is_watertight_and_outward(sphere_mesh):
    _, mesh = sphere_mesh
    assert set(mesh.edge_counts().values()) == {2}
    # outward winding: positive enclosed volume close to the ball's
    assert mesh.signed_volume() == pytest.approx(4 / 3 * np.pi * 0.5 ** 3, rel=0.05)


def test_sphere_area_matches_reference_implementation(sphere_mesh):
    grid, mesh = sphere_mesh
    verts, faces, _, _ = measure.marching_cubes(grid.values, level=default_iso(64), spacing=(grid.voxel_size,) * 3)
    assert area(mesh.vertices, mesh.triangles) == pytest.approx(area(verts, faces), rel=0.01)


def test_no_degenerate_triangles(rng):
    grid = DensityGrid(rng.uniform(0, 2, size=(10, 10, 10)))
    mesh = marching_cubes(grid, iso=1.0)
    p = mesh.vertices[mesh.triangles]
    assert np.all(0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1) > 1e-12)
    assert mesh.triangles.min() >= 0 and mesh.triangles.max() < mesh.num_vertices


def test_deterministic(sphere_mesh):
    grid, mesh = sphere_mesh
    again = marching_cubes(grid)
    assert np.array_equal(mesh.vertices, again.vertices) and np.array_equal(mesh.triangles, again.triangles)


def test_vertex_colors_in_range(sphere_mesh):
    _, mesh = sphere_mesh
    colored = color_vertices(mesh, sphere_field())
    assert colored.vertex_colors.shape == (mesh.num_vertices, 3)
    assert colored.vertex_colors.min() >= 0 and colored.vertex_colors.max() <= 1


def test_obj_format(tmp_path):
    write_obj(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)), tmp_path / "empty.obj")
    assert all(line.startswith("#") for line in (tmp_path / "empty.obj").read_text().splitlines())
    tri = TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))
    write_obj(tri, tmp_path / "tri.obj")
    lines = (tmp_path / "tri.obj").read_text().splitlines()
    assert sum(line.startswith("v ") for line in lines) == 3
    assert [line for line in lines if line.startswith("f")] == ["f 1 2 3"]


def test_obj_round_trip(sphere_mesh, tmp_path):
    _, mesh = sphere_mesh
    colored = color_vertices(mesh, sphere_field())
    write_obj(colored, tmp_path / "s.obj")
    back = read_obj(tmp_path / "s.obj")
    assert back.num_vertices == mesh.num_vertices and back.num_triangles == mesh.num_triangles
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.abs(back.vertices - mesh.vertices).max() < 1e-6
    with pytest.raises(OSError):
        write_obj(mesh, tmp_path / "missing" / "x.obj")
