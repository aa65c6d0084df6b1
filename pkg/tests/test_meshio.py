import numpy as np
import pytest

from bodyfit.meshio import (
    MeshIOError,
    load_mesh,
    load_points,
    save_mesh,
    save_points,
)
from bodyfit.pointcloud import PointCloud, TriMesh


@pytest.fixture
def mesh():
    rng = np.random.default_rng(0)
    verts = rng.normal(size=(20, 3))
    faces = np.array([[0, 1, 2], [2, 3, 4], [4, 5, 6], [7, 8, 9], [10, 11, 12]])
    return TriMesh(verts, faces)


def test_ply_binary_round_trip_bitwise(mesh, tmp_path):
    path = tmp_path / "m.ply"
    save_mesh(mesh, path, binary=True)
    back = load_mesh(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)


def test_ply_ascii_round_trip_bitwise(mesh, tmp_path):
    path = tmp_path / "m.ply"
    save_mesh(mesh, path, binary=False)
    back = load_mesh(path)
    # %.17g preserves doubles exactly
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)


def test_obj_round_trip(mesh, tmp_path):
    path = tmp_path / "m.obj"
    save_mesh(mesh, path)
    back = load_mesh(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)


def test_obj_parses_slashed_and_negative_indices(tmp_path):
    path = tmp_path / "m.obj"
    path.write_text(
        "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
        "f 1/1/1 2/2/2 3/3/3\n"
        "f -4 -2 -1\n"
    )
    back = load_mesh(path)
    assert np.array_equal(back.faces, [[0, 1, 2], [0, 2, 3]])


def test_obj_quad_fan_triangulation(tmp_path):
    path = tmp_path / "q.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    back = load_mesh(path)
    assert np.array_equal(back.faces, [[0, 1, 2], [0, 2, 3]])


def test_ply_quad_fan_triangulation(tmp_path):
    path = tmp_path / "q.ply"
    path.write_text(
        "ply\nformat ascii 1.0\n"
        "element vertex 4\n"
        "property double x\nproperty double y\nproperty double z\n"
        "element face 1\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
        "0 0 0\n1 0 0\n1 1 0\n0 1 0\n"
        "4 0 1 2 3\n"
    )
    back = load_mesh(path)
    assert np.array_equal(back.faces, [[0, 1, 2], [0, 2, 3]])


def test_ply_skips_unknown_elements_and_properties(tmp_path):
    path = tmp_path / "extra.ply"
    path.write_text(
        "ply\nformat ascii 1.0\n"
        "comment made elsewhere\n"
        "element vertex 3\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\n"
        "element edge 1\n"
        "property int vertex1\nproperty int vertex2\n"
        "element face 1\n"
        "property list uchar int vertex_index\n"
        "end_header\n"
        "0 0 0 255\n1 0 0 255\n0 1 0 255\n"
        "0 1\n"
        "3 0 1 2\n"
    )
    back = load_mesh(path)
    assert back.vertices.shape == (3, 3)
    assert np.array_equal(back.faces, [[0, 1, 2]])


def test_load_mesh_errors(tmp_path):
    bad = tmp_path / "m.ply"
    bad.write_text("not a ply\n")
    with pytest.raises(MeshIOError):
        load_mesh(bad)
    with pytest.raises(MeshIOError, match="unsupported mesh format"):
        load_mesh(tmp_path / "m.stl")
    with pytest.raises(MeshIOError, match="No such"):
        load_mesh(tmp_path / "missing.obj")


def test_ply_rejects_big_endian(tmp_path):
    path = tmp_path / "be.ply"
    path.write_text(
        "ply\nformat binary_big_endian 1.0\n"
        "element vertex 0\nproperty float x\nproperty float y\nproperty float z\n"
        "element face 0\nproperty list uchar int vertex_indices\n"
        "end_header\n"
    )
    with pytest.raises(MeshIOError, match="format"):
        load_mesh(path)


def test_points_xyz_round_trip(tmp_path):
    pts = np.random.default_rng(1).normal(size=(30, 3))
    path = tmp_path / "p.xyz"
    save_points(pts, path)
    back = load_points(path)
    assert isinstance(back, PointCloud)
    assert np.array_equal(back.points, pts)


def test_points_ply_round_trip(tmp_path):
    pts = np.random.default_rng(2).normal(size=(17, 3))
    path = tmp_path / "p.ply"
    save_points(PointCloud(pts), path)
    back = load_points(path)
    assert np.array_equal(back.points, pts)


def test_points_xyz_rejects_ragged(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("0 0 0\n1 2\n")
    with pytest.raises(MeshIOError):
        load_points(path)
