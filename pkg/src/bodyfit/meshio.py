"""Mesh and point-cloud file I/O: PLY (ascii and binary little-endian),
OBJ, and whitespace XYZ text.

Only positions and face indices are read; normals, colors and texture
attributes are parsed past and dropped. Writers emit float64 with full
precision so a save/load round trip is exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .pointcloud import PointCloud, TriMesh

_PLY_TYPES = {
    "char": "<i1", "int8": "<i1",
    "uchar": "<u1", "uint8": "<u1",
    "short": "<i2", "int16": "<i2",
    "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
}


class MeshIOError(ValueError):
    pass


def _fan_triangulate(indices: list[int]) -> list[tuple[int, int, int]]:
    if len(indices) < 3:
        raise MeshIOError(f"face with {len(indices)} vertices")
    return [(indices[0], indices[i], indices[i + 1]) for i in range(1, len(indices) - 1)]


# ----------------------------------------------------------------- PLY


def _parse_ply_header(data: bytes, path) -> tuple[str, list, int]:
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshIOError(f"{path}: not a PLY file")
    body_start = data.find(b"\n", end) + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []  # (name, count, [(kind, dtype, count_dtype|None, prop_name)])
    for line in lines[1:]:
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise MeshIOError(f"{path}: property before element")
            if tokens[1] == "list":
                count_t, item_t, name = tokens[2], tokens[3], tokens[4]
                elements[-1][2].append(("list", _PLY_TYPES[item_t], _PLY_TYPES[count_t], name))
            else:
                elements[-1][2].append(("scalar", _PLY_TYPES[tokens[1]], None, tokens[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshIOError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements, body_start


def _read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    fmt, elements, offset = _parse_ply_header(data, path)
    vertices = None
    faces: list[tuple[int, int, int]] = []

    if fmt == "ascii":
        tokens = data[offset:].decode("ascii").split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for kind, dt, count_dt, pname in props:
                    if kind == "scalar":
                        row[pname] = float(tokens[pos]); pos += 1
                    else:
                        k = int(tokens[pos]); pos += 1
                        row[pname] = [int(float(tokens[pos + i])) for i in range(k)]
                        pos += k
                rows.append(row)
            vertices, faces = _collect_ply_element(name, rows, vertices, faces, path)
    else:
        pos = offset
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for kind, dt, count_dt, pname in props:
                    if kind == "scalar":
                        item = np.dtype(dt)
                        row[pname] = float(np.frombuffer(data, item, 1, pos)[0])
                        pos += item.itemsize
                    else:
                        cdt = np.dtype(count_dt)
                        k = int(np.frombuffer(data, cdt, 1, pos)[0])
                        pos += cdt.itemsize
                        item = np.dtype(dt)
                        row[pname] = np.frombuffer(data, item, k, pos).astype(np.int64).tolist()
                        pos += item.itemsize * k
                rows.append(row)
            vertices, faces = _collect_ply_element(name, rows, vertices, faces, path)

    if vertices is None:
        raise MeshIOError(f"{path}: PLY has no vertex element")
    face_arr = np.array(faces, dtype=np.int64).reshape(-1, 3)
    return vertices, face_arr


def _collect_ply_element(name, rows, vertices, faces, path):
    if name == "vertex":
        try:
            vertices = np.array([[r["x"], r["y"], r["z"]] for r in rows], dtype=np.float64)
        except KeyError:
            raise MeshIOError(f"{path}: vertex element lacks x/y/z")
    elif name == "face":
        for r in rows:
            idx = r.get("vertex_indices", r.get("vertex_index"))
            if idx is None:
                raise MeshIOError(f"{path}: face element lacks vertex indices")
            faces.extend(_fan_triangulate([int(i) for i in idx]))
    return vertices, faces


def _write_ply(path, vertices: np.ndarray, faces: np.ndarray | None, binary: bool) -> None:
    nv = len(vertices)
    nf = 0 if faces is None else len(faces)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {nv}",
              "property double x", "property double y", "property double z"]
    if faces is not None:
        header += [f"element face {nf}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(np.asarray(vertices, dtype="<f8").tobytes())
            if faces is not None:
                for tri in np.asarray(faces, dtype=np.int64):
                    f.write(struct.pack("<B3i", 3, *tri))
        else:
            for v in vertices:
                f.write((" ".join(f"{c:.17g}" for c in v) + "\n").encode("ascii"))
            if faces is not None:
                for tri in np.asarray(faces, dtype=np.int64):
                    f.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n".encode("ascii"))


# ----------------------------------------------------------------- OBJ


def _read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        if tokens[0] == "v":
            if len(tokens) < 4:
                raise MeshIOError(f"{path}:{ln}: malformed vertex line")
            verts.append([float(tokens[1]), float(tokens[2]), float(tokens[3])])
        elif tokens[0] == "f":
            idx = []
            for tok in tokens[1:]:
                raw = int(tok.split("/")[0])
                # negative indices are relative to the vertices seen so far
                idx.append(raw - 1 if raw > 0 else len(verts) + raw)
            faces.extend(_fan_triangulate(idx))
    if not verts:
        raise MeshIOError(f"{path}: OBJ has no vertices")
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _write_obj(path, vertices: np.ndarray, faces: np.ndarray | None) -> None:
    with open(path, "w") as f:
        for v in vertices:
            f.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        if faces is not None:
            for tri in np.asarray(faces, dtype=np.int64):
                f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


# ----------------------------------------------------------------- API


def load_mesh(path) -> TriMesh:
    """Read a PLY or OBJ mesh (positions and faces only)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in (".ply", ".obj"):
        raise MeshIOError(f"{path}: unsupported mesh format {suffix!r}")
    if not path.is_file():
        raise MeshIOError(f"{path}: No such file")
    if suffix == ".ply":
        vertices, faces = _read_ply(path)
    else:
        vertices, faces = _read_obj(path)
    mesh = TriMesh(vertices, faces)
    mesh.validate()
    return mesh


def save_mesh(mesh: TriMesh, path, binary: bool = True) -> None:
    """Write a mesh as PLY (ascii/binary) or OBJ, chosen by extension."""
    mesh.validate()
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        _write_ply(path, mesh.vertices, mesh.faces, binary)
    elif suffix == ".obj":
        _write_obj(path, mesh.vertices, mesh.faces)
    else:
        raise MeshIOError(f"{path}: unsupported mesh format {suffix!r}")


def load_points(path) -> PointCloud:
    """Read point positions from XYZ text or a PLY vertex element.

    Loaded clouds are tagged metric/full; callers that know better can
    rebuild the cloud with different tags.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in (".xyz", ".ply"):
        raise MeshIOError(f"{path}: unsupported point format {suffix!r}")
    if not path.is_file():
        raise MeshIOError(f"{path}: No such file")
    if suffix == ".xyz":
        try:
            pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
        except ValueError as e:
            raise MeshIOError(f"{path}: {e}") from e
        if pts.shape[1] != 3:
            raise MeshIOError(f"{path}: expected 3 columns, found {pts.shape[1]}")
    else:
        pts, _ = _read_ply(path)
    cloud = PointCloud(pts)
    cloud.validate()
    return cloud


def save_points(points, path, binary: bool = True) -> None:
    """Write point positions as XYZ text or a faceless PLY."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise MeshIOError(f"points have shape {pts.shape}, expected (N, 3)")
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".xyz":
        with open(path, "w") as f:
            for p in pts:
                f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
    elif suffix == ".ply":
        _write_ply(path, pts, None, binary)
    else:
        raise MeshIOError(f"{path}: unsupported point format {suffix!r}")
