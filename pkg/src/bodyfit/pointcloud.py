"""Dataset-facing geometry: surface sampling, normalization, single-view
partial simulation, and training augmentation.

All operations are pure functions of (inputs, seed), so they can run in
parallel and reproduce bit-identically.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

log = logging.getLogger(__name__)

METRIC = "metric"
NORMALIZED = "normalized"
FULL = "full"
PARTIAL = "partial"

# a cloud is normalized when every |coordinate| fits this box
NORMALIZED_EXTENT = 0.9


class GeometryError(ValueError):
    """Raised for degenerate meshes, clouds, or view setups."""


@dataclass
class TriMesh:
    """Triangle mesh carrying only positions and face indices."""

    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray     # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)

    def validate(self) -> None:
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise GeometryError(f"vertices have shape {self.vertices.shape}, expected (V, 3)")
        if not np.isfinite(self.vertices).all():
            raise GeometryError("vertices contain non-finite values")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise GeometryError(f"faces have shape {self.faces.shape}, expected (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise GeometryError("face indices out of range")

    def cleaned(self) -> "TriMesh":
        """Copy with zero-area faces dropped."""
        self.validate()
        keep = face_areas(self) > 0.0
        return TriMesh(self.vertices.copy(), self.faces[keep].copy())


@dataclass
class PointCloud:
    """Point set tagged with its scale state and completeness."""

    points: np.ndarray            # (N, 3) float64
    scale_state: str = METRIC     # "metric" | "normalized"
    completeness: str = FULL      # "full" | "partial"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)

    def validate(self) -> None:
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise GeometryError(f"points have shape {self.points.shape}, expected (N>=1, 3)")
        if not np.isfinite(self.points).all():
            raise GeometryError("points contain non-finite values")
        if self.scale_state not in (METRIC, NORMALIZED):
            raise GeometryError(f"unknown scale_state {self.scale_state!r}")
        if self.completeness not in (FULL, PARTIAL):
            raise GeometryError(f"unknown completeness {self.completeness!r}")
        if self.scale_state == NORMALIZED:
            extent = np.abs(self.points).max()
            if extent > NORMALIZED_EXTENT + 1e-6:
                raise GeometryError(f"normalized cloud has extent {extent}, exceeds {NORMALIZED_EXTENT}")


def face_areas(mesh: TriMesh) -> np.ndarray:
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface(mesh: TriMesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform samples on the mesh surface, deterministic per seed."""
    mesh.validate()
    if n < 1:
        raise GeometryError(f"sample count must be >= 1, got {n}")
    areas = face_areas(mesh)
    total = areas.sum()
    if mesh.faces.size == 0 or total <= 0.0:
        raise GeometryError("mesh has no positive-area faces to sample")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.vertices[mesh.faces[chosen]]  # (n, 3, 3)
    points = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    return PointCloud(points, METRIC, FULL)


def farthest_point_indices(points: np.ndarray, count: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling.

    The start point is index 0 after a seed-determined shuffle and distance
    ties resolve to the lowest (shuffled) index, so the result is fully
    deterministic for fixed (points, count, seed).
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if count < 1 or count > n:
        raise GeometryError(f"cannot pick {count} farthest points from {n}")
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = points[perm]
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = 0
    dist = ((shuffled - shuffled[0]) ** 2).sum(axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, ((shuffled - shuffled[nxt]) ** 2).sum(axis=1))
    return perm[chosen]


def normalize_unit(cloud: PointCloud) -> tuple[PointCloud, np.ndarray, float]:
    """Center at the bbox center and scale so max |coordinate| = 0.9.

    Returns (normalized cloud, center, inv_scale); ``points * inv_scale + center``
    recovers the input.
    """
    cloud.validate()
    if cloud.scale_state != METRIC:
        raise GeometryError("normalize_unit expects a metric cloud")
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    center = 0.5 * (lo + hi)
    extent = np.abs(cloud.points - center).max()
    if extent < 1e-12:
        raise GeometryError("cannot normalize a zero-extent cloud")
    inv_scale = extent / NORMALIZED_EXTENT
    out = PointCloud((cloud.points - center) / inv_scale, NORMALIZED, cloud.completeness)
    return out, center, float(inv_scale)


def _view_basis(view_dir: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d = np.asarray(view_dir, dtype=np.float64)
    norm = np.linalg.norm(d)
    if norm < 1e-12:
        raise GeometryError("view_dir must be non-zero")
    d = d / norm
    up = np.array([0.0, 1.0, 0.0]) if abs(d[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(up, d)
    u /= np.linalg.norm(u)
    w = np.cross(d, u)
    return u, w, d


def visible_faces(mesh: TriMesh, view_dir, resolution: int = 512) -> np.ndarray:
    """Face indices surviving an orthographic z-buffer pass along view_dir.

    A face is visible when it wins the depth test for at least one pixel
    center; faces with (near-)zero projected area never own pixels.
    """
    mesh.validate()
    if resolution < 2:
        raise GeometryError(f"resolution must be >= 2, got {resolution}")
    u, w, d = _view_basis(view_dir)
    px = mesh.vertices @ u
    py = mesh.vertices @ w
    depth = mesh.vertices @ d

    lo_x, hi_x = px.min(), px.max()
    lo_y, hi_y = py.min(), py.max()
    span = max(hi_x - lo_x, hi_y - lo_y)
    if span < 1e-12:
        raise GeometryError("mesh projects to a point for this view")
    pix = span / resolution
    # pixel centers at (lo + (i + 0.5) * pix)
    zbuf = np.full((resolution, resolution), np.inf)
    owner = np.full((resolution, resolution), -1, dtype=np.int64)
    area_eps = 1e-12 * span * span

    for f, (i0, i1, i2) in enumerate(mesh.faces):
        ax, ay, az = px[i0], py[i0], depth[i0]
        bx, by, bz = px[i1], py[i1], depth[i1]
        cx, cy, cz = px[i2], py[i2], depth[i2]
        det = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
        if abs(det) < area_eps:
            continue
        gx0 = max(int(np.floor((min(ax, bx, cx) - lo_x) / pix - 0.5)), 0)
        gx1 = min(int(np.ceil((max(ax, bx, cx) - lo_x) / pix - 0.5)), resolution - 1)
        gy0 = max(int(np.floor((min(ay, by, cy) - lo_y) / pix - 0.5)), 0)
        gy1 = min(int(np.ceil((max(ay, by, cy) - lo_y) / pix - 0.5)), resolution - 1)
        if gx1 < gx0 or gy1 < gy0:
            continue
        cxs = lo_x + (np.arange(gx0, gx1 + 1) + 0.5) * pix
        cys = lo_y + (np.arange(gy0, gy1 + 1) + 0.5) * pix
        gx, gy = np.meshgrid(cxs, cys, indexing="ij")
        l1 = ((bx - ax) * (gy - ay) - (gx - ax) * (by - ay)) / det
        l0 = ((gx - ax) * (cy - ay) - (cx - ax) * (gy - ay)) / det
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l0 + l1 <= 1.0 + 1e-9)
        if not inside.any():
            continue
        z = az + l0 * (bz - az) + l1 * (cz - az)
        sub_z = zbuf[gx0 : gx1 + 1, gy0 : gy1 + 1]
        sub_o = owner[gx0 : gx1 + 1, gy0 : gy1 + 1]
        win = inside & (z < sub_z)
        sub_z[win] = z[win]
        sub_o[win] = f
    kept = np.unique(owner[owner >= 0])
    return kept


def simulate_partial(
    mesh: TriMesh,
    view_dir,
    resolution: int = 512,
    n: int = 2048,
    seed: int = 0,
) -> PointCloud:
    """Single-view partial cloud: z-buffer the mesh from an orthographic
    camera along view_dir, keep the visible faces, sample the kept sub-mesh."""
    kept = visible_faces(mesh, view_dir, resolution)
    if kept.size == 0:
        raise GeometryError("no visible faces from this view")
    sub = TriMesh(mesh.vertices, mesh.faces[kept])
    cloud = sample_surface(sub, n, seed)
    return replace(cloud, completeness=PARTIAL)


def _rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _augment_draw(
    rng: np.random.Generator,
    count_range: tuple[int, int],
    rotation: str,
    tilt_deg: float,
) -> tuple[int, np.ndarray]:
    """Sample (output count, rotation matrix) for one augmentation."""
    n_out = int(rng.integers(count_range[0], count_range[1] + 1))
    if rotation == "yaw_tilt":
        yaw = rng.uniform(0.0, 2.0 * np.pi)
        rot = _rotation_about(np.array([0.0, 1.0, 0.0]), yaw)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        tilt = rng.uniform(0.0, np.deg2rad(tilt_deg))
        rot = _rotation_about(np.array([np.cos(phi), 0.0, np.sin(phi)]), tilt) @ rot
    elif rotation == "so3":
        # Shoemake's uniform random rotation from three uniforms
        u1, u2, u3 = rng.random(3)
        q = np.array(
            [
                np.sqrt(1 - u1) * np.sin(2 * np.pi * u2),
                np.sqrt(1 - u1) * np.cos(2 * np.pi * u2),
                np.sqrt(u1) * np.sin(2 * np.pi * u3),
                np.sqrt(u1) * np.cos(2 * np.pi * u3),
            ]
        )
        x, y, z, s = q
        rot = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - s * z), 2 * (x * z + s * y)],
                [2 * (x * y + s * z), 1 - 2 * (x * x + z * z), 2 * (y * z - s * x)],
                [2 * (x * z - s * y), 2 * (y * z + s * x), 1 - 2 * (x * x + y * y)],
            ]
        )
    else:
        raise GeometryError(f"unknown rotation mode {rotation!r}")
    return n_out, rot


def _resample(points: np.ndarray, n_out: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    if n >= n_out:
        idx = rng.choice(n, size=n_out, replace=False)
    else:
        idx = rng.choice(n, size=n_out, replace=True)
    return points[idx]


def augment(
    cloud: PointCloud,
    seed: int = 0,
    rotation: str = "yaw_tilt",
    count_range: tuple[int, int] = (5000, 20000),
    tilt_deg: float = 10.0,
) -> PointCloud:
    """Training augmentation: resample the point count uniformly within
    count_range and rotate (full yaw about +y plus a small tilt by default,
    or a uniform SO(3) rotation). Deterministic per seed."""
    cloud.validate()
    rng = np.random.default_rng(seed)
    n_out, rot = _augment_draw(rng, count_range, rotation, tilt_deg)
    points = _resample(cloud.points, n_out, rng) @ rot.T
    return replace(cloud, points=points)


def make_training_batch(
    records,
    assets,
    spec,
    partial_fraction: float = 0.5,
    seed: int = 0,
    rotation: str = "yaw_tilt",
    count_range: tuple[int, int] = (5000, 20000),
    resolution: int = 256,
):
    """Stream (PointCloud, target landmarks, image | None) training samples.

    Each record must carry ``mesh`` (TriMesh) and ``params`` (BodyParams);
    ``image`` is optional. A Bernoulli draw per sample decides full vs
    partial; cloud and targets receive the same augmentation rotation so
    they stay aligned. Records without params are skipped with a warning.
    """
    from .bodymodel import lbs_forward
    from .landmarks import extract_landmarks

    if not 0.0 <= partial_fraction <= 1.0:
        raise GeometryError(f"partial_fraction must be in [0, 1], got {partial_fraction}")
    for i, record in enumerate(records):
        params = getattr(record, "params", None)
        if params is None:
            log.warning("record %d (%s) has no ground-truth params; skipped",
                        i, getattr(record, "name", "?"))
            continue
        mesh = record.mesh
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        take_partial = rng.random() < partial_fraction
        sample_seed = int(rng.integers(0, 2**31))
        if take_partial:
            yaw = rng.uniform(0.0, 2.0 * np.pi)
            view = np.array([np.cos(yaw), 0.0, np.sin(yaw)])
            cloud = simulate_partial(mesh, view, resolution=resolution,
                                     n=count_range[1], seed=sample_seed)
        else:
            cloud = sample_surface(mesh, count_range[1], seed=sample_seed)
        verts, _ = lbs_forward(assets, params)
        targets = extract_landmarks(verts, spec)
        n_out, rot = _augment_draw(rng, count_range, rotation, tilt_deg=10.0)
        points = _resample(cloud.points, n_out, rng) @ rot.T
        cloud = replace(cloud, points=points)
        yield cloud, targets @ rot.T, getattr(record, "image", None)
