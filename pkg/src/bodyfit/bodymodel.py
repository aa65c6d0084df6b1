"""Parametric body model: blendshapes, kinematic chain, skinning, gradients.

The model maps shape/pose/expression coefficients and a translation to a
posed mesh. Rest-pose displacements (shape, expression, pose-corrective
blendshapes) are added to a template, joints are regressed from the
shaped rest mesh, and linear blend skinning poses the vertices along the
kinematic tree. All fitting-path math runs in float64; gradients come
from reverse-mode autodiff and are verified against finite differences
in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import torch

from .tensorfile import read_tensorfile, write_tensorfile

if TYPE_CHECKING:
    from .landmarks import LandmarkSpec

JOINT_REGIONS = ("body", "head", "hand")

# on-disk field order of the model container (all float64)
_FLOAT_FIELDS = ("template", "shape_dirs", "pose_dirs", "expr_dirs", "joint_regressor", "skin_weights")


class ModelError(ValueError):
    """Raised for malformed assets or parameter/asset dimension mismatch."""


@dataclass
class BodyModelAssets:
    """Immutable tensors of one body model.

    Float tensors are torch.float64; ``parents`` and ``faces`` are numpy
    integer arrays. ``joint_labels`` assigns each joint a coarse region
    ("body", "head" or "hand") used to partition vertices by dominant
    skinning weight.
    """

    template: torch.Tensor        # (V, 3)
    shape_dirs: torch.Tensor      # (V, 3, B_shape)
    pose_dirs: torch.Tensor       # (V, 3, 9*(J-1))
    expr_dirs: torch.Tensor       # (V, 3, B_expr)
    joint_regressor: torch.Tensor  # (J, V), rows sum to 1
    skin_weights: torch.Tensor    # (V, J), rows sum to 1
    parents: np.ndarray           # (J,), parent index per joint, root = -1
    faces: np.ndarray             # (F, 3)
    joint_labels: tuple[str, ...]  # (J,), entries from JOINT_REGIONS
    name: str = "unnamed"

    @property
    def num_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joint_regressor.shape[0]

    @property
    def num_shape(self) -> int:
        return self.shape_dirs.shape[2]

    @property
    def num_expr(self) -> int:
        return self.expr_dirs.shape[2]

    def validate(self) -> None:
        """Check all structural invariants; raise ModelError on violation."""
        v, j = self.num_vertices, self.num_joints
        if self.template.shape != (v, 3):
            raise ModelError(f"template has shape {tuple(self.template.shape)}, expected ({v}, 3)")
        if self.shape_dirs.shape[:2] != (v, 3):
            raise ModelError(f"shape_dirs has shape {tuple(self.shape_dirs.shape)}, expected ({v}, 3, *)")
        if self.expr_dirs.shape[:2] != (v, 3):
            raise ModelError(f"expr_dirs has shape {tuple(self.expr_dirs.shape)}, expected ({v}, 3, *)")
        if self.pose_dirs.shape != (v, 3, 9 * (j - 1)):
            raise ModelError(
                f"pose_dirs has shape {tuple(self.pose_dirs.shape)}, expected ({v}, 3, {9 * (j - 1)})"
            )
        if self.joint_regressor.shape != (j, v):
            raise ModelError(f"joint_regressor has shape {tuple(self.joint_regressor.shape)}, expected ({j}, {v})")
        if self.skin_weights.shape != (v, j):
            raise ModelError(f"skin_weights has shape {tuple(self.skin_weights.shape)}, expected ({v}, {j})")
        row_sums = self.skin_weights.sum(dim=1)
        if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=1e-6):
            raise ModelError("skin_weights rows must sum to 1 within 1e-6")
        if (self.skin_weights < 0).any():
            raise ModelError("skin_weights must be nonnegative")
        reg_sums = self.joint_regressor.sum(dim=1)
        if not torch.allclose(reg_sums, torch.ones_like(reg_sums), atol=1e-5):
            raise ModelError("joint_regressor rows must sum to 1 within 1e-5")
        if (self.joint_regressor < 0).any():
            raise ModelError("joint_regressor must be nonnegative")
        if self.parents.shape != (j,):
            raise ModelError(f"parents has shape {self.parents.shape}, expected ({j},)")
        if self.parents[0] != -1 or (self.parents[1:] < 0).any():
            raise ModelError("parents must have exactly one root (-1) at joint 0")
        for k in range(1, j):
            if self.parents[k] >= k:
                raise ModelError(f"parents must be topologically ordered; joint {k} has parent {self.parents[k]}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ModelError(f"faces has shape {self.faces.shape}, expected (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ModelError("face indices out of range [0, V)")
        if len(self.joint_labels) != j:
            raise ModelError(f"joint_labels has {len(self.joint_labels)} entries, expected {j}")
        bad = set(self.joint_labels) - set(JOINT_REGIONS)
        if bad:
            raise ModelError(f"unknown joint labels {sorted(bad)}; allowed: {JOINT_REGIONS}")


@dataclass
class BodyParams:
    """Shape, pose, expression and translation variables of one fit."""

    beta: np.ndarray   # (B_shape,)
    theta: np.ndarray  # (J, 3) axis-angle per joint
    psi: np.ndarray    # (B_expr,)
    trans: np.ndarray  # (3,)

    @classmethod
    def zeros(cls, assets: BodyModelAssets) -> "BodyParams":
        return cls(
            beta=np.zeros(assets.num_shape),
            theta=np.zeros((assets.num_joints, 3)),
            psi=np.zeros(assets.num_expr),
            trans=np.zeros(3),
        )

    def copy(self) -> "BodyParams":
        return BodyParams(self.beta.copy(), self.theta.copy(), self.psi.copy(), self.trans.copy())

    def validate(self, assets: BodyModelAssets) -> None:
        if self.beta.shape != (assets.num_shape,):
            raise ModelError(f"beta has shape {self.beta.shape}, expected ({assets.num_shape},)")
        if self.theta.shape != (assets.num_joints, 3):
            raise ModelError(f"theta has shape {self.theta.shape}, expected ({assets.num_joints}, 3)")
        if self.psi.shape != (assets.num_expr,):
            raise ModelError(f"psi has shape {self.psi.shape}, expected ({assets.num_expr},)")
        if self.trans.shape != (3,):
            raise ModelError(f"trans has shape {self.trans.shape}, expected (3,)")
        for name in ("beta", "theta", "psi", "trans"):
            if not np.isfinite(getattr(self, name)).all():
                raise ModelError(f"{name} contains non-finite values")


def rotation_matrices(rotvec: torch.Tensor) -> torch.Tensor:
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3).

    Near zero angle the sin/cos factors switch to second-order Taylor
    expansions in the squared angle, keeping values and gradients finite
    at the rest pose.
    """
    sq = (rotvec * rotvec).sum(dim=-1)
    small = sq < 1e-16
    angle = torch.sqrt(torch.clamp(sq, min=1e-16))
    sin_over = torch.where(small, 1.0 - sq / 6.0, torch.sin(angle) / angle)
    cos_term = torch.where(small, 0.5 - sq / 24.0, (1.0 - torch.cos(angle)) / torch.clamp(sq, min=1e-16))

    zeros = torch.zeros_like(sq)
    rx, ry, rz = rotvec[..., 0], rotvec[..., 1], rotvec[..., 2]
    k = torch.stack(
        [
            torch.stack([zeros, -rz, ry], dim=-1),
            torch.stack([rz, zeros, -rx], dim=-1),
            torch.stack([-ry, rx, zeros], dim=-1),
        ],
        dim=-2,
    )
    eye = torch.eye(3, dtype=rotvec.dtype).expand(k.shape)
    return eye + sin_over[..., None, None] * k + cos_term[..., None, None] * (k @ k)


def _as_torch(arr: np.ndarray, name: str) -> torch.Tensor:
    t = torch.as_tensor(arr, dtype=torch.float64)
    if not torch.isfinite(t).all():
        raise ModelError(f"{name} contains non-finite values")
    return t


def _shaped_torch(assets, beta, theta, psi) -> torch.Tensor:
    if beta.shape != (assets.num_shape,):
        raise ModelError(f"beta has shape {tuple(beta.shape)}, expected ({assets.num_shape},)")
    if psi.shape != (assets.num_expr,):
        raise ModelError(f"psi has shape {tuple(psi.shape)}, expected ({assets.num_expr},)")
    if theta.shape != (assets.num_joints, 3):
        raise ModelError(f"theta has shape {tuple(theta.shape)}, expected ({assets.num_joints}, 3)")
    rot = rotation_matrices(theta)
    eye = torch.eye(3, dtype=rot.dtype)
    pose_feat = (rot[1:] - eye).reshape(-1)
    return (
        assets.template
        + assets.shape_dirs @ beta
        + assets.expr_dirs @ psi
        + assets.pose_dirs @ pose_feat
    )


def shaped_template(assets: BodyModelAssets, params: BodyParams) -> np.ndarray:
    """Rest-pose mesh: template plus shape, expression and pose-corrective
    displacements."""
    verts = _shaped_torch(
        assets,
        _as_torch(params.beta, "beta"),
        _as_torch(params.theta, "theta"),
        _as_torch(params.psi, "psi"),
    )
    return verts.numpy()


def regress_joints(assets: BodyModelAssets, rest_vertices: np.ndarray) -> np.ndarray:
    """Joint positions as the regressor-weighted average of rest vertices."""
    if rest_vertices.shape[0] != assets.num_vertices:
        raise ModelError(
            f"rest_vertices has {rest_vertices.shape[0]} rows, expected {assets.num_vertices}"
        )
    return (assets.joint_regressor @ torch.as_tensor(rest_vertices, dtype=torch.float64)).numpy()


def _lbs_torch(assets, beta, theta, psi, trans):
    """Differentiable forward pass; returns (posed vertices, posed joints)."""
    shaped = _shaped_torch(assets, beta, theta, psi)
    # joints are regressed before pose correctives are applied
    rest_mesh = assets.template + assets.shape_dirs @ beta + assets.expr_dirs @ psi
    rest_joints = assets.joint_regressor @ rest_mesh

    rots = rotation_matrices(theta)
    parents = assets.parents
    num_joints = assets.num_joints

    world_rot = [rots[0]]
    world_pos = [rest_joints[0]]
    for j in range(1, num_joints):
        p = parents[j]
        offset = rest_joints[j] - rest_joints[p]
        world_rot.append(world_rot[p] @ rots[j])
        world_pos.append(world_pos[p] + world_rot[p] @ offset)
    world_rot = torch.stack(world_rot)   # (J, 3, 3)
    world_pos = torch.stack(world_pos)   # (J, 3)

    # transform relative to the rest pose: x -> R_w (x - j_rest) + j_w
    rel_trans = world_pos - (world_rot @ rest_joints[..., None])[..., 0]
    blend_rot = torch.einsum("vj,jab->vab", assets.skin_weights, world_rot)
    blend_trans = assets.skin_weights @ rel_trans
    verts = (blend_rot @ shaped[..., None])[..., 0] + blend_trans + trans
    joints = world_pos + trans
    return verts, joints


def lbs_forward(assets: BodyModelAssets, params: BodyParams) -> tuple[np.ndarray, np.ndarray]:
    """Pose the model; returns (V, 3) vertices and (J, 3) joints."""
    verts, joints = _lbs_torch(
        assets,
        _as_torch(params.beta, "beta"),
        _as_torch(params.theta, "theta"),
        _as_torch(params.psi, "psi"),
        _as_torch(params.trans, "trans"),
    )
    return verts.numpy(), joints.numpy()


def objective_gradient(
    assets: BodyModelAssets,
    params: BodyParams,
    target_landmarks: np.ndarray,
    spec: "LandmarkSpec",
    mask: np.ndarray,
) -> tuple[float, BodyParams]:
    """Landmark alignment loss and its gradient.

    Loss is the sum over masked landmarks of the squared distance between
    the model's landmark vertices and the targets. The gradient container
    has the same field shapes as ``params``.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(spec),):
        raise ModelError(f"mask has shape {mask.shape}, expected ({len(spec)},)")
    if not mask.any():
        raise ModelError("no active landmarks")
    indices = spec.vertex_indices[mask]
    targets = torch.as_tensor(np.asarray(target_landmarks, dtype=np.float64)[mask])

    leaves = {
        name: _as_torch(getattr(params, name), name).requires_grad_(True)
        for name in ("beta", "theta", "psi", "trans")
    }
    verts, _ = _lbs_torch(assets, leaves["beta"], leaves["theta"], leaves["psi"], leaves["trans"])
    diff = verts[indices] - targets
    loss = (diff * diff).sum()
    loss.backward()
    grad = BodyParams(**{name: leaf.grad.numpy() for name, leaf in leaves.items()})
    return float(loss.detach()), grad


def _fibonacci_spheroid(n: int, semi_axes: tuple[float, float, float]) -> np.ndarray:
    """Deterministic, roughly uniform points on a prolate spheroid."""
    i = np.arange(n, dtype=np.float64)
    y = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    pts = np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)
    return pts * np.asarray(semi_axes)


def _random_fields(
    rng,
    points: np.ndarray,
    count: int,
    scale: float,
    smooth: bool = False,
    k_lo: float = 0.0,
    k_hi: float = 0.0,
    window=None,
) -> np.ndarray:
    """Random per-vertex displacement bases, each normalized to unit RMS
    amplitude and then scaled. Smooth variants are planar cosine waves;
    the default is independent per-vertex noise, which keeps the basis
    full rank even when restricted to a subset of vertices."""
    v = points.shape[0]
    out = np.empty((v, 3, count))
    for m in range(count):
        if smooth:
            k_dir = rng.normal(size=3)
            k_dir /= np.linalg.norm(k_dir)
            wave = k_dir * rng.uniform(k_lo, k_hi)
            amp = rng.normal(size=3)
            amp /= np.linalg.norm(amp)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            field = np.cos(points @ wave + phase)[:, None] * amp
        else:
            field = rng.standard_normal((v, 3))
        if window is not None:
            field = field * window[:, None]
        field /= np.sqrt((field * field).sum(axis=1).mean()) + 1e-12
        out[:, :, m] = field * scale
    return out


def make_toy_model(
    num_verts: int,
    num_joints: int,
    seed: int,
    num_shape: int = 8,
    num_expr: int = 4,
    size_mode: bool = False,
) -> BodyModelAssets:
    """Procedural test model: ball surface, hub skeleton rooted at the body
    center, gaussian skinning, random blendshape bases. Deterministic per seed.

    The first two shape modes are strong and smooth; the remaining shape and
    expression modes are tiny. Pose correctives are full-rank noise fields
    with non-negligible amplitude, so every joint articulation leaves a
    visible trace on the surface.

    With `size_mode`, the first shape coefficient instead grows the whole
    body uniformly and the second grows only the head zone, so any physical
    size in the working range is expressible in shape space while the
    head-to-body proportion survives normalization as an absolute-size cue
    (what scale regression relies on).
    """
    if num_joints < 2:
        raise ModelError(f"num_joints must be >= 2, got {num_joints}")
    if num_verts < num_joints:
        raise ModelError(f"num_verts ({num_verts}) must be >= num_joints ({num_joints})")

    from scipy.spatial import ConvexHull

    rng = np.random.default_rng(seed)
    radius = 0.7
    points = _fibonacci_spheroid(num_verts, (radius, radius, radius))

    hull = ConvexHull(points)
    faces = hull.simplices.copy()
    # orient every face outward (hull centroid is the origin here)
    a, b, c = points[faces[:, 0]], points[faces[:, 1]], points[faces[:, 2]]
    normals = np.cross(b - a, c - a)
    flip = (normals * ((a + b + c) / 3.0)).sum(axis=1) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    # hub tree with the root at the centroid: root rotations stay decoupled
    # from translation, and no child can silently undo a root rotation
    child_dirs = _fibonacci_spheroid(num_joints - 1, (1.0, 1.0, 1.0))
    joint_seeds = np.concatenate([np.zeros((1, 3)), 0.75 * radius * child_dirs])
    parents = np.concatenate([[-1], np.zeros(num_joints - 1, dtype=np.int64)])

    d2 = ((points[:, None, :] - joint_seeds[None, :, :]) ** 2).sum(axis=2)
    sigma = 0.45 * radius
    skin = np.exp(-d2 / (2.0 * sigma**2))
    skin /= skin.sum(axis=1, keepdims=True)

    reg = np.exp(-d2.T / (2.0 * (0.6 * sigma) ** 2))
    reg /= reg.sum(axis=1, keepdims=True)

    if num_joints >= 5:
        head_j = 1 + int(np.argmax(child_dirs[:, 1]))
        others = [j for j in range(1, num_joints) if j != head_j]
        others.sort(key=lambda j: -abs(child_dirs[j - 1, 0]))
        hand_js = set(others[:2])
        labels = ["hand" if j in hand_js else "body" for j in range(num_joints)]
        labels[head_j] = "head"
        labels[0] = "body"
    else:
        labels = ["body"] * num_joints

    head_window = np.exp(-((points[:, 1] - radius) ** 2) / (2.0 * (0.25 * radius) ** 2))
    base_k = 2.0 * np.pi / (2.0 * radius)
    n_strong = min(2, num_shape)
    shape_dirs = np.concatenate(
        [
            _random_fields(rng, points, n_strong, 1.0, smooth=True, k_lo=base_k, k_hi=3.0 * base_k),
            _random_fields(rng, points, num_shape - n_strong, 1e-4),
        ],
        axis=2,
    )
    if size_mode and num_shape >= 1:
        # replace the strong modes after drawing, keeping the rng stream
        # identical. Mode 0 is the template itself, so its coefficient is
        # exactly the fractional whole-body growth and the shape family is
        # closed under uniform rescaling. Mode 1 bulges or dents the head
        # zone by its coefficient's fraction, a proportion cue that
        # survives normalization and encodes absolute size.
        shape_dirs[:, :, 0] = points
        if num_shape >= 2:
            shape_dirs[:, :, 1] = points * head_window[:, None]
    expr_dirs = _random_fields(rng, points, num_expr, 1e-4, window=head_window)
    pose_dirs = _random_fields(rng, points, 9 * (num_joints - 1), 0.75)

    assets = BodyModelAssets(
        template=torch.as_tensor(points, dtype=torch.float64),
        shape_dirs=torch.as_tensor(shape_dirs, dtype=torch.float64),
        pose_dirs=torch.as_tensor(pose_dirs, dtype=torch.float64),
        expr_dirs=torch.as_tensor(expr_dirs, dtype=torch.float64),
        joint_regressor=torch.as_tensor(reg, dtype=torch.float64),
        skin_weights=torch.as_tensor(skin, dtype=torch.float64),
        parents=parents,
        faces=faces.astype(np.int64),
        joint_labels=tuple(labels),
        name=f"toy-v{num_verts}-j{num_joints}-s{seed}" + ("-size" if size_mode else ""),
    )
    assets.validate()
    return assets


def save_model(assets: BodyModelAssets, path) -> None:
    """Write the model container (float64 tensors, int32 index arrays)."""
    assets.validate()
    meta = {
        "V": assets.num_vertices,
        "J": assets.num_joints,
        "B_shape": assets.num_shape,
        "B_expr": assets.num_expr,
        "F": int(assets.faces.shape[0]),
        "joint_labels": list(assets.joint_labels),
        "name": assets.name,
    }
    tensors = {name: getattr(assets, name).numpy() for name in _FLOAT_FIELDS}
    tensors["parents"] = assets.parents.astype(np.int32)
    tensors["faces"] = assets.faces.astype(np.int32)
    write_tensorfile(path, "body_model", meta, tensors)


def load_model(path) -> BodyModelAssets:
    """Read a model container and validate every structural invariant."""
    kind, meta, tensors = read_tensorfile(path)
    if kind != "body_model":
        raise ModelError(f"{path}: archive kind is {kind!r}, expected 'body_model'")
    missing = [n for n in (*_FLOAT_FIELDS, "parents", "faces") if n not in tensors]
    if missing:
        raise ModelError(f"{path}: missing tensors {missing}")
    assets = BodyModelAssets(
        **{name: torch.as_tensor(tensors[name], dtype=torch.float64) for name in _FLOAT_FIELDS},
        parents=tensors["parents"].astype(np.int64),
        faces=tensors["faces"].astype(np.int64),
        joint_labels=tuple(meta["joint_labels"]),
        name=meta.get("name", "unnamed"),
    )
    assets.validate()
    for dim, actual in (
        ("V", assets.num_vertices),
        ("J", assets.num_joints),
        ("B_shape", assets.num_shape),
        ("B_expr", assets.num_expr),
        ("F", assets.faces.shape[0]),
    ):
        if meta[dim] != actual:
            raise ModelError(f"{path}: header says {dim}={meta[dim]} but tensors give {actual}")
    return assets
