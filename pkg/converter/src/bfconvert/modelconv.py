"""Turning a third-party model archive into a body-model container.

All numerics are cast to float64. Structural invariants are checked
through the loader's own validator before anything is written; a source
that fails them is refused rather than patched, except for float32
round-off in the stochastic matrices, which is renormalized away and
recorded in the manifest.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from bodyfit.bodymodel import BodyModelAssets, ModelError, save_model

from .archives import (
    ConversionError,
    _to_dense,
    detect_variant,
    joint_labels_for,
    parents_from,
    read_archive,
    resolve_fields,
)

# row sums may drift this far from 1 before we refuse to renormalize;
# float32 sources accumulate about 1e-6, real violations are way past this
ROW_SUM_SLACK = 1e-4
NEGATIVE_SLACK = 1e-4

# columns 300+ of a wide smplx shape basis are expression blendshapes
SMPLX_SHAPE_COLUMNS = 300


@dataclass
class ConversionManifest:
    source: str
    variant: str
    mapping: dict[str, str]
    checksums: dict[str, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    entries: int = 0

    def to_json(self) -> str:
        payload = {
            "source": self.source,
            "variant": self.variant,
            "mapping": self.mapping,
            "checksums": self.checksums,
            "warnings": self.warnings,
            "entries": self.entries,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _stochastic_rows(name: str, mat: np.ndarray, warnings: list[str]) -> np.ndarray:
    """Clean float round-off from a rows-sum-to-one matrix.

    Tiny negatives are clipped and rows renormalized; anything beyond
    the slack is a genuine invariant violation and refused.
    """
    worst_neg = float(-mat.min()) if mat.size else 0.0
    if worst_neg > NEGATIVE_SLACK:
        raise ConversionError(
            f"{name} has negative entries down to {-worst_neg:.3g}; "
            "refusing to convert (not representable as blend weights)"
        )
    if worst_neg > 0.0:
        mat = np.clip(mat, 0.0, None)
        warnings.append(f"{name}: clipped negatives up to {worst_neg:.3g}")
    sums = mat.sum(axis=1)
    off = float(np.abs(sums - 1.0).max()) if mat.size else 0.0
    if off > ROW_SUM_SLACK:
        raise ConversionError(
            f"{name} rows sum up to {off:.3g} away from 1; refusing to convert"
        )
    # below 1e-12 the sums are exact up to the last ulp; leave the bits
    # alone so clean sources round-trip bitwise
    if off > 1e-12:
        mat = mat / sums[:, None]
        warnings.append(f"{name}: renormalized rows (max deviation {off:.3g})")
    return mat


def _pose_basis(raw, num_verts: int, num_joints: int) -> np.ndarray:
    """Pose correctives as (V, 3, 9(J-1)), accepting the flattened
    (9(J-1), V*3) layout some exports use."""
    arr = _to_dense(raw).astype(np.float64)
    p = 9 * (num_joints - 1)
    if arr.ndim == 3 and arr.shape[:2] == (num_verts, 3):
        basis = arr
    elif arr.ndim == 2 and arr.shape == (p, num_verts * 3):
        basis = arr.reshape(p, num_verts, 3).transpose(1, 2, 0)
    elif arr.ndim == 2 and arr.shape == (num_verts * 3, p):
        basis = arr.reshape(num_verts, 3, p)
    else:
        raise ConversionError(
            f"pose basis has shape {arr.shape}; expected ({num_verts}, 3, {p}) "
            f"or a flattened ({p}, {num_verts * 3})"
        )
    if basis.shape[2] != p:
        raise ConversionError(
            f"pose basis provides {basis.shape[2]} columns, expected {p} "
            f"for {num_joints} joints"
        )
    return basis


def _shape_and_expr(archive: dict, mapping: dict[str, str], variant: str,
                    num_verts: int) -> tuple[np.ndarray, np.ndarray]:
    shape = _to_dense(archive[mapping["shapedirs"]]).astype(np.float64)
    if shape.ndim != 3 or shape.shape[:2] != (num_verts, 3):
        raise ConversionError(
            f"shape basis has shape {shape.shape}; expected ({num_verts}, 3, B)"
        )
    if "exprdirs" in mapping:
        expr = _to_dense(archive[mapping["exprdirs"]]).astype(np.float64)
        if expr.ndim != 3 or expr.shape[:2] != (num_verts, 3):
            raise ConversionError(
                f"expression basis has shape {expr.shape}; expected ({num_verts}, 3, B)"
            )
        return shape, expr
    if variant == "smplx" and shape.shape[2] > SMPLX_SHAPE_COLUMNS:
        # the published archives pack expression columns after the shape ones
        return shape[:, :, :SMPLX_SHAPE_COLUMNS], shape[:, :, SMPLX_SHAPE_COLUMNS:]
    return shape, np.zeros((num_verts, 3, 0))


def convert_model(source, out_path) -> ConversionManifest:
    """Convert one archive; emits the container only if it validates."""
    source = Path(source)
    out_path = Path(out_path)
    archive = read_archive(source)
    mapping = resolve_fields(archive)
    warnings: list[str] = []

    template = _to_dense(archive[mapping["template"]]).astype(np.float64)
    if template.ndim != 2 or template.shape[1] != 3:
        raise ConversionError(f"template has shape {template.shape}; expected (V, 3)")
    num_verts = template.shape[0]

    regressor = _to_dense(archive[mapping["joint_regressor"]]).astype(np.float64)
    if regressor.ndim != 2 or regressor.shape[1] != num_verts:
        raise ConversionError(
            f"joint regressor has shape {regressor.shape}; expected (J, {num_verts})"
        )
    num_joints = regressor.shape[0]
    variant = detect_variant(num_verts, num_joints)

    shape_dirs, expr_dirs = _shape_and_expr(archive, mapping, variant, num_verts)
    pose_dirs = _pose_basis(archive[mapping["posedirs"]], num_verts, num_joints)

    weights = _to_dense(archive[mapping["skin_weights"]]).astype(np.float64)
    if weights.shape != (num_verts, num_joints):
        raise ConversionError(
            f"skin weights have shape {weights.shape}; expected ({num_verts}, {num_joints})"
        )
    weights = _stochastic_rows("skin weights", weights, warnings)
    regressor = _stochastic_rows("joint regressor", regressor, warnings)

    faces = _to_dense(archive[mapping["faces"]]).astype(np.int64)
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise ConversionError(f"faces have shape {faces.shape}; expected (F, 3)")

    assets = BodyModelAssets(
        template=torch.from_numpy(template),
        shape_dirs=torch.from_numpy(np.ascontiguousarray(shape_dirs)),
        pose_dirs=torch.from_numpy(np.ascontiguousarray(pose_dirs)),
        expr_dirs=torch.from_numpy(np.ascontiguousarray(expr_dirs)),
        joint_regressor=torch.from_numpy(regressor),
        skin_weights=torch.from_numpy(weights),
        parents=parents_from(archive[mapping["parents"]]),
        faces=faces.astype(np.int32),
        joint_labels=joint_labels_for(variant, num_joints, archive),
        name=source.stem,
    )
    try:
        assets.validate()
    except ModelError as e:
        raise ConversionError(f"{source}: converted tensors fail validation: {e}") from e

    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(assets, out_path)
    return ConversionManifest(
        source=str(source),
        variant=variant,
        mapping=mapping,
        checksums={out_path.name: sha256_of(out_path)},
        warnings=warnings,
        entries=1,
    )
