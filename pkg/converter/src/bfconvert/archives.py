"""Reading third-party body model archives.

The published models of the SMPL family ship either as numpy ``.npz``
archives or as pickles. Tensor names vary a little between releases, so
each target field carries a list of accepted aliases. Everything is
returned as plain float64/int64 numpy arrays regardless of how the
source stored it (float32, object arrays, sparse matrices).
"""

import pickle
from pathlib import Path

import numpy as np


class ConversionError(RuntimeError):
    pass


# aliases per target field, tried in order
FIELD_ALIASES = {
    "template": ("v_template", "template"),
    "shapedirs": ("shapedirs", "shape_dirs"),
    "exprdirs": ("exprdirs", "expr_dirs"),
    "posedirs": ("posedirs", "pose_dirs"),
    "joint_regressor": ("J_regressor", "joint_regressor"),
    "skin_weights": ("weights", "lbs_weights", "skin_weights"),
    "parents": ("kintree_table", "parents"),
    "faces": ("f", "faces"),
}

# fields that must be present in any source archive; expression
# blendshapes are optional (SMPL has none)
REQUIRED = ("template", "shapedirs", "posedirs", "joint_regressor", "skin_weights", "parents", "faces")

# (V, J) signatures of the known releases
_VARIANTS = {
    (10475, 55): "smplx",
    (6890, 52): "smplh",
    (6890, 24): "smpl",
}

# SMPL-X joint order: 15 head, 22 jaw, 23/24 eyes; 20/21 wrists and
# 25..54 fingers form the hand region; everything else is body
_SMPLX_HEAD = {15, 22, 23, 24}
_SMPLX_HAND = {20, 21, *range(25, 55)}


def _to_dense(value) -> np.ndarray:
    if hasattr(value, "toarray"):  # scipy sparse without importing scipy
        value = value.toarray()
    arr = np.asarray(value)
    if arr.dtype == object:
        # chumpy and friends wrap the data; np.asarray(np.array(x)) unwraps
        arr = np.asarray(arr.tolist())
    return arr


def read_archive(path) -> dict:
    """Load an ``.npz``/``.pkl`` archive into {name: array}."""
    path = Path(path)
    if not path.exists():
        raise ConversionError(f"{path}: no such file")
    suffix = path.suffix.lower()
    if suffix == ".npz":
        with np.load(path, allow_pickle=True) as data:
            return {k: data[k] for k in data.files}
    if suffix in (".pkl", ".pickle"):
        try:
            with open(path, "rb") as f:
                raw = pickle.load(f, encoding="latin1")
        except ModuleNotFoundError as e:
            raise ConversionError(
                f"{path}: unpickling needs the {e.name!r} package the archive was "
                "written with; re-export the model as .npz instead"
            ) from e
        except Exception as e:
            raise ConversionError(f"{path}: cannot unpickle ({e})") from e
        if not isinstance(raw, dict):
            raise ConversionError(f"{path}: pickle does not contain a field dict")
        return dict(raw)
    raise ConversionError(f"{path}: unsupported archive type {suffix!r} (use .npz or .pkl)")


def resolve_fields(archive: dict) -> dict[str, str]:
    """Map each target field to the source key providing it.

    Raises a ConversionError naming the first missing required field.
    """
    mapping = {}
    for field, aliases in FIELD_ALIASES.items():
        for alias in aliases:
            if alias in archive:
                mapping[field] = alias
                break
    missing = [f for f in REQUIRED if f not in mapping]
    if missing:
        names = ", ".join(f"{f} (looked for {'/'.join(FIELD_ALIASES[f])})" for f in missing)
        raise ConversionError(f"archive is missing {names}")
    return mapping


def detect_variant(num_verts: int, num_joints: int) -> str:
    return _VARIANTS.get((num_verts, num_joints), "generic")


def parents_from(raw: np.ndarray) -> np.ndarray:
    """Normalize a parent table: accepts a kintree_table (2, J) or a flat
    (J,) array; the root becomes -1 whatever sentinel the source used."""
    arr = _to_dense(raw)
    if arr.ndim == 2:
        arr = arr[0]
    parents = arr.astype(np.int64)
    # uint32(-1) and similar sentinels
    parents[(parents < 0) | (parents >= len(parents))] = -1
    return parents


def joint_labels_for(variant: str, num_joints: int, archive: dict) -> tuple[str, ...]:
    """Region labels per joint: taken from the archive when it carries
    them, from the release's known joint order otherwise."""
    if "joint_labels" in archive:
        labels = [str(x) for x in _to_dense(archive["joint_labels"]).tolist()]
        return tuple(labels)
    if variant == "smplx":
        return tuple(
            "head" if j in _SMPLX_HEAD else "hand" if j in _SMPLX_HAND else "body"
            for j in range(num_joints)
        )
    return ("body",) * num_joints
