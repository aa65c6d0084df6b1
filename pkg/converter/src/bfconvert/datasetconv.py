"""Crawling a scan directory into a training manifest.

The manifest is JSON lines, one row per usable mesh, with paths kept
relative to the manifest so the tree can be moved as a unit. Sidecar
files are picked up by stem: ``foo.params.json`` holds ground-truth
coefficients, ``foo.png`` a rendered view. ``load_records`` turns a
manifest back into record objects the training batcher accepts,
rotating z-up sources into the internal +y-up frame on the way in.
"""

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from bodyfit.bodymodel import BodyParams
from bodyfit.meshio import load_mesh
from bodyfit.pointcloud import TriMesh

from .archives import ConversionError
from .modelconv import ConversionManifest, sha256_of

log = logging.getLogger(__name__)

MESH_SUFFIXES = (".ply", ".obj")

# z-up -> y-up: x stays, old z becomes up, old y points backward
_Z_TO_Y = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])


@dataclass
class Record:
    """One training sample in the form make_training_batch consumes."""

    mesh: TriMesh
    params: BodyParams | None
    image: np.ndarray | None
    name: str


def _sidecars(mesh_path: Path) -> tuple[Path | None, Path | None]:
    params = mesh_path.with_suffix(".params.json")
    image = mesh_path.with_suffix(".png")
    return (params if params.exists() else None, image if image.exists() else None)


def convert_dataset(scan_dir, out_manifest, up: str = "y") -> ConversionManifest:
    """Write a manifest row per readable mesh under ``scan_dir``.

    Unreadable meshes are skipped; the manifest records how many. An
    empty directory is not an error, it yields an empty manifest.
    """
    if up not in ("y", "z"):
        raise ConversionError(f"up axis must be 'y' or 'z', got {up!r}")
    scan_dir = Path(scan_dir)
    if not scan_dir.is_dir():
        raise ConversionError(f"{scan_dir}: not a directory")
    out_manifest = Path(out_manifest)
    out_manifest.parent.mkdir(parents=True, exist_ok=True)
    base = out_manifest.parent.resolve()

    warnings: list[str] = []
    rows = []
    for path in sorted(scan_dir.rglob("*")):
        if path.suffix.lower() not in MESH_SUFFIXES or not path.is_file():
            continue
        try:
            load_mesh(path)
        except Exception as e:
            warnings.append(f"{path.name}: unreadable mesh ({e})")
            continue
        params_path, image_path = _sidecars(path)
        if params_path is not None and up != "y":
            warnings.append(
                f"{path.name}: params sidecar on a z-up scan; coefficients are "
                "assumed to be in the internal frame already"
            )
        row = {"mesh": os.path.relpath(path.resolve(), base), "up": up}
        if params_path is not None:
            row["params"] = os.path.relpath(params_path.resolve(), base)
        if image_path is not None:
            row["image"] = os.path.relpath(image_path.resolve(), base)
        rows.append(row)

    with open(out_manifest, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return ConversionManifest(
        source=str(scan_dir),
        variant="dataset",
        mapping={},
        checksums={out_manifest.name: sha256_of(out_manifest)},
        warnings=warnings,
        entries=len(rows),
    )


def _load_params(path: Path) -> BodyParams:
    with open(path) as f:
        payload = json.load(f)
    if "params" in payload:
        payload = payload["params"]
    missing = {"beta", "theta", "psi", "trans"} - set(payload)
    if missing:
        raise ConversionError(f"{path}: params file missing {sorted(missing)}")
    return BodyParams(
        beta=np.asarray(payload["beta"], dtype=np.float64),
        theta=np.asarray(payload["theta"], dtype=np.float64),
        psi=np.asarray(payload["psi"], dtype=np.float64),
        trans=np.asarray(payload["trans"], dtype=np.float64),
    )


def _load_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def load_records(manifest_path):
    """Yield Record objects from a manifest, resolving relative paths
    and mapping z-up geometry into the internal +y-up frame."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    with open(manifest_path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ConversionError(f"{manifest_path}:{lineno}: bad JSON ({e})") from e
            mesh = load_mesh(base / row["mesh"])
            if row.get("up", "y") == "z":
                mesh = TriMesh(mesh.vertices @ _Z_TO_Y.T, mesh.faces)
            params = _load_params(base / row["params"]) if "params" in row else None
            image = _load_image(base / row["image"]) if "image" in row else None
            yield Record(mesh=mesh, params=params, image=image,
                         name=Path(row["mesh"]).stem)
