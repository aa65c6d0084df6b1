"""Ordered dense-landmark sets: template vertex indices with region labels.

A landmark spec pins, once and for all, which template vertices act as
landmarks and in what order, so predictions, fitting targets, and masks
all index the same way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bodymodel import BodyModelAssets, ModelError
from .pointcloud import farthest_point_indices

REGIONS = ("head", "body", "hand")

# (hands, head, body): 600 landmarks total
DEFAULT_ALLOCATION = (180, 120, 300)


class SpecError(ValueError):
    """Raised for malformed landmark specs or allocation problems."""


@dataclass(frozen=True)
class LandmarkSpec:
    """Ordered list of (vertex_index, region) entries."""

    entries: tuple[tuple[int, str], ...]
    name: str = "custom"

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def vertex_indices(self) -> np.ndarray:
        return np.array([v for v, _ in self.entries], dtype=np.int64)

    @property
    def regions(self) -> tuple[str, ...]:
        return tuple(r for _, r in self.entries)

    def allocation(self) -> dict[str, int]:
        counts = {r: 0 for r in REGIONS}
        for _, r in self.entries:
            counts[r] += 1
        return counts

    def validate(self, num_vertices: int | None = None) -> None:
        if len(self.entries) == 0:
            raise SpecError("landmark spec has no entries")
        seen = set()
        for v, r in self.entries:
            if r not in REGIONS:
                raise SpecError(f"unknown region {r!r}; allowed: {REGIONS}")
            if v in seen:
                raise SpecError(f"duplicate vertex index {v}")
            seen.add(v)
            if v < 0 or (num_vertices is not None and v >= num_vertices):
                raise SpecError(f"vertex index {v} out of range [0, {num_vertices})")


def vertex_regions(assets: BodyModelAssets) -> np.ndarray:
    """Per-vertex region labels: the label of the dominant-skin-weight joint."""
    dominant = assets.skin_weights.numpy().argmax(axis=1)
    labels = np.array(assets.joint_labels)
    return labels[dominant]


def default_spec(
    assets: BodyModelAssets,
    allocation: tuple[int, int, int] = DEFAULT_ALLOCATION,
    seed: int = 0,
    name: str | None = None,
) -> LandmarkSpec:
    """Farthest-point-sampled landmarks per region.

    ``allocation`` is (hands, head, body). Entries are emitted region by
    region (head, body, hand) in farthest-point order, so a given
    (assets, allocation, seed) always produces the same spec.
    """
    hands, head, body = allocation
    want = {"hand": int(hands), "head": int(head), "body": int(body)}
    if min(want.values()) < 0:
        raise SpecError(f"allocation counts must be nonnegative, got {allocation}")
    if sum(want.values()) == 0:
        raise SpecError("allocation requests zero landmarks")
    regions = vertex_regions(assets)
    template = assets.template.numpy()
    entries: list[tuple[int, str]] = []
    for region in REGIONS:
        count = want[region]
        if count == 0:
            continue
        pool = np.flatnonzero(regions == region)
        if len(pool) < count:
            raise SpecError(
                f"region {region!r} has {len(pool)} vertices, cannot place {count} landmarks"
            )
        picked = farthest_point_indices(template[pool], count, seed=seed)
        entries.extend((int(pool[i]), region) for i in picked)
    spec = LandmarkSpec(
        entries=tuple(entries),
        name=name or f"fps-h{want['head']}-b{want['body']}-hd{want['hand']}-s{seed}",
    )
    spec.validate(assets.num_vertices)
    return spec


def extract_landmarks(vertices: np.ndarray, spec: LandmarkSpec) -> np.ndarray:
    """Gather vertex rows at the spec's indices, in spec order."""
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise SpecError(f"vertices have shape {vertices.shape}, expected (V, 3)")
    idx = spec.vertex_indices
    if idx.size and idx.max() >= len(vertices):
        raise SpecError(
            f"spec index {int(idx.max())} out of range for {len(vertices)} vertices"
        )
    return vertices[idx]


def region_mask(spec: LandmarkSpec, region: str) -> np.ndarray:
    """Boolean mask over entries matching one region label."""
    if region not in REGIONS:
        raise SpecError(f"unknown region {region!r}; allowed: {REGIONS}")
    return np.array([r == region for _, r in spec.entries], dtype=bool)


def save_spec(spec: LandmarkSpec, path) -> None:
    """Serialize to JSON, byte-for-byte reproducible for identical specs."""
    payload = {
        "name": spec.name,
        "allocation": spec.allocation(),
        "entries": [{"v": int(v), "region": r} for v, r in spec.entries],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")


def load_spec(path) -> LandmarkSpec:
    payload = json.loads(Path(path).read_text())
    try:
        entries = tuple((int(e["v"]), str(e["region"])) for e in payload["entries"])
        spec = LandmarkSpec(entries=entries, name=str(payload["name"]))
    except (KeyError, TypeError) as exc:
        raise SpecError(f"{path}: malformed landmark spec ({exc})") from exc
    spec.validate()
    declared = payload.get("allocation")
    if declared is not None and {k: int(v) for k, v in declared.items()} != spec.allocation():
        raise SpecError(f"{path}: declared allocation {declared} does not match entries")
    return spec
