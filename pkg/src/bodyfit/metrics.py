"""Vertex/joint error metrics with per-region breakdown.

Inputs are in canonical units (meters); every reported number is in
centimeters. Region index sets default to the same dominant-skin-weight
partition the landmark spec uses, so "hand" here means the vertices (or
joints) owned by hand joints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .bodymodel import BodyModelAssets, BodyParams, lbs_forward
from .landmarks import vertex_regions

REGION_ORDER = ("all", "hand", "head", "body")
_COLUMN_TITLES = {"all": "All", "hand": "Hands", "head": "Head", "body": "Body"}


class MetricsError(RuntimeError):
    pass


@dataclass
class EvalResult:
    """Aggregated per-region mean errors over an evaluation set."""

    v2v_cm: dict[str, float]
    mpjpe_cm: dict[str, float]
    samples: int

    def to_dict(self) -> dict:
        return {
            "v2v_cm": {k: float(v) for k, v in self.v2v_cm.items()},
            "mpjpe_cm": {k: float(v) for k, v in self.mpjpe_cm.items()},
            "samples": self.samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        """Fixed-width text table, one metric per row."""
        regions = [r for r in REGION_ORDER if r in self.v2v_cm or r in self.mpjpe_cm]
        header = ["metric"] + [_COLUMN_TITLES[r] for r in regions]
        rows = [header]
        for label, values in (("V2V (cm)", self.v2v_cm), ("MPJPE (cm)", self.mpjpe_cm)):
            rows.append([label] + [
                f"{values[r]:.4f}" if r in values else "-" for r in regions
            ])
        widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
        lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows]
        return "\n".join(lines)


def _paired(pred, gt, what: str) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[1] != 3:
        raise MetricsError(f"pred {what} have shape {pred.shape}, expected (N, 3)")
    if pred.shape != gt.shape:
        raise MetricsError(
            f"pred has {pred.shape[0]} {what}, gt has {gt.shape[0]}"
        )
    return pred, gt


def _region_means(pred, gt, regions, what: str) -> dict[str, float]:
    pred, gt = _paired(pred, gt, what)
    # per-row Euclidean distance, reported in cm
    dist = np.linalg.norm(pred - gt, axis=1) * 100.0
    out = {"all": float(dist.mean())}
    for name, idx in (regions or {}).items():
        idx = np.asarray(idx, dtype=int)
        if idx.size == 0:
            continue
        if idx.min() < 0 or idx.max() >= dist.shape[0]:
            raise MetricsError(f"region {name!r} indexes outside [0, {dist.shape[0]})")
        out[name] = float(dist[idx].mean())
    return out


def v2v(pred_vertices, gt_vertices, regions=None) -> dict[str, float]:
    """Mean per-vertex distance in cm, overall and per region set."""
    return _region_means(pred_vertices, gt_vertices, regions, "vertices")


def mpjpe(pred_joints, gt_joints, regions=None) -> dict[str, float]:
    """Mean per-joint distance in cm, overall and per region set."""
    return _region_means(pred_joints, gt_joints, regions, "joints")


def vertex_region_sets(assets: BodyModelAssets) -> dict[str, np.ndarray]:
    """Exclusive vertex partition by dominant-skin-weight region."""
    labels = vertex_regions(assets)
    return {r: np.flatnonzero(labels == r) for r in ("hand", "head", "body")}


def joint_region_sets(assets: BodyModelAssets) -> dict[str, np.ndarray]:
    """Exclusive joint partition by the joint's own region label."""
    labels = np.array(assets.joint_labels)
    return {r: np.flatnonzero(labels == r) for r in ("hand", "head", "body")}


def evaluate_dataset(fits, assets: BodyModelAssets) -> EvalResult:
    """Mean V2V/MPJPE over (FitReport, ground-truth BodyParams) pairs.

    Both parameter sets are run through the forward model; per-sample
    region means are averaged arithmetically over the stream.
    """
    vsets = vertex_region_sets(assets)
    jsets = joint_region_sets(assets)
    v_acc: dict[str, list[float]] = {}
    j_acc: dict[str, list[float]] = {}
    count = 0
    for report, gt_params in fits:
        pred_params = report.params if hasattr(report, "params") else report
        if not isinstance(pred_params, BodyParams) or not isinstance(gt_params, BodyParams):
            raise MetricsError("evaluate_dataset expects (FitReport, BodyParams) pairs")
        pv, pj = lbs_forward(assets, pred_params)
        gv, gj = lbs_forward(assets, gt_params)
        for key, val in v2v(pv, gv, vsets).items():
            v_acc.setdefault(key, []).append(val)
        for key, val in mpjpe(pj, gj, jsets).items():
            j_acc.setdefault(key, []).append(val)
        count += 1
    if count == 0:
        raise MetricsError("empty evaluation stream")
    return EvalResult(
        v2v_cm={k: float(np.mean(v)) for k, v in v_acc.items()},
        mpjpe_cm={k: float(np.mean(v)) for k, v in j_acc.items()},
        samples=count,
    )
