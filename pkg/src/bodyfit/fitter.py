"""Staged first-order optimization of body parameters against target landmarks.

The stock schedule solves translation first, then the dominant shape modes
jointly with pose, then everything. Gradients come from the body model's
objective and are normalized by the active landmark count, so step sizes do
not depend on how many landmarks a spec carries. The default optimizer takes
plain gradient steps: with the stock learning rate the translation stage is
then an exact one-step solve, which the adaptive-moment variant ("adam",
selectable per schedule) cannot reproduce because its early steps are
magnitude-normalized.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bodymodel import BodyModelAssets, BodyParams, objective_gradient
from .landmarks import LandmarkSpec

_THETA_CLIP = np.pi - 1e-12


class FitError(RuntimeError):
    """Raised when fitting cannot start or aborts mid-run."""


@dataclass(frozen=True)
class FitStage:
    """One optimization stage: which parameters move, for how many steps."""

    active: tuple[str, ...]  # descriptors: "beta", "beta[:k]", "theta", "psi", "trans"
    steps: int
    lr: float


@dataclass(frozen=True)
class FitSchedule:
    stages: tuple[FitStage, ...]
    optimizer: str = "gd"  # "gd" | "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if not self.stages:
            raise FitError("schedule has no stages")
        for i, st in enumerate(self.stages):
            if st.steps < 1:
                raise FitError(f"stage {i + 1}: steps must be >= 1, got {st.steps}")
            if not st.lr > 0:
                raise FitError(f"stage {i + 1}: lr must be > 0, got {st.lr}")
            if not st.active:
                raise FitError(f"stage {i + 1}: active set is empty")
        if self.optimizer not in ("gd", "adam"):
            raise FitError(f"unknown optimizer {self.optimizer!r}")


def default_schedule(trans_in_stage2: bool = False) -> FitSchedule:
    """Three stages: translation (20 steps, lr 0.5), first two shape modes
    plus pose (30 steps, lr 0.5), all parameters (20 steps, lr 0.2).

    Translation stays frozen in stage 2 unless trans_in_stage2 is set.
    """
    stage2: tuple[str, ...] = ("beta[:2]", "theta")
    if trans_in_stage2:
        stage2 = stage2 + ("trans",)
    return FitSchedule(
        stages=(
            FitStage(("trans",), 20, 0.5),
            FitStage(stage2, 30, 0.5),
            FitStage(("beta", "theta", "psi", "trans"), 20, 0.2),
        )
    )


@dataclass
class FitReport:
    """Result of one fit: final parameters plus per-stage diagnostics."""

    params: BodyParams
    stage_losses: tuple[tuple[float, ...], ...]
    stage_seconds: tuple[float, ...]
    rmse: float

    def to_dict(self) -> dict:
        return {
            "params": {
                "beta": self.params.beta.tolist(),
                "theta": self.params.theta.tolist(),
                "psi": self.params.psi.tolist(),
                "trans": self.params.trans.tolist(),
            },
            "rmse": self.rmse,
            "per_stage_losses": [list(c) for c in self.stage_losses],
            "timing": list(self.stage_seconds),
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _layout(assets: BodyModelAssets) -> tuple[slice, slice, slice, slice]:
    b = assets.num_shape
    t = 3 * assets.num_joints
    e = assets.num_expr
    return (
        slice(0, b),
        slice(b, b + t),
        slice(b + t, b + t + e),
        slice(b + t + e, b + t + e + 3),
    )


def _flatten(assets: BodyModelAssets, params: BodyParams) -> np.ndarray:
    return np.concatenate(
        [params.beta, params.theta.reshape(-1), params.psi, params.trans]
    ).astype(np.float64)


def _unflatten(assets: BodyModelAssets, x: np.ndarray) -> BodyParams:
    sb, st, se, str_ = _layout(assets)
    return BodyParams(
        beta=x[sb].copy(),
        theta=x[st].reshape(assets.num_joints, 3).copy(),
        psi=x[se].copy(),
        trans=x[str_].copy(),
    )


def _active_mask(assets: BodyModelAssets, names: tuple[str, ...]) -> np.ndarray:
    sb, st, se, str_ = _layout(assets)
    mask = np.zeros(str_.stop, dtype=bool)
    for name in names:
        if name == "beta":
            mask[sb] = True
        elif name.startswith("beta[:") and name.endswith("]"):
            try:
                k = int(name[len("beta[:") : -1])
            except ValueError:
                raise FitError(f"malformed active-parameter descriptor {name!r}")
            if k < 1 or k > assets.num_shape:
                raise FitError(f"{name!r} outside the model's {assets.num_shape} shape modes")
            mask[sb.start : sb.start + k] = True
        elif name == "theta":
            mask[st] = True
        elif name == "psi":
            mask[se] = True
        elif name == "trans":
            mask[str_] = True
        else:
            raise FitError(f"unknown active-parameter descriptor {name!r}")
    return mask


def fit(
    assets: BodyModelAssets,
    spec: LandmarkSpec,
    target_landmarks: np.ndarray,
    schedule: FitSchedule | None = None,
    mask: np.ndarray | None = None,
    init: BodyParams | None = None,
) -> FitReport:
    """Optimize body parameters so spec landmarks match the targets.

    Inactive parameters are never written during a stage, so they stay
    bit-identical. Aborts with stage/step context if the loss goes
    non-finite. The reported loss curve holds the per-landmark mean loss
    evaluated before each step; the final RMSE is over active landmarks.
    """
    if schedule is None:
        schedule = default_schedule()
    schedule.validate()
    targets = np.asarray(target_landmarks, dtype=np.float64)
    if targets.shape != (len(spec), 3):
        raise FitError(f"targets have shape {targets.shape}, expected ({len(spec)}, 3)")
    if not np.isfinite(targets).all():
        raise FitError("targets contain non-finite values")
    if mask is None:
        mask = np.ones(len(spec), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(spec),):
        raise FitError(f"mask has shape {mask.shape}, expected ({len(spec)},)")
    n_active = int(mask.sum())
    if n_active == 0:
        raise FitError("no active landmarks")
    if n_active < 4:
        raise FitError(f"need at least 4 active landmarks, got {n_active}")
    active_targets = targets[mask]
    sv = np.linalg.svd(active_targets - active_targets.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * max(1.0, sv[0]):
        raise FitError("active landmarks are degenerate (collinear or coincident)")
    if init is None:
        init = BodyParams.zeros(assets)
    init.validate(assets)

    sb, st, se, str_ = _layout(assets)
    x = _flatten(assets, init)
    curves: list[tuple[float, ...]] = []
    seconds: list[float] = []
    for si, stage in enumerate(schedule.stages):
        act = _active_mask(assets, stage.active)
        act_theta = act[st]
        t0 = time.perf_counter()
        losses = np.empty(stage.steps)
        m = np.zeros_like(x)
        v = np.zeros_like(x)
        for k in range(stage.steps):
            loss_sum, grad = objective_gradient(
                assets, _unflatten(assets, x), targets, spec, mask
            )
            loss = loss_sum / n_active
            if not np.isfinite(loss):
                raise FitError(f"non-finite loss at stage {si + 1}, step {k + 1}")
            losses[k] = loss
            g = _flatten(assets, grad) / n_active
            if schedule.optimizer == "gd":
                step = stage.lr * g
            else:
                m = schedule.beta1 * m + (1.0 - schedule.beta1) * g
                v = schedule.beta2 * v + (1.0 - schedule.beta2) * g * g
                m_hat = m / (1.0 - schedule.beta1 ** (k + 1))
                v_hat = v / (1.0 - schedule.beta2 ** (k + 1))
                step = stage.lr * m_hat / (np.sqrt(v_hat) + schedule.eps)
            x = np.where(act, x - step, x)
            # keep axis-angle coordinates away from the wraparound plateau
            theta = x[st]
            x[st] = np.where(act_theta, np.clip(theta, -_THETA_CLIP, _THETA_CLIP), theta)
        curves.append(tuple(losses.tolist()))
        seconds.append(time.perf_counter() - t0)

    final = _unflatten(assets, x)
    loss_sum, _ = objective_gradient(assets, final, targets, spec, mask)
    return FitReport(
        params=final,
        stage_losses=tuple(curves),
        stage_seconds=tuple(seconds),
        rmse=float(np.sqrt(loss_sum / n_active)),
    )


def fit_masked_partial(
    assets: BodyModelAssets,
    spec: LandmarkSpec,
    target_landmarks: np.ndarray,
    visibility: np.ndarray,
    schedule: FitSchedule | None = None,
    init: BodyParams | None = None,
) -> FitReport:
    """Fit with a visibility mask over landmarks (partial-input path).

    An all-true mask reduces to plain fit; fewer than 4 visible landmarks
    is an error.
    """
    return fit(assets, spec, target_landmarks, schedule=schedule, mask=visibility, init=init)


def visibility_from_cloud(
    target_landmarks: np.ndarray,
    points: np.ndarray,
    threshold: float = 0.1,
) -> np.ndarray:
    """Mark a landmark visible when its nearest input point is within
    threshold (canonical units). Off by default in the fitting CLI; used
    to drop untrusted predictions on partial inputs."""
    from scipy.spatial import cKDTree

    targets = np.asarray(target_landmarks, dtype=np.float64)
    dist, _ = cKDTree(np.asarray(points, dtype=np.float64)).query(targets)
    return dist <= threshold
