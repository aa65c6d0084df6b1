"""Scale regression: how much to multiply a normalized cloud by to get
back to physical size.

The regressor reuses the point-tokenizer/encoder family, with one extra
learned token prepended to the patch sequence; the encoder output at
that position feeds a small MLP whose result passes through exp, so the
predicted factor is always positive.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .nnblocks import EncoderBlock, build_mlp
from .pointcloud import METRIC, NORMALIZED, PointCloud
from .predictor import _lr_at, group_points
from .tensorfile import read_tensorfile, write_tensorfile

log = logging.getLogger(__name__)

SCALE_VERSION = 1
SCALE_KIND = "scale"


class ScaleError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScaleConfig:
    feature_dim: int = 128
    encoder_blocks: int = 3
    num_patches: int = 64
    patch_neighbors: int = 16
    attention_heads: int = 4
    mlp_hidden_dims: tuple[int, ...] = (128,)

    def validate(self) -> None:
        if self.feature_dim % self.attention_heads != 0:
            raise ScaleError(
                f"feature_dim {self.feature_dim} not divisible by "
                f"attention_heads {self.attention_heads}"
            )
        if self.encoder_blocks < 1:
            raise ScaleError("encoder_blocks must be >= 1")
        if self.num_patches < 1 or self.patch_neighbors < 1:
            raise ScaleError("num_patches and patch_neighbors must be >= 1")


class ScaleRegressor(nn.Module):
    def __init__(self, config: ScaleConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        c = config.feature_dim
        gen = torch.Generator().manual_seed(seed)
        self.point_mlp = build_mlp((3, c, c))
        self.pos_mlp = build_mlp((3, c, c))
        self.scale_token = nn.Parameter(torch.empty(1, c))
        self.encoder = nn.ModuleList(
            EncoderBlock(c, config.attention_heads) for _ in range(config.encoder_blocks)
        )
        self.head_norm = nn.LayerNorm(c)
        self.head = build_mlp((c, *config.mlp_hidden_dims, 1))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "scale_token":
                    p.normal_(0.0, 0.02, generator=gen)
                elif p.dim() > 1:
                    nn.init.xavier_uniform_(p, generator=gen)
                elif name.endswith(".bias"):
                    p.zero_()
                else:
                    p.fill_(1.0)
            # start at exp(0) = 1 for every input; otherwise the exp head
            # turns the usual init spread into predictions orders of
            # magnitude off and the first steps wreck the optimizer state
            self.head[-1].weight.zero_()
            self.head[-1].bias.zero_()

    def forward(self, centers, relative) -> torch.Tensor:
        rel = torch.as_tensor(np.asarray(relative), dtype=torch.float32)
        cen = torch.as_tensor(np.asarray(centers), dtype=torch.float32)
        squeeze = rel.dim() == 3
        if squeeze:
            rel, cen = rel[None], cen[None]
        emb = self.point_mlp(rel).max(dim=-2).values + self.pos_mlp(cen)
        token = self.scale_token[None].expand(emb.shape[0], -1, -1)
        x = torch.cat([token, emb], dim=1)
        for i, block in enumerate(self.encoder):
            x = block(x)
            if not torch.isfinite(x).all():
                raise ScaleError(f"non-finite activations in encoder block {i}")
        out = self.head(self.head_norm(x[:, 0])).squeeze(-1)
        s = torch.exp(out)
        return s[0] if squeeze else s


@dataclass
class ScalePredictorWeights:
    config: ScaleConfig
    model: ScaleRegressor
    step: int = 0
    loss_history: list[float] = field(default_factory=list)


def new_scale_predictor(config: ScaleConfig | None = None, seed: int = 0) -> ScalePredictorWeights:
    config = ScaleConfig() if config is None else config
    return ScalePredictorWeights(config=config, model=ScaleRegressor(config, seed=seed))


def _require_normalized(cloud) -> np.ndarray:
    if not isinstance(cloud, PointCloud) or cloud.scale_state != NORMALIZED:
        raise ScaleError("input is not a normalized cloud: normalize first")
    return cloud.points


# the patch tokenizer subsamples the cloud, so one draw carries its
# sampling quirks straight into the readout; a handful averaged out is
# enough and keeps prediction cheap
TOKENIZER_DRAWS = 4


def predict_scale(cloud: PointCloud, weights: ScalePredictorWeights) -> float:
    pts = _require_normalized(cloud)
    cfg = weights.config
    vals = []
    with torch.no_grad():
        for draw in range(TOKENIZER_DRAWS):
            centers, relative = group_points(pts, cfg.num_patches, cfg.patch_neighbors, seed=draw)
            vals.append(float(weights.model(centers, relative)))
    return float(np.mean(vals))


def restore_scale(cloud: PointCloud, s: float) -> PointCloud:
    """Multiply coordinates by the scale factor and flip to metric."""
    pts = _require_normalized(cloud)
    s = float(s)
    if not np.isfinite(s) or s <= 0.0:
        raise ScaleError(f"scale factor must be positive, got {s}")
    return PointCloud(pts * s, scale_state=METRIC, completeness=cloud.completeness)


def train_scale(
    samples,
    config: ScaleConfig | None = None,
    *,
    lr: float = 5e-5,
    weight_decay: float = 1e-2,
    epochs: int = 1,
    batch_size: int = 16,
    seed: int = 0,
    lr_schedule: str = "constant",
    warmup_steps: int = 0,
    init: ScalePredictorWeights | None = None,
    log_path=None,
) -> ScalePredictorWeights:
    """Regress (normalized cloud -> true scale) pairs.

    Each sample is tokenized under several cached draws and every step
    picks one per sample at random; see TOKENIZER_DRAWS. Samples with
    non-positive target scale are rejected (skipped with a warning),
    never trained on.
    """
    if epochs < 0:
        raise ScaleError("epochs must be >= 0")
    weights = init if init is not None else new_scale_predictor(config, seed=seed)
    cfg = weights.config
    prepared = []
    rejected = 0
    for cloud, s_hat in samples:
        s_hat = float(s_hat)
        if not np.isfinite(s_hat) or s_hat <= 0.0:
            rejected += 1
            continue
        pts = _require_normalized(cloud)
        draws = [
            group_points(pts, cfg.num_patches, cfg.patch_neighbors, seed=d)
            for d in range(TOKENIZER_DRAWS)
        ]
        prepared.append((draws, s_hat))
    if rejected:
        log.warning("rejected %d samples with non-positive scale", rejected)
    if not prepared:
        raise ScaleError("empty training stream")

    model = weights.model
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    log_file = open(log_path, "w") if log_path is not None else None
    step = weights.step
    batches_per_epoch = (len(prepared) + batch_size - 1) // batch_size
    total_steps = epochs * batches_per_epoch
    done = 0
    # reshuffle every epoch; scale streams come sorted by size and fixed
    # mini-batches would then oscillate between size ranges
    order_rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    try:
        for _ in range(epochs):
            order = order_rng.permutation(len(prepared))
            for lo in range(0, len(prepared), batch_size):
                idx = order[lo : lo + batch_size]
                # one cached tokenizer draw per sample per step, so the
                # regressor sees the tokenizer's distribution instead of
                # locking onto a single draw's quirks
                picks = order_rng.integers(TOKENIZER_DRAWS, size=len(idx))
                chunk = [(prepared[j][0][p], prepared[j][1]) for j, p in zip(idx, picks)]
                centers = np.stack([c for (c, _), _ in chunk])
                relative = np.stack([r for (_, r), _ in chunk])
                target = torch.tensor([s for _, s in chunk], dtype=torch.float64)
                step_lr = _lr_at(done, total_steps, lr, lr_schedule, warmup_steps)
                for grp in opt.param_groups:
                    grp["lr"] = step_lr
                pred = model(centers, relative)
                loss = (pred.double() - target).pow(2).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                done += 1
                val = float(loss.detach())
                weights.loss_history.append(val)
                weights.step = step
                if log_file is not None:
                    log_file.write(
                        json.dumps(
                            {
                                "step": step,
                                "loss": val,
                                "lr": step_lr,
                                "wall_time": time.perf_counter() - t0,
                            }
                        )
                        + "\n"
                    )
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    return weights


# ------------------------------------------------------------ persistence


def save_scale_predictor(weights: ScalePredictorWeights, path) -> None:
    meta = {
        "version": SCALE_VERSION,
        "config": asdict(weights.config),
        "step": weights.step,
        "loss_history": [float(v) for v in weights.loss_history],
    }
    tensors = {
        name: t.detach().cpu().numpy().astype("<f4")
        for name, t in weights.model.state_dict().items()
    }
    write_tensorfile(path, SCALE_KIND, meta, tensors)


def load_scale_predictor(path) -> ScalePredictorWeights:
    kind, meta, tensors = read_tensorfile(path)
    if kind != SCALE_KIND:
        raise ScaleError(f"{path}: kind {kind!r}, expected {SCALE_KIND!r}")
    if "version" not in meta:
        raise ScaleError(f"{path}: version field missing")
    cfg_dict = dict(meta["config"])
    cfg_dict["mlp_hidden_dims"] = tuple(cfg_dict["mlp_hidden_dims"])
    config = ScaleConfig(**cfg_dict)
    model = ScaleRegressor(config)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()}
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise ScaleError(f"{path}: {e}") from e
    return ScalePredictorWeights(
        config=config,
        model=model,
        step=int(meta["step"]),
        loss_history=[float(v) for v in meta.get("loss_history", [])],
    )
