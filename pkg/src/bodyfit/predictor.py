"""Landmark predictor: point tokenizer, encoder, and query-based decoder.

A fixed set of learned query vectors cross-attends to encoded point
patches and is regressed to 3D landmark coordinates. Predictions are
absolute coordinates in the input frame, so the network is agnostic to
the input point count (the tokenizer always produces `num_patches`
tokens).
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from .nnblocks import EncoderBlock, MultiHeadAttention, build_mlp
from .pointcloud import PointCloud, farthest_point_indices
from .tensorfile import read_tensorfile, write_tensorfile

CHECKPOINT_VERSION = 1
CHECKPOINT_KIND = "predictor"


class PredictorError(RuntimeError):
    pass


@dataclass(frozen=True)
class PredictorConfig:
    """Architecture hyperparameters. Defaults are the desk-scale setup."""

    num_landmarks: int = 600
    feature_dim: int = 128
    encoder_blocks: int = 4
    decoder_blocks: int = 4
    num_patches: int = 64
    patch_neighbors: int = 16
    attention_heads: int = 4
    mlp_hidden_dims: tuple[int, ...] = (128, 128)

    def validate(self) -> None:
        if self.num_landmarks < 1:
            raise PredictorError("num_landmarks must be >= 1")
        if self.feature_dim % self.attention_heads != 0:
            raise PredictorError(
                f"feature_dim {self.feature_dim} not divisible by "
                f"attention_heads {self.attention_heads}"
            )
        if self.decoder_blocks < 1:
            raise PredictorError("decoder_blocks must be >= 1")
        if self.encoder_blocks < 0:
            raise PredictorError("encoder_blocks must be >= 0")
        if self.num_patches < 1 or self.patch_neighbors < 1:
            raise PredictorError("num_patches and patch_neighbors must be >= 1")


# ------------------------------------------------------------ tokenizer


def group_points(points, num_patches: int, num_neighbors: int, seed: int = 0):
    """Weight-free half of tokenization: FPS centers + kNN neighborhoods.

    Returns (centers: g x 3, relative: g x k x 3) in float64. Split off
    from the embedding so training loops can cache it per sample.
    """
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise PredictorError(f"points have shape {pts.shape}, expected (N, 3)")
    n = pts.shape[0]
    if n < num_patches:
        raise PredictorError(
            f"{n} points but {num_patches} patches requested: "
            "upsample the cloud or reduce num_patches"
        )
    if n < num_neighbors:
        raise PredictorError(
            f"{n} points but patch_neighbors={num_neighbors}: "
            "upsample the cloud or reduce patch_neighbors"
        )
    idx = farthest_point_indices(pts, num_patches, seed=seed)
    centers = pts[idx]
    _, nidx = cKDTree(pts).query(centers, k=num_neighbors)
    nidx = np.atleast_2d(nidx).reshape(num_patches, num_neighbors)
    relative = pts[nidx] - centers[:, None, :]
    return centers, relative


class DecoderLayer(nn.Module):
    """Residual cross-attention onto point features, then residual
    self-attention. No feed-forward tail here by design.

    `image_branch` stays None on the base model; an adapter can install
    a parallel cross-attention branch whose output joins the same
    residual as the point branch.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.query_norm = nn.LayerNorm(dim)
        self.kv_norm = nn.LayerNorm(dim)
        self.cross = MultiHeadAttention(dim, heads)
        self.self_norm = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.image_branch: nn.Module | None = None

    def forward(self, x, point_feats, image_feats=None):
        q = self.query_norm(x)
        delta, maps = self.cross(q, self.kv_norm(point_feats))
        if image_feats is not None:
            if self.image_branch is None:
                raise PredictorError("image features supplied but no adapter attached")
            extra, _ = self.image_branch(q, image_feats)
            delta = delta + extra
        x = x + delta
        h = self.self_norm(x)
        s, _ = self.self_attn(h, h)
        return x + s, maps


class LandmarkPredictor(nn.Module):
    def __init__(self, config: PredictorConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        c = config.feature_dim
        gen = torch.Generator().manual_seed(seed)
        self.point_mlp = build_mlp((3, c, c))
        self.pos_mlp = build_mlp((3, c, c))
        self.encoder = nn.ModuleList(
            EncoderBlock(c, config.attention_heads) for _ in range(config.encoder_blocks)
        )
        self.queries = nn.Parameter(torch.empty(config.num_landmarks, c))
        self.decoder = nn.ModuleList(
            DecoderLayer(c, config.attention_heads) for _ in range(config.decoder_blocks)
        )
        self.head_norm = nn.LayerNorm(c)
        self.head = build_mlp((c, *config.mlp_hidden_dims, 3))
        # reseed all parameters from one generator for reproducible init
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "queries":
                    p.normal_(0.0, 0.02, generator=gen)
                elif p.dim() > 1:
                    nn.init.xavier_uniform_(p, generator=gen)
                elif name.endswith(".bias"):
                    p.zero_()
                else:
                    p.fill_(1.0)  # layer-norm scales

    def embed_patches(self, centers, relative) -> torch.Tensor:
        """Differentiable half of tokenization: shared per-point MLP,
        max-pool over the neighborhood, plus a positional embedding of
        the patch center. Accepts (g,k,3)/(g,3) or batched (b,g,k,3)."""
        rel = torch.as_tensor(np.asarray(relative), dtype=torch.float32)
        cen = torch.as_tensor(np.asarray(centers), dtype=torch.float32)
        per_point = self.point_mlp(rel)
        pooled = per_point.max(dim=-2).values
        return pooled + self.pos_mlp(cen)

    def encode(self, embeddings: torch.Tensor) -> torch.Tensor:
        squeeze = embeddings.dim() == 2
        x = embeddings[None] if squeeze else embeddings
        for i, block in enumerate(self.encoder):
            x = block(x)
            if not torch.isfinite(x).all():
                raise PredictorError(f"non-finite activations in encoder block {i}")
        return x[0] if squeeze else x

    def decode(self, point_feats: torch.Tensor, image_feats=None):
        squeeze = point_feats.dim() == 2
        if squeeze:
            point_feats = point_feats[None]
        b = point_feats.shape[0]
        x = self.queries[None].expand(b, -1, -1)
        attn_maps = []
        for layer in self.decoder:
            x, maps = layer(x, point_feats, image_feats)
            attn_maps.append(maps)
        coords = self.head(self.head_norm(x))
        if squeeze:
            coords = coords[0]
            attn_maps = [m[0] for m in attn_maps]
        return coords, attn_maps

    def forward(self, centers, relative, image_feats=None):
        feats = self.encode(self.embed_patches(centers, relative))
        return self.decode(feats, image_feats)


# ------------------------------------------------------------ checkpoint


@dataclass
class PredictorCheckpoint:
    config: PredictorConfig
    model: LandmarkPredictor
    step: int = 0
    loss_history: list[float] = field(default_factory=list)
    frame: str = "metric"  # coordinate frame the targets were expressed in
    adapter: object | None = None  # set by attach(), never serialized here


def new_checkpoint(config: PredictorConfig | None = None, seed: int = 0) -> PredictorCheckpoint:
    config = PredictorConfig() if config is None else config
    return PredictorCheckpoint(config=config, model=LandmarkPredictor(config, seed=seed))


def _base_tensors(model: nn.Module) -> dict[str, torch.Tensor]:
    return {
        name: t for name, t in model.state_dict().items() if "image_branch" not in name
    }


def checkpoint_fingerprint(ckpt: PredictorCheckpoint) -> str:
    """SHA-256 over the base model tensors, adapter branches excluded."""
    h = hashlib.sha256()
    for name, t in sorted(_base_tensors(ckpt.model).items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(ckpt: PredictorCheckpoint, path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(ckpt.config),
        "step": ckpt.step,
        "loss_history": [float(v) for v in ckpt.loss_history],
        "frame": ckpt.frame,
    }
    tensors = {
        name: t.detach().cpu().numpy().astype("<f4")
        for name, t in _base_tensors(ckpt.model).items()
    }
    write_tensorfile(path, CHECKPOINT_KIND, meta, tensors)


def load_checkpoint(path) -> PredictorCheckpoint:
    kind, meta, tensors = read_tensorfile(path)
    if kind != CHECKPOINT_KIND:
        raise PredictorError(f"{path}: kind {kind!r}, expected {CHECKPOINT_KIND!r}")
    if "version" not in meta:
        raise PredictorError(f"{path}: checkpoint version field missing")
    cfg_dict = dict(meta["config"])
    cfg_dict["mlp_hidden_dims"] = tuple(cfg_dict["mlp_hidden_dims"])
    config = PredictorConfig(**cfg_dict)
    model = LandmarkPredictor(config)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()}
    missing = set(_base_tensors(model)) - set(state)
    if missing:
        raise PredictorError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict(state)
    return PredictorCheckpoint(
        config=config,
        model=model,
        step=int(meta["step"]),
        loss_history=[float(v) for v in meta.get("loss_history", [])],
        frame=meta.get("frame", "metric"),
    )


# ------------------------------------------------------------ functional ops


def tokenize_points(points, ckpt: PredictorCheckpoint, seed: int = 0):
    """FPS + kNN + embedding; returns (embeddings g x c, centers g x 3)."""
    cfg = ckpt.config
    centers, relative = group_points(points, cfg.num_patches, cfg.patch_neighbors, seed=seed)
    with torch.no_grad():
        emb = ckpt.model.embed_patches(centers, relative)
    return emb, centers


def encode_points(embeddings, ckpt: PredictorCheckpoint) -> torch.Tensor:
    with torch.no_grad():
        return ckpt.model.encode(torch.as_tensor(embeddings, dtype=torch.float32))


def decode_landmarks(point_feats, ckpt: PredictorCheckpoint, image_feats=None):
    with torch.no_grad():
        return ckpt.model.decode(
            torch.as_tensor(point_feats, dtype=torch.float32), image_feats
        )


def predict(points, ckpt: PredictorCheckpoint, image=None) -> np.ndarray:
    """Full pipeline on one cloud; returns landmarks as float64 (M, 3)."""
    image_feats = None
    if image is not None:
        if ckpt.adapter is None:
            raise PredictorError("image supplied but no adapter attached")
        image_feats = ckpt.adapter.image_tokens(image)
    emb, _ = tokenize_points(points, ckpt)
    feats = encode_points(emb, ckpt)
    coords, _ = decode_landmarks(feats, ckpt, image_feats)
    return coords.detach().cpu().numpy().astype(np.float64)


# ------------------------------------------------------------ training


def landmark_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over landmarks (and batch) of squared landmark offsets,
    accumulated in float64."""
    diff = pred.double() - target.double()
    return diff.pow(2).sum(dim=-1).mean()


def _prepare_samples(samples, cfg: PredictorConfig):
    # tokenization uses the canonical FPS seed (0), matching predict()
    prepared = []
    for item in samples:
        points, targets = item[0], item[1]
        image = item[2] if len(item) > 2 else None
        tgt = np.asarray(targets, dtype=np.float64)
        if tgt.shape != (cfg.num_landmarks, 3):
            raise PredictorError(
                f"targets have shape {tgt.shape}, expected ({cfg.num_landmarks}, 3)"
            )
        if not np.isfinite(tgt).all():
            raise PredictorError("targets contain non-finite values")
        centers, relative = group_points(points, cfg.num_patches, cfg.patch_neighbors, seed=0)
        prepared.append((centers, relative, tgt, image))
    if not prepared:
        raise PredictorError("empty training stream")
    return prepared


def _lr_at(step: int, total: int, peak: float, schedule: str, warmup: int) -> float:
    if schedule == "constant":
        return peak
    if schedule != "cosine":
        raise PredictorError(f"unknown lr schedule {schedule!r}")
    if warmup > 0 and step < warmup:
        return peak * (step + 1) / warmup
    if total <= warmup:
        return peak
    frac = (step - warmup) / (total - warmup)
    # cosine decay to 10% of peak
    return peak * (0.1 + 0.9 * 0.5 * (1.0 + np.cos(np.pi * min(frac, 1.0))))


def train(
    samples,
    config: PredictorConfig | None = None,
    *,
    lr: float = 5e-5,
    weight_decay: float = 1e-2,
    epochs: int = 1,
    batch_size: int = 8,
    seed: int = 0,
    lr_schedule: str = "constant",
    warmup_steps: int = 0,
    init: PredictorCheckpoint | None = None,
    log_path=None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
) -> PredictorCheckpoint:
    """Fit the predictor to (points, targets[, image]) samples.

    The stream is materialized up front (desk scale) so shapes can be
    validated before any gradient step and grouping can be cached per
    sample. Images are ignored here; the image branch trains separately
    with the base frozen. epochs=0 returns the initialized checkpoint
    without stepping.
    """
    if epochs < 0:
        raise PredictorError("epochs must be >= 0")
    if init is not None and config is not None and init.config != config:
        raise PredictorError("init checkpoint config differs from requested config")
    ckpt = init if init is not None else new_checkpoint(config, seed=seed)
    cfg = ckpt.config
    prepared = _prepare_samples(samples, cfg)

    model = ckpt.model
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    batches_per_epoch = (len(prepared) + batch_size - 1) // batch_size
    total_steps = epochs * batches_per_epoch
    log_file = open(log_path, "w") if log_path is not None else None
    step = ckpt.step
    local_step = 0
    # reshuffle every epoch: manifests often arrive sorted (by size, by
    # subject), and fixed sorted mini-batches make the optimizer oscillate
    order_rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    try:
        for _ in range(epochs):
            order = order_rng.permutation(len(prepared))
            for lo in range(0, len(prepared), batch_size):
                cur_lr = _lr_at(local_step, total_steps, lr, lr_schedule, warmup_steps)
                for group in opt.param_groups:
                    group["lr"] = cur_lr
                chunk = [prepared[j] for j in order[lo : lo + batch_size]]
                centers = np.stack([c for c, _, _, _ in chunk])
                relative = np.stack([r for _, r, _, _ in chunk])
                targets = torch.from_numpy(np.stack([t for _, _, t, _ in chunk]))
                pred, _ = model(centers, relative)
                loss = landmark_loss(pred, targets)
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                local_step += 1
                val = float(loss.detach())
                ckpt.loss_history.append(val)
                if log_file is not None:
                    log_file.write(
                        json.dumps(
                            {
                                "step": step,
                                "loss": val,
                                "lr": cur_lr,
                                "wall_time": time.perf_counter() - t0,
                            }
                        )
                        + "\n"
                    )
                ckpt.step = step
                if (
                    checkpoint_path is not None
                    and checkpoint_every > 0
                    and step % checkpoint_every == 0
                ):
                    save_checkpoint(ckpt, checkpoint_path)
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    ckpt.step = step
    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt
