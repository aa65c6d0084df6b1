"""Optional image branch for the landmark decoder.

Each decoder layer gets a parallel cross-attention onto image tokens;
the branch output projections start at zero, so attaching a fresh
adapter never changes predictions. The base predictor stays frozen
during adapter training, which is enforced by fingerprint comparison.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .nnblocks import MultiHeadAttention
from .predictor import (
    PredictorCheckpoint,
    PredictorError,
    checkpoint_fingerprint,
    group_points,
    landmark_loss,
)
from .tensorfile import read_tensorfile, write_tensorfile

ADAPTER_VERSION = 1
ADAPTER_KIND = "adapter"


class AdapterError(RuntimeError):
    pass


@dataclass
class ImageFeatures:
    tokens: torch.Tensor  # (p, c_img) float32
    source_id: str

    def validate(self) -> None:
        if self.tokens.dim() != 2 or self.tokens.shape[0] < 1:
            raise AdapterError(f"tokens have shape {tuple(self.tokens.shape)}")
        if not torch.isfinite(self.tokens).all():
            raise AdapterError("image tokens contain non-finite values")


def _image_patches(image, patch_size: int) -> np.ndarray:
    """Weight-free patching: (H, W, 3) in [0,1] -> (p, patch_size^2*3)."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise AdapterError(f"image has shape {img.shape}, expected (H, W, 3)")
    h, w, _ = img.shape
    if h % patch_size or w % patch_size:
        raise AdapterError(
            f"image {h}x{w} not divisible by patch size {patch_size}: resize first"
        )
    if img.min() < -1e-6 or img.max() > 1.0 + 1e-6:
        raise AdapterError("image values must lie in [0, 1]")
    gh, gw = h // patch_size, w // patch_size
    patches = (
        img.reshape(gh, patch_size, gw, patch_size, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, patch_size * patch_size * 3)
    )
    return patches


class PatchImageProvider(nn.Module):
    """Desk-scale image encoder: non-overlapping patches through one
    linear projection. Pretrained encoders plug in behind the same
    extract contract."""

    source_id = "patch-linear"

    def __init__(self, patch_size: int = 16, out_dim: int = 64, seed: int = 0):
        super().__init__()
        self.patch_size = patch_size
        self.out_dim = out_dim
        self.proj = nn.Linear(patch_size * patch_size * 3, out_dim)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            nn.init.xavier_uniform_(self.proj.weight, generator=gen)
            self.proj.bias.zero_()

    def forward(self, image) -> torch.Tensor:
        patches = torch.from_numpy(_image_patches(image, self.patch_size))
        return self.proj(patches)


def extract_image_features(image, provider: PatchImageProvider) -> ImageFeatures:
    with torch.no_grad():
        tokens = provider(image)
    feats = ImageFeatures(tokens=tokens, source_id=provider.source_id)
    feats.validate()
    return feats


class AdapterBranch(nn.Module):
    """One per decoder layer: cross-attention from landmark queries onto
    image tokens, output projection zero-initialized."""

    def __init__(self, dim: int, heads: int, image_dim: int, seed: int = 0):
        super().__init__()
        self.kv_norm = nn.LayerNorm(image_dim)
        self.attn = MultiHeadAttention(dim, heads, kv_dim=image_dim)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.attn.named_parameters():
                if name.startswith("out_proj"):
                    p.zero_()
                elif p.dim() > 1:
                    nn.init.xavier_uniform_(p, generator=gen)
                else:
                    p.zero_()
            self.kv_norm.weight.fill_(1.0)

    def forward(self, query_normed, image_feats):
        return self.attn(query_normed, self.kv_norm(image_feats))


class AdapterWeights:
    """Provider + per-layer branches, tied to one base checkpoint."""

    def __init__(
        self,
        branches: nn.ModuleList,
        provider: PatchImageProvider,
        base_fingerprint: str | None = None,
    ):
        self.branches = branches
        self.provider = provider
        self.base_fingerprint = base_fingerprint

    def image_tokens(self, image) -> torch.Tensor:
        """(1, p, c_img) tokens for decoder consumption."""
        feats = extract_image_features(image, self.provider)
        return feats.tokens[None]

    def parameters(self):
        yield from self.branches.parameters()
        yield from self.provider.parameters()

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"provider.{k}": v for k, v in self.provider.state_dict().items()}
        out.update({f"branches.{k}": v for k, v in self.branches.state_dict().items()})
        return out


def new_adapter(
    base: PredictorCheckpoint,
    image_dim: int = 64,
    patch_size: int = 16,
    seed: int = 0,
) -> AdapterWeights:
    cfg = base.config
    branches = nn.ModuleList(
        AdapterBranch(cfg.feature_dim, cfg.attention_heads, image_dim, seed=seed + i)
        for i in range(cfg.decoder_blocks)
    )
    provider = PatchImageProvider(patch_size=patch_size, out_dim=image_dim, seed=seed)
    return AdapterWeights(branches, provider, base_fingerprint=checkpoint_fingerprint(base))


def attach(base: PredictorCheckpoint, adapter: AdapterWeights) -> PredictorCheckpoint:
    """Install the image branches on the base decoder (in place).

    The base is returned for chaining; its own tensors are untouched,
    which is verified by fingerprint.
    """
    if base.adapter is not None:
        raise AdapterError("adapter already attached; detach first")
    layers = base.model.decoder
    if len(adapter.branches) != len(layers):
        raise AdapterError(
            f"adapter has {len(adapter.branches)} branches, "
            f"base decoder has {len(layers)} layers"
        )
    if (
        adapter.base_fingerprint is not None
        and adapter.base_fingerprint != checkpoint_fingerprint(base)
    ):
        raise AdapterError("adapter was built for a different base checkpoint")
    before = checkpoint_fingerprint(base)
    for layer, branch in zip(layers, adapter.branches):
        layer.image_branch = branch
    base.adapter = adapter
    if checkpoint_fingerprint(base) != before:
        raise AdapterError("attach mutated base tensors")  # defensive; unreachable
    return base


def detach(base: PredictorCheckpoint) -> PredictorCheckpoint:
    if base.adapter is None:
        raise AdapterError("no adapter attached")
    for layer in base.model.decoder:
        layer.image_branch = None
    base.adapter = None
    return base


# ------------------------------------------------------------ training


def train_adapter(
    base: PredictorCheckpoint,
    samples,
    *,
    adapter: AdapterWeights | None = None,
    lr: float = 5e-5,
    weight_decay: float = 1e-2,
    epochs: int = 1,
    batch_size: int = 8,
    seed: int = 0,
    image_dim: int = 64,
    patch_size: int = 16,
    log_path=None,
) -> AdapterWeights:
    """Optimize only the image branch against (points, targets, image)
    samples; the base predictor is frozen throughout."""
    if epochs < 0:
        raise AdapterError("epochs must be >= 0")
    cfg = base.config
    prepared = []
    for item in samples:
        if len(item) < 3 or item[2] is None:
            raise AdapterError("training stream lacks images")
        points, targets, image = item[0], item[1], item[2]
        tgt = np.asarray(targets, dtype=np.float64)
        if tgt.shape != (cfg.num_landmarks, 3):
            raise AdapterError(
                f"targets have shape {tgt.shape}, expected ({cfg.num_landmarks}, 3)"
            )
        centers, relative = group_points(points, cfg.num_patches, cfg.patch_neighbors, seed=0)
        if adapter is None:
            patches = _image_patches(image, patch_size)
        else:
            patches = _image_patches(image, adapter.provider.patch_size)
        prepared.append((centers, relative, tgt, patches))
    if not prepared:
        raise AdapterError("empty training stream")

    fingerprint_before = checkpoint_fingerprint(base)
    if adapter is None:
        adapter = new_adapter(base, image_dim=image_dim, patch_size=patch_size, seed=seed)
    attach(base, adapter)
    model = base.model
    base_params = []
    adapter_ids = {id(p) for p in adapter.parameters()}
    for p in model.parameters():
        if id(p) not in adapter_ids:
            base_params.append(p)
            p.requires_grad_(False)
    opt = torch.optim.AdamW(list(adapter.parameters()), lr=lr, weight_decay=weight_decay)
    log_file = open(log_path, "w") if log_path is not None else None
    step = 0
    # same epoch reshuffle as the base trainer; sorted streams otherwise
    # pin each mini-batch to one slice of the data
    order_rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    try:
        for _ in range(epochs):
            order = order_rng.permutation(len(prepared))
            for lo in range(0, len(prepared), batch_size):
                chunk = [prepared[j] for j in order[lo : lo + batch_size]]
                centers = np.stack([c for c, _, _, _ in chunk])
                relative = np.stack([r for _, r, _, _ in chunk])
                targets = torch.from_numpy(np.stack([t for _, _, t, _ in chunk]))
                patch_batch = torch.from_numpy(np.stack([p for _, _, _, p in chunk]))
                image_feats = adapter.provider.proj(patch_batch)
                pred, _ = model(centers, relative, image_feats)
                loss = landmark_loss(pred, targets)
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                if log_file is not None:
                    log_file.write(
                        json.dumps(
                            {
                                "step": step,
                                "loss": float(loss.detach()),
                                "lr": lr,
                                "wall_time": time.perf_counter() - t0,
                            }
                        )
                        + "\n"
                    )
    finally:
        if log_file is not None:
            log_file.close()
        for p in base_params:
            p.requires_grad_(True)
        detach(base)
    if checkpoint_fingerprint(base) != fingerprint_before:
        raise AdapterError("adapter training mutated the base checkpoint")
    return adapter


# ------------------------------------------------------------ persistence


def save_adapter(adapter: AdapterWeights, path) -> None:
    first = adapter.branches[0].attn
    meta = {
        "version": ADAPTER_VERSION,
        "num_layers": len(adapter.branches),
        "feature_dim": first.q_proj.in_features,
        "attention_heads": first.heads,
        "image_dim": first.k_proj.in_features,
        "patch_size": adapter.provider.patch_size,
        "source_id": adapter.provider.source_id,
        "base_fingerprint": adapter.base_fingerprint,
    }
    tensors = {
        name: t.detach().cpu().numpy().astype("<f4")
        for name, t in adapter.state_tensors().items()
    }
    write_tensorfile(path, ADAPTER_KIND, meta, tensors)


def load_adapter(path) -> AdapterWeights:
    kind, meta, tensors = read_tensorfile(path)
    if kind != ADAPTER_KIND:
        raise AdapterError(f"{path}: kind {kind!r}, expected {ADAPTER_KIND!r}")
    if "version" not in meta:
        raise AdapterError(f"{path}: version field missing")
    branches = nn.ModuleList(
        AdapterBranch(meta["feature_dim"], meta["attention_heads"], meta["image_dim"])
        for _ in range(meta["num_layers"])
    )
    provider = PatchImageProvider(patch_size=meta["patch_size"], out_dim=meta["image_dim"])
    branch_state = {}
    provider_state = {}
    for name, arr in tensors.items():
        t = torch.from_numpy(arr.copy())
        if name.startswith("branches."):
            branch_state[name[len("branches."):]] = t
        elif name.startswith("provider."):
            provider_state[name[len("provider."):]] = t
        else:
            raise AdapterError(f"{path}: unexpected tensor {name!r}")
    try:
        branches.load_state_dict(branch_state)
        provider.load_state_dict(provider_state)
    except RuntimeError as e:
        raise AdapterError(f"{path}: {e}") from e
    return AdapterWeights(branches, provider, base_fingerprint=meta.get("base_fingerprint"))
