"""Masked autoencoder pretraining: random patch masking, light decoder, masked MSE."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .train import Task, TrainConfig, TrainResult, pick_batch, train
from .vit import CHECKPOINT_VERSION, Block, ViTConfig, ViTEncoder, block_name, check_finite, init_weights
from .volume import Volume, patchify_tensor, unpatchify_tensor, write_volume


@dataclass(frozen=True)
class MaskPlan:
    visible: np.ndarray
    masked: np.ndarray
    ratio: float

    @property
    def n(self) -> int:
        return len(self.visible) + len(self.masked)


def n_masked(n: int, ratio: float) -> int:
    # round half up, so n=4, ratio=0.625 masks 3 rather than banker's 2
    return int(math.floor(ratio * n + 0.5))


def sample_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Mask a uniformly random subset of exactly ``round(ratio * n)`` patches."""
    k = n_masked(n, ratio)
    if not 1 <= k <= n - 1:
        raise ConfigError(f"ratio {ratio} masks {k} of {n} patches; need at least one masked and one visible")
    perm = rng.permutation(n)
    return MaskPlan(np.sort(perm[k:]), np.sort(perm[:k]), ratio)


@dataclass(frozen=True)
class MAEDecoderConfig:
    num_layers: int = 8
    embed_dim: int = 96
    num_heads: int = 4
    mlp_ratio: float = 4.0
    norm_pix_loss: bool = False
    project: bool = True

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"decoder embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")


class MAEDecoder(nn.Module):
    def __init__(self, config: MAEDecoderConfig, vit: ViTConfig):
        super().__init__()
        self.config = config
        if config.project:
            self.embed = nn.Linear(vit.embed_dim, config.embed_dim)
        elif vit.embed_dim == config.embed_dim:
            self.embed = nn.Identity()
        else:
            raise ConfigError(
                f"encoder width {vit.embed_dim} != decoder width {config.embed_dim} and projection disabled"
            )
        self.mask_token = nn.Parameter(torch.zeros(config.embed_dim))
        self.pos = nn.Parameter(torch.zeros(vit.n_patches, config.embed_dim))
        for i in range(1, config.num_layers + 1):
            self.add_module(block_name(i), Block(config.embed_dim, config.num_heads, config.mlp_ratio))
        self.norm = nn.LayerNorm(config.embed_dim)
        self.pred = nn.Linear(config.embed_dim, vit.patch_dim)
        init_weights(self)
        nn.init.normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.pos, std=0.02)

    @property
    def blocks(self):
        return [getattr(self, block_name(i)) for i in range(1, self.config.num_layers + 1)]

    def assemble(self, visible_tokens: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
        """Decoder input: projected encoder output at visible slots, mask token elsewhere."""
        b = visible_tokens.shape[0]
        x = self.mask_token.expand(b, plan.n, -1).clone()
        x[:, torch.as_tensor(plan.visible)] = self.embed(visible_tokens)
        return x + self.pos

    def forward(self, visible_tokens, plan: MaskPlan) -> torch.Tensor:
        x = self.assemble(visible_tokens, plan)
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            check_finite(x, f"decoder layer {i}")
        return self.pred(self.norm(x))


class MaskedAutoencoder(nn.Module):
    def __init__(self, vit: ViTConfig, decoder: MAEDecoderConfig | None = None):
        super().__init__()
        self.encoder = ViTEncoder(vit)
        self.decoder = MAEDecoder(decoder or MAEDecoderConfig(), vit)

    @property
    def vit_config(self) -> ViTConfig:
        return self.encoder.config


@dataclass
class MAEOutput:
    reconstruction: torch.Tensor  # (B, N, p^3)
    target: torch.Tensor
    loss: torch.Tensor


def masked_mse(reconstruction: torch.Tensor, target: torch.Tensor, masked) -> torch.Tensor:
    """Mean squared error over the pixels of masked patches only."""
    idx = torch.as_tensor(np.asarray(masked), dtype=torch.long)
    return ((reconstruction[:, idx] - target[:, idx]) ** 2).mean()


def patch_targets(patches: torch.Tensor, normalize: bool) -> torch.Tensor:
    if not normalize:
        return patches
    mean = patches.mean(dim=-1, keepdim=True)
    var = patches.var(dim=-1, keepdim=True)
    return (patches - mean) / (var + 1e-6).sqrt()


def mae_forward(model: MaskedAutoencoder, images: torch.Tensor, plan: MaskPlan) -> MAEOutput:
    """Encode visible patches, decode all positions, score masked patches.

    ``images`` is a (B, X, Y, Z) batch of normalized volumes.
    """
    cfg = model.vit_config
    patches = patchify_tensor(images, cfg.patch_size)
    if plan.n != patches.shape[1]:
        raise ShapeError(f"mask plan covers {plan.n} patches, images have {patches.shape[1]}")
    enc = model.encoder(patches, keep_indices=torch.as_tensor(plan.visible))
    rec = model.decoder(enc.final, plan)
    target = patch_targets(patches, model.decoder.config.norm_pix_loss)
    return MAEOutput(rec, target, masked_mse(rec, target, plan.masked))


@torch.no_grad()
def reconstruct_volume(model: MaskedAutoencoder, image: Volume, plan: MaskPlan) -> Volume:
    """Composite volume: decoder output on masked patches, original voxels elsewhere.

    With normalized targets the decoder predicts standardized patches, so they
    are mapped back using each original patch's mean and spread.
    """
    x = torch.as_tensor(image.data, dtype=torch.float32)[None]
    out = mae_forward(model, x, plan)
    p = model.vit_config.patch_size
    patches = patchify_tensor(x, p)
    rec = out.reconstruction
    if model.decoder.config.norm_pix_loss:
        mean = patches.mean(dim=-1, keepdim=True)
        std = (patches.var(dim=-1, keepdim=True) + 1e-6).sqrt()
        rec = rec * std + mean
    composite = patches.clone()
    idx = torch.as_tensor(plan.masked)
    composite[:, idx] = rec[:, idx]
    grid = model.vit_config.grid_shape
    return image.replace(data=unpatchify_tensor(composite, grid, p)[0].numpy())


class PretrainTask(Task):
    def __init__(self, model: MaskedAutoencoder, images: np.ndarray, batch_size: int = 2, mask_ratio: float = 0.75):
        if len(images) == 0:
            raise ConfigError("pretraining needs at least one volume")
        self.model = model
        self.images = torch.as_tensor(images, dtype=torch.float32)
        self.batch_size = batch_size
        self.mask_ratio = mask_ratio
        self.num_layers = model.vit_config.num_layers

    def loss(self, rng, step):
        idx = pick_batch(rng, len(self.images), self.batch_size)
        plan = sample_mask(self.model.vit_config.n_patches, self.mask_ratio, rng)
        return mae_forward(self.model, self.images[idx], plan).loss


def pretrain(model: MaskedAutoencoder, images: np.ndarray, config: TrainConfig, mask_ratio: float = 0.75,
             out_dir=None, resume=None, snapshot_every: int = 0, stop_after=None) -> TrainResult:
    """MAE pretraining on a stack of normalized volumes (n, X, Y, Z).

    With ``out_dir`` and ``snapshot_every`` a composite reconstruction of the
    first volume is written every ``snapshot_every`` steps as ``.vol`` files.
    """
    task = PretrainTask(model, images, config.batch_size, mask_ratio)
    on_step = None
    if out_dir is not None and snapshot_every:
        snap_rng = np.random.default_rng(config.seed + 1)
        snap_plan = sample_mask(model.vit_config.n_patches, mask_ratio, snap_rng)
        first = Volume(np.asarray(images[0]))

        def on_step(step, opt, lr):
            if (step + 1) % snapshot_every == 0:
                recon = reconstruct_volume(model, first, snap_plan)
                write_volume(Path(out_dir) / "snapshots" / f"recon_{step + 1:06d}", recon)

    result = train(config, task, out_dir=out_dir, resume=resume, on_step=on_step, stop_after=stop_after)
    if out_dir is not None:
        save_mae(Path(out_dir) / "mae.pt", model)
    return result


def save_mae(path, model: MaskedAutoencoder):
    torch.save({
        "format": "maeseg-mae",
        "version": CHECKPOINT_VERSION,
        "vit_config": model.vit_config.to_dict(),
        "decoder_config": asdict(model.decoder.config),
        "params": model.state_dict(),
    }, path)


def load_mae(path) -> MaskedAutoencoder:
    state = torch.load(path, weights_only=True)
    if state.get("format") != "maeseg-mae":
        raise ConfigError(f"{path} is not an MAE checkpoint")
    model = MaskedAutoencoder(ViTConfig(**state["vit_config"]), MAEDecoderConfig(**state["decoder_config"]))
    model.load_state_dict(state["params"])
    return model
