"""UNETR segmentation head on top of the ViT encoder, plus the Dice + CE loss."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import augment, sample_valid_plan
from .errors import ConfigError, ShapeError
from .train import Task, TrainConfig, TrainResult, pick_batch, train
from .vit import CHECKPOINT_VERSION, ViTConfig, ViTEncoder
from .volume import Volume, patchify_tensor

DICE_EPS = 1e-5
SKIPS = ("z0", "z3", "z6", "z9", "z12")


def reshape_tokens(tokens: torch.Tensor, grid_shape) -> torch.Tensor:
    """(B, N, C) tokens in z-slowest order -> (B, C, gx, gy, gz) feature grid."""
    b, n, c = tokens.shape
    gx, gy, gz = (int(g) for g in grid_shape)
    if n != gx * gy * gz:
        raise ShapeError(f"{n} tokens cannot be laid out on a {gx}x{gy}x{gz} grid")
    return tokens.reshape(b, gz, gy, gx, c).permute(0, 4, 3, 2, 1)


def flatten_grid(grid: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`reshape_tokens`."""
    b, c = grid.shape[:2]
    return grid.permute(0, 4, 3, 2, 1).reshape(b, -1, c)


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, kernel=3):
        super().__init__(
            nn.Conv3d(cin, cout, kernel, padding=kernel // 2, bias=False),
            nn.InstanceNorm3d(cout, affine=True),
            nn.LeakyReLU(0.01),
        )


class UpBlock(nn.Sequential):
    """Transposed-conv x2 upsampling followed by a conv block."""

    def __init__(self, cin, cout):
        super().__init__(nn.ConvTranspose3d(cin, cout, 2, stride=2), ConvBlock(cout, cout))


class Stage(nn.Module):
    """Upsample the deeper features, concatenate the skip, fuse with a conv block."""

    def __init__(self, cin, cout):
        super().__init__()
        self.up = nn.ConvTranspose3d(cin, cout, 2, stride=2)
        self.fuse = ConvBlock(2 * cout, cout)

    def forward(self, deep, skip):
        return self.fuse(torch.cat([self.up(deep), skip], dim=1))


class UNETRDecoder(nn.Module):
    """UNETR decoder for 16-voxel patches (four x2 upsampling stages).

    Widths are ``8f, 4f, 2f, f`` from the coarsest stage to full resolution.
    Taps are refined towards their stage resolution: z9 by one up-block, z6
    by two, z3 by three; z0 (the image) by one conv block at full size.
    """

    def __init__(self, embed_dim: int, feature_size: int = 16, out_channels: int = 2):
        super().__init__()
        f = feature_size
        self.skip0 = ConvBlock(1, f)
        self.skip3 = nn.Sequential(UpBlock(embed_dim, 2 * f), UpBlock(2 * f, 2 * f), UpBlock(2 * f, 2 * f))
        self.skip6 = nn.Sequential(UpBlock(embed_dim, 4 * f), UpBlock(4 * f, 4 * f))
        self.skip9 = UpBlock(embed_dim, 8 * f)
        self.stage9 = Stage(embed_dim, 8 * f)
        self.stage6 = Stage(8 * f, 4 * f)
        self.stage3 = Stage(4 * f, 2 * f)
        self.stage0 = Stage(2 * f, f)
        self.out = nn.Conv3d(f, out_channels, 1)

    def forward(self, image, z3, z6, z9, z12, disabled=()):
        def live(name, t):
            return torch.zeros_like(t) if name in disabled else t

        x = self.stage9(z12, live("z9", self.skip9(z9)))
        x = self.stage6(x, live("z6", self.skip6(z6)))
        x = self.stage3(x, live("z3", self.skip3(z3)))
        x = self.stage0(x, live("z0", self.skip0(image)))
        return self.out(x)


class UNETR(nn.Module):
    def __init__(self, vit: ViTConfig, feature_size: int = 16, encoder: ViTEncoder | None = None):
        super().__init__()
        if vit.patch_size != 16:
            raise ConfigError("the UNETR decoder needs 16-voxel patches (four x2 upsampling stages)")
        if len(vit.tap_layers) != 4:
            raise ConfigError(f"UNETR consumes exactly four encoder taps, got {vit.tap_layers}")
        self.encoder = encoder if encoder is not None else ViTEncoder(vit)
        if self.encoder.config != vit:
            raise ConfigError("encoder configuration does not match the UNETR configuration")
        self.feature_size = feature_size
        self.decoder = UNETRDecoder(vit.embed_dim, feature_size)

    @property
    def vit_config(self) -> ViTConfig:
        return self.encoder.config

    def forward(self, images: torch.Tensor, disabled_skips=()) -> torch.Tensor:
        """(B, X, Y, Z) normalized images -> (B, 2, X, Y, Z) logits."""
        cfg = self.vit_config
        if tuple(images.shape[1:]) != cfg.image_shape:
            raise ShapeError(f"expected volumes of shape {cfg.image_shape}, got {tuple(images.shape[1:])}")
        enc = self.encoder(patchify_tensor(images, cfg.patch_size))
        # the deepest tap goes through the encoder's final LayerNorm
        tokens = [enc.taps[i] for i in cfg.tap_layers[:-1]] + [enc.final]
        grids = [reshape_tokens(t, cfg.grid_shape) for t in tokens]
        return self.decoder(images[:, None], *grids, disabled=disabled_skips)

    def zero_output(self):
        nn.init.zeros_(self.decoder.out.weight)
        nn.init.zeros_(self.decoder.out.bias)


def logits_to_mask(logits: torch.Tensor) -> torch.Tensor:
    # ties go to background
    return (logits[:, 1] > logits[:, 0]).to(torch.float32)


@dataclass
class Segmentation:
    logits: np.ndarray  # (2, X, Y, Z)
    mask: Volume


@torch.no_grad()
def segment(image: Volume, model: nn.Module) -> Segmentation:
    """Deterministic forward pass on one normalized image volume."""
    cfg = getattr(model, "vit_config", None)
    for axis, n in zip("xyz", image.shape):
        if cfg is not None and n % cfg.patch_size:
            raise ShapeError(f"axis {axis} has {n} voxels, not divisible by patch size {cfg.patch_size}")
    was_training = model.training
    model.eval()
    x = torch.as_tensor(np.asarray(image.data), dtype=torch.float32)[None]
    logits = model(x)
    model.train(was_training)
    mask = logits_to_mask(logits)[0].numpy()
    return Segmentation(logits[0].numpy(), Volume(mask, image.spacing, "prediction"))


def dice_loss(logits: torch.Tensor, label: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    p = torch.softmax(logits, dim=1)[:, 1]
    inter = (p * label).sum()
    return 1 - (2 * inter + eps) / (p.sum() + label.sum() + eps)


def seg_loss(logits: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Unit-weighted soft Dice (foreground channel) plus mean voxel cross-entropy.

    ``logits`` is (B, 2, X, Y, Z); ``label`` is a binary (B, X, Y, Z) tensor.
    """
    if logits.shape[0] != label.shape[0] or logits.shape[2:] != label.shape[1:] or logits.shape[1] != 2:
        raise ShapeError(f"logits {tuple(logits.shape)} do not match label {tuple(label.shape)}")
    label = label.to(logits.dtype)
    ce = F.cross_entropy(logits, label.long())
    return dice_loss(logits, label) + ce


def labeled_batch(cases, idx, rng, weak_augment: bool = True):
    """Stack (image, label) pairs, each under a freshly sampled weak augmentation."""
    images, labels = [], []
    for i in idx:
        image, label = cases[i].image, cases[i].label
        if weak_augment:
            plan = sample_valid_plan("weak", rng, label=label)
            image, label = augment(image, plan), augment(label, plan)
        images.append(image.data)
        labels.append(label.data)
    return torch.as_tensor(np.stack(images)), torch.as_tensor(np.stack(labels))


class SegmentationTask(Task):
    def __init__(self, model: nn.Module, cases, batch_size: int = 2, weak_augment: bool = True):
        if not cases or any(c.label is None for c in cases):
            raise ConfigError("supervised training needs at least one case, all with labels")
        self.model = model
        self.cases = list(cases)
        self.batch_size = batch_size
        self.weak_augment = weak_augment
        cfg = getattr(model, "vit_config", None)
        self.num_layers = cfg.num_layers if cfg is not None else None

    def loss(self, rng, step):
        idx = pick_batch(rng, len(self.cases), self.batch_size)
        x, y = labeled_batch(self.cases, idx, rng, self.weak_augment)
        return seg_loss(self.model(x), y)


def finetune(model: nn.Module, cases, config: TrainConfig, weak_augment: bool = True,
             out_dir=None, resume=None, on_step=None, stop_after=None, preprocessing: dict | None = None) -> TrainResult:
    """Supervised training of ``model`` on labeled cases (pretrained or not).

    Any module mapping (B, X, Y, Z) images to (B, 2, X, Y, Z) logits works;
    a UNETR is also saved as ``unetr.pt`` when ``out_dir`` is given.
    """
    task = SegmentationTask(model, cases, config.batch_size, weak_augment)
    result = train(config, task, out_dir=out_dir, resume=resume, on_step=on_step, stop_after=stop_after)
    if out_dir is not None and isinstance(model, UNETR):
        save_unetr(Path(out_dir) / "unetr.pt", model, preprocessing or {})
    return result


def save_unetr(path, model: UNETR, preprocessing: dict):
    torch.save({
        "format": "maeseg-unetr",
        "version": CHECKPOINT_VERSION,
        "vit_config": model.vit_config.to_dict(),
        "feature_size": model.feature_size,
        "preprocessing": dict(preprocessing),
        "params": model.state_dict(),
    }, path)


def load_unetr(path) -> tuple[UNETR, dict]:
    """Load a fine-tuned model and the preprocessing it was trained with."""
    state = torch.load(path, weights_only=True)
    if state.get("format") != "maeseg-unetr":
        raise ConfigError(f"{path} is not a UNETR checkpoint")
    model = UNETR(ViTConfig(**state["vit_config"]), state["feature_size"])
    model.load_state_dict(state["params"])
    return model, state["preprocessing"]
