"""3D ViT encoder: patch embedding, learnable positions, pre-norm blocks, layer taps."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError, ShapeError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 16
    embed_dim: int = 192
    num_layers: int = 12
    num_heads: int = 4
    mlp_ratio: float = 4.0
    tap_layers: tuple[int, ...] = (3, 6, 9, 12)
    grid_shape: tuple[int, int, int] = (4, 4, 4)

    def __post_init__(self):
        object.__setattr__(self, "tap_layers", tuple(int(i) for i in self.tap_layers))
        object.__setattr__(self, "grid_shape", tuple(int(g) for g in self.grid_shape))
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        taps = self.tap_layers
        if not taps or list(taps) != sorted(set(taps)):
            raise ConfigError(f"tap_layers must be sorted and unique, got {taps}")
        if taps[0] < 1 or taps[-1] != self.num_layers:
            raise ConfigError(f"tap_layers must lie in [1, {self.num_layers}] and end at the last layer")

    @property
    def n_patches(self) -> int:
        gx, gy, gz = self.grid_shape
        return gx * gy * gz

    @property
    def patch_dim(self) -> int:
        return self.patch_size**3

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(g * self.patch_size for g in self.grid_shape)

    def to_dict(self) -> dict:
        return asdict(self)


def block_name(i: int) -> str:
    """Canonical name of encoder/decoder block ``i`` (1-based)."""
    return f"block{i:02d}"


class PatchEmbed(nn.Module):
    def __init__(self, patch_dim: int, embed_dim: int, n_patches: int):
        super().__init__()
        self.proj = nn.Linear(patch_dim, embed_dim)
        self.pos = nn.Parameter(torch.zeros(n_patches, embed_dim))

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-1] != self.proj.in_features:
            raise ShapeError(
                f"patch length {patches.shape[-1]} does not match embedding width {self.proj.in_features}"
            )
        if patches.shape[-2] != self.pos.shape[0]:
            raise ShapeError(f"expected {self.pos.shape[0]} patches, got {patches.shape[-2]}")
        return self.proj(patches) + self.pos


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)

    def _split(self, t):
        b, n, d = t.shape
        return t.view(b, n, self.num_heads, d // self.num_heads).transpose(1, 2)

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        """Attention probabilities, shape (B, heads, N, N)."""
        q, k = self._split(self.wq(x)), self._split(self.wk(x))
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        attn = self.weights(x)
        out = (attn @ self._split(self.wv(x))).transpose(1, 2).reshape(b, n, d)
        return self.wo(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block: x + MHSA(LN(x)), then y + MLP(LN(y))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def init_weights(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def check_finite(x: torch.Tensor, where: str):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activations after {where}")


@dataclass
class EncoderOutput:
    taps: dict[int, torch.Tensor] = field(default_factory=dict)
    final: torch.Tensor | None = None


class ViTEncoder(nn.Module):
    """Stack of ``num_layers`` blocks with taps at ``config.tap_layers``.

    Blocks are registered as ``block01 .. blockNN`` so parameter names are
    stable across checkpoints (``encoder.block07.attn.wq.weight``).
    """

    def __init__(self, config: ViTConfig):
        super().__init__()
        self.config = config
        self.patch_embed = PatchEmbed(config.patch_dim, config.embed_dim, config.n_patches)
        for i in range(1, config.num_layers + 1):
            self.add_module(block_name(i), Block(config.embed_dim, config.num_heads, config.mlp_ratio))
        self.norm = nn.LayerNorm(config.embed_dim)
        init_weights(self)
        nn.init.trunc_normal_(self.patch_embed.pos, std=0.02)

    @property
    def blocks(self) -> list[Block]:
        return [getattr(self, block_name(i)) for i in range(1, self.config.num_layers + 1)]

    def embed(self, patches: torch.Tensor) -> torch.Tensor:
        return self.patch_embed(patches)

    def encode(self, tokens: torch.Tensor, keep_indices=None) -> EncoderOutput:
        """Run all blocks on embedded ``tokens`` (B, N, D).

        With ``keep_indices`` only those token positions flow through the blocks.
        """
        if keep_indices is not None:
            keep = torch.as_tensor(keep_indices, dtype=torch.long)
            if keep.numel() == 0:
                raise ShapeError("keep_indices must be non-empty")
            n = tokens.shape[1]
            if keep.min() < 0 or keep.max() >= n or keep.unique().numel() != keep.numel():
                raise ShapeError(f"keep_indices must be distinct indices in [0, {n})")
            tokens = tokens[:, keep]
        out = EncoderOutput()
        x = tokens
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            check_finite(x, f"encoder layer {i}")
            if i in self.config.tap_layers:
                out.taps[i] = x
        out.final = self.norm(x)
        return out

    def forward(self, patches: torch.Tensor, keep_indices=None) -> EncoderOutput:
        return self.encode(self.embed(patches), keep_indices)


def encoder_state(encoder: ViTEncoder) -> dict:
    """Self-describing checkpoint payload for an encoder."""
    return {
        "format": "maeseg-vit",
        "version": CHECKPOINT_VERSION,
        "vit_config": encoder.config.to_dict(),
        "params": {f"encoder.{k}": v.detach().clone() for k, v in encoder.state_dict().items()},
    }


def save_encoder(path, encoder: ViTEncoder):
    torch.save(encoder_state(encoder), path)


def load_encoder(path_or_state) -> ViTEncoder:
    state = path_or_state
    if not isinstance(state, dict):
        state = torch.load(path_or_state, weights_only=True)
    if state.get("format") != "maeseg-vit" or state.get("version") != CHECKPOINT_VERSION:
        raise ConfigError("not a version-1 ViT checkpoint")
    encoder = ViTEncoder(ViTConfig(**state["vit_config"]))
    prefix = "encoder."
    encoder.load_state_dict({k[len(prefix):]: v for k, v in state["params"].items()})
    return encoder
