"""Volumes, CT-style preprocessing and patch decomposition.

Arrays are indexed ``data[x, y, z]``. Whenever a volume is flattened (file
I/O, patch order, within-patch order) x varies fastest and z slowest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigError, ShapeError

KINDS = ("image", "label", "prediction")


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "image"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume data must be 3D with all dims >= 1, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ConfigError(f"spacing must be three positive numbers, got {self.spacing}")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown volume kind {self.kind!r}")
        if self.kind != "image":
            if not np.isin(data, (0, 1)).all():
                raise ConfigError(f"{self.kind} volume must contain only 0 and 1")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def replace(self, data=None, spacing=None, kind=None) -> "Volume":
        return Volume(
            self.data if data is None else data,
            self.spacing if spacing is None else spacing,
            self.kind if kind is None else kind,
        )


@dataclass(frozen=True)
class PatchSequence:
    """Flattened cubic patches in z-slowest grid order."""

    tokens: np.ndarray
    grid_shape: tuple[int, int, int]
    patch_size: int
    spacing: tuple[float, float, float] = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        n, p = len(self.tokens), self.patch_size
        gx, gy, gz = self.grid_shape
        if self.tokens.ndim != 2:
            raise ShapeError(f"tokens must be 2D (N, p^3), got shape {self.tokens.shape}")
        if n != gx * gy * gz:
            raise ShapeError(f"{n} tokens do not fill a {self.grid_shape} patch grid")
        if self.tokens.shape[1] != p**3:
            raise ShapeError(f"token length {self.tokens.shape[1]} != patch_size^3 = {p**3}")

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)


def clamp_and_normalize(v: Volume, lo: float = -500.0, hi: float = 500.0) -> Volume:
    """Clip intensities to ``[lo, hi]`` and map that window affinely onto ``[0, 1]``."""
    if lo >= hi:
        raise ConfigError(f"window lower bound {lo} must be below upper bound {hi}")
    if v.kind != "image":
        raise ConfigError("only image volumes are intensity-normalized")
    data = (np.clip(v.data.astype(np.float64), lo, hi) - lo) / (hi - lo)
    return v.replace(data=data.astype(np.float32))


def resampled_shape(shape, spacing, target_spacing) -> tuple[int, int, int]:
    return tuple(
        max(1, int(round(n * s / t))) for n, s, t in zip(shape, spacing, target_spacing)
    )


def resample(v: Volume, target_spacing) -> Volume:
    """Resample onto a grid with ``target_spacing``; voxel 0 stays anchored at the origin.

    Images use trilinear interpolation, label-like volumes nearest neighbour.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise ConfigError(f"target spacing must be three positive numbers, got {target_spacing}")
    if target == v.spacing:
        return v.replace(data=v.data.copy())
    out_shape = resampled_shape(v.shape, v.spacing, target)
    axes = [
        np.arange(n_out) * (t / s) for n_out, s, t in zip(out_shape, v.spacing, target)
    ]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    order = 1 if v.kind == "image" else 0
    data = ndimage.map_coordinates(v.data, coords, order=order, mode="nearest")
    return Volume(data.astype(v.data.dtype), target, v.kind)


def preprocess(v: Volume, lo=-500.0, hi=500.0, target_spacing=None) -> Volume:
    """Clamp and normalize, then resample (the fixed order used everywhere)."""
    if v.kind == "image":
        v = clamp_and_normalize(v, lo, hi)
    if target_spacing is not None:
        v = resample(v, target_spacing)
    return v


def _grid(shape, p):
    grid = []
    for axis, n in zip("xyz", shape):
        if n % p:
            raise ShapeError(f"axis {axis} has {n} voxels, not divisible by patch size {p}")
        grid.append(n // p)
    return tuple(grid)


def patchify(v: Volume, p: int) -> PatchSequence:
    """Split a volume into ``p``-cubed patches, one flattened row per patch."""
    gx, gy, gz = _grid(v.shape, p)
    zyx = v.data.transpose(2, 1, 0)
    tokens = (
        zyx.reshape(gz, p, gy, p, gx, p)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(gz * gy * gx, p**3)
    )
    return PatchSequence(tokens.copy(), (gx, gy, gz), p, v.spacing)


def unpatchify(s: PatchSequence, spacing=None, kind: str = "image") -> Volume:
    """Exact inverse of :func:`patchify`."""
    gx, gy, gz = s.grid_shape
    p = s.patch_size
    zyx = (
        s.tokens.reshape(gz, gy, gx, p, p, p)
        .transpose(0, 3, 1, 4, 2, 5)
        .reshape(gz * p, gy * p, gx * p)
    )
    return Volume(zyx.transpose(2, 1, 0).copy(), spacing or s.spacing, kind)


def patchify_tensor(x: torch.Tensor, p: int) -> torch.Tensor:
    """Batched torch counterpart of :func:`patchify`: (B, X, Y, Z) -> (B, N, p^3)."""
    b = x.shape[0]
    gx, gy, gz = _grid(x.shape[1:], p)
    return (
        x.permute(0, 3, 2, 1)
        .reshape(b, gz, p, gy, p, gx, p)
        .permute(0, 1, 3, 5, 2, 4, 6)
        .reshape(b, gz * gy * gx, p**3)
    )


def unpatchify_tensor(tokens: torch.Tensor, grid_shape, p: int) -> torch.Tensor:
    """Inverse of :func:`patchify_tensor`: (B, N, p^3) -> (B, X, Y, Z)."""
    b, n, _ = tokens.shape
    gx, gy, gz = grid_shape
    if n != gx * gy * gz:
        raise ShapeError(f"{n} tokens do not fill a {tuple(grid_shape)} patch grid")
    return (
        tokens.reshape(b, gz, gy, gx, p, p, p)
        .permute(0, 1, 4, 2, 5, 3, 6)
        .reshape(b, gz * p, gy * p, gx * p)
        .permute(0, 3, 2, 1)
    )


# -- file format: <name>.vol (raw little-endian float32, z slowest) + <name>.json


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".vol", ".json") else path


def write_volume(path, v: Volume) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    raw = np.asarray(v.data, dtype="<f4").ravel(order="F")
    stem.with_suffix(".vol").write_bytes(raw.tobytes())
    meta = {"shape": list(v.shape), "spacing": list(v.spacing), "kind": v.kind}
    stem.with_suffix(".json").write_text(json.dumps(meta))
    return stem.with_suffix(".vol")


def read_volume(path) -> Volume:
    stem = _stem(path)
    meta = json.loads(stem.with_suffix(".json").read_text())
    shape = tuple(int(n) for n in meta["shape"])
    raw = np.frombuffer(stem.with_suffix(".vol").read_bytes(), dtype="<f4")
    if raw.size != np.prod(shape):
        raise ShapeError(f"{stem}.vol holds {raw.size} values, sidecar says shape {shape}")
    data = raw.reshape(shape, order="F").astype(np.float32)
    return Volume(data, tuple(meta["spacing"]), meta.get("kind", "image"))
