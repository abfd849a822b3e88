"""Weak and strong volume augmentations with exactly invertible geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import AugmentationError, ConfigError
from .volume import Volume

WEAK_MAX_ANGLE = 10.0
WEAK_MAX_SHIFT = 4
STRONG_SCALE = (0.9, 1.1)
STRONG_MASK_RATIO = 0.25


@dataclass(frozen=True)
class Rotate:
    axis: int  # 0, 1, 2 = x, y, z
    angle: float  # degrees, counter-clockwise in the plane of the other two axes


@dataclass(frozen=True)
class Scale:
    factor: float


@dataclass(frozen=True)
class Translate:
    shift: tuple[float, float, float]  # voxels


@dataclass(frozen=True)
class RandomMask:
    ratio: float
    patch_size: int
    seed: int
    fill: float = 0.0


GEOMETRIC = (Rotate, Scale, Translate)


@dataclass(frozen=True)
class AugmentationPlan:
    kind: str
    ops: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ConfigError(f"plan kind must be weak or strong, got {self.kind!r}")
        for op in self.ops:
            if isinstance(op, RandomMask) and self.kind != "strong":
                raise ConfigError("random masking belongs to strong plans only")
            if isinstance(op, Scale) and op.factor <= 0:
                raise ConfigError("scale factor must be positive")

    @property
    def geometric(self) -> tuple:
        return tuple(op for op in self.ops if isinstance(op, GEOMETRIC))


def identity_plan(kind="weak") -> AugmentationPlan:
    return AugmentationPlan(kind)


def _cos_sin(deg: float) -> tuple[float, float]:
    # exact for quarter turns so 90-degree rotations permute voxels losslessly
    if float(deg) % 90 == 0:
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(deg // 90) % 4]
    rad = math.radians(deg)
    return math.cos(rad), math.sin(rad)


def _op_matrix(op, center, inverse=False) -> np.ndarray:
    m = np.eye(4)
    if isinstance(op, Translate):
        m[:3, 3] = -np.asarray(op.shift, float) if inverse else np.asarray(op.shift, float)
        return m
    if isinstance(op, Rotate):
        c, s = _cos_sin(op.angle)
        s = -s if inverse else s
        i, j = [a for a in range(3) if a != op.axis]
        m[i, i], m[i, j], m[j, i], m[j, j] = c, -s, s, c
    elif isinstance(op, Scale):
        m[:3, :3] *= 1.0 / op.factor if inverse else op.factor
    to_c, from_c = np.eye(4), np.eye(4)
    to_c[:3, 3], from_c[:3, 3] = center, -center
    return to_c @ m @ from_c


def geometric_matrix(plan: AugmentationPlan, shape, inverse: bool = False) -> np.ndarray:
    """Homogeneous map from input voxel coordinates to output voxel coordinates.

    Ops apply in plan order about the volume center. ``inverse=True`` builds
    the exact inverse by composing inverted ops in reverse order.
    """
    center = (np.asarray(shape, float) - 1) / 2
    m = np.eye(4)
    ops = plan.geometric
    if inverse:
        for op in ops:
            m = m @ _op_matrix(op, center, inverse=True)
    else:
        for op in ops:
            m = _op_matrix(op, center) @ m
    return m


def apply_matrix(v: Volume, forward: np.ndarray, backward: np.ndarray | None = None) -> Volume:
    """Warp ``v`` by the voxel-coordinate map ``forward`` (``backward`` is its inverse)."""
    if np.array_equal(forward, np.eye(4)):
        return v.replace(data=v.data.copy())
    if backward is None:
        backward = np.linalg.inv(forward)
    if v.kind == "image":
        data = ndimage.affine_transform(
            v.data, backward[:3, :3], offset=backward[:3, 3], order=1, mode="nearest"
        )
    else:
        data = ndimage.affine_transform(
            v.data, backward[:3, :3], offset=backward[:3, 3], order=0, mode="constant", cval=0.0
        )
    return v.replace(data=data.astype(v.data.dtype))


def random_patch_mask(shape, ratio: float, patch_size: int, seed: int) -> np.ndarray:
    """Boolean voxel mask covering ``round(ratio * cells)`` random patch cells."""
    cells = [math.ceil(n / patch_size) for n in shape]
    n_cells = int(np.prod(cells))
    k = int(math.floor(ratio * n_cells + 0.5))
    chosen = np.zeros(n_cells, bool)
    chosen[np.random.default_rng(seed).permutation(n_cells)[:k]] = True
    grid = chosen.reshape(cells)
    for axis in range(3):
        grid = np.repeat(grid, patch_size, axis=axis)
    return grid[: shape[0], : shape[1], : shape[2]]


def augment(v: Volume, plan: AugmentationPlan) -> Volume:
    """Apply ``plan`` to ``v``; labels warp with nearest neighbour and are never masked."""
    out = apply_matrix(
        v, geometric_matrix(plan, v.shape), geometric_matrix(plan, v.shape, inverse=True)
    )
    if v.kind == "image":
        for op in plan.ops:
            if isinstance(op, RandomMask):
                data = out.data.copy()
                data[random_patch_mask(v.shape, op.ratio, op.patch_size, op.seed)] = op.fill
                out = out.replace(data=data)
    return out


def invert(v: Volume, plan: AugmentationPlan) -> Volume:
    """Undo the geometric part of ``plan`` (masking is not invertible)."""
    return apply_matrix(
        v, geometric_matrix(plan, v.shape, inverse=True), geometric_matrix(plan, v.shape)
    )


def sample_plan(kind: str, rng: np.random.Generator, patch_size: int = 16,
                max_angle: float = WEAK_MAX_ANGLE, max_shift: int = WEAK_MAX_SHIFT,
                scale_range=STRONG_SCALE, mask_ratio: float = STRONG_MASK_RATIO) -> AugmentationPlan:
    """Weak: small rotation + integer translation. Strong adds scaling and patch masking."""
    ops = [
        Rotate(int(rng.integers(3)), float(rng.uniform(-max_angle, max_angle))),
        Translate(tuple(float(s) for s in rng.integers(-max_shift, max_shift + 1, size=3))),
    ]
    if kind == "strong":
        ops.insert(1, Scale(float(rng.uniform(*scale_range))))
        ops.append(RandomMask(mask_ratio, patch_size, int(rng.integers(2**31))))
    return AugmentationPlan(kind, tuple(ops), int(rng.integers(2**31)))


def sample_valid_plan(kind, rng, label: Volume | None = None, **kwargs) -> AugmentationPlan:
    """Sample a plan that keeps some foreground of ``label``; one retry, then error."""
    for _ in range(2):
        plan = sample_plan(kind, rng, **kwargs)
        if label is None or augment(label, plan).data.any():
            return plan
    raise AugmentationError("augmentation pushed the whole foreground out of the volume twice")
