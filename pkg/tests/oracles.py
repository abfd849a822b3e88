"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports the library's metric or patch code; each function is
written from the definition with explicit loops.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

NEIGHBOURS_6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def dsc(pred, gt) -> float:
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    inter = sum(1 for idx in np.ndindex(p.shape) if p[idx] and g[idx])
    total = int(p.sum()) + int(g.sum())
    return 1.0 if total == 0 else 2.0 * inter / total


def surface(mask) -> list[tuple[int, int, int]]:
    """Foreground voxels with at least one background 6-neighbour (outside = background)."""
    m = np.asarray(mask).astype(bool)
    out = []
    for idx in np.ndindex(m.shape):
        if not m[idx]:
            continue
        for d in NEIGHBOURS_6:
            nb = tuple(i + di for i, di in zip(idx, d))
            inside = all(0 <= c < n for c, n in zip(nb, m.shape))
            if not inside or not m[nb]:
                out.append(idx)
                break
    return out


def directed(src, dst, spacing=(1.0, 1.0, 1.0)) -> list[float]:
    s_src, s_dst = surface(src), surface(dst)
    out = []
    for a in s_src:
        best = math.inf
        for b in s_dst:
            d = math.sqrt(sum(((ai - bi) * s) ** 2 for ai, bi, s in zip(a, b, spacing)))
            best = min(best, d)
        out.append(best)
    return out


def assd(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    d1, d2 = directed(pred, gt, spacing), directed(gt, pred, spacing)
    return (sum(d1) + sum(d2)) / (len(d1) + len(d2))


def percentile_linear(values, q: float) -> float:
    """Linear interpolation between closest ranks: position (n - 1) * q / 100."""
    xs = sorted(values)
    h = (len(xs) - 1) * q / 100.0
    lo = math.floor(h)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    return percentile_linear(directed(pred, gt, spacing) + directed(gt, pred, spacing), 95)


def unrank(k: int, grid) -> tuple[int, int, int]:
    """Grid coordinate (ix, iy, iz) of token ``k`` in x-fastest, z-slowest order."""
    gx, gy, _ = grid
    return k % gx, (k // gx) % gy, k // (gx * gy)


def patchify(data: np.ndarray, p: int) -> np.ndarray:
    """Token k = patch at unrank(k), flattened with x fastest inside the patch."""
    grid = tuple(n // p for n in data.shape)
    n = grid[0] * grid[1] * grid[2]
    tokens = np.empty((n, p**3), dtype=data.dtype)
    for k in range(n):
        ix, iy, iz = unrank(k, grid)
        j = 0
        for z, y, x in itertools.product(range(p), range(p), range(p)):
            tokens[k, j] = data[ix * p + x, iy * p + y, iz * p + z]
            j += 1
    return tokens


def cosine_lr(t, total, lr0, lr_min=0.0) -> float:
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * t / total))


def soft_dice_ce(logits: np.ndarray, label: np.ndarray, eps: float = 1e-5) -> float:
    """Dice on the foreground softmax channel plus mean voxel cross-entropy, in float64."""
    z = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    p_fg = prob[:, 1]
    dice = 1 - (2 * (p_fg * label).sum() + eps) / (p_fg.sum() + label.sum() + eps)
    picked = np.where(label > 0.5, prob[:, 1], prob[:, 0])
    ce = -np.log(picked).mean()
    return float(dice + ce)
