"""Synthetic fractured-bone phantoms with exact ground-truth labels.

Two shape families stand in for two anatomies so that pretraining on one
and fine-tuning on the other is a real transfer problem:

* ``tibia-like``: a vertical shaft capped by a wide plateau.
* ``pelvis-like``: a tilted ring with a thin wing plate.

Fractures are planar gaps through the bone centroid.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, PhantomError
from .volume import Volume, write_volume

log = logging.getLogger(__name__)

FAMILIES = ("tibia-like", "pelvis-like")
MIN_BONE_FRACTION = 0.02
MAX_BONE_FRACTION = 0.5


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    shape: tuple[int, int, int] = (64, 64, 64)
    family: str = "tibia-like"
    n_fractures: int = 2
    gap_width: float = 2.0
    noise_sigma: float = 20.0
    bone_intensity: float = 700.0
    background_intensity: float = 0.0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown phantom family {self.family!r}; expected one of {FAMILIES}")
        if self.n_fractures < 0:
            raise ConfigError("n_fractures must be >= 0")
        if self.gap_width < 0:
            raise ConfigError("gap_width must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.bone_intensity <= self.background_intensity:
            raise ConfigError("bone_intensity must exceed background_intensity")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ConfigError(f"bad phantom shape {self.shape}")


def _coords(shape, spacing):
    axes = [(np.arange(n) + 0.5) * s for n, s in zip(shape, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def _rotation(rng, max_angle):
    """Small random rotation (radians) about a random axis, Rodrigues form."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k


def _tibia_mask(rng, x, y, z, extent):
    ex, ey, ez = extent
    cx = ex * (0.5 + rng.uniform(-0.05, 0.05))
    cy = ey * (0.5 + rng.uniform(-0.05, 0.05))
    r_shaft = min(ex, ey) * rng.uniform(0.15, 0.19)
    z_lo, z_hi = ez * rng.uniform(0.08, 0.15), ez * rng.uniform(0.65, 0.72)
    shaft = ((x - cx) ** 2 + (y - cy) ** 2 <= r_shaft**2) & (z >= z_lo) & (z <= z_hi)
    cz = ez * rng.uniform(0.72, 0.78)
    rx, ry, rz = ex * rng.uniform(0.27, 0.33), ey * rng.uniform(0.22, 0.27), ez * rng.uniform(0.1, 0.13)
    plateau = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 <= 1
    return shaft | plateau


def _pelvis_mask(rng, x, y, z, extent):
    ex, ey, ez = extent
    center = np.array(extent) * (0.5 + rng.uniform(-0.04, 0.04, size=3))
    rot = _rotation(rng, np.pi / 6)
    pts = np.stack([x - center[0], y - center[1], z - center[2]], axis=-1) @ rot
    u, v, w = pts[..., 0], pts[..., 1], pts[..., 2]
    big_r = min(ex, ey) * rng.uniform(0.25, 0.29)
    small_r = min(ex, ey, ez) * rng.uniform(0.09, 0.11)
    ring = (np.sqrt(u**2 + v**2) - big_r) ** 2 + w**2 <= small_r**2
    wing_c = ez * rng.uniform(0.18, 0.24)
    rx, ry, rz = ex * rng.uniform(0.26, 0.32), ey * rng.uniform(0.06, 0.08), ez * rng.uniform(0.15, 0.2)
    wing = (u / rx) ** 2 + ((v + big_r) / ry) ** 2 + ((w - wing_c) / rz) ** 2 <= 1
    return ring | wing


def bone_mask(spec: PhantomSpec, rng=None) -> np.ndarray:
    """Uncut bone mask for ``spec`` (consumes the shape draws of its RNG stream)."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    x, y, z = _coords(spec.shape, spec.spacing)
    extent = tuple(n * s for n, s in zip(spec.shape, spec.spacing))
    build = _tibia_mask if spec.family == "tibia-like" else _pelvis_mask
    return build(rng, x, y, z, extent)


def generate(spec: PhantomSpec) -> tuple[Volume, Volume]:
    """Return ``(image, label)``; image is in HU, label marks remaining bone."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    bone = bone_mask(spec, rng)
    if not bone.any():
        raise PhantomError(f"seed {spec.seed}: empty bone mask, try another seed")

    x, y, z = _coords(spec.shape, spec.spacing)
    centroid = [c[bone].mean() for c in (x, y, z)]
    half_gap = spec.gap_width / 2
    label = bone.copy()
    for _ in range(spec.n_fractures):
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        dist = (x - centroid[0]) * normal[0] + (y - centroid[1]) * normal[1] + (z - centroid[2]) * normal[2]
        label &= np.abs(dist) >= half_gap

    fraction = label.mean()
    if not MIN_BONE_FRACTION <= fraction <= MAX_BONE_FRACTION:
        raise PhantomError(
            f"seed {spec.seed}: bone fraction {fraction:.4f} outside "
            f"[{MIN_BONE_FRACTION}, {MAX_BONE_FRACTION}], try another seed"
        )

    contrast = spec.bone_intensity - spec.background_intensity
    image = spec.background_intensity + contrast * label
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=spec.shape)
    image_vol = Volume(image.astype(np.float32), spec.spacing, "image")
    label_vol = Volume(label.astype(np.float32), spec.spacing, "label")
    return image_vol, label_vol


# -- datasets

SPLITS = ("labeled", "unlabeled", "val", "test")


def case_seeds(master_seed: int, n: int) -> list[int]:
    """Independent per-case seeds spawned from one master seed."""
    children = np.random.SeedSequence(master_seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def plan_dataset(seed: int, counts: dict, family: str, template: PhantomSpec | None = None):
    """Yield ``(case_id, split, has_label, spec)`` for every case, in manifest order."""
    template = template or PhantomSpec()
    for key in counts:
        if key not in SPLITS:
            raise ConfigError(f"unknown split count {key!r}; expected {SPLITS}")
    sizes = [int(counts.get(k, 0)) for k in SPLITS]
    if min(sizes) < 0:
        raise ConfigError("split counts must be >= 0")
    seeds = iter(case_seeds(seed, sum(sizes)))
    for key, size in zip(SPLITS, sizes):
        split = "train" if key in ("labeled", "unlabeled") else key
        for i in range(size):
            spec = replace(template, seed=next(seeds), family=family)
            yield f"{family}-{key}-{i:03d}", split, key != "unlabeled", spec


def generate_cases(seed, counts, family, template=None, workers: int = 1):
    """In-memory dataset: list of dicts with ``id``, ``split``, ``image``, ``label``.

    ``label`` is None for unlabeled training cases.
    """
    plan = list(plan_dataset(seed, counts, family, template))

    def make(item):
        case_id, split, has_label, spec = item
        image, label = generate(spec)
        return {"id": case_id, "split": split, "image": image, "label": label if has_label else None}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(make, plan))


def generate_dataset(seed, counts, family, out_dir, template=None, workers: int = 1) -> list[dict]:
    """Write every case under ``out_dir`` plus ``manifest.json``; return the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for case in generate_cases(seed, counts, family, template, workers):
        image_path = write_volume(out_dir / "images" / case["id"], case["image"])
        label_path = None
        if case["label"] is not None:
            label_path = write_volume(out_dir / "labels" / case["id"], case["label"])
        manifest.append({
            "id": case["id"],
            "image_path": str(image_path.relative_to(out_dir)),
            "label_path": None if label_path is None else str(label_path.relative_to(out_dir)),
            "split": case["split"],
        })
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    log.info("wrote %d cases to %s", len(manifest), out_dir)
    return manifest


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
