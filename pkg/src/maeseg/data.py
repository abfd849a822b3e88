"""Preprocessed cases held in memory, loaded from a manifest or generated directly."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import Volume, preprocess, read_volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Preprocessing:
    hu_min: float = -500.0
    hu_max: float = 500.0
    target_spacing: tuple[float, float, float] | None = None

    def apply(self, v: Volume) -> Volume:
        return preprocess(v, self.hu_min, self.hu_max, self.target_spacing)


@dataclass(frozen=True)
class Case:
    id: str
    image: Volume  # normalized
    label: Volume | None = None


def prepare(raw_cases, prep: Preprocessing, workers: int = 1) -> list[Case]:
    """Turn generator/manifest records (``id``, ``image``, ``label``) into cases."""

    def one(rec):
        label = rec.get("label")
        return Case(rec["id"], prep.apply(rec["image"]), None if label is None else prep.apply(label))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(one, raw_cases))


def read_manifest(path) -> list[dict]:
    path = Path(path)
    entries = json.loads(path.read_text())
    for e in entries:
        for key in ("image_path", "label_path"):
            if e.get(key) is not None and not Path(e[key]).is_absolute():
                e[key] = str(path.parent / e[key])
    return entries


def select(entries, split: str, labeled: bool | None = None) -> list[dict]:
    out = [e for e in entries if e["split"] == split]
    if labeled is not None:
        out = [e for e in out if (e["label_path"] is not None) == labeled]
    return out


def load_cases(entries, prep: Preprocessing, workers: int = 1) -> list[Case]:
    def read(e):
        label = None if e["label_path"] is None else read_volume(e["label_path"])
        return {"id": e["id"], "image": read_volume(e["image_path"]), "label": label}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        raw = list(pool.map(read, entries))
    return prepare(raw, prep, workers)


def stack_images(cases) -> np.ndarray:
    return np.stack([c.image.data for c in cases]).astype(np.float32)
