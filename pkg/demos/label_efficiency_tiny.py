"""
A label-efficiency sweep in miniature
=====================================

The same code path as the full sweep, on the seconds-scale tiny config:
MAE pretraining plus UNETR fine-tuning against the mean-teacher baseline at
one and two labeled cases. The numbers mean nothing at this size; the
point is the shape of the output.
"""

from pathlib import Path

from maeseg.config import load_config
from maeseg.experiments import label_efficiency, write_sweep

cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "tiny.toml")
result = label_efficiency(cfg, labeled_counts=(1, 2), seeds=(0,))
print(result.table("tiny sweep"))

for key, path in write_sweep(result, "tiny_sweep").items():
    print(f"{key}={path}")
