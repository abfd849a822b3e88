"""Teacher-student semi-supervised baseline with weak/strong views and pseudo-labels.

Phase one is plain supervised training on the labeled cases. Phase two
mixes one labeled and one unlabeled sample per step: an EMA teacher labels
a weakly augmented view, the label is carried over to a strongly augmented
view, and the student is supervised on both.
"""

from __future__ import annotations

import copy
import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .augment import AugmentationPlan, apply_matrix, augment, geometric_matrix, sample_plan
from .errors import ConfigError
from .metrics import dsc
from .train import Task, TrainConfig, TrainResult, pick_batch, train
from .unetr import UNETR, finetune, labeled_batch, seg_loss, segment
from .volume import Volume

log = logging.getLogger(__name__)


def alignment_matrix(weak: AugmentationPlan, strong: AugmentationPlan, shape) -> tuple[np.ndarray, np.ndarray]:
    """Map from the weak view to the strong view (forward, inverse): strong o weak^-1."""
    fwd = geometric_matrix(strong, shape) @ geometric_matrix(weak, shape, inverse=True)
    bwd = geometric_matrix(weak, shape) @ geometric_matrix(strong, shape, inverse=True)
    return fwd, bwd


def as_predictor(teacher):
    """Wrap a model as ``Volume -> mask Volume``; callables pass through."""
    if isinstance(teacher, nn.Module):
        return lambda image: segment(image, teacher).mask
    return teacher


def pseudo_label(teacher, unlabeled: Volume, weak: AugmentationPlan, strong: AugmentationPlan) -> Volume:
    """Teacher mask on the weak view, warped into the strong view's frame."""
    weak_mask = as_predictor(teacher)(augment(unlabeled, weak))
    fwd, bwd = alignment_matrix(weak, strong, unlabeled.shape)
    return apply_matrix(weak_mask.replace(kind="label"), fwd, bwd)


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, decay: float):
    for t, s in zip(teacher.parameters(), student.parameters()):
        t.mul_(decay).add_(s.detach(), alpha=1 - decay)


@dataclass
class SSLConfig:
    base_lr: float = 3.44e-2
    supervised_steps: int = 1000
    semi_steps: int = 2000
    ema_decay: float = 0.99
    pseudo_weight: float = 1.0
    batch_size: int = 2
    seed: int = 0
    min_lr: float = 0.0
    checkpoint_every: int = 0
    quality_every: int = 0

    def __post_init__(self):
        if not 0 <= self.ema_decay <= 1:
            raise ConfigError("ema_decay must lie in [0, 1]")
        if self.supervised_steps < 1 or self.semi_steps < 0:
            raise ConfigError("need supervised_steps >= 1 and semi_steps >= 0")

    def supervised(self) -> TrainConfig:
        return TrainConfig("finetune", self.base_lr, self.supervised_steps, self.batch_size, None,
                           self.seed, self.min_lr, self.checkpoint_every)

    def semi(self) -> TrainConfig:
        return TrainConfig("ssl", self.base_lr, max(1, self.semi_steps), self.batch_size, None,
                           self.seed + 1, self.min_lr, self.checkpoint_every)


class SemiSupervisedTask(Task):
    def __init__(self, student: UNETR, teacher: UNETR, labeled, unlabeled, ema_decay=0.99, pseudo_weight=1.0):
        self.model = student
        self.teacher = teacher
        for p in teacher.parameters():
            p.requires_grad_(False)
        self.labeled = list(labeled)
        self.unlabeled = list(unlabeled)
        self.ema_decay = ema_decay
        self.pseudo_weight = pseudo_weight
        self.num_layers = student.vit_config.num_layers

    def loss(self, rng, step):
        i = pick_batch(rng, len(self.labeled), 1)
        x_lab, y_lab = labeled_batch(self.labeled, i, rng)
        u = self.unlabeled[int(rng.integers(len(self.unlabeled)))]
        weak = sample_plan("weak", rng)
        strong = sample_plan("strong", rng)
        target = pseudo_label(self.teacher, u.image, weak, strong)
        x_unl = augment(u.image, strong)
        logits = self.model(torch.cat([x_lab, torch.as_tensor(x_unl.data)[None]]))
        sup = seg_loss(logits[:1], y_lab)
        unsup = seg_loss(logits[1:], torch.as_tensor(target.data)[None])
        return sup + self.pseudo_weight * unsup

    def after_step(self, step):
        ema_update(self.teacher, self.model, self.ema_decay)

    def extra_state(self):
        return {"teacher": self.teacher.state_dict()}

    def load_extra_state(self, state):
        self.teacher.load_state_dict(state["teacher"])


@dataclass
class SSLResult:
    student: UNETR
    teacher: UNETR | None
    supervised: TrainResult
    semi: TrainResult | None = None
    pseudo_quality: list[dict] = field(default_factory=list)

    @property
    def loss_curve(self) -> list[dict]:
        return self.supervised.loss_curve + (self.semi.loss_curve if self.semi else [])


def ssl_train(config: SSLConfig, model: UNETR, labeled, unlabeled, out_dir=None, heldout=()) -> SSLResult:
    """Supervised warm-up, then EMA teacher-student training; returns the student.

    ``heldout`` labeled cases are used only to log pseudo-label quality
    (``pseudo_quality.csv``) every ``config.quality_every`` steps.
    """
    if not labeled:
        raise ConfigError("semi-supervised training needs at least one labeled case")
    out_dir = Path(out_dir) if out_dir is not None else None
    sup = finetune(model, labeled, config.supervised(),
                   out_dir=None if out_dir is None else out_dir / "supervised")
    if not unlabeled or config.semi_steps == 0:
        warnings.warn("no unlabeled cases: semi-supervised phase skipped", stacklevel=2)
        return SSLResult(model, None, sup)

    teacher = copy.deepcopy(model)
    task = SemiSupervisedTask(model, teacher, labeled, unlabeled, config.ema_decay, config.pseudo_weight)
    quality = []

    def on_step(step, opt, lr):
        if config.quality_every and heldout and (step + 1) % config.quality_every == 0:
            scores = [dsc(segment(c.image, teacher).mask, c.label) for c in heldout]
            quality.append({"step": step + 1, "dsc": float(np.mean(scores))})

    semi = train(config.semi(), task, out_dir=None if out_dir is None else out_dir / "semi", on_step=on_step)
    if out_dir is not None and quality:
        with open(out_dir / "pseudo_quality.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "dsc"])
            writer.writeheader()
            writer.writerows(quality)
    return SSLResult(model, teacher, sup, semi, quality)
