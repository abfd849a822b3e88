"""Shared optimization loop: Adam, cosine annealing, layer-wise LR decay, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import re
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, MaesegError, TrainingError

log = logging.getLogger(__name__)

PHASES = ("pretrain", "finetune", "ssl")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
STATE_FORMAT = "maeseg-train-state"


@dataclass
class TrainConfig:
    phase: str = "finetune"
    base_lr: float = 3.44e-2
    steps: int = 1000
    batch_size: int = 2
    llrd_factor: float | None = None
    seed: int = 0
    min_lr: float = 0.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.llrd_factor is not None and not 0 < self.llrd_factor <= 1:
            raise ConfigError("llrd_factor must lie in (0, 1]")
        if self.min_lr < 0 or self.min_lr > self.base_lr:
            raise ConfigError("min_lr must lie in [0, base_lr]")


def cosine_lr(t: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    if total < 1 or t < 0:
        raise ConfigError(f"need 0 <= t and total >= 1, got t={t}, total={total}")
    if t > total:
        warnings.warn(f"step {t} beyond schedule length {total}; using the final rate", stacklevel=2)
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * t / total))


def llrd_multipliers(num_layers: int, factor: float) -> dict[str, float]:
    """LR multipliers per encoder group; layer i (1 = shallowest) gets factor**(L + 1 - i).

    The patch embedding sits below layer 1 and gets factor**(L + 1); everything
    outside the encoder blocks (the encoder's final norm, the decoder) keeps 1.0.
    """
    if num_layers < 1 or not 0 < factor <= 1:
        raise ConfigError("need num_layers >= 1 and factor in (0, 1]")
    mult = {"patch_embed": factor ** (num_layers + 1)}
    for i in range(1, num_layers + 1):
        mult[f"block{i:02d}"] = factor ** (num_layers + 1 - i)
    mult["head"] = 1.0
    return mult


_ENCODER_GROUP = re.compile(r"^encoder\.(patch_embed|block\d\d)\.")


def group_of(param_name: str) -> str:
    m = _ENCODER_GROUP.match(param_name)
    return m.group(1) if m else "head"


def param_groups(model: nn.Module, llrd_factor: float | None, num_layers: int | None = None) -> list[dict]:
    """Adam parameter groups, one per LLRD group, each tagged with ``lr_mult``."""
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if llrd_factor is None:
        mult = {}
    else:
        if num_layers is None:
            num_layers = _count_blocks(named)
        mult = llrd_multipliers(num_layers, llrd_factor)
    groups: dict[str, list] = {}
    for name, p in named:
        groups.setdefault(group_of(name), []).append(p)
    return [
        {"params": params, "name": g, "lr_mult": mult.get(g, 1.0)}
        for g, params in groups.items()
    ]


def _count_blocks(named) -> int:
    blocks = {group_of(n) for n, _ in named} - {"head", "patch_embed"}
    if not blocks:
        raise ConfigError("layer-wise decay requested but the model has no encoder blocks")
    return max(int(b[5:]) for b in blocks)


class Task:
    """What the loop optimizes: a model plus a way to draw a loss from an RNG."""

    model: nn.Module
    num_layers: int | None = None

    def loss(self, rng: np.random.Generator, step: int) -> torch.Tensor:
        raise NotImplementedError

    def after_step(self, step: int):
        pass

    def extra_state(self) -> dict:
        return {}

    def load_extra_state(self, state: dict):
        pass


@dataclass
class TrainResult:
    loss_curve: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    steps_run: int = 0


def _save_state(path: Path, config, task, opt, rng, curve, step):
    state = {
        "format": STATE_FORMAT,
        "version": 1,
        "config": asdict(config),
        "step": step,
        "model": task.model.state_dict(),
        "optimizer": opt.state_dict(),
        "rng": rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
        "loss_curve": list(curve),
        "extra": task.extra_state(),
    }
    tmp = path.with_suffix(".tmp")
    torch.save(state, tmp)
    tmp.replace(path)


def load_state(path) -> dict:
    state = torch.load(path, weights_only=False)
    if state.get("format") != STATE_FORMAT:
        raise ConfigError(f"{path} is not a training-state checkpoint")
    return state


def write_loss_csv(path, curve):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "phase", "loss", "lr"])
        writer.writeheader()
        for row in curve:
            writer.writerow({k: row[k] for k in writer.fieldnames})


def train(config: TrainConfig, task: Task, out_dir=None, resume=None, on_step=None, stop_after=None) -> TrainResult:
    """Run ``config.steps`` optimizer steps of ``task``.

    ``resume`` is a training-state checkpoint written by an earlier call with
    the same config; the run continues exactly where it stopped.
    ``on_step(step, optimizer, lr)`` is called after every update.
    ``stop_after`` halts early (the schedule still spans ``config.steps``).
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    groups = param_groups(task.model, config.llrd_factor, task.num_layers)
    opt = torch.optim.Adam(groups, lr=config.base_lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0)
    curve: list[dict] = []
    start = 0
    if resume is not None:
        state = resume if isinstance(resume, dict) else load_state(resume)
        if state["config"] != asdict(config):
            raise ConfigError("resume checkpoint was written with a different training config")
        task.model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        rng.bit_generator.state = state["rng"]
        torch.set_rng_state(state["torch_rng"])
        task.load_extra_state(state["extra"])
        curve = list(state["loss_curve"])
        start = state["step"]

    last_good = None
    end = config.steps if stop_after is None else min(config.steps, stop_after)
    task.model.train()
    step = start
    for step in range(start, end):
        lr = cosine_lr(step, config.steps, config.base_lr, config.min_lr)
        for g in opt.param_groups:
            g["lr"] = lr * g["lr_mult"]
        try:
            loss = task.loss(rng, step)
        except MaesegError as exc:
            raise TrainingError(f"step {step}: {exc}; last good checkpoint: {last_good}") from exc
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}; last good checkpoint: {last_good}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        task.after_step(step)
        curve.append({"step": step, "phase": config.phase, "loss": loss.item(), "lr": lr})
        if on_step is not None:
            on_step(step, opt, lr)
        if out_dir is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            last_good = out_dir / f"state_{step + 1:06d}.pt"
            _save_state(last_good, config, task, opt, rng, curve, step + 1)
    steps_run = end if end > start else start

    result = TrainResult(curve, None, steps_run)
    if out_dir is not None:
        result.checkpoint = out_dir / "state_last.pt"
        _save_state(result.checkpoint, config, task, opt, rng, curve, steps_run)
        write_loss_csv(out_dir / "loss_curve.csv", curve)
    return result


def pick_batch(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    """Random case indices for one batch; repeats only when there are too few cases."""
    return rng.choice(n, size=batch_size, replace=n < batch_size)


def seed_everything(seed: int):
    torch.manual_seed(seed)
