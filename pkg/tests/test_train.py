import csv
import math

import numpy as np
import pytest
import torch
from torch import nn

import oracles
from maeseg import ConfigError, TrainingError
from maeseg.train import (
    Task,
    TrainConfig,
    cosine_lr,
    group_of,
    llrd_multipliers,
    load_state,
    param_groups,
    pick_batch,
    train,
)
from maeseg.unetr import UNETR
from maeseg.vit import ViTConfig


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 6.4e-3) == 6.4e-3
    assert cosine_lr(100, 100, 6.4e-3, 1e-5) == 1e-5
    assert cosine_lr(50, 100, 3.44e-2) == pytest.approx(3.44e-2 / 2, abs=1e-18)
    for t in (0, 7, 33, 99):
        assert math.isclose(cosine_lr(t, 100, 3.44e-2, 1e-4), oracles.cosine_lr(t, 100, 3.44e-2, 1e-4))


def test_cosine_past_end_warns_and_clamps():
    with pytest.warns(UserWarning):
        assert cosine_lr(101, 100, 1.0, 0.1) == 0.1
    with pytest.raises(ConfigError):
        cosine_lr(-1, 100, 1.0)


def test_llrd_rule():
    m = llrd_multipliers(12, 0.75)
    assert m["block12"] == 0.75
    for i in range(1, 13):
        assert m[f"block{i:02d}"] == 0.75 ** (13 - i)
    assert m["patch_embed"] == 0.75**13 and m["head"] == 1.0
    assert set(llrd_multipliers(4, 1.0).values()) == {1.0}


def test_param_group_assignment():
    assert group_of("encoder.block07.attn.wq.weight") == "block07"
    assert group_of("encoder.patch_embed.pos") == "patch_embed"
    assert group_of("encoder.norm.weight") == "head"
    assert group_of("decoder.out.weight") == "head"
    model = UNETR(ViTConfig(embed_dim=16, num_heads=2, num_layers=4, tap_layers=(1, 2, 3, 4), grid_shape=(1, 1, 1)), 2)
    groups = {g["name"]: g for g in param_groups(model, 0.5)}
    assert groups["block04"]["lr_mult"] == 0.5 and groups["block01"]["lr_mult"] == 0.5**4
    assert groups["patch_embed"]["lr_mult"] == 0.5**5 and groups["head"]["lr_mult"] == 1.0
    n_params = sum(len(g["params"]) for g in groups.values())
    assert n_params == len(list(model.parameters()))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(phase="warmup")
    with pytest.raises(ConfigError):
        TrainConfig(llrd_factor=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(steps=0)
    assert TrainConfig().batch_size == 2


def test_pick_batch():
    rng = np.random.default_rng(0)
    assert len(set(pick_batch(rng, 10, 2).tolist())) == 2
    assert pick_batch(rng, 1, 2).tolist() == [0, 0]


class Quadratic(Task):
    """Noisy least squares: enough randomness to expose any RNG mismatch."""

    def __init__(self):
        torch.manual_seed(0)
        self.model = nn.Linear(4, 1)
        self.x = torch.randn(32, 4)
        self.y = self.x @ torch.tensor([1.0, -2.0, 0.5, 3.0]) + 0.1

    def loss(self, rng, step):
        idx = pick_batch(rng, 32, 4)
        noise = torch.randn(4) * 0.01
        return ((self.model(self.x[idx]).squeeze(-1) - self.y[idx] + noise) ** 2).mean()


def test_one_step_run():
    task = Quadratic()
    seen = []
    res = train(TrainConfig(steps=1, base_lr=0.1), task, on_step=lambda s, opt, lr: seen.append(lr))
    assert res.steps_run == 1 and len(res.loss_curve) == 1 and seen == [0.1]


def test_lr_applied_per_group():
    task = Quadratic()
    rates = []
    train(TrainConfig(steps=4, base_lr=0.1), task, on_step=lambda s, opt, lr: rates.append(opt.param_groups[0]["lr"]))
    assert rates == [cosine_lr(t, 4, 0.1) for t in range(4)]


def test_determinism_and_bitwise_resume(tmp_path):
    cfg = TrainConfig(steps=10, base_lr=0.05, checkpoint_every=4, seed=3)
    full = train(cfg, Quadratic(), out_dir=tmp_path / "full")
    again = train(cfg, Quadratic(), out_dir=tmp_path / "again")
    assert [r["loss"] for r in full.loss_curve] == [r["loss"] for r in again.loss_curve]
    resumed = train(cfg, Quadratic(), out_dir=tmp_path / "resumed", resume=tmp_path / "full" / "state_000004.pt")
    assert resumed.loss_curve == full.loss_curve
    a = torch.load(tmp_path / "full" / "state_last.pt", weights_only=False)["model"]
    b = torch.load(tmp_path / "resumed" / "state_last.pt", weights_only=False)["model"]
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_stop_and_resume_matches_uninterrupted(tmp_path):
    cfg = TrainConfig(steps=8, base_lr=0.05, seed=1)
    full = train(cfg, Quadratic())
    part = train(cfg, Quadratic(), out_dir=tmp_path, stop_after=5)
    assert part.steps_run == 5
    rest = train(cfg, Quadratic(), resume=tmp_path / "state_last.pt")
    assert rest.loss_curve == full.loss_curve


def test_resume_with_other_config_rejected(tmp_path):
    train(TrainConfig(steps=2), Quadratic(), out_dir=tmp_path)
    with pytest.raises(ConfigError):
        train(TrainConfig(steps=3), Quadratic(), resume=tmp_path / "state_last.pt")


def test_loss_csv_format(tmp_path):
    train(TrainConfig(phase="pretrain", steps=3, base_lr=0.01), Quadratic(), out_dir=tmp_path)
    with open(tmp_path / "loss_curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["step", "phase", "loss", "lr"]
    assert [r["step"] for r in rows] == ["0", "1", "2"] and rows[0]["phase"] == "pretrain"
    assert load_state(tmp_path / "state_last.pt")["step"] == 3


class Exploding(Quadratic):
    def loss(self, rng, step):
        return torch.tensor(float("nan"), requires_grad=True) if step == 3 else super().loss(rng, step)


def test_non_finite_loss_aborts_naming_last_checkpoint(tmp_path):
    with pytest.raises(TrainingError, match="state_000002.pt"):
        train(TrainConfig(steps=6, checkpoint_every=2), Exploding(), out_dir=tmp_path)
    assert (tmp_path / "state_000002.pt").is_file()
