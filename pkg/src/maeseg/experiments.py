"""Stage runners and the two comparison experiments (label efficiency, transfer).

Everything here is driven by a :class:`RunConfig`; the CLI is a thin layer
over these functions. Models are built right after ``torch.manual_seed`` so
a config plus a seed fixes every weight.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baseline import UNet3D
from .config import RunConfig
from .data import Case, load_cases, prepare, read_manifest, select, stack_images
from .errors import ConfigError
from .mae import MaskedAutoencoder, load_mae, pretrain
from .metrics import MetricReport, comparison_table, evaluate_cases, mean_sd
from .phantom import generate_cases
from .ssl import SSLResult, ssl_train
from .train import TrainResult, seed_everything
from .unetr import UNETR, finetune

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    labeled: list[Case] = field(default_factory=list)
    unlabeled: list[Case] = field(default_factory=list)
    val: list[Case] = field(default_factory=list)
    test: list[Case] = field(default_factory=list)

    @property
    def train_images(self) -> np.ndarray:
        """Every training image, labels ignored: the pretraining pool."""
        return stack_images(self.labeled + self.unlabeled)


def _split(cases) -> Dataset:
    ds = Dataset()
    for c in cases:
        kind = c.id.rsplit("-", 2)[-2]
        getattr(ds, kind).append(c)
    return ds


def build_dataset(cfg: RunConfig, seed: int | None = None, workers: int = 1) -> Dataset:
    """Cases from ``cfg.data.manifest`` if set, otherwise freshly generated phantoms."""
    prep = cfg.preprocessing()
    if cfg.data.manifest:
        entries = read_manifest(cfg.data.manifest)
        ds = Dataset(
            labeled=load_cases(select(entries, "train", labeled=True), prep, workers),
            unlabeled=load_cases(select(entries, "train", labeled=False), prep, workers),
            val=load_cases(select(entries, "val"), prep, workers),
            test=load_cases(select(entries, "test", labeled=True), prep, workers),
        )
    else:
        seed = cfg.seed if seed is None else seed
        raw = generate_cases(seed, cfg.counts(), cfg.data.family, cfg.phantom_template(), workers)
        ds = _split(prepare(raw, prep, workers))
    if ds.labeled and ds.labeled[0].image.shape != cfg.volume_shape():
        raise ConfigError(f"data.shape: volumes are {ds.labeled[0].image.shape}, config expects {cfg.volume_shape()}")
    return ds


def new_mae(cfg: RunConfig) -> MaskedAutoencoder:
    seed_everything(cfg.seed)
    return MaskedAutoencoder(cfg.vit(), cfg.mae_decoder())


def new_unetr(cfg: RunConfig, encoder=None) -> UNETR:
    seed_everything(cfg.seed + 1)
    return UNETR(cfg.vit(), cfg.model.feature_size, encoder=encoder)


def new_unet(cfg: RunConfig) -> UNet3D:
    seed_everything(cfg.seed + 2)
    return UNet3D(cfg.model.feature_size)


def run_pretrain(cfg: RunConfig, images: np.ndarray, out_dir=None, resume=None) -> tuple[MaskedAutoencoder, TrainResult]:
    model = new_mae(cfg)
    result = pretrain(model, images, cfg.pretrain_config(), cfg.pretrain.mask_ratio, out_dir=out_dir,
                      resume=resume, snapshot_every=cfg.pretrain.snapshot_every)
    return model, result


def check_compatible(cfg: RunConfig, mae: MaskedAutoencoder):
    if mae.vit_config != cfg.vit():
        raise ConfigError(f"model: checkpoint ViT {mae.vit_config} does not match config ViT {cfg.vit()}")


def load_pretrained(cfg: RunConfig, path) -> MaskedAutoencoder:
    mae = load_mae(path)
    check_compatible(cfg, mae)
    return mae


def run_finetune(cfg: RunConfig, labeled, mae: MaskedAutoencoder | None = None, out_dir=None,
                 resume=None) -> tuple[UNETR, TrainResult]:
    """UNETR fine-tuning; with ``mae`` a copy of its encoder initializes the backbone and LLRD applies."""
    model = new_unetr(cfg, None if mae is None else copy.deepcopy(mae.encoder))
    prep = cfg.preprocessing()
    result = finetune(model, labeled, cfg.finetune_config(mae is not None, len(labeled)), cfg.finetune.weak_augment,
                      out_dir=out_dir, resume=resume,
                      preprocessing={"hu_min": prep.hu_min, "hu_max": prep.hu_max,
                                     "target_spacing": None if prep.target_spacing is None else list(prep.target_spacing)})
    return model, result


def run_ssl(cfg: RunConfig, labeled, unlabeled, out_dir=None, heldout=()) -> SSLResult:
    config = cfg.ssl_config(len(labeled), len(unlabeled))
    return ssl_train(config, new_unetr(cfg), labeled, unlabeled, out_dir, heldout)


def run_unet(cfg: RunConfig, labeled, out_dir=None) -> tuple[UNet3D, TrainResult]:
    model = new_unet(cfg)
    result = finetune(model, labeled, cfg.finetune_config(False, len(labeled)), cfg.finetune.weak_augment,
                      out_dir=out_dir)
    return model, result


# -- label efficiency -------------------------------------------------------

@dataclass
class SweepResult:
    """Per-seed test reports keyed by ``(method, n_labeled)``."""

    reports: dict[tuple[str, int], list[MetricReport]] = field(default_factory=dict)

    def add(self, method: str, n: int, report: MetricReport):
        self.reports.setdefault((method, n), []).append(report)

    def seed_dsc(self, method: str, n: int) -> list[float]:
        """Per-seed mean test DSC over every test case (empty predictions count as scored)."""
        return [float(np.mean(list(r.dsc_all.values()))) for r in self.reports[(method, n)]]

    def mean_dsc(self, method: str, n: int) -> float:
        return float(np.mean(self.seed_dsc(method, n)))

    def pooled(self, method: str, n: int) -> MetricReport:
        runs = self.reports[(method, n)]
        return MetricReport([c for r in runs for c in r.per_case], [m for r in runs for m in r.missing], str(n),
                            {f"{i}:{k}": v for i, r in enumerate(runs) for k, v in r.dsc_all.items()})

    def table(self, title: str = "") -> str:
        rows = {f"{m} ({n})": self.pooled(m, n) for (m, n) in sorted(self.reports, key=lambda k: (k[0], -k[1]))}
        text = comparison_table(rows, title)
        for (m, n) in sorted(self.reports):
            mu, sd = mean_sd(self.seed_dsc(m, n))
            text += f"{m} n={n}: per-seed mean DSC {100 * mu:.2f}±{100 * sd:.2f}\n"
        return text


def _subdir(out_dir, *parts):
    return None if out_dir is None else Path(out_dir).joinpath(*parts)


def label_efficiency(cfg: RunConfig, labeled_counts=(5, 10, 20), seeds=(0, 1, 2), out_dir=None,
                     workers: int = 1) -> SweepResult:
    """MAE-pretrain + fine-tune against the semi-supervised baseline at several labeled counts.

    Per seed one phantom dataset is drawn with ``max(labeled_counts)`` labeled
    cases; smaller counts use its first ``n`` labeled cases, so the subsets
    are nested. MAE pretraining sees every training image once per seed.
    """
    counts = sorted(set(int(n) for n in labeled_counts))
    if counts[0] < 1:
        raise ConfigError("labeled counts must be >= 1")
    result = SweepResult()
    for seed in seeds:
        run = replace(cfg, seed=int(seed), data=replace(cfg.data, labeled=counts[-1]))
        ds = build_dataset(run, workers=workers)
        mae, _ = run_pretrain(run, ds.train_images, out_dir=_subdir(out_dir, f"seed{seed}", "pretrain"))
        for n in counts:
            labeled = ds.labeled[:n]
            model, _ = run_finetune(run, labeled, mae, out_dir=_subdir(out_dir, f"seed{seed}", f"mae_n{n}"))
            result.add("MAE+UNETR", n, evaluate_cases(model, ds.test, str(n)))
            ssl = run_ssl(run, labeled, ds.unlabeled, out_dir=_subdir(out_dir, f"seed{seed}", f"ssl_n{n}"),
                          heldout=[c for c in ds.val if c.label is not None])
            result.add("SSL", n, evaluate_cases(ssl.student, ds.test, str(n)))
            log.info("seed %d n=%d: MAE %.4f SSL %.4f", seed, n,
                     result.seed_dsc("MAE+UNETR", n)[-1], result.seed_dsc("SSL", n)[-1])
    return result


# -- transfer ---------------------------------------------------------------

TRANSFER_METHODS = ("transfer", "scratch-unetr", "supervised")


def transfer(cfg_a: RunConfig, cfg_b: RunConfig, seeds=(0,), labeled_counts=None, out_dir=None,
             pretrained=None, workers: int = 1) -> SweepResult:
    """Pretrain on family A, fine-tune on family B; compare with two family-B-only models.

    ``transfer`` is the A-pretrained UNETR, ``scratch-unetr`` the same network
    trained from random weights, ``supervised`` a plain convolutional U-Net.
    ``pretrained`` reuses an existing family-A MAE checkpoint for every seed.
    """
    if cfg_a.vit() != cfg_b.vit():
        raise ConfigError("model: family A and family B configs describe different ViT encoders")
    counts = sorted(set(int(n) for n in (labeled_counts or [cfg_b.data.labeled])))
    result = SweepResult()
    for seed in seeds:
        run_a = replace(cfg_a, seed=int(seed))
        run_b = replace(cfg_b, seed=int(seed), data=replace(cfg_b.data, labeled=counts[-1]))
        if pretrained is not None:
            mae = load_pretrained(run_b, pretrained)
        else:
            ds_a = build_dataset(run_a, workers=workers)
            mae, _ = run_pretrain(run_a, ds_a.train_images, out_dir=_subdir(out_dir, f"seed{seed}", "pretrain_a"))
        # family B cases must not coincide with family A cases when the families match
        ds_b = build_dataset(run_b, seed=int(seed) + 10_000, workers=workers)
        for n in counts:
            labeled = ds_b.labeled[:n]
            sub = lambda name: _subdir(out_dir, f"seed{seed}", f"{name}_n{n}")  # noqa: E731
            model, _ = run_finetune(run_b, labeled, mae, out_dir=sub("transfer"))
            result.add("transfer", n, evaluate_cases(model, ds_b.test, str(n)))
            model, _ = run_finetune(run_b, labeled, None, out_dir=sub("scratch"))
            result.add("scratch-unetr", n, evaluate_cases(model, ds_b.test, str(n)))
            model, _ = run_unet(run_b, labeled, out_dir=sub("unet"))
            result.add("supervised", n, evaluate_cases(model, ds_b.test, str(n)))
    return result


def write_sweep(result: SweepResult, out_dir, title: str = "") -> dict[str, Path]:
    """One ``metrics.csv``/``report.txt`` pair per (method, n) plus a combined table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for (method, n) in sorted(result.reports):
        csv_path, _ = result.pooled(method, n).write(out_dir / f"{method}_n{n}")
        paths[f"METRICS_{method.upper().replace('-', '_').replace('+', '_')}_N{n}"] = csv_path
    table = out_dir / "report.txt"
    table.write_text(result.table(title))
    paths["REPORT"] = table
    return paths

