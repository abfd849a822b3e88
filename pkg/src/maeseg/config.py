"""Run configuration: TOML sections with a default for every field.

Unknown keys and ill-typed values raise :class:`ConfigError` naming the
offending field path (``finetune.llrd_factor``).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .data import Preprocessing
from .errors import ConfigError
from .mae import MAEDecoderConfig
from .phantom import FAMILIES, PhantomSpec
from .ssl import SSLConfig
from .train import TrainConfig
from .vit import ViTConfig


@dataclass
class DataSection:
    family: str = "tibia-like"
    manifest: str = ""  # existing manifest; empty means generate phantoms
    labeled: int = 20
    unlabeled: int = 50
    val: int = 10
    test: int = 100
    shape: list = field(default_factory=lambda: [64, 64, 64])
    spacing: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    n_fractures: int = 2
    gap_width: float = 2.0
    noise_sigma: float = 20.0
    bone_intensity: float = 700.0
    background_intensity: float = 0.0
    hu_min: float = -500.0
    hu_max: float = 500.0
    target_spacing: list = field(default_factory=list)  # empty: keep native spacing


@dataclass
class ModelSection:
    patch_size: int = 16
    embed_dim: int = 192
    num_layers: int = 12
    num_heads: int = 4
    mlp_ratio: float = 4.0
    tap_layers: list = field(default_factory=lambda: [3, 6, 9, 12])
    decoder_embed_dim: int = 96
    decoder_layers: int = 8
    decoder_heads: int = 4
    feature_size: int = 16
    norm_pix_loss: bool = False


@dataclass
class PretrainSection:
    lr: float = 6.4e-3
    steps: int = 2000
    batch_size: int = 2
    mask_ratio: float = 0.75
    min_lr: float = 0.0
    checkpoint_every: int = 500
    snapshot_every: int = 0


@dataclass
class FinetuneSection:
    pretrained: str = ""  # MAE checkpoint to start from; empty means random init
    lr: float = 3.44e-2
    steps: int = 1000
    epochs: int = 0  # > 0: steps = epochs * ceil(labeled cases / batch_size), overriding steps
    batch_size: int = 2
    llrd_factor: float = 0.75
    min_lr: float = 0.0
    checkpoint_every: int = 250
    weak_augment: bool = True


@dataclass
class SSLSection:
    lr: float = 3.44e-2
    supervised_steps: int = 1000
    semi_steps: int = 2000
    supervised_epochs: int = 0  # > 0 overrides supervised_steps, counted over labeled cases
    semi_epochs: int = 0  # > 0 overrides semi_steps, counted over unlabeled cases
    ema_decay: float = 0.99
    pseudo_weight: float = 1.0
    batch_size: int = 2
    min_lr: float = 0.0
    checkpoint_every: int = 0
    quality_every: int = 100  # pseudo-label quality logging interval (0: off)


SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "pretrain": PretrainSection,
    "finetune": FinetuneSection,
    "ssl": SSLSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    ssl: SSLSection = field(default_factory=SSLSection)

    def to_dict(self) -> dict:
        return asdict(self)

    # -- views used by the training code

    def vit(self) -> ViTConfig:
        m = self.model
        shape = self.volume_shape()
        for axis, n in zip("xyz", shape):
            if n % m.patch_size:
                raise ConfigError(f"data.shape: axis {axis} ({n}) not divisible by model.patch_size")
        return ViTConfig(m.patch_size, m.embed_dim, m.num_layers, m.num_heads, m.mlp_ratio,
                         tuple(m.tap_layers), tuple(n // m.patch_size for n in shape))

    def volume_shape(self) -> tuple[int, int, int]:
        d = self.data
        if d.target_spacing:
            from .volume import resampled_shape

            return resampled_shape(d.shape, d.spacing, d.target_spacing)
        return tuple(d.shape)

    def mae_decoder(self) -> MAEDecoderConfig:
        m = self.model
        return MAEDecoderConfig(m.decoder_layers, m.decoder_embed_dim, m.decoder_heads, m.mlp_ratio,
                                m.norm_pix_loss)

    def phantom_template(self) -> PhantomSpec:
        d = self.data
        return PhantomSpec(0, tuple(d.shape), d.family, d.n_fractures, d.gap_width, d.noise_sigma,
                           d.bone_intensity, d.background_intensity, tuple(d.spacing))

    def counts(self) -> dict:
        d = self.data
        return {"labeled": d.labeled, "unlabeled": d.unlabeled, "val": d.val, "test": d.test}

    def preprocessing(self) -> Preprocessing:
        d = self.data
        return Preprocessing(d.hu_min, d.hu_max, tuple(d.target_spacing) if d.target_spacing else None)

    def pretrain_config(self) -> TrainConfig:
        p = self.pretrain
        return TrainConfig("pretrain", p.lr, p.steps, p.batch_size, None, self.seed, p.min_lr, p.checkpoint_every)

    def finetune_config(self, llrd: bool = True, n_cases: int | None = None) -> TrainConfig:
        f = self.finetune
        steps = _budget(f.steps, f.epochs, n_cases, f.batch_size)
        return TrainConfig("finetune", f.lr, steps, f.batch_size, f.llrd_factor if llrd else None,
                           self.seed, f.min_lr, f.checkpoint_every)

    def ssl_config(self, n_labeled: int | None = None, n_unlabeled: int | None = None) -> SSLConfig:
        s = self.ssl
        return SSLConfig(s.lr, _budget(s.supervised_steps, s.supervised_epochs, n_labeled, s.batch_size),
                         _budget(s.semi_steps, s.semi_epochs, n_unlabeled, s.batch_size), s.ema_decay,
                         s.pseudo_weight, s.batch_size, self.seed, s.min_lr, s.checkpoint_every, s.quality_every)

    def validate(self):
        if self.data.family not in FAMILIES:
            raise ConfigError(f"data.family: expected one of {FAMILIES}, got {self.data.family!r}")
        for name in ("shape", "spacing"):
            if len(getattr(self.data, name)) != 3:
                raise ConfigError(f"data.{name}: expected three values")
        if self.data.target_spacing and len(self.data.target_spacing) != 3:
            raise ConfigError("data.target_spacing: expected three values or an empty list")
        for path in ("finetune.epochs", "ssl.supervised_epochs", "ssl.semi_epochs"):
            sec, key = path.split(".")
            if getattr(getattr(self, sec), key) < 0:
                raise ConfigError(f"{path}: must be >= 0")
        if not 0 < self.pretrain.mask_ratio < 1:
            raise ConfigError("pretrain.mask_ratio: must lie in (0, 1)")
        self.phantom_template().validate()
        self.vit()
        self.mae_decoder()
        self.pretrain_config()
        self.finetune_config()
        self.ssl_config()
        return self


def _budget(steps: int, epochs: int, n_cases: int | None, batch_size: int) -> int:
    """Step budget: ``steps``, or ``epochs`` passes over ``n_cases`` when epochs are set."""
    if epochs <= 0 or n_cases is None:
        return steps
    return max(1, epochs * math.ceil(n_cases / batch_size))


def _coerce(path: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or any(isinstance(v, (bool, str, list, dict)) for v in value):
            raise ConfigError(f"{path}: expected a list of numbers, got {value!r}")
        return list(value)
    raise ConfigError(f"{path}: unsupported value {value!r}")


def from_dict(raw: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in raw.items():
        if key == "seed":
            cfg.seed = _coerce("seed", value, 0)
            continue
        if key not in SECTIONS:
            raise ConfigError(f"{key}: unknown section or key")
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a table")
        section = getattr(cfg, key)
        known = {f.name for f in fields(section)}
        for name, v in value.items():
            path = f"{key}.{name}"
            if name not in known:
                raise ConfigError(f"{path}: unknown key")
            setattr(section, name, _coerce(path, v, getattr(section, name)))
    return cfg.validate()


def load_config(path=None) -> RunConfig:
    """Read a TOML config, or the ``resolvedConfig`` of a run manifest (``.json``)."""
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    if path.suffix == ".json":
        raw = json.loads(path.read_text())
        raw = raw.get("resolvedConfig", raw)
    else:
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw)


def to_toml(cfg: RunConfig) -> str:
    """Render a resolved config as TOML (every field, defaults included)."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, list):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    lines = [f"seed = {cfg.seed}"]
    for name in SECTIONS:
        lines.append(f"\n[{name}]")
        for k, v in asdict(getattr(cfg, name)).items():
            lines.append(f"{k} = {fmt(v)}")
    return "\n".join(lines) + "\n"
