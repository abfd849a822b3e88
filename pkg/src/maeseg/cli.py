"""Command-line entry point: ``maeseg <command> [options]``.

Artifact paths go to stdout as ``KEY=PATH`` lines; logs and reports go to
stderr. Exit status is 0 on success, 1 on a runtime failure and 2 on a
usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config, to_toml
from .errors import ConfigError, MaesegError
from .experiments import (
    build_dataset,
    load_pretrained,
    new_mae,
    run_finetune,
    run_ssl,
    transfer,
    write_sweep,
)
from .mae import load_mae, pretrain
from .metrics import evaluate_split
from .phantom import FAMILIES, generate_dataset
from .train import write_loss_csv
from .unetr import save_unetr

log = logging.getLogger("maeseg")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
TEST_MODE_ENV = "MAESEG_TEST_MODE"
OUT_ENV = "MAESEG_OUT"


class UsageError(MaesegError):
    """Bad command-line usage (exit 2)."""


class StageError(MaesegError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class Run:
    """Bookkeeping for one invocation: output root, artifacts, run manifest."""

    def __init__(self, args, cfg: RunConfig | None):
        self.command = args.command
        self.config_path = getattr(args, "config", None)
        self.cfg = cfg
        self.seed = args.seed
        self.start = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.artifacts: dict[str, str] = {}
        self.out = output_root(args)

    def emit(self, key: str, path):
        path = str(Path(path).resolve())
        self.artifacts[key] = path
        print(f"{key}={path}", flush=True)

    def write_manifest(self, status: str, error: str | None = None):
        self.out.mkdir(parents=True, exist_ok=True)
        doc = {
            "command": self.command,
            "configPath": None if self.config_path is None else str(Path(self.config_path).resolve()),
            "resolvedConfig": None if self.cfg is None else self.cfg.to_dict(),
            "seed": self.seed,
            "gitDescribableVersion": describe_version(),
            "startTime": self.start,
            "endTime": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "status": status,
            "error": error,
            "artifacts": self.artifacts,
        }
        path = self.out / "run_manifest.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(doc, indent=1))
        os.replace(tmp, path)
        print(f"RUN_MANIFEST={path.resolve()}", flush=True)


def describe_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def output_root(args) -> Path:
    """``--out`` if given, else ``$MAESEG_OUT/<command>``, else ``runs/<command>``."""
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV) or "runs") / args.command


def resolve_seed(args, cfg: RunConfig | None) -> RunConfig | None:
    if args.seed is None:
        if os.environ.get(TEST_MODE_ENV, "") not in ("", "0"):
            raise UsageError(f"--seed is required when {TEST_MODE_ENV} is set")
        fallback = cfg.seed if cfg is not None else 0
        log.warning("no --seed given; using seed %d", fallback)
        args.seed = fallback
    return None if cfg is None else replace(cfg, seed=args.seed)


def _latest_state(stage_dir: Path):
    states = sorted(stage_dir.glob("state_[0-9]*.pt"))
    return states[-1] if states else None


# -- commands ---------------------------------------------------------------

def cmd_generate(args, run: Run):
    cfg = run.cfg
    counts = cfg.counts()
    for key in counts:
        value = getattr(args, key)
        if value is not None:
            counts[key] = value
    family = args.family or cfg.data.family
    generate_dataset(args.seed, counts, family, run.out, cfg.phantom_template(), args.workers)
    run.emit("MANIFEST", run.out / "manifest.json")


def _dataset(args, cfg):
    return build_dataset(cfg, workers=args.workers)


def apply_overrides(args, cfg: RunConfig | None) -> RunConfig | None:
    """Fold path flags into the config so the run manifest alone can replay the run."""
    if cfg is None:
        return None
    if args.command in ("pretrain", "finetune", "train-ssl") and args.manifest:
        cfg = replace(cfg, data=replace(cfg.data, manifest=str(_existing(args.manifest).resolve())))
    if args.command == "finetune" and args.pretrained:
        cfg = replace(cfg, finetune=replace(cfg.finetune, pretrained=str(_existing(args.pretrained).resolve())))
    return cfg


def cmd_pretrain(args, run: Run):
    ds = _dataset(args, run.cfg)
    _pretrain_stage(run, ds, run.out)


def _pretrain_stage(run: Run, ds, out: Path):
    if (out / "mae.pt").is_file():
        log.info("pretrain: %s exists, skipping", out / "mae.pt")
        mae = load_mae(out / "mae.pt")
    else:
        mae = new_mae(run.cfg)
        pretrain(mae, ds.train_images, run.cfg.pretrain_config(), run.cfg.pretrain.mask_ratio, out_dir=out,
                 resume=_latest_state(out), snapshot_every=run.cfg.pretrain.snapshot_every)
    run.emit("PRETRAIN_CHECKPOINT", out / "mae.pt")
    run.emit("PRETRAIN_LOSS_CURVE", out / "loss_curve.csv")
    return mae


def cmd_finetune(args, run: Run):
    path = run.cfg.finetune.pretrained
    mae = load_pretrained(run.cfg, _existing(path)) if path else None
    ds = _dataset(args, run.cfg)
    _finetune_stage(run, ds, mae, run.out)


def _finetune_stage(run: Run, ds, mae, out: Path):
    if (out / "unetr.pt").is_file():
        log.info("finetune: %s exists, skipping", out / "unetr.pt")
    else:
        run_finetune(run.cfg, ds.labeled, mae, out_dir=out, resume=_latest_state(out))
    run.emit("CHECKPOINT", out / "unetr.pt")
    run.emit("LOSS_CURVE", out / "loss_curve.csv")
    return out / "unetr.pt"


def cmd_train_ssl(args, run: Run):
    ds = _dataset(args, run.cfg)
    heldout = [c for c in ds.val if c.label is not None]
    result = run_ssl(run.cfg, ds.labeled, ds.unlabeled, out_dir=run.out, heldout=heldout)
    prep = run.cfg.preprocessing()
    save_unetr(run.out / "unetr.pt", result.student,
               {"hu_min": prep.hu_min, "hu_max": prep.hu_max,
                "target_spacing": None if prep.target_spacing is None else list(prep.target_spacing)})
    write_loss_csv(run.out / "loss_curve.csv", result.loss_curve)
    run.emit("CHECKPOINT", run.out / "unetr.pt")
    run.emit("LOSS_CURVE", run.out / "loss_curve.csv")
    if (run.out / "pseudo_quality.csv").is_file():
        run.emit("PSEUDO_QUALITY", run.out / "pseudo_quality.csv")


def cmd_evaluate(args, run: Run):
    report = evaluate_split(_existing(args.checkpoint), _existing(args.manifest), args.split, run.out,
                            args.workers, args.export_predictions)
    sys.stderr.write(report.format_table())
    run.emit("METRICS", run.out / "metrics.csv")
    run.emit("REPORT", run.out / "report.txt")
    if args.export_predictions:
        run.emit("PREDICTIONS", run.out / "predictions")


def cmd_pipeline(args, run: Run):
    cfg, out = run.cfg, run.out

    def stage(name, fn):
        log.info("stage %s", name)
        try:
            return fn()
        except Exception as exc:  # noqa: BLE001 - any failure is reported with its stage
            raise StageError(name, exc) from exc

    def generate():
        if cfg.data.manifest:
            return Path(cfg.data.manifest)
        manifest = out / "data" / "manifest.json"
        if manifest.is_file():
            log.info("generate: %s exists, skipping", manifest)
        else:
            generate_dataset(cfg.seed, cfg.counts(), cfg.data.family, out / "data", cfg.phantom_template(),
                             args.workers)
        return manifest

    manifest = stage("generate", generate)
    run.emit("MANIFEST", manifest)
    staged = replace(cfg, data=replace(cfg.data, manifest=str(manifest)))
    ds = stage("load", lambda: build_dataset(staged, workers=args.workers))
    if cfg.finetune.pretrained:
        mae = stage("pretrain", lambda: load_pretrained(cfg, _existing(cfg.finetune.pretrained)))
    else:
        mae = stage("pretrain", lambda: _pretrain_stage(run, ds, out / "pretrain"))
    ckpt = stage("finetune", lambda: _finetune_stage(run, ds, mae, out / "finetune"))
    report = stage("evaluate", lambda: evaluate_split(ckpt, manifest, "test", out / "evaluate", args.workers))
    sys.stderr.write(report.format_table())
    run.emit("METRICS", out / "evaluate" / "metrics.csv")
    run.emit("REPORT", out / "evaluate" / "report.txt")


def cmd_transfer(args, run: Run):
    cfg_a = replace(load_config(_config_path(args.config_a)), seed=args.seed)
    cfg_b = run.cfg
    seeds = [args.seed + i for i in range(args.n_seeds)]
    pretrained = None if args.pretrained is None else _existing(args.pretrained)
    result = transfer(cfg_a, cfg_b, seeds, args.labeled, run.out, pretrained, args.workers)
    paths = write_sweep(result, run.out, f"{cfg_a.data.family} -> {cfg_b.data.family}")
    sys.stderr.write(result.table())
    for key, path in paths.items():
        run.emit(key, path)


# -- parser -----------------------------------------------------------------

def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{p} does not exist")
    return p


def _config_path(path):
    if path is not None and not Path(path).is_file():
        raise ConfigError(f"config file {path} does not exist")
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maeseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_flag="--config"):
        if config_flag:
            p.add_argument(config_flag, dest=config_flag.lstrip("-").replace("-", "_"), metavar="FILE",
                           help="TOML config, or a run_manifest.json to replay")
        p.add_argument("--seed", type=int, help="master seed (required in test mode)")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
        p.add_argument("--workers", type=int, default=1, help="threads for data generation and loading")
        p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
        return p

    p = common(sub.add_parser("generate", help="write a phantom dataset and its manifest"))
    p.add_argument("--family", choices=FAMILIES)
    for key in ("labeled", "unlabeled", "val", "test"):
        p.add_argument(f"--{key}", type=int)

    for name, text in (("pretrain", "MAE pretraining"), ("finetune", "UNETR fine-tuning"),
                       ("train-ssl", "semi-supervised baseline")):
        p = common(sub.add_parser(name, help=text))
        p.add_argument("--manifest", help="use this dataset instead of the config's")
        if name == "finetune":
            p.add_argument("--pretrained", help="MAE checkpoint to initialize the encoder from")

    p = common(sub.add_parser("evaluate", help="score a fine-tuned checkpoint"), config_flag=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--export-predictions", action="store_true")

    common(sub.add_parser("pipeline", help="generate, pretrain, fine-tune and evaluate"))

    p = common(sub.add_parser("transfer", help="pretrain on family A, fine-tune on family B"), config_flag=None)
    p.add_argument("--config-a", metavar="FILE", help="family A (pretraining) config")
    p.add_argument("--config-b", metavar="FILE", help="family B (fine-tuning) config")
    p.add_argument("--labeled", type=int, nargs="+", metavar="N",
                   help="labeled-count sweep for family B, e.g. --labeled 5 10 20")
    p.add_argument("--n-seeds", type=int, default=1, help="run seeds S, S+1, ...")
    p.add_argument("--pretrained", help="existing family-A MAE checkpoint")
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "train-ssl": cmd_train_ssl,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
    "transfer": cmd_transfer,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    run = None
    try:
        if args.command == "evaluate":
            cfg = None
        elif args.command == "transfer":
            cfg = load_config(_config_path(args.config_b))
        else:
            cfg = load_config(_config_path(args.config))
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        cfg = apply_overrides(args, resolve_seed(args, cfg))
        if args.dry_run:
            sys.stdout.write(to_toml(cfg) if cfg is not None else f"seed = {args.seed}\n")
            return EXIT_OK
        run = Run(args, cfg)
        COMMANDS[args.command](args, run)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if run is not None:
            run.write_manifest("failed", str(exc))
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        run.write_manifest("failed", str(exc))
        return EXIT_USAGE if isinstance(exc.cause, (ConfigError, UsageError)) else EXIT_RUNTIME
    except (MaesegError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if run is not None:
            run.write_manifest("failed", str(exc))
        return EXIT_RUNTIME
    run.write_manifest("ok")
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
