import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import pytest

from maeseg.cli import main

TINY = str(Path(__file__).resolve().parent.parent / "configs" / "tiny.toml")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    keys = dict(line.split("=", 1) for line in out.out.splitlines() if "=" in line and line.split("=")[0].isupper())
    return code, keys, out.err


@pytest.fixture(autouse=True)
def _env(monkeypatch, tmp_path):
    monkeypatch.delenv("MAESEG_TEST_MODE", raising=False)
    monkeypatch.setenv("MAESEG_OUT", str(tmp_path / "env_out"))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["generate", "--config", TINY, "--seed", "0", "--out", str(out)]) == 0
    return out / "manifest.json"


def test_generate_writes_manifest_and_run_manifest(capsys, tmp_path):
    code, keys, _ = run(capsys, "generate", "--config", TINY, "--seed", "3", "--out", tmp_path, "--test", "1",
                        "--unlabeled", "0", "--val", "0", "--labeled", "1")
    assert code == 0
    entries = json.loads(Path(keys["MANIFEST"]).read_text())
    assert [e["split"] for e in entries] == ["train", "test"]
    rm = json.loads(Path(keys["RUN_MANIFEST"]).read_text())
    assert rm["status"] == "ok" and rm["seed"] == 3 and rm["command"] == "generate"
    assert rm["resolvedConfig"]["seed"] == 3 and rm["artifacts"]["MANIFEST"] == keys["MANIFEST"]
    for key in ("configPath", "gitDescribableVersion", "startTime", "endTime", "error"):
        assert key in rm


def test_output_root_from_environment(capsys, tmp_path):
    code, keys, _ = run(capsys, "generate", "--config", TINY, "--seed", "0", "--labeled", "1", "--unlabeled", "0",
                        "--val", "0", "--test", "0")
    assert code == 0
    assert Path(keys["MANIFEST"]).parent == (tmp_path / "env_out" / "generate").resolve()


def test_usage_errors_exit_2(capsys, tmp_path):
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "pretrain", "--config", tmp_path / "missing.toml", "--seed", "0")[0] == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[finetune]\nllrd = 0.5\n")
    code, _, err = run(capsys, "finetune", "--config", bad, "--seed", "0")
    assert code == 2 and "finetune.llrd" in err
    assert run(capsys, "generate", "--config", TINY, "--seed", "0", "--workers", "0")[0] == 2
    assert run(capsys, "evaluate", "--checkpoint", tmp_path / "x.pt", "--manifest", tmp_path / "m.json",
               "--seed", "0")[0] == 2


def test_seed_required_in_test_mode(capsys, caplog, monkeypatch, tmp_path):
    monkeypatch.setenv("MAESEG_TEST_MODE", "1")
    code, _, err = run(capsys, "generate", "--config", TINY, "--out", tmp_path)
    assert code == 2 and "--seed" in err
    monkeypatch.delenv("MAESEG_TEST_MODE")
    code, _, err = run(capsys, "generate", "--config", TINY, "--out", tmp_path, "--test", "0", "--val", "0",
                       "--unlabeled", "0", "--labeled", "1")
    assert code == 0 and "no --seed" in caplog.text


def test_dry_run_touches_nothing(capsys, tmp_path):
    code = main(["pipeline", "--config", TINY, "--seed", "4", "--out", str(tmp_path / "p"), "--dry-run"])
    out = capsys.readouterr().out
    assert code == 0 and "seed = 4" in out and "[finetune]" in out
    assert not (tmp_path / "p").exists() and not (tmp_path / "env_out").exists()


def test_pretrain_finetune_ssl_evaluate(capsys, tmp_path, dataset):
    code, pre, _ = run(capsys, "pretrain", "--config", TINY, "--seed", "0", "--manifest", dataset,
                       "--out", tmp_path / "pre")
    assert code == 0
    header = Path(pre["PRETRAIN_LOSS_CURVE"]).read_text().splitlines()[0]
    assert header == "step,phase,loss,lr"
    assert (tmp_path / "pre" / "snapshots").is_dir()

    code, ft, _ = run(capsys, "finetune", "--config", TINY, "--seed", "0", "--manifest", dataset,
                      "--pretrained", pre["PRETRAIN_CHECKPOINT"], "--out", tmp_path / "ft")
    assert code == 0 and Path(ft["CHECKPOINT"]).is_file()
    rm = json.loads(Path(ft["RUN_MANIFEST"]).read_text())
    assert rm["resolvedConfig"]["finetune"]["pretrained"] == pre["PRETRAIN_CHECKPOINT"]

    # replaying the run manifest reproduces the loss curve exactly
    code, again, _ = run(capsys, "finetune", "--config", ft["RUN_MANIFEST"], "--seed", "0",
                         "--out", tmp_path / "replay")
    assert code == 0
    assert Path(again["LOSS_CURVE"]).read_text() == Path(ft["LOSS_CURVE"]).read_text()

    code, ssl, _ = run(capsys, "train-ssl", "--config", TINY, "--seed", "0", "--manifest", dataset,
                       "--out", tmp_path / "ssl")
    assert code == 0
    assert Path(ssl["PSEUDO_QUALITY"]).read_text().startswith("step,dsc")
    phases = {line.split(",")[1] for line in Path(ssl["LOSS_CURVE"]).read_text().splitlines()[1:]}
    assert phases == {"finetune", "ssl"}

    code, ev, err = run(capsys, "evaluate", "--checkpoint", ft["CHECKPOINT"], "--manifest", dataset,
                        "--seed", "0", "--out", tmp_path / "ev", "--export-predictions")
    assert code == 0 and "DSC (%)" in err
    assert Path(ev["METRICS"]).read_text().startswith("id,dsc,assd_mm,hd95_mm")
    assert len(list(Path(ev["PREDICTIONS"]).glob("*.vol"))) == 3


def test_finetune_with_incompatible_encoder_exits_2(capsys, tmp_path, dataset):
    other = tmp_path / "other.toml"
    other.write_text(Path(TINY).read_text().replace("embed_dim = 32", "embed_dim = 16"))
    code, pre, _ = run(capsys, "pretrain", "--config", other, "--seed", "0", "--manifest", dataset,
                       "--out", tmp_path / "pre")
    assert code == 0
    code, _, err = run(capsys, "finetune", "--config", TINY, "--seed", "0", "--manifest", dataset,
                       "--pretrained", pre["PRETRAIN_CHECKPOINT"], "--out", tmp_path / "ft")
    assert code == 2 and "embed_dim" in err
    code, _, err = run(capsys, "transfer", "--config-a", TINY, "--config-b", TINY, "--seed", "0", "--labeled", "1",
                       "--pretrained", pre["PRETRAIN_CHECKPOINT"], "--out", tmp_path / "tr")
    assert code == 2


def test_pipeline_resumes_after_interruption(capsys, caplog, tmp_path):
    caplog.set_level(logging.INFO)
    out = tmp_path / "pipe"
    code, keys, err = run(capsys, "pipeline", "--config", TINY, "--seed", "1", "--out", out)
    assert code == 0, err
    report = Path(keys["REPORT"]).read_text()
    curve = (out / "finetune" / "loss_curve.csv").read_text()
    rm = json.loads(Path(keys["RUN_MANIFEST"]).read_text())
    assert set(rm["artifacts"]) >= {"MANIFEST", "PRETRAIN_CHECKPOINT", "CHECKPOINT", "METRICS", "REPORT"}

    # simulate a crash after the step-2 checkpoint of fine-tuning
    (out / "finetune" / "unetr.pt").unlink()
    (out / "finetune" / "state_last.pt").unlink()
    (out / "finetune" / "state_000004.pt").unlink(missing_ok=True)
    code, keys, err = run(capsys, "pipeline", "--config", TINY, "--seed", "1", "--out", out)
    assert code == 0
    assert "pretrain: " in caplog.text and "exists, skipping" in caplog.text
    assert (out / "finetune" / "loss_curve.csv").read_text() == curve
    assert Path(keys["REPORT"]).read_text() == report


def test_pipeline_stage_failure_names_stage(capsys, tmp_path):
    broken = tmp_path / "broken.toml"
    missing = tmp_path / "nothing.json"
    broken.write_text(Path(TINY).read_text().replace('family = "tibia-like"',
                                                     f'family = "tibia-like"\nmanifest = "{missing}"'))
    code, _, err = run(capsys, "pipeline", "--config", broken, "--seed", "0", "--out", tmp_path / "p")
    assert code == 1 and "stage 'load'" in err
    rm = json.loads((tmp_path / "p" / "run_manifest.json").read_text())
    assert rm["status"] == "failed" and "load" in rm["error"]


def test_transfer_sweep(capsys, tmp_path):
    pelvis = tmp_path / "pelvis.toml"
    pelvis.write_text(Path(TINY).read_text().replace("tibia-like", "pelvis-like"))
    code, keys, err = run(capsys, "transfer", "--config-a", pelvis, "--config-b", TINY, "--seed", "0",
                          "--labeled", "1", "2")
    assert code == 0, err
    for method in ("TRANSFER", "SCRATCH_UNETR", "SUPERVISED"):
        for n in (1, 2):
            assert Path(keys[f"METRICS_{method}_N{n}"]).is_file()
    assert "pelvis-like -> tibia-like" in Path(keys["REPORT"]).read_text()


def test_console_entry_point(tmp_path):
    env = dict(os.environ, MAESEG_OUT=str(tmp_path))
    res = subprocess.run([sys.executable, "-m", "maeseg", "generate", "--config", TINY, "--dry-run", "--seed", "2"],
                         capture_output=True, text=True, env=env)
    assert res.returncode == 0 and "seed = 2" in res.stdout
    res = subprocess.run([sys.executable, "-m", "maeseg", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("maeseg ")
