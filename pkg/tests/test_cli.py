import json
from pathlib import Path

import pytest

from resprobe import io
from resprobe.cli import main

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml"


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    assert main(["train", "--config", str(SMOKE), "--out", str(out)]) == 0
    return out / "smoke"


def test_train_writes_run_layout(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    assert {"config.yaml", "metrics.csv", "probes.csv", "summary.json", "final.ckpt", "best.ckpt"} <= names
    metrics = io.read_csv(run_dir / "metrics.csv")
    assert [r["epoch"] for r in metrics] == ["1", "2"]
    probes = io.read_csv(run_dir / "probes.csv")
    epoch2 = {r["probe"] for r in probes if r["epoch"] == "2"}
    assert epoch2 == {"cosine_loss", "l2_ratio", "drop_accuracy", "intermediate_accuracy"}
    assert {r["probe"] for r in probes if r["epoch"] == "1"} == {"cosine_loss", "l2_ratio"}
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["epochs"] == 2 and 0 <= summary["final_val_acc"] <= 1


def test_existing_run_dir_is_refused(run_dir, capsys):
    assert main(["train", "--config", str(SMOKE), "--out", str(run_dir.parent)]) == 2
    assert "already exists" in capsys.readouterr().err


def test_probe_drop_unroll_commands(run_dir, tmp_path):
    ck = str(run_dir / "final.ckpt")
    assert main(["probe", "--checkpoint", ck, "--split", "val", "--out", str(tmp_path / "p")]) == 0
    rows = io.read_csv(tmp_path / "p" / "probes.csv")
    assert {r["split"] for r in rows} == {"val"} and len(rows) == 3 * 4
    summary = json.loads((tmp_path / "p" / "probes_summary.json").read_text())
    assert set(summary["group_sizes"]) == {"borderline", "correct", "all"}
    assert main(["drop-scan", "--checkpoint", ck, "--out", str(tmp_path / "d")]) == 0
    assert len(io.read_csv(tmp_path / "d" / "drop_scan.csv")) == 3
    assert main(["unroll", "--checkpoint", ck, "--extra-steps", "2", "--out", str(tmp_path / "u")]) == 0
    rows = io.read_csv(tmp_path / "u" / "unroll.csv")
    assert sorted({r["step"] for r in rows}) == ["0", "1", "2"]
    # the training run's own probes.csv is untouched by standalone probing
    assert main(["probe", "--checkpoint", ck]) == 0
    assert (run_dir / "probe-final-train" / "probes.csv").exists()


def test_unknown_probe_and_missing_checkpoint(run_dir, tmp_path, capsys):
    assert main(["probe", "--checkpoint", str(run_dir / "final.ckpt"), "--probes", "nope", "--out", str(tmp_path)]) == 2
    assert main(["probe", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2
    assert "error" in capsys.readouterr().err


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RESPROBE_OUT", str(tmp_path / "envout"))
    cfg = tmp_path / "c.yaml"
    cfg.write_text(SMOKE.read_text().replace("epochs: 2", "epochs: 0"))
    assert main(["train", "--config", str(cfg)]) == 0
    assert (tmp_path / "envout" / "smoke" / "final.ckpt").exists()


def test_share_train_overrides(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(SMOKE.read_text().replace("epochs: 2", "epochs: 1"))
    assert main(["share-train", "--config", str(cfg), "--share-from", "1", "--bn-mode", "naive", "--out", str(tmp_path)]) == 0
    _, header = io.load_checkpoint(tmp_path / "smoke" / "final.ckpt")
    assert header["sharing"]["bn_mode"] == "naive" and header["sharing"]["share_from_block"] == 1


def test_gradcheck_command_exit_code(capsys):
    assert main(["gradcheck", "--seed", "1"]) == 0
    assert "checks passed" in capsys.readouterr().out
