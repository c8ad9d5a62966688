import csv
import io
import subprocess
import sys

import pytest
import yaml

from slimmat.cli import main
from slimmat.config import StageConfig, save_config

TINY = dict(width=0.25, teacher_epochs=1, prune_epochs=1, train_epochs=1, batch_size=4,
            n_train=8, n_test=2, size=32)


@pytest.fixture
def runs(tmp_path, monkeypatch):
    monkeypatch.setenv("SLIMMAT_RUNS_DIR", str(tmp_path / "runs"))
    return tmp_path / "runs"


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.yaml"
    save_config(StageConfig(**TINY), path)
    return path


def test_gen_data_counts_and_force(tmp_path, capsys):
    out = tmp_path / "d1"
    assert main(["gen-data", "--out", str(out), "--n-train", "200", "--n-test", "20", "--size", "64",
                 "--seed", "7"]) == 0
    manifest = out / "manifest.csv"
    assert capsys.readouterr().out.strip() == str(manifest)
    rows = list(csv.DictReader(io.StringIO(manifest.read_text())))
    assert len(rows) == 220
    assert len(list((out / "train").iterdir())) == 200 and len(list((out / "test").iterdir())) == 20
    first = manifest.read_bytes()
    assert main(["gen-data", "--out", str(out), "--n-train", "200", "--n-test", "20", "--size", "64",
                 "--seed", "7", "--force"]) == 0
    assert manifest.read_bytes() == first


def test_gen_data_refuses_overwrite(tmp_path):
    args = ["gen-data", "--out", str(tmp_path / "d"), "--n-train", "1", "--n-test", "1", "--size", "32"]
    assert main(args) == 0
    assert main(args) == 3


def test_invalid_size_exits_2():
    proc = subprocess.run([sys.executable, "-m", "slimmat.cli", "gen-data", "--out", "x", "--size", "8"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "size" in proc.stderr


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--model", "m", "--data", "d", "--bogus"])
    assert exc.value.code == 2


def test_config_violation_lists_keys(tmp_path, runs, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"schema": "slimmat/v1", "ratio": 1.5, "colour": 3}))
    assert main(["teacher", "--config", str(bad)]) == 2
    assert "colour" in capsys.readouterr().err
    bad.write_text(yaml.safe_dump({"schema": "slimmat/v1", "ratio": 1.5}))
    assert main(["teacher", "--config", str(bad)]) == 2
    assert "ratio" in capsys.readouterr().err


def test_missing_checkpoint_exits_4(tmp_path, runs, tiny_cfg, capsys):
    missing = tmp_path / "nowhere" / "t.ckpt"
    assert main(["prune", "--config", str(tiny_cfg), "--teacher", str(missing)]) == 4
    assert str(missing) in capsys.readouterr().err
    assert main(["eval", "--model", str(missing), "--data", str(tmp_path)]) == 4


def test_report_without_teacher_exits_4(runs, tiny_cfg, capsys):
    assert main(["report", "--preset", "motivation", "--config", str(tiny_cfg), "--no-train-teacher"]) == 4
    assert "teacher.ckpt" in capsys.readouterr().err


def test_end_to_end_stages(tmp_path, runs, tiny_cfg, capsys):
    data = tmp_path / "d"
    assert main(["gen-data", "--out", str(data), "--n-train", "8", "--n-test", "2", "--size", "32"]) == 0
    assert main(["teacher", "--config", str(tiny_cfg), "--data", str(data), "--run", "t"]) == 0
    teacher = runs / "t" / "checkpoints" / "teacher.ckpt"
    assert teacher.exists()
    assert main(["teacher", "--config", str(tiny_cfg), "--data", str(data), "--run", "t"]) == 3

    capsys.readouterr()
    assert main(["prune", "--config", str(tiny_cfg), "--teacher", str(teacher), "--data", str(data),
                 "--ratio", "0.5", "--run", "p"]) == 0
    out = capsys.readouterr().out
    assert "tau_enc=" in out and "tau_dec=" in out and "params_before=" in out
    assert (runs / "p" / "prune_report.json").exists()
    assert yaml.safe_load((runs / "p" / "config.yaml").read_text())["ratio"] == 0.5

    pruned = runs / "p" / "checkpoints" / "pruned.ckpt"
    assert main(["train", "--config", str(tiny_cfg), "--teacher", str(teacher), "--student", str(pruned),
                 "--data", str(data), "--run", "f", "--kd", "OFD"]) == 0
    final = runs / "f" / "checkpoints" / "final.ckpt"
    for run in ("t", "p", "f"):
        assert (runs / run / "config.yaml").exists()

    capsys.readouterr()
    assert main(["eval", "--model", str(final), "--data", str(data / "test"),
                 "--per-image", str(tmp_path / "per.csv")]) == 0
    header, row = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert header == ["MSE", "SAD", "Grad", "Conn", "#Param", "FLOPs"]
    assert len(row) == 6 and all(float(v) >= 0 for v in row)
    assert len((tmp_path / "per.csv").read_text().strip().splitlines()) == 3


def test_train_requires_teacher_unless_plain(runs, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--student", str(tmp_path / "x.ckpt")])
    assert exc.value.code == 2


def test_report_ratio_sweep_rows(runs, tiny_cfg):
    assert main(["report", "--preset", "ratio_sweep", "--config", str(tiny_cfg)]) == 0
    rows = list(csv.DictReader((runs / "ratio_sweep" / "report.csv").open()))
    assert [r["Method"] for r in rows] == ["UNI-30%", "UNI-50%", "UNI-70%", "Ours-30%", "Ours-50%", "Ours-70%"]
    assert all(r[c] not in ("", "n/a") for r in rows for c in ("MSE", "SAD", "Grad", "Conn", "#Param", "FLOPs"))
    assert (runs / "ratio_sweep" / "config.yaml").exists()
    assert (runs / "ratio_sweep" / "report.md").read_text().count("|") > 20
