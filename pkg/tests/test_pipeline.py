import csv

import pytest
import torch

from slimmat.config import StageConfig, load_config
from slimmat.losses import KDMethod
from slimmat.metrics import METRIC_COLUMNS
from slimmat.netgraph import count_params, load_checkpoint, save_checkpoint
from slimmat.pipeline import (Dataset, MissingArtifactError, Report, RunDir, run_experiment_preset,
                              run_train_stage, train_plain, train_teacher)
from slimmat.pruner import prune_student, run_prune_stage
from slimmat.training import TensorData, evaluate, predict_alpha

TINY = StageConfig(width=0.25, size=32, batch_size=4, n_train=8, n_test=2,
                   teacher_epochs=2, prune_epochs=1, train_epochs=2)


@pytest.fixture(scope="module")
def data():
    return Dataset.synthetic(TINY)


@pytest.fixture(scope="module")
def teacher(data):
    return train_teacher(TINY, data)[0]


@pytest.fixture(scope="module")
def pruned(teacher, data):
    sparse, _ = run_prune_stage(teacher, TINY, data.train)
    return prune_student(sparse, 0.5, input_size=32)[0]


def same_weights(a, b, tol=0.0):
    return all(torch.allclose(a.weights[k][n], b.weights[k][n], atol=tol, rtol=0)
               for k in a.weights for n in a.weights[k])


def _sad_on_train(net, data):
    return sum(r["SAD"] for r in evaluate(net, data)[0])


def test_teacher_overfits_single_sample(data):
    one = TensorData(data.train.inputs[:1], data.train.alpha[:1], data.train.trimap[:1])
    cfg = TINY.replace(teacher_epochs=200, batch_size=1)
    single = Dataset(one, one)
    before = train_teacher(cfg.replace(teacher_epochs=0), single)[0]
    after, train_log = train_teacher(cfg, single)
    assert len([1 for _, k, _ in train_log.rows if k == "total"]) == 200
    assert _sad_on_train(after, one) < _sad_on_train(before, one)


def test_teacher_deterministic(data, teacher):
    again, _ = train_teacher(TINY, data)
    assert same_weights(teacher, again)
    first = train_teacher(TINY, data)[1].final_loss
    assert abs(train_teacher(TINY, data)[1].final_loss - first) <= 1e-6


@pytest.mark.parametrize("method", ["NST", "OFD", "SPKD"])
def test_train_stage_deterministic(teacher, pruned, data, method):
    kd = KDMethod(method)
    a, la = run_train_stage(pruned, teacher, TINY, data, kd)
    b, lb = run_train_stage(pruned, teacher, TINY, data, kd)
    assert abs(la.final_loss - lb.final_loss) <= 1e-6
    assert same_weights(a, b)
    ea, eb = evaluate(a, data.test)[1], evaluate(b, data.test)[1]
    assert all(abs(ea[c] - eb[c]) <= 1e-6 for c in METRIC_COLUMNS)


@pytest.mark.parametrize("method", ["OFD", "SPKD"])
def test_zero_teacher_weights_equal_plain_training(teacher, pruned, data, method):
    cfg = TINY.replace(weights=(1.0, 0.0, 0.0))
    kd_net, kd_log = run_train_stage(pruned, teacher, cfg, data, KDMethod(method))
    plain_net, plain_log = train_plain(pruned, cfg, data)
    assert same_weights(kd_net, plain_net, tol=1e-6)
    assert abs(kd_log.final_loss - plain_log.final_loss) <= 1e-6


def test_train_stage_starts_from_scratch(teacher, pruned, data):
    trained, _ = run_train_stage(pruned, teacher, TINY.replace(train_epochs=0), data)
    assert count_params(trained) == count_params(pruned)
    assert not same_weights(trained, pruned)


def test_stage_isolation(teacher, pruned, data, tmp_path):
    path = tmp_path / "pruned.ckpt"
    save_checkpoint(pruned, path)
    before = path.read_bytes()
    snapshot = {k: {n: t.clone() for n, t in v.items()} for k, v in teacher.weights.items()}
    run_train_stage(load_checkpoint(path), teacher, TINY, data)
    assert path.read_bytes() == before
    assert all(torch.equal(snapshot[k][n], teacher.weights[k][n]) for k in snapshot for n in snapshot[k])


def test_resume_from_saved_artifacts(teacher, data, tmp_path):
    sparse, _ = run_prune_stage(teacher, TINY, data.train)
    net, _ = prune_student(sparse, 0.5, input_size=32)
    direct, _ = run_train_stage(net, teacher, TINY, data)
    save_checkpoint(sparse, tmp_path / "sparse.ckpt")
    save_checkpoint(teacher, tmp_path / "teacher.ckpt")
    resumed_net, _ = prune_student(load_checkpoint(tmp_path / "sparse.ckpt"), 0.5, input_size=32)
    resumed, _ = run_train_stage(resumed_net, load_checkpoint(tmp_path / "teacher.ckpt"), TINY, data)
    assert same_weights(direct, resumed)


def test_predictions_copy_known_labels(teacher, data):
    pred = predict_alpha(teacher, data.test)
    tri = data.test.trimap.numpy().reshape(pred.shape)
    assert (pred[tri == 1] == 1).all() and (pred[tri == 0] == 0).all()


def test_missing_teacher_is_named(tmp_path, data):
    run = RunDir("r", tmp_path)
    with pytest.raises(MissingArtifactError, match="teacher.ckpt"):
        run_experiment_preset("motivation", TINY, data, run, train_teacher_if_missing=False)
    with pytest.raises(MissingArtifactError, match="nothing.ckpt"):
        run.require("nothing")


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _complete(rows):
    return all(r[c] != "" for r in rows for c in METRIC_COLUMNS)


def test_motivation_preset(tmp_path, data):
    run = RunDir("m", tmp_path)
    report = run_experiment_preset("motivation", TINY, data, run)
    rows = _rows(run.path / "report.csv")
    assert [r["Method"] for r in rows] == ["Low-level pruned", "High-level pruned"]
    assert _complete(rows)
    assert int(rows[1]["#Param"]) < int(rows[0]["#Param"])
    assert load_config(run.path / "config.yaml") == TINY
    assert "optimizer" in (run.path / "report.md").read_text()
    assert report.rows[0]["Method"] == "Low-level pruned"


def test_no_kd_baseline_and_mismatch_presets(tmp_path, data):
    run = RunDir("n", tmp_path)
    run_experiment_preset("no_kd_baseline", TINY, data, run)
    rows = _rows(run.path / "report.csv")
    assert [(r["Prune"], r["Training"]) for r in rows] == [
        (f"+{m}", t) for m in ("NST", "OFD", "SPKD") for t in ("KD", "scratch")]
    assert _complete(rows)
    # the mismatch preset reuses the cached teacher and pruned students
    run_experiment_preset("mismatch", TINY, data, run)
    rows = _rows(run.path / "report.csv")
    assert len(rows) == 9 and _complete(rows)
    assert {r["Train"] for r in rows} == {"+NST", "+OFD", "+SPKD"}


def test_report_fills_missing_columns():
    rep = Report("t")
    rep.add({"Method": "x"}, {"MSE": 0.5})
    assert rep.rows[0]["SAD"] == "n/a"
    assert "n/a" in rep.to_markdown() and rep.to_csv().count("n/a") == 5
