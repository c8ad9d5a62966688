"""Teacher pretraining, training stage, evaluation and experiment presets."""
from __future__ import annotations

import csv
import io
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import StageConfig, save_config
from .data import in_memory_dataset, load_split
from .executor import GraphModule
from .losses import KDMethod, StageLoss, _terms, alpha_prediction_loss, training_stage_loss
from .metrics import METRIC_COLUMNS
from .netgraph import (NetworkGraph, build_mini_matting_net, load_checkpoint, reinitialize,
                       save_checkpoint)
from .pruner import make_distiller, prune_student, run_prune_stage, uniform_prune
from .training import TensorData, TrainLog, evaluate, fit

log = logging.getLogger(__name__)

PRESETS = ("motivation", "main", "ratio_sweep", "mismatch", "no_kd_baseline")
TEACHER_SEED_OFFSET = 0
TRAIN_SEED_OFFSET = 2


class MissingArtifactError(FileNotFoundError):
    pass


def runs_root() -> Path:
    return Path(os.environ.get("SLIMMAT_RUNS_DIR", "runs"))


@dataclass
class Dataset:
    train: TensorData
    test: TensorData

    @classmethod
    def from_dir(cls, root) -> "Dataset":
        root = Path(root)
        return cls(TensorData.from_samples(load_split(root, "train")),
                   TensorData.from_samples(load_split(root, "test")))

    @classmethod
    def synthetic(cls, cfg: StageConfig) -> "Dataset":
        train, test = in_memory_dataset(cfg.n_train, cfg.n_test, cfg.size, cfg.data_seed)
        return cls(TensorData.from_samples(train), TensorData.from_samples(test))


# -- stages -----------------------------------------------------------------------------

def train_teacher(cfg: StageConfig, data: Dataset) -> tuple[NetworkGraph, TrainLog]:
    """Supervised alpha loss only; the teacher for every later stage."""
    net = build_mini_matting_net(cfg.width, seed=cfg.seed * 1000 + TEACHER_SEED_OFFSET)
    module = GraphModule(net)

    def step(x, gt, unknown):
        loss = alpha_prediction_loss(module(x), gt, unknown)
        return StageLoss(loss, _terms(alpha_gt=loss, total=loss))

    train_log = fit(module, step, data.train, cfg.teacher_epochs, cfg.batch_size,
                    cfg.learning_rate, cfg.seed * 1000 + 10)
    return module.to_graph(), train_log


def run_train_stage(pruned: NetworkGraph, teacher: NetworkGraph, cfg: StageConfig,
                    data: Dataset, kd: KDMethod | None = None) -> tuple[NetworkGraph, TrainLog]:
    """Retrain the pruned architecture from fresh weights under the training-stage loss."""
    kd = kd or cfg.training_kd
    student = reinitialize(pruned, cfg.seed * 1000 + TRAIN_SEED_OFFSET)
    w1, w2, w3 = cfg.weights
    weights = (w1, w2, 1.0 if w3 is None else w3)
    t_mod = GraphModule(teacher).eval()
    for p in t_mod.parameters():
        p.requires_grad_(False)
    s_mod = GraphModule(student)
    distiller = make_distiller(cfg, teacher, student, kd, w3, cfg.seed * 1000 + 12)
    taps_t = distiller.teacher_taps()

    def step(x, gt, unknown):
        with torch.no_grad():
            t_out, f_t = t_mod(x, taps_t)
        s_out, f_s = s_mod(x, distiller.student_taps())
        return training_stage_loss(s_out, t_out, gt, unknown, f_t, f_s, distiller, weights)

    train_log = fit(s_mod, step, data.train, cfg.train_epochs, cfg.batch_size, cfg.learning_rate,
                    cfg.seed * 1000 + 13, extra_params=distiller.parameters())
    # regressors are training-only and are not exported
    return s_mod.to_graph(), train_log


def train_plain(pruned: NetworkGraph, cfg: StageConfig, data: Dataset):
    """Training stage without any teacher signal (w2 = w3 = 0)."""
    student = reinitialize(pruned, cfg.seed * 1000 + TRAIN_SEED_OFFSET)
    module = GraphModule(student)
    w1 = cfg.weights[0]

    def step(x, gt, unknown):
        loss = alpha_prediction_loss(module(x), gt, unknown)
        total = w1 * loss
        return StageLoss(total, _terms(alpha_gt=loss, alpha_teacher=0.0, kd=0.0, total=total))

    train_log = fit(module, step, data.train, cfg.train_epochs, cfg.batch_size,
                    cfg.learning_rate, cfg.seed * 1000 + 13)
    return module.to_graph(), train_log


# -- run directory ----------------------------------------------------------------------

class RunDir:
    """``runs/<name>/{config.yaml, checkpoints/, logs/, report.md, report.csv}``."""

    def __init__(self, name: str, root: Path | None = None):
        self.path = (root or runs_root()) / name
        for sub in ("checkpoints", "logs"):
            (self.path / sub).mkdir(parents=True, exist_ok=True)

    def ckpt(self, name: str) -> Path:
        return self.path / "checkpoints" / f"{name}.ckpt"

    def logfile(self, name: str) -> Path:
        return self.path / "logs" / f"{name}.csv"

    def freeze_config(self, cfg: StageConfig):
        save_config(cfg, self.path / "config.yaml")

    def require(self, name: str) -> NetworkGraph:
        path = self.ckpt(name)
        if not path.exists():
            raise MissingArtifactError(f"missing checkpoint {path}")
        return load_checkpoint(path)


# -- reports ------------------------------------------------------------------------------

@dataclass
class Report:
    title: str
    rows: list[dict] = field(default_factory=list)
    header: dict = field(default_factory=dict)
    label_columns: tuple = ("Method",)

    def add(self, labels: dict, metrics: dict | None):
        row = dict(labels)
        for col in METRIC_COLUMNS:
            row[col] = (metrics or {}).get(col, "n/a")
        self.rows.append(row)

    def columns(self):
        return list(self.label_columns) + list(METRIC_COLUMNS)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns(), lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()

    def to_markdown(self) -> str:
        cols = self.columns()
        lines = [f"# {self.title}", ""]
        for k, v in self.header.items():
            lines.append(f"- {k}: {v}")
        lines += ["", "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
        for r in self.rows:
            lines.append("| " + " | ".join(_fmt(c, r.get(c, "n/a")) for c in cols) + " |")
        return "\n".join(lines) + "\n"

    def write(self, directory):
        d = Path(directory)
        (d / "report.csv").write_text(self.to_csv())
        (d / "report.md").write_text(self.to_markdown())


def _fmt(col, v):
    if isinstance(v, str):
        return v
    if col == "MSE":
        return f"{v:.4f}"
    if col == "#Param":
        return f"{v / 1e3:.1f}K"
    if col == "FLOPs":
        return f"{v / 1e6:.1f}M"
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def report_header(cfg: StageConfig) -> dict:
    return {
        "optimizer": f"RMSprop (no momentum), lr={cfg.learning_rate}, cosine decay",
        "epochs (teacher/prune/train)": f"{cfg.teacher_epochs}/{cfg.prune_epochs}/{cfg.train_epochs}",
        "batch size": cfg.batch_size,
        "lambdas": list(cfg.lambdas),
        "weights": list(cfg.weights),
        "KD": f"{cfg.kd.name} (train: {cfg.training_kd.name})",
        "seed": cfg.seed,
        "note": "loss weights and schedules are this toolkit's defaults; SAD/Grad/Conn are raw sums / 1000",
    }


# -- presets ------------------------------------------------------------------------------

class Experiment:
    """Caches stage outputs in a run directory so presets can share them."""

    def __init__(self, cfg: StageConfig, data: Dataset, run: RunDir):
        self.cfg, self.data, self.run = cfg, data, run
        run.freeze_config(cfg)

    def teacher(self, train_if_missing: bool = True) -> NetworkGraph:
        path = self.run.ckpt("teacher")
        if path.exists():
            return load_checkpoint(path)
        if not train_if_missing:
            raise MissingArtifactError(f"missing checkpoint {path}; run `slimmat teacher` first")
        net, train_log = train_teacher(self.cfg, self.data)
        save_checkpoint(net, path)
        train_log.write_csv(self.run.logfile("teacher"))
        return net

    def sparsified(self, kd: KDMethod, use_kd: bool = True) -> NetworkGraph:
        tag = f"sparse_{kd.name}" if use_kd else "sparse_NS"
        path = self.run.ckpt(tag)
        if path.exists():
            return load_checkpoint(path)
        cfg = self.cfg.replace(kd=kd)
        if not use_kd:
            cfg = cfg.replace(lambdas=(*cfg.lambdas[:3], 0.0))
        net, train_log = run_prune_stage(self.teacher(), cfg, self.data.train)
        save_checkpoint(net, path)
        train_log.write_csv(self.run.logfile(tag))
        return net

    def pruned(self, kind: str, ratio: float, kd: KDMethod | None = None) -> NetworkGraph:
        tag = f"pruned_{kind}_{round(ratio * 100)}"
        if kind != "UNI":
            tag += f"_{kd.name}" if kind == "Ours" else ""
        path = self.run.ckpt(tag)
        if path.exists():
            return load_checkpoint(path)
        if kind == "UNI":
            net = uniform_prune(self.teacher(), ratio, "all", self.cfg.min_keep_fraction)
        else:
            sparse = self.sparsified(kd, use_kd=(kind == "Ours"))
            net, report = prune_student(sparse, ratio, self.cfg.min_keep_fraction, self.cfg.size)
            report.write(self.run.path / "logs" / tag)
        save_checkpoint(net, path)
        return net

    def trained(self, tag: str, pruned: NetworkGraph, kd: KDMethod | None) -> dict:
        """Train ``pruned`` from scratch (with ``kd`` or plain) and evaluate."""
        path = self.run.ckpt(f"final_{tag}")
        if path.exists():
            net = load_checkpoint(path)
        else:
            if kd is None:
                net, train_log = train_plain(pruned, self.cfg, self.data)
            else:
                net, train_log = run_train_stage(pruned, self.teacher(), self.cfg, self.data, kd)
            save_checkpoint(net, path)
            train_log.write_csv(self.run.logfile(f"final_{tag}"))
        _, agg = evaluate(net, self.data.test)
        return agg


def _kd_all():
    return [KDMethod("NST"), KDMethod("OFD"), KDMethod("SPKD")]


def run_experiment_preset(name: str, cfg: StageConfig, data: Dataset, run: RunDir,
                          train_teacher_if_missing: bool = True) -> Report:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    t0 = time.time()
    exp = Experiment(cfg, data, run)
    teacher = exp.teacher(train_teacher_if_missing)
    kd = cfg.kd
    ratio = cfg.ratio
    pct = round(ratio * 100)

    if name == "motivation":
        report = Report(f"Uniform {pct}% pruning of low- vs high-level encoder layers")
        for scope, label in (("low", "Low-level pruned"), ("high", "High-level pruned")):
            net = uniform_prune(teacher, ratio, scope, cfg.min_keep_fraction)
            report.add({"Method": label}, exp.trained(f"motivation_{scope}", net, cfg.training_kd))
    elif name == "main":
        report = Report(f"Pruning at {pct}%", label_columns=("KD", "Pruning"))
        report.add({"KD": "-", "Pruning": "Unpruned (teacher)"}, evaluate(teacher, data.test)[1])
        report.add({"KD": "-", "Pruning": "UNI"}, exp.trained(f"UNI_{pct}_plain", exp.pruned("UNI", ratio), None))
        report.add({"KD": "-", "Pruning": "NS"}, exp.trained(f"NS_{pct}_plain", exp.pruned("NS", ratio), None))
        for method in _kd_all():
            report.add({"KD": method.name, "Pruning": "NS"},
                       exp.trained(f"NS_{pct}_{method.name}", exp.pruned("NS", ratio), method))
            report.add({"KD": method.name, "Pruning": "Ours"},
                       exp.trained(f"Ours_{pct}_{method.name}", exp.pruned("Ours", ratio, method), method))
    elif name == "ratio_sweep":
        report = Report(f"Pruning ratios with {kd.name}")
        for kind in ("UNI", "Ours"):
            for r in (0.3, 0.5, 0.7):
                p = round(r * 100)
                net = exp.pruned(kind, r, kd)
                report.add({"Method": f"{kind}-{p}%"}, exp.trained(f"{kind}_{p}_{kd.name}", net, kd))
    elif name == "mismatch":
        report = Report(f"Distillation method combinations at {pct}%", label_columns=("Prune", "Train"))
        for prune_kd in _kd_all():
            net = exp.pruned("Ours", ratio, prune_kd)
            for train_kd in _kd_all():
                tag = f"Ours_{pct}_{prune_kd.name}_to_{train_kd.name}"
                if prune_kd.name == train_kd.name:
                    tag = f"Ours_{pct}_{prune_kd.name}"
                report.add({"Prune": prune_kd.name, "Train": f"+{train_kd.name}"},
                           exp.trained(tag, net, train_kd))
    else:
        report = Report(f"Our pruned model trained with and without distillation at {pct}%",
                        label_columns=("Prune", "Training"))
        for method in _kd_all():
            net = exp.pruned("Ours", ratio, method)
            report.add({"Prune": f"+{method.name}", "Training": "KD"},
                       exp.trained(f"Ours_{pct}_{method.name}", net, method))
            report.add({"Prune": f"+{method.name}", "Training": "scratch"},
                       exp.trained(f"Ours_{pct}_{method.name}_plain", net, None))
    report.header = {**report_header(cfg), "wall clock (s)": f"{time.time() - t0:.1f}"}
    report.write(run.path)
    return report
