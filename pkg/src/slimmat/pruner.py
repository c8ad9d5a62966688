"""Pruning stage: sparsify a student under distillation, then cut it."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, StageConfig
from .executor import GraphModule
from .losses import Distiller, default_kd_weight, pruning_stage_loss
from .netgraph import (ChannelMask, NetworkGraph, apply_structural_prune, collect_bn_gammas,
                       count_flops, count_params, derive_channel_masks, layer_param_counts,
                       min_keep, reinitialize, threshold_value, topological_order)
from .training import TensorData, TrainLog, fit, near_zero_fraction

HIST_BINS = np.concatenate([[0.0], np.logspace(-4, 1, 21)])
STUDENT_SEED_OFFSET = 1


def same_architecture(a: NetworkGraph, b: NetworkGraph) -> bool:
    return a.layers == b.layers


def check_eta(net: NetworkGraph, eta, strict: bool = True) -> None:
    missing = [s for s in eta if s not in net.layers]
    if missing:
        raise ConfigError(f"distillation sites not in graph: {missing}", ["eta"])
    decoder = [s for s in eta if net[s].stage_tag != "encoder"]
    if decoder and strict:
        raise ConfigError(f"distillation sites outside the encoder: {decoder} "
                          "(set strict_eta: false to allow)", ["eta"])
    not_relu = [s for s in eta if net[s].kind != "relu" or net[net[s].inputs[0]].kind != "bn"]
    if not_relu:
        raise ConfigError(f"distillation sites must be ReLU outputs fed by batch norm: {not_relu}", ["eta"])


def make_distiller(cfg: StageConfig, teacher: NetworkGraph, student: NetworkGraph, method,
                   kd_weight, seed: int) -> Distiller:
    """Distiller with configured or per-method default site weights."""
    check_eta(student, cfg.eta, cfg.strict_eta)
    if kd_weight is None:
        site_w = {s: default_kd_weight(method.name, teacher.channel_counts[s]) for s in cfg.eta}
    else:
        site_w = {s: 1.0 for s in cfg.eta}
    return Distiller(method, cfg.eta, teacher, {s: student.channel_counts[s] for s in cfg.eta},
                     seed=seed, site_weights=site_w)


def run_prune_stage(teacher: NetworkGraph, cfg: StageConfig, data: TensorData,
                    student: NetworkGraph | None = None) -> tuple[NetworkGraph, TrainLog]:
    """Train a fresh full-width student under the pruning-stage loss."""
    if student is None:
        student = reinitialize(teacher, cfg.seed * 1000 + STUDENT_SEED_OFFSET)
    elif not same_architecture(student, teacher):
        raise ConfigError("student and teacher architectures differ")
    train_log = TrainLog()
    if cfg.prune_epochs == 0:
        return student, train_log

    l1, l2, l3, l4 = cfg.lambdas
    lambdas = (l1, l2, l3, 1.0 if l4 is None else l4)
    t_mod = GraphModule(teacher).eval()
    for p in t_mod.parameters():
        p.requires_grad_(False)
    s_mod = GraphModule(student)
    distiller = make_distiller(cfg, teacher, student, cfg.kd, l4, cfg.seed)
    taps_t = distiller.teacher_taps()

    def step(x, gt, unknown):
        with torch.no_grad():
            t_out, f_t = t_mod(x, taps_t)
        s_out, f_s = s_mod(x, distiller.student_taps())
        return pruning_stage_loss(s_out, t_out, gt, unknown, f_t, f_s, s_mod, distiller, lambdas)

    def sparsity(_epoch):
        return {"near_zero_gamma": near_zero_fraction(s_mod)}

    fit(s_mod, step, data, cfg.prune_epochs, cfg.batch_size, cfg.learning_rate,
        cfg.seed * 1000 + 11, extra_params=distiller.parameters(), train_log=train_log,
        on_epoch=sparsity)
    return s_mod.to_graph(), train_log


@dataclass
class PruneReport:
    layers: list[dict] = field(default_factory=list)
    tau_enc: float | None = None
    tau_dec: float | None = None
    m_enc: int = 0
    m_dec: int = 0
    readmitted: dict[str, list[int]] = field(default_factory=dict)
    params_before: int = 0
    params_after: int = 0
    flops_before: int = 0
    flops_after: int = 0
    removed_params: dict[str, int] = field(default_factory=dict)
    gamma_histograms: dict[str, list[int]] = field(default_factory=dict)
    hist_edges: list[float] = field(default_factory=list)

    @property
    def dropped_total(self) -> int:
        return sum(l["dropped"] for l in self.layers)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "prune_report.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        with open(d / "gamma_hist.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("scope", "bin_lo", "bin_hi", "count"))
            for scope, counts in self.gamma_histograms.items():
                for lo, hi, c in zip(self.hist_edges[:-1], self.hist_edges[1:], counts):
                    w.writerow((scope, lo, hi, c))


def _masks_for_scope(net, scope, ratio, keep_fraction):
    gammas = collect_bn_gammas(net, scope)
    m = int(math.floor(ratio * len(gammas)))
    return derive_channel_masks(gammas, m, keep_fraction), threshold_value(gammas, m), m, gammas


def prune_student(student: NetworkGraph, ratio: float, keep_fraction: float = 0.1,
                  input_size: int = 64) -> tuple[NetworkGraph, PruneReport]:
    """Cut ``ratio`` of encoder channels and ``ratio`` of decoder channels,
    each at its own M-th-smallest-|gamma| threshold."""
    if not 0 <= ratio < 1:
        raise ValueError(f"ratio must lie in [0, 1), got {ratio}")
    enc_masks, tau_enc, m_enc, g_enc = _masks_for_scope(student, "encoder", ratio, keep_fraction)
    dec_masks, tau_dec, m_dec, g_dec = _masks_for_scope(student, "decoder", ratio, keep_fraction)
    masks = enc_masks + dec_masks
    for m in masks:
        if not m.keep.any():
            raise RuntimeError(f"{m.bn_id}: pruning would remove every channel")
    pruned = apply_structural_prune(student, masks)

    before, after = layer_param_counts(student), layer_param_counts(pruned)
    report = PruneReport(
        layers=[{"bn_id": m.bn_id, "stage": student[m.bn_id].stage_tag,
                 "channels": int(m.keep.size), "kept": int(m.keep.sum()), "dropped": m.n_dropped}
                for m in masks],
        tau_enc=tau_enc, tau_dec=tau_dec, m_enc=m_enc, m_dec=m_dec,
        readmitted={m.bn_id: list(m.readmitted) for m in masks if m.readmitted},
        params_before=count_params(student), params_after=count_params(pruned),
        removed_params={k: before[k] - after[k] for k in before if before[k] != after[k]},
        hist_edges=[float(e) for e in HIST_BINS],
        gamma_histograms={
            "encoder": np.histogram([g for *_, g in g_enc], HIST_BINS)[0].tolist(),
            "decoder": np.histogram([g for *_, g in g_dec], HIST_BINS)[0].tolist(),
        },
    )
    report.flops_before = count_flops(student, input_size, input_size)
    report.flops_after = count_flops(pruned, input_size, input_size)
    return pruned, report


def uniform_masks(net: NetworkGraph, ratio: float, scope: str = "all",
                  keep_fraction: float = 0.1) -> list[ChannelMask]:
    if not 0 <= ratio < 1:
        raise ValueError(f"ratio must lie in [0, 1), got {ratio}")
    if scope not in ("all", "low", "high"):
        raise ValueError(f"unknown scope {scope!r}")
    masks = []
    for lid in topological_order(net.layers):
        l = net[lid]
        if l.kind != "bn":
            continue
        # low/high select encoder stages only; "all" covers the whole net
        if scope != "all" and (l.stage_tag != "encoder" or l.level_tag != scope):
            continue
        g = np.abs(net.weights[lid]["gamma"].numpy().astype(np.float64))
        c = g.size
        n_drop = min(int(math.floor(ratio * c)), c - min_keep(c, keep_fraction))
        # lowest |gamma| first; among equal gammas the highest channel index goes
        order = sorted(range(c), key=lambda i: (g[i], -i))
        keep = np.ones(c, dtype=bool)
        keep[order[:n_drop]] = False
        masks.append(ChannelMask(lid, keep))
    return masks


def uniform_prune(net: NetworkGraph, ratio: float, scope: str = "all",
                  keep_fraction: float = 0.1) -> NetworkGraph:
    """Drop the same fraction of channels from every batch norm in ``scope``."""
    return apply_structural_prune(net, uniform_masks(net, ratio, scope, keep_fraction))
