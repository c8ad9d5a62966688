"""Seeded optimisation loop and evaluation shared by every stage."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import metrics
from .data import CompositeSample, to_tensors
from .executor import GraphModule
from .netgraph import NetworkGraph, count_flops, count_params

log = logging.getLogger(__name__)

NEAR_ZERO = 1e-2


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TensorData:
    inputs: torch.Tensor
    alpha: torch.Tensor
    trimap: torch.Tensor

    @classmethod
    def from_samples(cls, samples: list[CompositeSample]) -> "TensorData":
        return cls(*to_tensors(samples))

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def unknown(self) -> torch.Tensor:
        return (self.trimap > 0.25) & (self.trimap < 0.75)


@dataclass
class TrainLog:
    rows: list[tuple[int, str, float]] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def add(self, step: int, terms: dict[str, float]):
        self.rows.extend((step, k, float(v)) for k, v in terms.items())

    @property
    def final_loss(self) -> float | None:
        totals = [v for _, k, v in self.rows if k == "total"]
        return totals[-1] if totals else None

    def write_csv(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("step", "term", "value"))
            w.writerows((s, k, repr(v)) for s, k, v in self.rows)


def near_zero_fraction(net: NetworkGraph | GraphModule, threshold: float = NEAR_ZERO) -> float:
    if isinstance(net, GraphModule):
        g = torch.cat([p.detach().abs().flatten() for p in net.gammas()])
    else:
        g = torch.cat([net.weights[b]["gamma"].abs() for b in net.bn_ids()])
    return float((g < threshold).double().mean())


StepFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], "object"]


def fit(module: GraphModule, step_loss: StepFn, data: TensorData, epochs: int, batch_size: int,
        lr: float, seed: int, extra_params=(), train_log: TrainLog | None = None,
        on_epoch: Callable[[int], dict] | None = None) -> TrainLog:
    """RMSprop without momentum, cosine-decayed step size, seeded shuffling.

    ``step_loss(inputs, gt, unknown)`` runs the forward pass itself and
    returns an object with a ``total`` tensor and a ``terms`` dict
    (see :class:`losses.StageLoss`).
    """
    train_log = train_log or TrainLog()
    if epochs == 0:
        return train_log
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    params = list(module.parameters()) + list(extra_params)
    opt = torch.optim.RMSprop(params, lr=lr, alpha=0.99, momentum=0.0)
    n = len(data)
    steps_per_epoch = math.ceil(n / batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs * steps_per_epoch)
    unknown_all = data.unknown
    step = 0
    module.train()
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        sums: dict[str, float] = {}
        for b in range(steps_per_epoch):
            idx = perm[b * batch_size:(b + 1) * batch_size]
            res = step_loss(data.inputs[idx], data.alpha[idx], unknown_all[idx])
            if not torch.isfinite(res.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: {res.terms}")
            opt.zero_grad(set_to_none=True)
            res.total.backward()
            opt.step()
            sched.step()
            train_log.add(step, res.terms)
            for k, v in res.terms.items():
                sums[k] = sums.get(k, 0.0) + v
            step += 1
        summary = {"epoch": epoch, **{k: v / steps_per_epoch for k, v in sums.items()}}
        if on_epoch is not None:
            summary.update(on_epoch(epoch))
        train_log.epochs.append(summary)
        log.info("epoch %d: %s", epoch, summary)
    return train_log


@torch.no_grad()
def predict_alpha(net: NetworkGraph | GraphModule, data: TensorData, batch_size: int = 32) -> np.ndarray:
    module = net if isinstance(net, GraphModule) else GraphModule(net)
    module.eval()
    outs = [module(data.inputs[i:i + batch_size]) for i in range(0, len(data), batch_size)]
    pred = torch.cat(outs)[:, 0].numpy().astype(np.float64)
    tri = data.trimap[:, 0].numpy()
    # definite trimap labels are copied through, as is standard for matting
    pred = np.where(tri >= 0.75, 1.0, np.where(tri <= 0.25, 0.0, pred))
    return pred


def evaluate(net: NetworkGraph, data: TensorData) -> tuple[list[dict], dict]:
    """Per-image metric rows and an aggregate row with the six report columns."""
    pred = predict_alpha(net, data)
    gt = data.alpha[:, 0].numpy().astype(np.float64)
    tri = data.trimap[:, 0].numpy()
    rows = [metrics.evaluate_alpha(pred[i], gt[i], tri[i]) for i in range(len(data))]
    agg = metrics.aggregate(rows)
    h, w = data.inputs.shape[2:]
    agg["#Param"] = count_params(net)
    agg["FLOPs"] = count_flops(net, h, w)
    return rows, agg
