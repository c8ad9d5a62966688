"""Alpha, distillation and sparsity losses, and the two stage objectives."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F
from scipy.stats import norm
from torch import nn

from .netgraph import BatchNormParams, NetworkGraph


class LossConfigError(ValueError):
    pass


@dataclass
class FeatureMap:
    data: torch.Tensor
    layer_id: str = ""
    role: str = "student"

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ValueError(f"feature map must be rank 4, got shape {tuple(self.data.shape)}")


@dataclass
class KDMethod:
    name: str = "SPKD"
    degree: int = 2
    bias: float = 0.0
    kinds: tuple[str, ...] = ("spatial", "channel")

    def __post_init__(self):
        self.name = self.name.upper()
        if self.name not in ("NST", "OFD", "SPKD"):
            raise LossConfigError(f"unknown KD method {self.name!r}")
        self.kinds = tuple(self.kinds)
        if self.name == "SPKD" and (not self.kinds or set(self.kinds) - {"spatial", "channel"}):
            raise LossConfigError(f"SPKD kinds must be a non-empty subset of spatial/channel, got {self.kinds}")


def _data(f):
    return f.data if isinstance(f, FeatureMap) else f


# -- alpha --------------------------------------------------------------------------

def alpha_prediction_loss(pred: torch.Tensor, ref: torch.Tensor, unknown: torch.Tensor,
                          eps_sq: float = 1e-12) -> torch.Tensor:
    """Mean over unknown pixels of sqrt((pred - ref)^2 + eps_sq)."""
    mask = unknown.bool()
    if not mask.any():
        raise ValueError("unknown region is empty")
    diff = (pred - ref)[mask]
    return torch.sqrt(diff * diff + eps_sq).mean()


# -- NST ------------------------------------------------------------------------------

def nst_loss(ft, fs, degree: int = 2, bias: float = 0.0) -> torch.Tensor:
    """Squared MMD between the sets of L2-normalised channel maps, polynomial kernel."""
    t, s = _data(ft), _data(fs)
    if t.shape[0] != s.shape[0] or t.shape[2:] != s.shape[2:]:
        raise ValueError(f"batch/spatial mismatch: {tuple(t.shape)} vs {tuple(s.shape)}")
    t = F.normalize(t.flatten(2), dim=2)
    s = F.normalize(s.flatten(2), dim=2)

    def k(a, b):
        return (a @ b.transpose(1, 2) + bias) ** degree

    mmd = k(t, t).mean((1, 2)) + k(s, s).mean((1, 2)) - 2 * k(t, s).mean((1, 2))
    return mmd.mean()


# -- OFD ------------------------------------------------------------------------------

def compute_ofd_margin(teacher_bn: BatchNormParams) -> torch.Tensor:
    """Expected value of the negative part of N(beta, gamma^2), per channel."""
    out = []
    for g, b in zip(teacher_bn.gamma, teacher_bn.beta):
        s, m = abs(float(g)), float(b)
        if s == 0:
            out.append(0.0)
            continue
        cdf = norm.cdf(-m / s)
        if cdf > 1e-6:
            out.append(min(m - s * math.exp(-(m / s) ** 2 / 2) / math.sqrt(2 * math.pi) / cdf, 0.0))
        else:
            out.append(0.0)
    return torch.tensor(out, dtype=torch.float32)


def ofd_loss(ft_pre_relu, fs, margin: torch.Tensor, regressor: nn.Module | None = None) -> torch.Tensor:
    """Partial L2 between margin-ReLU'd teacher and (regressed) student features."""
    t = _data(ft_pre_relu)
    s = _data(fs)
    if regressor is not None:
        s = regressor(s)
    if s.shape != t.shape:
        raise ValueError(f"student {tuple(s.shape)} does not match teacher {tuple(t.shape)} after regressor")
    if margin.numel() != t.shape[1]:
        raise ValueError(f"margin has {margin.numel()} entries for {t.shape[1]} channels")
    target = torch.max(t, margin.to(t).view(1, -1, 1, 1))
    mask = ((s > target) | (target > 0)).to(t.dtype)
    return ((s - target) ** 2 * mask).sum() / t.numel()


# -- SPKD -----------------------------------------------------------------------------

def _spatial_similarity_gap(a_t, a_s, eps=1e-12):
    """Mean squared difference of row-normalised HW x HW Grams without building them.

    Row i of A^T A is a_i^T A, so its norm and its inner product with the other
    network's row only need the small C x C products.
    """
    gram_t = a_t @ a_t.transpose(1, 2)
    gram_s = a_s @ a_s.transpose(1, 2)
    cross = a_t @ a_s.transpose(1, 2)
    sq_t = ((gram_t @ a_t) * a_t).sum(1).clamp_min(0)
    sq_s = ((gram_s @ a_s) * a_s).sum(1).clamp_min(0)
    dot = ((cross @ a_s) * a_t).sum(1)
    # sqrt(max(|x|^2, eps^2)) == max(|x|, eps) but with a finite gradient at zero rows
    nt = sq_t.clamp_min(eps * eps).sqrt()
    ns = sq_s.clamp_min(eps * eps).sqrt()
    per_row = sq_t / nt ** 2 + sq_s / ns ** 2 - 2 * dot / (nt * ns)
    return per_row.clamp_min(0).sum(1) / a_t.shape[2] ** 2


def spkd_loss(ft, fs, kinds=("spatial", "channel")) -> torch.Tensor:
    """Row-normalised spatial and/or channel Gram matrices, mean squared difference."""
    t, s = _data(ft), _data(fs)
    if t.shape[0] != s.shape[0] or t.shape[2:] != s.shape[2:]:
        raise ValueError(f"batch/spatial mismatch: {tuple(t.shape)} vs {tuple(s.shape)}")
    if "channel" in kinds and t.shape[1] != s.shape[1]:
        raise LossConfigError(f"channel similarity needs equal channels ({t.shape[1]} vs {s.shape[1]})")
    a_t, a_s = t.flatten(2), s.flatten(2)
    loss = t.new_zeros(())
    for kind in kinds:
        if kind == "spatial":
            loss = loss + _spatial_similarity_gap(a_t, a_s).mean()
        elif kind == "channel":
            diff = F.normalize(a_t @ a_t.transpose(1, 2), dim=2) - F.normalize(a_s @ a_s.transpose(1, 2), dim=2)
            loss = loss + (diff ** 2).mean((1, 2)).mean()
        else:
            raise LossConfigError(f"unknown similarity kind {kind!r}")
    return loss


# -- sparsity -------------------------------------------------------------------------

def sparsity_penalty(net) -> torch.Tensor:
    """Sum of |gamma| over every batch-norm channel.

    Accepts a :class:`NetworkGraph` or anything with a ``gammas()`` method
    returning parameter tensors (the latter keeps the graph differentiable).
    """
    if isinstance(net, NetworkGraph):
        gammas = [net.weights[b]["gamma"] for b in net.bn_ids()]
    else:
        gammas = list(net.gammas())
    if not gammas:
        raise ValueError("network has no batch-norm layers")
    return sum(g.abs().sum() for g in gammas)


# -- distillation over several sites ----------------------------------------------------

class Distiller(nn.Module):
    """Per-site KD term for one teacher/student pair.

    ``sites`` are ReLU output ids.  OFD instead reads the pre-activation (the
    batch norm feeding that ReLU) on both sides and owns the optional 1x1
    regressors; it is the only stateful method.
    """

    def __init__(self, method: KDMethod, sites, teacher: NetworkGraph,
                 student_channels: Mapping[str, int] | None = None, seed: int = 0,
                 site_weights: Mapping[str, float] | None = None):
        super().__init__()
        self.method = method
        self.sites = list(sites)
        self.pre_relu = {s: teacher[s].inputs[0] for s in self.sites}
        teacher_ch = {s: teacher.channel_counts[s] for s in self.sites}
        student_ch = dict(student_channels or teacher_ch)
        self.site_weights = dict(site_weights or {s: 1.0 for s in self.sites})
        self.regressors = nn.ModuleDict()
        self.spkd_kinds = {}
        if method.name == "OFD":
            for s in self.sites:
                self.register_buffer(f"margin_{s}", compute_ofd_margin(teacher.bn_params(self.pre_relu[s])))
            gen = torch.Generator().manual_seed(int(seed))
            for s in self.sites:
                if student_ch[s] != teacher_ch[s]:
                    reg = nn.Conv2d(student_ch[s], teacher_ch[s], 1, bias=False)
                    with torch.no_grad():
                        reg.weight.copy_(torch.randn(reg.weight.shape, generator=gen)
                                         * math.sqrt(1.0 / student_ch[s]))
                    self.regressors[s] = reg
        elif method.name == "SPKD":
            for s in self.sites:
                kinds = tuple(k for k in method.kinds if k != "channel" or student_ch[s] == teacher_ch[s])
                self.spkd_kinds[s] = kinds or ("spatial",)

    def teacher_taps(self) -> list[str]:
        if self.method.name == "OFD":
            return [self.pre_relu[s] for s in self.sites]
        return list(self.sites)

    def student_taps(self) -> list[str]:
        return self.teacher_taps()

    def site_loss(self, site: str, teacher_feats, student_feats) -> torch.Tensor:
        name = self.method.name
        if name == "OFD":
            reg = self.regressors[site] if site in self.regressors else None
            pre = self.pre_relu[site]
            return ofd_loss(teacher_feats[pre], student_feats[pre], getattr(self, f"margin_{site}"), reg)
        fs = student_feats[site]
        if name == "NST":
            return nst_loss(teacher_feats[site], fs, self.method.degree, self.method.bias)
        return spkd_loss(teacher_feats[site], fs, self.spkd_kinds[site])

    def forward(self, teacher_feats, student_feats) -> torch.Tensor:
        return sum(self.site_weights[s] * self.site_loss(s, teacher_feats, student_feats)
                   for s in self.sites)


def default_kd_weight(method: str, channels: int) -> float:
    """Balancing weight for one distillation site when none is configured."""
    method = method.upper()
    if method == "NST":
        return 10.0
    if method == "OFD":
        return 1e-3 * channels
    return 1.0


# -- stage objectives ------------------------------------------------------------------

def _terms(**tensors) -> dict[str, float]:
    return {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in tensors.items()}


@dataclass
class StageLoss:
    total: torch.Tensor
    terms: dict[str, float] = field(default_factory=dict)


def pruning_stage_loss(student_out, teacher_out, gt, unknown, features_t, features_s,
                       net, distiller: Distiller | None, lambdas) -> StageLoss:
    """lambda1*L_a(s, gt) + lambda2*L_a(s, t) + lambda3*sum|gamma| + lambda4*sum_i L_KD.

    ``distiller`` carries its own per-site weights; ``lambdas[3]`` scales the
    whole sum.  Teacher tensors are detached here as a guard.
    """
    l1, l2, l3, l4 = lambdas
    teacher_out = teacher_out.detach()
    features_t = {k: v.detach() for k, v in features_t.items()}
    a_gt = alpha_prediction_loss(student_out, gt, unknown)
    a_t = alpha_prediction_loss(student_out, teacher_out, unknown)
    sparse = sparsity_penalty(net)
    kd = distiller(features_t, features_s) if (distiller is not None and l4) else student_out.new_zeros(())
    total = l1 * a_gt + l2 * a_t + l3 * sparse + l4 * kd
    return StageLoss(total, _terms(alpha_gt=a_gt, alpha_teacher=a_t, sparsity=sparse, kd=kd, total=total))


def training_stage_loss(pruned_out, teacher_out, gt, unknown, features_t, features_ps,
                        distiller: Distiller | None, weights) -> StageLoss:
    """w1*L_a(ps, gt) + w2*L_a(ps, t) + w3*sum_i L_KD; no sparsity term."""
    w1, w2, w3 = weights
    teacher_out = teacher_out.detach()
    features_t = {k: v.detach() for k, v in features_t.items()}
    a_gt = alpha_prediction_loss(pruned_out, gt, unknown)
    a_t = alpha_prediction_loss(pruned_out, teacher_out, unknown)
    kd = distiller(features_t, features_ps) if (distiller is not None and w3) else pruned_out.new_zeros(())
    total = w1 * a_gt + w2 * a_t + w3 * kd
    return StageLoss(total, _terms(alpha_gt=a_gt, alpha_teacher=a_t, kd=kd, total=total))
