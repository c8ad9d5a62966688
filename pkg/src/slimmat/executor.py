"""Run a :class:`NetworkGraph` as a torch module and export it back."""
from __future__ import annotations

from typing import Iterable

import torch
import torch.nn.functional as F
from torch import nn

from .netgraph import NetworkGraph, topological_order


class GraphModule(nn.Module):
    """Trainable view of a graph.  ``to_graph`` snapshots the current weights."""

    def __init__(self, net: NetworkGraph):
        super().__init__()
        self.layers = dict(net.layers)
        self.order = topological_order(net.layers)
        self.convs = nn.ModuleDict()
        self.bns = nn.ModuleDict()
        for lid in self.order:
            l = self.layers[lid]
            w = net.weights.get(lid)
            if l.kind == "conv":
                p = l.params
                conv = nn.Conv2d(p["in_channels"], p["out_channels"], p["kernel_size"],
                                 stride=p["stride"], padding=p["padding"], bias=p["has_bias"])
                with torch.no_grad():
                    conv.weight.copy_(w["weight"])
                    if p["has_bias"]:
                        conv.bias.copy_(w["bias"])
                self.convs[lid] = conv
            elif l.kind == "bn":
                bn = nn.BatchNorm2d(l.params["channels"], eps=float(l.params.get("eps", 1e-5)))
                with torch.no_grad():
                    bn.weight.copy_(w["gamma"])
                    bn.bias.copy_(w["beta"])
                    bn.running_mean.copy_(w["running_mean"])
                    bn.running_var.copy_(w["running_var"])
                self.bns[lid] = bn
        self.output_id = next(i for i in self.order if self.layers[i].kind == "output")

    def forward(self, x: torch.Tensor, taps: Iterable[str] = ()):
        """Return the output, or ``(output, {layer_id: activation})`` when taps are given."""
        taps = set(taps)
        acts: dict[str, torch.Tensor] = {}
        for lid in self.order:
            l = self.layers[lid]
            kind = l.kind
            if kind == "input":
                y = x
            elif kind == "conv":
                y = self.convs[lid](acts[l.inputs[0]])
            elif kind == "bn":
                y = self.bns[lid](acts[l.inputs[0]])
            elif kind == "relu":
                y = F.relu(acts[l.inputs[0]])
            elif kind == "maxpool":
                y = F.max_pool2d(acts[l.inputs[0]], l.params["kernel_size"])
            elif kind == "upsample":
                y = F.interpolate(acts[l.inputs[0]], scale_factor=l.params["scale"], mode="nearest")
            elif kind == "concat":
                y = torch.cat([acts[s] for s in l.inputs], dim=1)
            else:
                y = acts[l.inputs[0]].clamp(l.params.get("clamp_min"), l.params.get("clamp_max"))
            acts[lid] = y
        out = acts[self.output_id]
        if taps:
            return out, {t: acts[t] for t in taps}
        return out

    def gammas(self) -> list[torch.Tensor]:
        return [bn.weight for bn in self.bns.values()]

    def to_graph(self) -> NetworkGraph:
        from .netgraph import infer_channel_counts

        weights = {}
        for lid, conv in self.convs.items():
            w = {"weight": conv.weight.detach().clone()}
            if conv.bias is not None:
                w["bias"] = conv.bias.detach().clone()
            weights[lid] = w
        for lid, bn in self.bns.items():
            weights[lid] = {"gamma": bn.weight.detach().clone(), "beta": bn.bias.detach().clone(),
                            "running_mean": bn.running_mean.detach().clone(),
                            "running_var": bn.running_var.detach().clone()}
        return NetworkGraph(dict(self.layers), weights, infer_channel_counts(self.layers))


@torch.no_grad()
def predict(net: NetworkGraph | GraphModule, x: torch.Tensor) -> torch.Tensor:
    module = net if isinstance(net, GraphModule) else GraphModule(net)
    was_training = module.training
    module.eval()
    out = module(x)
    module.train(was_training)
    return out
