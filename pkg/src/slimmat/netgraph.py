"""Declarative layer DAG for small conv/BN encoder-decoder nets.

A :class:`NetworkGraph` holds the layer list, the weights keyed by layer id and
the live channel count of every layer.  Graphs are treated as immutable: every
rewrite returns a new graph and leaves its argument untouched.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

GRAPH_SCHEMA = "netgraph/v1"

KINDS = ("conv", "bn", "relu", "maxpool", "upsample", "concat", "input", "output")
PASS_THROUGH = ("relu", "maxpool", "upsample", "output")
BASE_WIDTHS = (16, 32, 64, 128)


class GraphError(ValueError):
    """Malformed graph or a rewrite request that does not fit the graph."""


class EmptyScopeError(GraphError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    params: Mapping[str, object] = field(default_factory=dict)
    inputs: tuple[str, ...] = ()
    stage_tag: str = "encoder"
    level_tag: str = "low"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"{self.id}: unknown layer kind {self.kind!r}")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "params", dict(self.params))

    def replace_params(self, **changes) -> "LayerSpec":
        return LayerSpec(self.id, self.kind, {**self.params, **changes}, self.inputs,
                         self.stage_tag, self.level_tag)


@dataclass(frozen=True)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        n = len(self.gamma)
        if not (len(self.beta) == len(self.running_mean) == len(self.running_var) == n):
            raise GraphError("batch-norm vectors differ in length")
        if np.any(np.asarray(self.running_var) < 0):
            raise GraphError("negative running variance")
        if self.epsilon <= 0:
            raise GraphError("epsilon must be positive")


@dataclass(frozen=True)
class ChannelMask:
    bn_id: str
    keep: np.ndarray
    # channels put back by the per-layer floor after thresholding
    readmitted: tuple[int, ...] = ()

    @property
    def n_dropped(self) -> int:
        return int((~self.keep).sum())


@dataclass(frozen=True)
class NetworkGraph:
    layers: Mapping[str, LayerSpec]
    weights: Mapping[str, Mapping[str, torch.Tensor]]
    channel_counts: Mapping[str, int]

    # -- navigation -------------------------------------------------------
    def __iter__(self):
        return iter(self.layers.values())

    def __getitem__(self, layer_id: str) -> LayerSpec:
        return self.layers[layer_id]

    def consumers(self, layer_id: str) -> list[str]:
        return [l.id for l in self.layers.values() if layer_id in l.inputs]

    def bn_ids(self, scope: str = "all") -> list[str]:
        if scope not in ("all", "encoder", "decoder"):
            raise GraphError(f"unknown scope {scope!r}")
        return [l.id for l in self.layers.values()
                if l.kind == "bn" and scope in ("all", l.stage_tag)]

    def bn_params(self, bn_id: str) -> BatchNormParams:
        w = self.weights[bn_id]
        return BatchNormParams(
            gamma=w["gamma"].detach().cpu().numpy(),
            beta=w["beta"].detach().cpu().numpy(),
            running_mean=w["running_mean"].detach().cpu().numpy(),
            running_var=w["running_var"].detach().cpu().numpy(),
            epsilon=float(self.layers[bn_id].params.get("eps", 1e-5)),
        )

    def producer_conv(self, bn_id: str) -> str:
        (src,) = self.layers[bn_id].inputs
        if self.layers[src].kind != "conv":
            raise GraphError(f"{bn_id}: batch norm must follow a conv, got {src}")
        return src

    def with_weights(self, weights: Mapping[str, Mapping[str, torch.Tensor]]) -> "NetworkGraph":
        return NetworkGraph(dict(self.layers), _clone_weights(weights), dict(self.channel_counts))

    def with_bn_values(self, bn_id: str, **vectors) -> "NetworkGraph":
        """Copy of the graph with some batch-norm vectors replaced."""
        weights = _clone_weights(self.weights)
        for name, value in vectors.items():
            weights[bn_id][name] = torch.as_tensor(np.asarray(value), dtype=weights[bn_id][name].dtype)
        return NetworkGraph(dict(self.layers), weights, dict(self.channel_counts))


def _clone_weights(weights):
    return {lid: {k: v.detach().clone() for k, v in w.items()} for lid, w in weights.items()}


# -- construction -------------------------------------------------------------

def _conv(lid, src, cin, cout, stage, level, k=3, bias=False, stride=1):
    return LayerSpec(lid, "conv", dict(in_channels=cin, out_channels=cout, kernel_size=k,
                                       stride=stride, padding=k // 2, has_bias=bias),
                     (src,), stage, level)


def build_mini_matting_net(width_multiplier: float = 1.0, seed: int = 0) -> NetworkGraph:
    """Four-stage U-Net: RGB+trimap in, alpha in [0, 1] out.

    Every encoder stage is conv-BN-ReLU followed by a 2x max-pool; the decoder
    mirrors it with upsample, concat(skip, upsampled) and conv-BN-ReLU.
    """
    if not width_multiplier > 0 or width_multiplier > 4:
        raise ValueError(f"width multiplier must lie in (0, 4], got {width_multiplier}")
    widths = [max(1, int(math.floor(w * width_multiplier + 0.5))) for w in BASE_WIDTHS]
    levels = ("low", "low", "high", "high")

    layers: list[LayerSpec] = [LayerSpec("input", "input", {"channels": 4}, (), "encoder", "low")]
    prev, cin = "input", 4
    for i, (w, lvl) in enumerate(zip(widths, levels), start=1):
        layers += [
            _conv(f"enc{i}_conv", prev, cin, w, "encoder", lvl),
            LayerSpec(f"enc{i}_bn", "bn", {"channels": w, "eps": 1e-5}, (f"enc{i}_conv",), "encoder", lvl),
            LayerSpec(f"enc{i}_relu", "relu", {}, (f"enc{i}_bn",), "encoder", lvl),
            LayerSpec(f"pool{i}", "maxpool", {"kernel_size": 2}, (f"enc{i}_relu",), "encoder", lvl),
        ]
        prev, cin = f"pool{i}", w

    up_ch = widths[-1]
    for i in range(4, 0, -1):
        w, lvl = widths[i - 1], levels[i - 1]
        layers += [
            LayerSpec(f"up{i}", "upsample", {"scale": 2}, (prev,), "decoder", lvl),
            LayerSpec(f"cat{i}", "concat", {}, (f"enc{i}_relu", f"up{i}"), "decoder", lvl),
            _conv(f"dec{i}_conv", f"cat{i}", w + up_ch, w, "decoder", lvl),
            LayerSpec(f"dec{i}_bn", "bn", {"channels": w, "eps": 1e-5}, (f"dec{i}_conv",), "decoder", lvl),
            LayerSpec(f"dec{i}_relu", "relu", {}, (f"dec{i}_bn",), "decoder", lvl),
        ]
        prev, up_ch = f"dec{i}_relu", w
    layers += [
        _conv("head_conv", prev, widths[0], 1, "decoder", "low", bias=True),
        LayerSpec("output", "output", {"clamp_min": 0.0, "clamp_max": 1.0}, ("head_conv",), "decoder", "low"),
    ]
    layer_map = {l.id: l for l in layers}
    weights = init_weights(layer_map, seed)
    net = NetworkGraph(layer_map, weights, infer_channel_counts(layer_map))
    validate(net)
    return net


def init_weights(layers: Mapping[str, LayerSpec], seed: int) -> dict[str, dict[str, torch.Tensor]]:
    """Fresh seeded weights: Kaiming-normal convs, batch-norm gamma ~ U(0, 1).

    A spread of initial gammas lets the L1 term push the small ones to zero
    within a short schedule; unit gammas barely move under an adaptive
    optimizer in 15 epochs.
    """
    gen = torch.Generator().manual_seed(int(seed))
    weights = {}
    for l in layers.values():
        p = l.params
        if l.kind == "conv":
            k, cin, cout = p["kernel_size"], p["in_channels"], p["out_channels"]
            std = math.sqrt(2.0 / (cin * k * k))
            w = {"weight": torch.randn(cout, cin, k, k, generator=gen) * std}
            if p["has_bias"]:
                w["bias"] = torch.zeros(cout)
            weights[l.id] = w
        elif l.kind == "bn":
            c = p["channels"]
            weights[l.id] = {"gamma": torch.rand(c, generator=gen), "beta": torch.zeros(c),
                             "running_mean": torch.zeros(c), "running_var": torch.ones(c)}
    return weights


def reinitialize(net: NetworkGraph, seed: int) -> NetworkGraph:
    """Same architecture, fresh seeded weights (training "from scratch")."""
    return NetworkGraph(dict(net.layers), init_weights(net.layers, seed), dict(net.channel_counts))


def topological_order(layers: Mapping[str, LayerSpec]) -> list[str]:
    indeg = {lid: 0 for lid in layers}
    for l in layers.values():
        for src in l.inputs:
            if src not in layers:
                raise GraphError(f"{l.id}: unknown input {src!r}")
        indeg[l.id] = len(l.inputs)
    ready = [lid for lid in layers if indeg[lid] == 0]
    order = []
    while ready:
        lid = ready.pop(0)
        order.append(lid)
        for l in layers.values():
            if lid in l.inputs:
                indeg[l.id] -= l.inputs.count(lid)
                if indeg[l.id] == 0:
                    ready.append(l.id)
    if len(order) != len(layers):
        raise GraphError("layer graph has a cycle")
    return order


def infer_channel_counts(layers: Mapping[str, LayerSpec]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for lid in topological_order(layers):
        l = layers[lid]
        if l.kind == "input":
            counts[lid] = int(l.params["channels"])
        elif l.kind == "conv":
            counts[lid] = int(l.params["out_channels"])
        elif l.kind == "bn":
            counts[lid] = int(l.params["channels"])
        elif l.kind == "concat":
            counts[lid] = sum(counts[s] for s in l.inputs)
        else:
            counts[lid] = counts[l.inputs[0]]
    return counts


def validate(net: NetworkGraph) -> None:
    """Raise :class:`GraphError` unless every layer invariant holds."""
    layers = net.layers
    order = topological_order(layers)
    kinds = [layers[i].kind for i in order]
    if kinds.count("input") != 1 or kinds.count("output") != 1:
        raise GraphError("graph needs exactly one input and one output layer")
    counts = infer_channel_counts(layers)
    for lid in order:
        l = layers[lid]
        if l.kind not in ("input", "concat") and len(l.inputs) != 1:
            raise GraphError(f"{lid}: expected one input, got {len(l.inputs)}")
        if l.kind == "conv":
            src = counts[l.inputs[0]]
            if l.params["in_channels"] != src:
                raise GraphError(f"{lid}: in_channels={l.params['in_channels']} but input carries {src}")
            w = net.weights[lid]["weight"]
            k = l.params["kernel_size"]
            if tuple(w.shape) != (l.params["out_channels"], l.params["in_channels"], k, k):
                raise GraphError(f"{lid}: weight shape {tuple(w.shape)} disagrees with params")
            if l.params["has_bias"] != ("bias" in net.weights[lid]):
                raise GraphError(f"{lid}: bias presence disagrees with params")
        elif l.kind == "bn":
            conv = net.producer_conv(lid)
            c = l.params["channels"]
            if layers[conv].params["out_channels"] != c:
                raise GraphError(f"{lid}: {c} channels but {conv} produces {layers[conv].params['out_channels']}")
            if c < 1:
                raise GraphError(f"{lid}: layer emptied")
            for name in ("gamma", "beta", "running_mean", "running_var"):
                if tuple(net.weights[lid][name].shape) != (c,):
                    raise GraphError(f"{lid}: {name} has shape {tuple(net.weights[lid][name].shape)}")
    if dict(net.channel_counts) != counts:
        raise GraphError("channel_counts out of sync with layer params")


# -- channel importance -----------------------------------------------------------

def collect_bn_gammas(net: NetworkGraph, scope: str = "all") -> list[tuple[str, int, float]]:
    """``(bn_id, channel, |gamma|)`` in topological then channel order."""
    order = topological_order(net.layers)
    in_scope = set(net.bn_ids(scope))
    out = []
    for lid in order:
        if lid in in_scope:
            g = np.abs(net.weights[lid]["gamma"].detach().cpu().numpy().astype(np.float64))
            out.extend((lid, c, float(v)) for c, v in enumerate(g))
    if not out:
        raise EmptyScopeError(f"no batch-norm channels in scope {scope!r}")
    return out


def min_keep(channels: int, fraction: float = 0.1) -> int:
    return max(1, math.ceil(fraction * channels))


def derive_channel_masks(gammas: Sequence[tuple[str, int, float]], M: int,
                         keep_fraction: float = 0.1) -> list[ChannelMask]:
    """Drop the ``M`` smallest-|gamma| channels, then enforce per-layer floors.

    Ties at the threshold are resolved by position in ``gammas`` (layer order,
    then channel index), so exactly ``M`` channels go before the floor
    re-admits the largest dropped channels of any layer that fell below it.
    """
    total = len(gammas)
    if not 0 <= M < total:
        raise ValueError(f"M must satisfy 0 <= M < {total}, got {M}")
    layer_ids: list[str] = []
    sizes: dict[str, int] = {}
    for bn_id, _, _ in gammas:
        if bn_id not in sizes:
            layer_ids.append(bn_id)
            sizes[bn_id] = 0
        sizes[bn_id] += 1
    keep = {lid: np.ones(sizes[lid], dtype=bool) for lid in layer_ids}
    values = np.array([g for _, _, g in gammas], dtype=np.float64)
    order = np.argsort(values, kind="stable")
    for idx in order[:M]:
        bn_id, ch, _ = gammas[idx]
        keep[bn_id][ch] = False

    by_layer: dict[str, list[tuple[float, int]]] = {lid: [] for lid in layer_ids}
    for bn_id, ch, g in gammas:
        by_layer[bn_id].append((g, ch))
    masks = []
    for lid in layer_ids:
        k = keep[lid]
        floor = min_keep(sizes[lid], keep_fraction)
        readmitted = []
        if k.sum() < floor:
            dropped = sorted(((g, ch) for g, ch in by_layer[lid] if not k[ch]),
                             key=lambda t: (-t[0], t[1]))
            for g, ch in dropped[: floor - int(k.sum())]:
                k[ch] = True
                readmitted.append(ch)
        masks.append(ChannelMask(lid, k, tuple(sorted(readmitted))))
    return masks


def threshold_value(gammas: Sequence[tuple[str, int, float]], M: int) -> float | None:
    """The M-th smallest |gamma| (1-indexed); ``None`` when nothing is pruned."""
    if M == 0:
        return None
    return float(np.sort(np.array([g for _, _, g in gammas]), kind="stable")[M - 1])


# -- structural rewrite ---------------------------------------------------------

def apply_structural_prune(net: NetworkGraph, masks: Iterable[ChannelMask]) -> NetworkGraph:
    """Physically remove masked channels and every weight slice that reads them."""
    masks = {m.bn_id: np.asarray(m.keep, dtype=bool) for m in masks}
    layers = net.layers
    for bn_id, keep in masks.items():
        if bn_id not in layers or layers[bn_id].kind != "bn":
            raise GraphError(f"mask refers to {bn_id!r}, which is not a batch-norm layer")
        if keep.shape != (layers[bn_id].params["channels"],):
            raise GraphError(f"{bn_id}: mask length {keep.shape[0]} != {layers[bn_id].params['channels']} channels")
        if not keep.any():
            raise AssertionError(f"{bn_id}: mask would empty the layer")
    conv_masks = {net.producer_conv(b): k for b, k in masks.items()}

    # output-channel keep vector of every layer, in original channel numbering
    out_keep: dict[str, np.ndarray] = {}
    for lid in topological_order(layers):
        l = layers[lid]
        if l.kind == "input":
            out_keep[lid] = np.ones(net.channel_counts[lid], dtype=bool)
        elif l.kind == "conv":
            out_keep[lid] = conv_masks.get(lid, np.ones(l.params["out_channels"], dtype=bool))
        elif l.kind == "bn":
            out_keep[lid] = out_keep[l.inputs[0]]
        elif l.kind == "concat":
            out_keep[lid] = np.concatenate([out_keep[s] for s in l.inputs])
        else:
            out_keep[lid] = out_keep[l.inputs[0]]

    new_layers, new_weights = {}, {}
    for lid, l in layers.items():
        w = net.weights.get(lid)
        if l.kind == "conv":
            rows = torch.from_numpy(np.flatnonzero(out_keep[lid]))
            cols = torch.from_numpy(np.flatnonzero(out_keep[l.inputs[0]]))
            nw = {"weight": w["weight"].index_select(0, rows).index_select(1, cols).clone()}
            if "bias" in w:
                nw["bias"] = w["bias"].index_select(0, rows).clone()
            new_weights[lid] = nw
            new_layers[lid] = l.replace_params(in_channels=len(cols), out_channels=len(rows))
        elif l.kind == "bn":
            rows = torch.from_numpy(np.flatnonzero(out_keep[lid]))
            new_weights[lid] = {k: v.index_select(0, rows).clone() for k, v in w.items()}
            new_layers[lid] = l.replace_params(channels=len(rows))
        else:
            new_layers[lid] = l
    pruned = NetworkGraph(new_layers, new_weights, infer_channel_counts(new_layers))
    validate(pruned)
    return pruned


# -- accounting -----------------------------------------------------------------

def layer_param_counts(net: NetworkGraph) -> dict[str, int]:
    counts = {}
    for l in net.layers.values():
        p = l.params
        if l.kind == "conv":
            counts[l.id] = p["kernel_size"] ** 2 * p["in_channels"] * p["out_channels"] + (
                p["out_channels"] if p["has_bias"] else 0)
        elif l.kind == "bn":
            counts[l.id] = 2 * p["channels"]
    return counts


def count_params(net: NetworkGraph) -> int:
    """Learnable element count: conv weights and biases, BN gamma and beta."""
    return sum(layer_param_counts(net).values())


def count_buffers(net: NetworkGraph) -> int:
    """BN running statistics, reported apart from the learnable count."""
    return sum(2 * l.params["channels"] for l in net.layers.values() if l.kind == "bn")


def downsampling_factor(net: NetworkGraph) -> int:
    f = 1
    for l in net.layers.values():
        if l.kind == "maxpool":
            f *= int(l.params["kernel_size"])
        elif l.kind == "conv":
            f *= int(l.params["stride"])
    return f


def count_flops(net: NetworkGraph, input_h: int, input_w: int) -> int:
    """FLOPs as 2 x conv multiply-accumulates plus one op per output element of
    every BN, ReLU and upsample layer.  Pooling, concat and the clamp are free."""
    factor = downsampling_factor(net)
    if input_h % factor or input_w % factor:
        raise ValueError(f"input {input_h}x{input_w} not divisible by downsampling factor {factor}")
    hw: dict[str, tuple[int, int]] = {}
    macs = elementwise = 0
    for lid in topological_order(net.layers):
        l = net.layers[lid]
        if l.kind == "input":
            hw[lid] = (input_h, input_w)
            continue
        h, w = hw[l.inputs[0]]
        c = net.channel_counts[lid]
        if l.kind == "conv":
            s, k, pad = l.params["stride"], l.params["kernel_size"], l.params["padding"]
            h, w = (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1
            macs += k * k * l.params["in_channels"] * l.params["out_channels"] * h * w
        elif l.kind == "maxpool":
            h, w = h // l.params["kernel_size"], w // l.params["kernel_size"]
        elif l.kind == "upsample":
            h, w = h * l.params["scale"], w * l.params["scale"]
            elementwise += c * h * w
        elif l.kind in ("bn", "relu"):
            elementwise += c * h * w
        hw[lid] = (h, w)
    return 2 * macs + elementwise


# -- persistence ------------------------------------------------------------------

def graph_to_doc(net: NetworkGraph) -> dict:
    return {
        "schema": GRAPH_SCHEMA,
        "layers": [
            {"id": l.id, "kind": l.kind, "params": {k: (list(v) if isinstance(v, tuple) else v)
                                                    for k, v in l.params.items()},
             "inputs": list(l.inputs), "stage_tag": l.stage_tag, "level_tag": l.level_tag}
            for l in net.layers.values()
        ],
        "channel_counts": dict(net.channel_counts),
    }


def graph_from_doc(doc: Mapping, weights: Mapping[str, Mapping[str, torch.Tensor]]) -> NetworkGraph:
    if doc.get("schema") != GRAPH_SCHEMA:
        raise GraphError(f"unsupported graph schema {doc.get('schema')!r}")
    layers = {}
    for d in doc["layers"]:
        layers[d["id"]] = LayerSpec(d["id"], d["kind"], d["params"], tuple(d["inputs"]),
                                    d["stage_tag"], d["level_tag"])
    net = NetworkGraph(layers, _clone_weights(weights), infer_channel_counts(layers))
    validate(net)
    return net


def save_graph(net: NetworkGraph, path) -> None:
    Path(path).write_text(json.dumps(graph_to_doc(net), indent=2) + "\n")


def save_checkpoint(net: NetworkGraph, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"graph": graph_to_doc(net), "weights": _clone_weights(net.weights),
                "extra": extra or {}}, path)


def load_checkpoint(path) -> NetworkGraph:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    return graph_from_doc(blob["graph"], blob["weights"])
