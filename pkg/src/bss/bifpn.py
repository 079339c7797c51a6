"""Fast normalised weighted fusion and the fusion-graph neck built on it.

A fusion node combines resampled parents as

    O = sum_i w_i / (eps + sum_j w_j) * I_i,   w_i = max(0, raw_i)

optionally followed by a 1x1 conv and SiLU. The neck is a DAG of such nodes
described by a JSON document, so alternative topologies are a config change.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, GraphError, ShapeError
from .io import read_bst
from .tensor import as_tensor, pointwise_conv, resample, silu_map

DEFAULT_EPSILON = 1e-4
RESAMPLE_OPS = ("up2", "down2")
NODE_KINDS = ("input", "fuse", "output")


# --------------------------------------------------------------------------
# weighted fusion


def fusion_coefficients(raw_weights, epsilon=DEFAULT_EPSILON):
    """Normalised coefficients w_i / (eps + sum w) after clamping at zero."""
    w = np.maximum(0.0, np.asarray(raw_weights, dtype=np.float64).reshape(-1))
    if w.size == 0:
        raise ConfigError("need at least one weight")
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    # fsum is exactly rounded, hence independent of weight order
    denom = epsilon + math.fsum(w.tolist())
    if not denom > 0:
        raise ConfigError("all fusion weights are zero and epsilon = 0")
    return w / denom


def _ordered(n, keys):
    if keys is None:
        return range(n)
    if len(keys) != n:
        raise ConfigError("keys must match inputs")
    return sorted(range(n), key=lambda i: keys[i])


def fuse_weighted(inputs, raw_weights, epsilon=DEFAULT_EPSILON, keys=None):
    """Weighted sum of same-shape tensors with normalised nonnegative weights.

    `keys`, when given, fixes the accumulation order so the result is
    bit-identical under joint permutation of (inputs, weights, keys).
    """
    if len(inputs) == 0:
        raise ConfigError("fuse_weighted needs at least one input")
    inputs = [as_tensor(t, f"inputs[{i}]") for i, t in enumerate(inputs)]
    if len(raw_weights) != len(inputs):
        raise ConfigError(f"{len(raw_weights)} weights for {len(inputs)} inputs")
    shape = inputs[0].shape
    for i, t in enumerate(inputs):
        if t.shape != shape:
            raise ShapeError(f"inputs[{i}] has dims {t.shape}, expected {shape}")
    coef = fusion_coefficients(raw_weights, epsilon)
    acc = np.zeros(shape, dtype=np.float64)
    for i in _ordered(len(inputs), keys):
        acc += coef[i] * inputs[i].astype(np.float64)
    return acc.astype(inputs[0].dtype, copy=False)


def fuse_weighted_backward(inputs, raw_weights, epsilon, upstream):
    """Return (d_inputs, d_raw_weights) for L = <upstream, fuse_weighted(...)>.

    Raw weights clamped to zero get zero gradient.
    """
    raw = np.asarray(raw_weights, dtype=np.float64).reshape(-1)
    coef = fusion_coefficients(raw, epsilon)
    u = np.asarray(upstream, dtype=np.float64)
    d_inputs = [coef[i] * u for i in range(len(inputs))]
    denom = epsilon + math.fsum(np.maximum(0.0, raw).tolist())
    dots = np.array([(u * np.asarray(t, dtype=np.float64)).sum() for t in inputs])
    dot_out = float(coef @ dots)
    d_w = np.where(raw > 0, (dots - dot_out) / denom, 0.0)
    return d_inputs, d_w


# --------------------------------------------------------------------------
# graph model


def normalize_resample(ops):
    """Canonical tuple of resample ops; up2 followed by down2 cancels exactly."""
    if ops is None or ops == "none":
        ops = ()
    elif isinstance(ops, str):
        ops = (ops,)
    out = []
    for op in ops:
        if op == "none":
            continue
        if op not in RESAMPLE_OPS:
            raise ConfigError(f"unknown resample op {op!r}")
        if op == "down2" and out and out[-1] == "up2":
            out.pop()
        else:
            out.append(op)
    return tuple(out)


@dataclass(frozen=True)
class Edge:
    src: str
    resample: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "resample", normalize_resample(self.resample))

    def to_json(self):
        r = self.resample
        return {"src": self.src, "resample": "none" if not r else r[0] if len(r) == 1 else list(r)}


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    weight: np.ndarray | None = None  # Cout x Cin; None means identity
    bias: np.ndarray | None = None

    def matrices(self, cin):
        if self.weight is None:
            if self.out_channels != cin:
                raise ShapeError(f"identity conv needs out_channels == {cin}, got {self.out_channels}")
            w = np.eye(cin)
        else:
            w = np.asarray(self.weight, dtype=np.float64)
        b = np.zeros(self.out_channels) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
        return w, b


@dataclass(frozen=True)
class FusionNode:
    id: str
    kind: str
    edges: tuple = ()
    weights: tuple = ()
    epsilon: float = DEFAULT_EPSILON
    conv: ConvSpec | None = None
    act: str = "none"
    level: str | None = None

    @property
    def has_post(self):
        return self.conv is not None or self.act != "none"


@dataclass
class FusionGraph:
    nodes: dict                       # id -> FusionNode, insertion order preserved
    inputs: dict                      # level -> (n, c, h, w)
    outputs: list = field(default_factory=list)

    def node_level(self, node_id):
        node = self.nodes[node_id]
        if node.level is not None:
            return node.level
        if node.kind == "input":
            return node.id
        matches = [lv for lv in self.inputs if node.id.startswith(lv)]
        return max(matches, key=len) if matches else None

    def copy(self):
        return FusionGraph(dict(self.nodes), dict(self.inputs), list(self.outputs))


def _parse_conv(obj, where):
    if obj is None:
        return None
    try:
        weight = obj.get("weight")
        bias = obj.get("bias")
        return ConvSpec(
            out_channels=int(obj["out_channels"]),
            weight=None if weight is None else np.asarray(weight, dtype=np.float64),
            bias=None if bias is None else np.asarray(bias, dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise FormatError(f"{where}: bad conv spec: {exc}") from exc


def graph_from_json(obj):
    try:
        nodes = {}
        for i, spec in enumerate(obj["nodes"]):
            nid = str(spec["id"])
            if nid in nodes:
                raise FormatError(f"duplicate node id {nid!r}")
            post = spec.get("post") or {}
            edges = tuple(Edge(str(e["src"]), e.get("resample", "none")) for e in spec.get("inputs", []))
            weights = spec.get("weights")
            nodes[nid] = FusionNode(
                id=nid,
                kind=str(spec.get("kind", "fuse")),
                edges=edges,
                weights=tuple(float(w) for w in weights) if weights is not None else (1.0,) * len(edges),
                epsilon=float(spec.get("epsilon", DEFAULT_EPSILON)),
                conv=_parse_conv(post.get("conv"), f"node {nid}"),
                act=str(post.get("act", "none")),
                level=spec.get("level"),
            )
        inputs = {str(k): tuple(int(d) for d in v) for k, v in obj["inputs"].items()}
        outputs = [str(o) for o in obj["outputs"]]
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise FormatError(f"bad fusion graph JSON: {exc!r}") from exc
    return FusionGraph(nodes, inputs, outputs)


def graph_to_json(g):
    nodes = []
    for node in g.nodes.values():
        spec = {"id": node.id, "kind": node.kind}
        if node.kind != "input":
            spec["inputs"] = [e.to_json() for e in node.edges]
            spec["weights"] = list(node.weights)
            spec["epsilon"] = node.epsilon
            conv = None
            if node.conv is not None:
                conv = {"out_channels": node.conv.out_channels}
                if node.conv.weight is not None:
                    conv["weight"] = np.asarray(node.conv.weight).tolist()
                if node.conv.bias is not None:
                    conv["bias"] = np.asarray(node.conv.bias).tolist()
            spec["post"] = {"conv": conv, "act": node.act}
        if node.level is not None:
            spec["level"] = node.level
        nodes.append(spec)
    return {"nodes": nodes, "inputs": {k: list(v) for k, v in g.inputs.items()}, "outputs": list(g.outputs)}


def load_graph(path):
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"cannot read: {exc.strerror}", path) from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.lineno) from exc
    return graph_from_json(obj)


def _bundled(name):
    return graph_from_json(json.loads(resources.files("bss.fixtures").joinpath(name).read_text()))


def default_neck():
    """The shipped three-level neck (P3, P4, P5) with the P4 same-level skip."""
    return _bundled("bss_default_neck.json")


def pan_neck():
    """Unsimplified PAN-style neck; graph_simplify turns it into default_neck()."""
    return _bundled("pan_neck.json")


# --------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)
    order: list = field(default_factory=list)
    dims: dict = field(default_factory=dict)

    @property
    def ok(self):
        return not self.errors

    def __str__(self):
        return "valid" if self.ok else "; ".join(self.errors)


def topological_order(g):
    """Kahn's algorithm with lexicographic tie-break. Raises GraphError on a cycle."""
    indeg = {nid: 0 for nid in g.nodes}
    consumers = {nid: [] for nid in g.nodes}
    for node in g.nodes.values():
        for e in node.edges:
            if e.src in g.nodes:
                indeg[node.id] += 1
                consumers[e.src].append(node.id)
    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for c in consumers[nid]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, c)
    if len(order) != len(g.nodes):
        stuck = sorted(nid for nid, d in indeg.items() if d > 0)
        raise GraphError(f"cycle through nodes {stuck}")
    return order


def _resampled_dims(dims, ops):
    n, c, h, w = dims
    for op in ops:
        if op == "up2":
            h, w = 2 * h, 2 * w
        else:
            if h % 2 or w % 2:
                raise ShapeError(f"down2 of odd spatial dims {h}x{w}")
            h, w = h // 2, w // 2
    return (n, c, h, w)


def graph_validate(g):
    """Collect every structural problem instead of stopping at the first."""
    rep = ValidationReport()
    err = rep.errors.append
    for node in g.nodes.values():
        if node.kind not in NODE_KINDS:
            err(f"node {node.id}: unknown kind {node.kind!r}")
        if node.kind == "input":
            if node.edges:
                err(f"input node {node.id} has in-edges")
            if node.id not in g.inputs:
                err(f"input node {node.id} is not a declared input level")
            continue
        if not node.edges:
            err(f"node {node.id}: fuse/output node has no in-edges")
        if len(node.weights) != len(node.edges):
            err(f"node {node.id}: {len(node.weights)} weights for {len(node.edges)} edges")
        if not node.epsilon >= 0:
            err(f"node {node.id}: negative epsilon")
        elif node.epsilon + sum(max(0.0, w) for w in node.weights) <= 0:
            err(f"node {node.id}: weights sum to zero with epsilon = 0")
        if node.act not in ("none", "silu"):
            err(f"node {node.id}: unknown activation {node.act!r}")
        for e in node.edges:
            if e.src == node.id:
                err(f"node {node.id}: self-loop (cycle)")
            elif e.src not in g.nodes:
                err(f"node {node.id}: dangling edge from unknown node {e.src!r}")
    for level in g.inputs:
        if level not in g.nodes or g.nodes[level].kind != "input":
            err(f"declared input level {level} has no input node")
        if len(g.inputs[level]) != 4 or min(g.inputs[level]) < 1:
            err(f"input level {level}: dims must be 4 positive ints")
    for out in g.outputs:
        if out not in g.nodes:
            err(f"output {out!r} is not a node")
    if rep.errors:
        return rep

    try:
        rep.order = topological_order(g)
    except GraphError as exc:
        err(str(exc))
        return rep

    for nid in rep.order:
        node = g.nodes[nid]
        if node.kind == "input":
            rep.dims[nid] = tuple(g.inputs[nid])
            continue
        working = None
        for e in node.edges:
            try:
                d = _resampled_dims(rep.dims[e.src], e.resample)
            except ShapeError as exc:
                err(f"node {nid}: edge from {e.src}: {exc}")
                break
            if working is None:
                working = d
            elif d != working:
                err(f"node {nid}: edge from {e.src} gives dims {d}, expected {working}")
                break
        else:
            if node.conv is not None:
                cin = working[1]
                if node.conv.weight is not None:
                    shape = np.shape(node.conv.weight)
                    if shape != (node.conv.out_channels, cin):
                        err(f"node {nid}: conv weight shape {shape} != ({node.conv.out_channels}, {cin})")
                elif node.conv.out_channels != cin:
                    err(f"node {nid}: identity conv cannot map {cin} -> {node.conv.out_channels} channels")
                if node.conv.bias is not None and np.size(node.conv.bias) != node.conv.out_channels:
                    err(f"node {nid}: conv bias length != out_channels")
                working = (working[0], node.conv.out_channels, working[2], working[3])
            rep.dims[nid] = working
            continue
        return rep
    return rep


# --------------------------------------------------------------------------
# surgery


def _consumers(g, nid):
    return [n for n in g.nodes.values() if any(e.src == nid for e in n.edges)]


def _is_passthrough(g, node):
    return node.kind == "fuse" and len(node.edges) == 1 and not node.has_post and node.id not in g.outputs


def graph_simplify(g):
    """Prune single-input pass-through fuse nodes and add same-level skip edges.

    A pruned node's consumers are rewired to its source with the two resample
    chains composed. Every level that has both an input node and an output
    node gets a direct input -> output edge (raw weight 1) if it lacks one.
    """
    g = g.copy()
    while True:
        victims = sorted(nid for nid, n in g.nodes.items() if _is_passthrough(g, n))
        if not victims:
            break
        victim = g.nodes.pop(victims[0])
        (up,) = victim.edges
        for consumer in _consumers(g, victim.id):
            edges = []
            for e in consumer.edges:
                if e.src == victim.id:
                    e = Edge(up.src, up.resample + e.resample)
                    if e.src == consumer.id:
                        raise GraphError(f"removing {victim.id} would create a cycle at {consumer.id}")
                edges.append(e)
            g.nodes[consumer.id] = replace(consumer, edges=tuple(edges))

    for nid in list(g.nodes):
        node = g.nodes[nid]
        if node.kind != "output":
            continue
        level = g.node_level(nid)
        if level is None or level not in g.nodes or g.nodes[level].kind != "input":
            continue
        if any(e.src == level and not e.resample for e in node.edges):
            continue
        g.nodes[nid] = replace(node, edges=node.edges + (Edge(level),), weights=node.weights + (1.0,))
    topological_order(g)
    return g


# --------------------------------------------------------------------------
# execution


def apply_weights_dir(g, directory):
    """Override fusion weights and conv parameters from a weights directory.

    manifest.json maps node id -> {"weights": [...], "conv_weight": file,
    "conv_bias": file}; every key is optional, files are BST1.
    """
    directory = Path(directory)
    manifest = directory / "manifest.json"
    try:
        spec = json.loads(manifest.read_text())
    except OSError as exc:
        raise FormatError(f"cannot read: {exc.strerror}", manifest) from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", manifest, exc.lineno) from exc
    g = g.copy()
    for nid, over in spec.get("nodes", {}).items():
        if nid not in g.nodes:
            raise FormatError(f"weights for unknown node {nid!r}", manifest)
        node = g.nodes[nid]
        if "weights" in over:
            node = replace(node, weights=tuple(float(w) for w in over["weights"]))
        if "conv_weight" in over or "conv_bias" in over:
            w = read_bst(directory / over["conv_weight"]) if "conv_weight" in over else None
            b = read_bst(directory / over["conv_bias"]) if "conv_bias" in over else None
            w = None if w is None else w.reshape(w.shape[0], -1)
            out_ch = w.shape[0] if w is not None else node.conv.out_channels if node.conv else np.size(b)
            node = replace(node, conv=ConvSpec(int(out_ch), w, b))
        g.nodes[nid] = node
    return g


def graph_execute(g, inputs, keep_all=False):
    """Evaluate the graph on {level: tensor}; returns {output id: tensor}."""
    rep = graph_validate(g)
    if not rep.ok:
        raise GraphError(f"invalid graph: {rep}")
    values = {}
    for level, dims in g.inputs.items():
        if level not in inputs:
            raise ConfigError(f"missing input level {level}")
        t = as_tensor(inputs[level], level)
        if tuple(t.shape) != tuple(dims):
            raise ShapeError(f"input {level} has dims {t.shape}, graph declares {tuple(dims)}")
        values[level] = t
    for nid in rep.order:
        node = g.nodes[nid]
        if node.kind == "input":
            continue
        parts = []
        for e in node.edges:
            t = values[e.src]
            for op in e.resample:
                t = resample(t, op)
            parts.append(t)
        keys = [(e.src, e.resample, i) for i, e in enumerate(node.edges)]
        out = fuse_weighted(parts, node.weights, node.epsilon, keys=keys)
        if node.conv is not None:
            w, b = node.conv.matrices(out.shape[1])
            out = pointwise_conv(out, w, b)
        if node.act == "silu":
            out = silu_map(out)
        values[nid] = out
    if keep_all:
        return values
    return {o: values[o] for o in g.outputs}
