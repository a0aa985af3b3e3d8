"""Architecture representation: a DAG of typed layer nodes with parameters.

A :class:`NetworkGraph` is evaluated in topological order (ready nodes are
taken lowest id first). Node ids are allocated from a monotone counter that
survives cloning and serialization, so ids are never reused within a run.
"""
from __future__ import annotations

import copy
import heapq
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .blob import BlobFormatError, pack_tensors, unpack_tensors

F32 = np.float32

KINDS = (
    "Input", "Conv", "BatchNorm", "Relu", "MaxPool", "Dense", "Softmax",
    "ConcatChannels", "WeightedAdd", "Flatten",
)
PARAM_NAMES = {
    "Conv": ("weight", "bias"),
    "BatchNorm": ("gamma", "beta"),
    "Dense": ("weight", "bias"),
    "WeightedAdd": ("lam",),
}
BUFFER_NAMES = {"BatchNorm": ("running_mean", "running_var")}
HEAD_KINDS = ("Flatten", "Dense", "Softmax")

FORMAT_HEADER = "NMGRAPH v1"
_LIST_ATTRS = ("offsets",)


class GraphError(ValueError):
    """Structural problem: cycle, dangling edge, bad arity, shape mismatch."""


class GraphFormatError(ValueError):
    """Malformed or incompatible graph text / weight blob."""


@dataclass
class LayerNode:
    id: int
    kind: str
    inputs: list = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def tensor_names(self):
        return [n for n in PARAM_NAMES.get(self.kind, ()) if n in self.params] + \
               [n for n in BUFFER_NAMES.get(self.kind, ()) if n in self.buffers]

    def tensor(self, name):
        return self.params[name] if name in self.params else self.buffers[name]

    def describe(self):
        attrs = " ".join(f"{k}={_fmt_attr(v)}" for k, v in sorted(self.attrs.items()))
        return f"#{self.id} {self.kind}({attrs})" if attrs else f"#{self.id} {self.kind}"


class NetworkGraph:
    def __init__(self):
        self.nodes: dict[int, LayerNode] = {}
        self.input_id: int | None = None
        self.output_id: int | None = None
        self.next_id = 0

    # -- construction ------------------------------------------------------

    def add(self, kind, inputs=(), attrs=None, params=None, buffers=None) -> int:
        if kind not in KINDS:
            raise GraphError(f"unknown layer kind {kind!r}")
        for i in inputs:
            if i not in self.nodes:
                raise GraphError(f"input node {i} does not exist")
        nid = self.next_id
        self.next_id += 1
        self.nodes[nid] = LayerNode(nid, kind, list(inputs), dict(attrs or {}),
                                    dict(params or {}), dict(buffers or {}))
        if kind == "Input":
            if self.input_id is not None:
                raise GraphError("graph already has an input node")
            self.input_id = nid
        return nid

    def replace_input(self, node_id, old, new):
        node = self.nodes[node_id]
        node.inputs = [new if i == old else i for i in node.inputs]

    def consumers(self, node_id):
        return sorted(n.id for n in self.nodes.values() if node_id in n.inputs)

    def clone(self) -> "NetworkGraph":
        return copy.deepcopy(self)

    # -- structure ---------------------------------------------------------

    def topo_order(self):
        indeg = {nid: len(set(n.inputs)) for nid, n in self.nodes.items()}
        succ = {nid: [] for nid in self.nodes}
        for n in self.nodes.values():
            for i in set(n.inputs):
                succ[i].append(n.id)
        ready = [nid for nid, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            nid = heapq.heappop(ready)
            order.append(nid)
            for s in succ[nid]:
                indeg[s] -= 1
                if indeg[s] == 0:
                    heapq.heappush(ready, s)
        if len(order) != len(self.nodes):
            raise GraphError("graph contains a cycle")
        return order

    def ancestors(self, node_id):
        seen, stack = set(), list(self.nodes[node_id].inputs)
        while stack:
            i = stack.pop()
            if i not in seen:
                seen.add(i)
                stack.extend(self.nodes[i].inputs)
        return seen

    def body_ids(self):
        """Nodes that morphisms may rewrite: everything except input and head."""
        return [nid for nid in self.topo_order()
                if self.nodes[nid].kind not in HEAD_KINDS + ("Input",)]

    def validate(self):
        if self.input_id is None or self.output_id is None:
            raise GraphError("graph needs exactly one input and one output node")
        if sum(n.kind == "Input" for n in self.nodes.values()) != 1:
            raise GraphError("graph needs exactly one Input node")
        for n in self.nodes.values():
            for i in n.inputs:
                if i not in self.nodes:
                    raise GraphError(f"node {n.id} references missing node {i}")
        order = self.topo_order()
        reach = {self.input_id}
        for nid in order:
            if nid != self.input_id and any(i in reach for i in self.nodes[nid].inputs):
                reach.add(nid)
        if len(reach) != len(self.nodes):
            raise GraphError(f"nodes unreachable from input: {sorted(set(self.nodes) - reach)}")
        back = {self.output_id} | self.ancestors(self.output_id)
        if len(back) != len(self.nodes):
            raise GraphError(f"nodes not reaching output: {sorted(set(self.nodes) - back)}")
        self.shape_infer()

    def shape_infer(self):
        """Per-node output shapes (without the batch dimension)."""
        shapes = {}
        for nid in self.topo_order():
            node = self.nodes[nid]
            shapes[nid] = _infer_shape(node, [shapes[i] for i in node.inputs])
        return shapes

    def param_count(self) -> int:
        return int(sum(p.size for n in self.nodes.values() for p in n.params.values()))

    def parameters(self):
        for nid in sorted(self.nodes):
            node = self.nodes[nid]
            for name in PARAM_NAMES.get(node.kind, ()):
                if name in node.params:
                    yield nid, name, node.params[name]

    # -- execution ---------------------------------------------------------

    def forward(self, x, mode="infer"):
        """Class probabilities for batch ``x``."""
        outputs, _ = self.run(x, mode=mode, keep_cache=False)
        return outputs[self.output_id]

    def run(self, x, mode="infer", keep_cache=True, retain=()):
        """Evaluate every node; returns ``(outputs, caches)``.

        Without ``keep_cache`` intermediate outputs are freed as soon as
        their last consumer ran, except the output node and ``retain``.
        """
        x = np.ascontiguousarray(x, dtype=F32)
        in_shape = tuple(self.nodes[self.input_id].attrs[k] for k in ("channels", "height", "width"))
        if x.ndim != 4 or x.shape[1:] != in_shape:
            raise ops.ShapeError(f"batch shape {x.shape[1:]} does not match input spec {in_shape}")
        order = self.topo_order()
        remaining = {nid: len(self.consumers(nid)) for nid in order} if not keep_cache else None
        outputs, caches = {}, {}
        for nid in order:
            node = self.nodes[nid]
            if node.kind == "Input":
                out, cache = x, None
            else:
                out, cache = _forward_node(node, [outputs[i] for i in node.inputs], mode)
            outputs[nid] = out
            if keep_cache:
                caches[nid] = cache
            else:
                for i in set(node.inputs):
                    remaining[i] -= 1
                    if remaining[i] == 0 and i != self.output_id and i not in retain:
                        del outputs[i]
        return outputs, caches

    def backward(self, caches, grad, start=None):
        """Backpropagate ``grad`` (gradient of ``start``'s output, default the
        output node) and return ``{(node_id, param_name): gradient}``."""
        start = self.output_id if start is None else start
        order = self.topo_order()
        upstream = {start: grad}
        pgrads = {}
        for nid in reversed(order[: order.index(start) + 1]):
            if nid not in upstream:
                continue
            node = self.nodes[nid]
            if node.kind == "Input":
                continue
            if nid not in caches:
                raise ops.MissingCacheError(f"no forward cache for node {nid}")
            g = upstream.pop(nid)
            in_grads, p = _backward_node(node, g, caches[nid])
            for name, val in p.items():
                pgrads[(nid, name)] = val
            for i, gi in zip(node.inputs, in_grads):
                upstream[i] = upstream[i] + gi if i in upstream else gi
        return pgrads

    # -- serialization -----------------------------------------------------

    def serialize(self):
        """Return ``(graph_text, weight_blob_bytes)``."""
        lines = [FORMAT_HEADER, f"next_id {self.next_id}",
                 f"input {self.input_id}", f"output {self.output_id}"]
        tensors = []
        for nid in sorted(self.nodes):
            node = self.nodes[nid]
            names = node.tensor_names()
            ins = ",".join(map(str, node.inputs)) or "-"
            parts = [f"node {nid} {node.kind} in={ins}"]
            parts += [f"{k}={_fmt_attr(v)}" for k, v in sorted(node.attrs.items())]
            parts.append("tensors=" + (",".join(names) or "-"))
            lines.append(" ".join(parts))
            tensors.extend(node.tensor(n) for n in names)
        return "\n".join(lines) + "\n", pack_tensors(tensors)

    @classmethod
    def deserialize(cls, text, blob):
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != FORMAT_HEADER:
            got = lines[0] if lines else "<empty>"
            raise GraphFormatError(f"unsupported graph format header {got!r}, expected {FORMAT_HEADER!r}")
        try:
            tensors = unpack_tensors(blob)
        except BlobFormatError as exc:
            raise GraphFormatError(str(exc)) from exc
        g = cls()
        pending = []
        try:
            for ln in lines[1:]:
                head, *rest = ln.split()
                if head in ("next_id", "input", "output"):
                    setattr(g, "next_id" if head == "next_id" else f"{head}_id", int(rest[0]))
                    continue
                if head != "node":
                    raise GraphFormatError(f"unexpected line {ln!r}")
                nid, kind = int(rest[0]), rest[1]
                if kind not in KINDS:
                    raise GraphFormatError(f"unknown layer kind {kind!r}")
                kv = dict(tok.split("=", 1) for tok in rest[2:])
                pending.append((nid, kind, kv))
        except (ValueError, IndexError, KeyError) as exc:
            if isinstance(exc, GraphFormatError):
                raise
            raise GraphFormatError(f"malformed graph text: {exc}") from exc
        names_total = sum(len(_tensor_list(kv)) for _, _, kv in pending)
        if names_total != len(tensors):
            raise GraphFormatError(
                f"graph lists {names_total} tensors but weight blob holds {len(tensors)}")
        pos = 0
        for nid, kind, kv in pending:
            ins_raw = kv.pop("in")
            names = _tensor_list(kv)
            kv.pop("tensors")
            node = LayerNode(nid, kind, [] if ins_raw == "-" else [int(v) for v in ins_raw.split(",")],
                             {k: _parse_attr(k, v) for k, v in kv.items()})
            for name in names:
                arr = np.array(tensors[pos], dtype=F32)
                pos += 1
                if name in BUFFER_NAMES.get(kind, ()):
                    node.buffers[name] = arr
                elif name in PARAM_NAMES.get(kind, ()):
                    node.params[name] = arr
                else:
                    raise GraphFormatError(f"node {nid}: unknown tensor {name!r} for {kind}")
            if nid in g.nodes:
                raise GraphFormatError(f"duplicate node id {nid}")
            g.nodes[nid] = node
        if g.input_id is None or g.output_id is None:
            raise GraphFormatError("graph text lacks input/output declarations")
        if g.nodes and g.next_id <= max(g.nodes):
            raise GraphFormatError("next_id must exceed every node id")
        try:
            g.validate()
        except (GraphError, ops.ShapeError) as exc:
            raise GraphFormatError(f"deserialized graph is invalid: {exc}") from exc
        return g

    def save(self, prefix):
        """Write ``<prefix>.nmg`` (text) and ``<prefix>.nmt`` (weights)."""
        text, blob = self.serialize()
        with open(f"{prefix}.nmg", "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
        with open(f"{prefix}.nmt", "wb") as fh:
            fh.write(blob)

    @classmethod
    def load(cls, prefix):
        prefix = str(prefix)
        for ext in (".nmg", ".nmt"):
            if prefix.endswith(ext):
                prefix = prefix[: -len(ext)]
        with open(f"{prefix}.nmg", encoding="ascii") as fh:
            text = fh.read()
        with open(f"{prefix}.nmt", "rb") as fh:
            blob = fh.read()
        return cls.deserialize(text, blob)

    def summary(self):
        shapes = self.shape_infer()
        rows = []
        for nid in self.topo_order():
            node = self.nodes[nid]
            n_par = sum(p.size for p in node.params.values())
            ins = ",".join(map(str, node.inputs)) or "-"
            rows.append(f"{node.describe():<60} in={ins:<8} shape={shapes[nid]} params={n_par}")
        rows.append(f"total parameters: {self.param_count()}")
        return "\n".join(rows)


def _tensor_list(kv):
    raw = kv["tensors"]
    return [] if raw == "-" else raw.split(",")


def _fmt_attr(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(int(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_attr(key, raw):
    if key in _LIST_ATTRS:
        return [int(x) for x in raw.split(",")]
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    return raw


_ARITY = {"Input": (0, 0), "ConcatChannels": (2, None), "WeightedAdd": (2, 2)}


def _infer_shape(node, in_shapes):
    lo, hi = _ARITY.get(node.kind, (1, 1))
    if len(in_shapes) < lo or (hi is not None and len(in_shapes) > hi):
        raise GraphError(f"{node.describe()}: wrong number of inputs ({len(in_shapes)})")
    a = node.attrs
    kind = node.kind
    if kind == "Input":
        return (a["channels"], a["height"], a["width"])
    s = in_shapes[0]
    if kind == "Conv":
        if len(s) != 3 or s[0] != a["in_channels"]:
            raise GraphError(f"{node.describe()}: input shape {s} incompatible")
        p = (a["kernel"] - 1) // 2 if a["padding"] == "same" else 0
        h = (s[1] + 2 * p - a["kernel"]) // a["stride"] + 1
        w = (s[2] + 2 * p - a["kernel"]) // a["stride"] + 1
        if h < 1 or w < 1:
            raise GraphError(f"{node.describe()}: spatial size collapses for input {s}")
        return (a["out_channels"], h, w)
    if kind == "BatchNorm":
        if s[0] != a["channels"]:
            raise GraphError(f"{node.describe()}: expects {a['channels']} channels, got {s}")
        return s
    if kind == "Relu":
        return s
    if kind == "MaxPool":
        p = a["pool"]
        if len(s) != 3 or s[1] < p or s[2] < p:
            raise GraphError(f"{node.describe()}: cannot pool {s}")
        return (s[0], s[1] // p, s[2] // p)
    if kind == "Flatten":
        return (int(np.prod(s)),)
    if kind == "Dense":
        if s != (a["in_features"],):
            raise GraphError(f"{node.describe()}: input shape {s} incompatible")
        return (a["out_features"],)
    if kind == "Softmax":
        if len(s) != 1:
            raise GraphError(f"{node.describe()}: softmax needs a flat input, got {s}")
        return s
    if kind == "ConcatChannels":
        if any(len(t) != 3 or t[1:] != s[1:] for t in in_shapes):
            raise GraphError(f"{node.describe()}: non-channel dims differ {in_shapes}")
        offsets = list(np.cumsum([0] + [t[0] for t in in_shapes[:-1]]))
        if list(a.get("offsets", offsets)) != offsets:
            raise GraphError(f"{node.describe()}: recorded offsets {a['offsets']} != {offsets}")
        return (sum(t[0] for t in in_shapes),) + s[1:]
    if kind == "WeightedAdd":
        if in_shapes[0] != in_shapes[1]:
            raise GraphError(f"{node.describe()}: operand shapes differ {in_shapes}")
        return s
    raise GraphError(f"unknown kind {kind}")


def _forward_node(node, xs, mode):
    k, p, a = node.kind, node.params, node.attrs
    if k == "Conv":
        return ops.conv2d_forward(xs[0], p["weight"], p["bias"], a["stride"], a["padding"])
    if k == "BatchNorm":
        b = node.buffers
        return ops.batchnorm_forward(xs[0], p["gamma"], p["beta"], b["running_mean"],
                                     b["running_var"], a["eps"], a["momentum"], mode)
    if k == "Relu":
        return ops.relu_forward(xs[0])
    if k == "MaxPool":
        return ops.maxpool2d_forward(xs[0], a["pool"])
    if k == "Flatten":
        return ops.flatten_forward(xs[0])
    if k == "Dense":
        return ops.dense_forward(xs[0], p["weight"], p["bias"])
    if k == "Softmax":
        return ops.softmax_forward(xs[0])
    if k == "ConcatChannels":
        return ops.concat_channels_forward(xs)
    if k == "WeightedAdd":
        return ops.weighted_sum_forward(xs[0], xs[1], p["lam"])
    raise GraphError(f"cannot execute {k}")


def _backward_node(node, g, cache):
    k = node.kind
    if k == "Conv":
        dx, dw, db = ops.conv2d_backward(g, cache)
        return [dx], {"weight": dw, "bias": db}
    if k == "BatchNorm":
        dx, dg, db = ops.batchnorm_backward(g, cache)
        return [dx], {"gamma": dg, "beta": db}
    if k == "Relu":
        return [ops.relu_backward(g, cache)], {}
    if k == "MaxPool":
        return [ops.maxpool2d_backward(g, cache)], {}
    if k == "Flatten":
        return [ops.flatten_backward(g, cache)], {}
    if k == "Dense":
        dx, dw, db = ops.dense_backward(g, cache)
        return [dx], {"weight": dw, "bias": db}
    if k == "Softmax":
        return [ops.softmax_backward(g, cache)], {}
    if k == "ConcatChannels":
        return ops.concat_channels_backward(g, cache), {}
    if k == "WeightedAdd":
        da, db, dl = ops.weighted_sum_backward(g, cache)
        return [da, db], {"lam": dl}
    raise GraphError(f"cannot differentiate {k}")


# -- node factories ----------------------------------------------------------

def he_normal(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(F32)


def init_params(node, rng):
    """(Re)initialize a node's parameters and buffers from scratch."""
    a = node.attrs
    if node.kind == "Conv":
        fan_in = a["in_channels"] * a["kernel"] ** 2
        node.params["weight"] = he_normal(
            rng, (a["out_channels"], a["in_channels"], a["kernel"], a["kernel"]), fan_in)
        node.params["bias"] = np.zeros(a["out_channels"], F32)
    elif node.kind == "BatchNorm":
        c = a["channels"]
        node.params.update(gamma=np.ones(c, F32), beta=np.zeros(c, F32))
        node.buffers.update(running_mean=np.zeros(c, F32), running_var=np.ones(c, F32))
    elif node.kind == "Dense":
        lim = np.sqrt(6.0 / (a["in_features"] + a["out_features"]))
        node.params["weight"] = rng.uniform(
            -lim, lim, (a["out_features"], a["in_features"])).astype(F32)
        node.params["bias"] = np.zeros(a["out_features"], F32)
    elif node.kind == "WeightedAdd":
        node.params["lam"] = np.ones(1, F32)


def add_conv(g, inp, cin, cout, kernel, rng, stride=1, padding="same"):
    nid = g.add("Conv", [inp], dict(in_channels=cin, out_channels=cout, kernel=kernel,
                                    stride=stride, padding=padding))
    init_params(g.nodes[nid], rng)
    return nid


def add_batchnorm(g, inp, channels, eps=1e-5, momentum=0.9):
    nid = g.add("BatchNorm", [inp], dict(channels=channels, eps=eps, momentum=momentum))
    init_params(g.nodes[nid], None)
    return nid


def add_dense(g, inp, fin, fout, rng):
    nid = g.add("Dense", [inp], dict(in_features=fin, out_features=fout))
    init_params(g.nodes[nid], rng)
    return nid
