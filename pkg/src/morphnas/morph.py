"""Function-preserving network morphisms and their random composition.

Four rewrites are provided, each returning a modified copy:

* :func:`deepen` inserts a Conv-BatchNorm-ReLU block after a ReLU. The conv is
  a Dirac identity, the batch norm is set to undo its own normalization for
  calibration statistics, and the trailing ReLU is a no-op on the already
  non-negative input.
* :func:`widen` multiplies a conv's output channels. New channels copy
  existing filters; every downstream weight reading them is zero.
* :func:`skip` with ``mode="concat"`` concatenates an earlier activation to
  a conv's input with zero weights for the extra channels; ``mode="add"``
  mixes it in as ``lam*main + (1-lam)*skip`` with ``lam = 1``.

All guarantees hold in inference mode.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import GraphError, NetworkGraph

F32 = np.float32

DEEPEN_KERNELS = (3, 5)
WIDEN_FACTORS = (2, 4)
SKIP_MODES = ("concat", "add")
OPERATORS = ("deepen", "widen", "skip")
MAX_RETRIES = 50
_SKIP_SOURCES = ("Relu", "MaxPool", "WeightedAdd")


class MorphismError(ValueError):
    """The requested rewrite is not applicable to this graph/site."""


@dataclass
class Morphism:
    kind: str  # DeepenConvBnRelu | WidenConv | SkipConcat | SkipAdd
    site: tuple
    attributes: dict = field(default_factory=dict)

    def __str__(self):
        if self.kind == "DeepenConvBnRelu":
            return f"deepen@{self.site[0]}:k{self.attributes['kernel_size']}"
        if self.kind == "WidenConv":
            return f"widen@{self.site[0]}:x{self.attributes['factor']}"
        mode = "concat" if self.kind == "SkipConcat" else "add"
        return f"skip_{mode}@{self.site[0]}->{self.site[1]}"


@dataclass
class PreservationReport:
    max_abs_deviation: float
    input_samples: int
    tolerance: float
    passed: bool


def _require_body(g, nid, kind):
    if nid not in g.nodes:
        raise MorphismError(f"node {nid} does not exist")
    node = g.nodes[nid]
    if node.kind != kind:
        raise MorphismError(f"node {nid} is a {node.kind}, expected {kind}")
    if nid not in g.body_ids():
        raise MorphismError(f"node {nid} lies outside the convolutional body")
    return node


def closest_preceding_conv(g, nid):
    """Nearest Conv ancestor by edge distance; ties go to the later topological position."""
    pos = {n: i for i, n in enumerate(g.topo_order())}
    frontier, dist, seen = [nid], 0, {nid}
    while frontier:
        convs = [n for n in frontier if n != nid and g.nodes[n].kind == "Conv"]
        if convs:
            return max(convs, key=pos.__getitem__)
        nxt = []
        for n in frontier:
            for i in g.nodes[n].inputs:
                if i not in seen:
                    seen.add(i)
                    nxt.append(i)
        frontier, dist = nxt, dist + 1
    return None


# -- deepen --------------------------------------------------------------------

def _calibration_inputs(g, calibration, rng):
    if calibration is not None:
        return np.asarray(calibration, dtype=F32)
    a = g.nodes[g.input_id].attrs
    rng = rng if rng is not None else np.random.default_rng(0)
    return rng.standard_normal((64, a["channels"], a["height"], a["width"])).astype(F32)


def _deepen_inplace(g, relu_id, kernel_size, calibration=None, rng=None):
    _require_body(g, relu_id, "Relu")
    if kernel_size not in DEEPEN_KERNELS:
        raise MorphismError(f"deepen kernel size must be one of {DEEPEN_KERNELS}")
    conv_id = closest_preceding_conv(g, relu_id)
    if conv_id is None:
        raise MorphismError(f"no convolution precedes node {relu_id}")
    c = g.nodes[conv_id].attrs["out_channels"]
    if g.shape_infer()[relu_id][0] != c:
        raise MorphismError(f"node {relu_id} carries a channel count different from conv {conv_id}")

    x = _calibration_inputs(g, calibration, rng)
    outputs, _ = g.run(x, mode="infer", keep_cache=False, retain={relu_id})
    act = outputs[relu_id].astype(np.float64)
    mu = act.mean(axis=(0, 2, 3)).astype(F32)
    var = act.var(axis=(0, 2, 3)).astype(F32)

    downstream = g.consumers(relu_id)
    w = np.zeros((c, c, kernel_size, kernel_size), F32)
    w[np.arange(c), np.arange(c), kernel_size // 2, kernel_size // 2] = 1.0
    conv = g.add("Conv", [relu_id],
                 dict(in_channels=c, out_channels=c, kernel=kernel_size, stride=1, padding="same"),
                 params=dict(weight=w, bias=np.zeros(c, F32)))
    eps = 1e-5
    bn = g.add("BatchNorm", [conv], dict(channels=c, eps=eps, momentum=0.9),
               params=dict(gamma=np.sqrt(var + F32(eps)).astype(F32), beta=mu.copy()),
               buffers=dict(running_mean=mu.copy(), running_var=var.copy()))
    relu = g.add("Relu", [bn])
    for d in downstream:
        g.replace_input(d, relu_id, relu)
    return Morphism("DeepenConvBnRelu", (relu_id,), {"kernel_size": kernel_size, "channels": c})


def deepen(graph, relu_id, kernel_size=3, calibration=None, rng=None):
    g = graph.clone()
    _deepen_inplace(g, relu_id, kernel_size, calibration, rng)
    g.validate()
    return g


def deepen_sites(g):
    return [n for n in g.body_ids()
            if g.nodes[n].kind == "Relu" and closest_preceding_conv(g, n) is not None]


# -- widen ---------------------------------------------------------------------

def _widenable(g, pid):
    for cid in g.consumers(pid):
        kind = g.nodes[cid].kind
        if kind in ("BatchNorm", "Relu", "MaxPool", "ConcatChannels"):
            if not _widenable(g, cid):
                return False
        elif kind == "Flatten":
            if not all(g.nodes[d].kind == "Dense" for d in g.consumers(cid)):
                return False
        elif kind != "Conv":
            return False
    return True


def _propagate(g, pid, src, is_new, channels, spatial):
    """Make every reader of ``pid``'s widened output ignore the new channels.

    ``src[k]`` names the old channel that new channel ``k`` copies (identity
    for old channels) and ``is_new`` marks inserted positions.
    """
    old = ~is_new
    for cid in g.consumers(pid):
        node = g.nodes[cid]
        k = node.kind
        if k == "BatchNorm":
            for store in (node.params, node.buffers):
                for name in list(store):
                    store[name] = np.ascontiguousarray(store[name][src])
            node.attrs["channels"] = len(src)
            channels[cid] = len(src)
            _propagate(g, cid, src, is_new, channels, spatial)
        elif k in ("Relu", "MaxPool"):
            channels[cid] = len(src)
            _propagate(g, cid, src, is_new, channels, spatial)
        elif k == "Conv":
            w = node.params["weight"]
            nw = np.zeros((w.shape[0], len(src)) + w.shape[2:], F32)
            nw[:, old] = w
            node.params["weight"] = nw
            node.attrs["in_channels"] = len(src)
        elif k == "Flatten":
            hw = spatial[pid]
            feat_new = np.repeat(is_new, hw)
            for did in g.consumers(cid):
                dense = g.nodes[did]
                if dense.kind != "Dense":
                    raise MorphismError(f"flatten {cid} feeds a {dense.kind}; cannot rewrite")
                w = dense.params["weight"]
                nw = np.zeros((w.shape[0], feat_new.size), F32)
                nw[:, ~feat_new] = w
                dense.params["weight"] = nw
                dense.attrs["in_features"] = feat_new.size
        elif k == "ConcatChannels":
            slot = node.inputs.index(pid)
            off = node.attrs["offsets"][slot]
            n_old = int(old.sum())
            total = channels[cid]
            added = len(src) - n_old
            csrc = np.concatenate([np.arange(off), off + src, np.arange(off + n_old, total)])
            cnew = np.concatenate([np.zeros(off, bool), is_new, np.zeros(total - off - n_old, bool)])
            node.attrs["offsets"] = [o + added if j > slot else o
                                     for j, o in enumerate(node.attrs["offsets"])]
            channels[cid] = total + added
            _propagate(g, cid, csrc, cnew, channels, spatial)
        else:
            raise MorphismError(f"a {k} consumer (node {cid}) cannot absorb widened channels")


def _widen_inplace(g, conv_id, factor):
    node = _require_body(g, conv_id, "Conv")
    if factor not in WIDEN_FACTORS:
        raise MorphismError(f"widening factor must be one of {WIDEN_FACTORS}")
    if not _widenable(g, conv_id):
        raise MorphismError(f"conv {conv_id} has a consumer that cannot absorb new channels")
    shapes = g.shape_infer()
    channels = {n: s[0] for n, s in shapes.items()}
    spatial = {n: int(np.prod(s[1:])) for n, s in shapes.items() if len(s) == 3}
    k_old = node.attrs["out_channels"]
    new_k = k_old * factor
    # cyclic copies of the existing filters
    src = np.arange(new_k) % k_old
    is_new = np.arange(new_k) >= k_old
    node.params["weight"] = np.ascontiguousarray(node.params["weight"][src])
    node.params["bias"] = np.ascontiguousarray(node.params["bias"][src])
    node.attrs["out_channels"] = new_k
    channels[conv_id] = new_k
    _propagate(g, conv_id, src, is_new, channels, spatial)
    return Morphism("WidenConv", (conv_id,), {"factor": factor, "channels": new_k})


def widen(graph, conv_id, factor=2):
    g = graph.clone()
    _widen_inplace(g, conv_id, factor)
    g.validate()
    return g


def widen_sites(g, max_channels=None):
    """Convs that can be widened (by at least the smallest factor within ``max_channels``)."""
    lo = min(WIDEN_FACTORS)
    return [n for n in g.body_ids() if g.nodes[n].kind == "Conv"
            and (max_channels is None or g.nodes[n].attrs["out_channels"] * lo <= max_channels)
            and _widenable(g, n)]


def widen_factors(g, conv_id, max_channels=None):
    k = g.nodes[conv_id].attrs["out_channels"]
    return [f for f in WIDEN_FACTORS if max_channels is None or k * f <= max_channels]


# -- skip connections ----------------------------------------------------------

def _skip_check(g, from_id, to_id, mode, shapes=None):
    """Reason the skip is invalid, or ``None``."""
    if mode not in SKIP_MODES:
        return f"unknown skip mode {mode!r}"
    body = set(g.body_ids())
    if from_id not in body or to_id not in body:
        return "skip endpoints must lie in the convolutional body"
    if g.nodes[to_id].kind != "Conv":
        return f"skip target {to_id} must be a Conv (the skip feeds its input)"
    if g.nodes[from_id].kind not in _SKIP_SOURCES:
        return f"skip source {from_id} must be one of {_SKIP_SOURCES}"
    (main,) = g.nodes[to_id].inputs
    if from_id == main:
        return "skip source already feeds the target directly"
    if from_id not in g.ancestors(main):
        return f"node {from_id} does not precede node {to_id}"
    shapes = shapes or g.shape_infer()
    a, b = shapes[main], shapes[from_id]
    if a[1:] != b[1:]:
        return f"spatial dims differ: {a[1:]} vs {b[1:]}"
    if mode == "add" and a[0] != b[0]:
        return f"additive skip needs equal channels: {a[0]} vs {b[0]}"
    return None


def skip_pairs(g, mode):
    shapes = g.shape_infer()
    body = g.body_ids()
    targets = [n for n in body if g.nodes[n].kind == "Conv"]
    sources = [n for n in body if g.nodes[n].kind in _SKIP_SOURCES]
    return [(f, t) for t in targets for f in sources
            if _skip_check(g, f, t, mode, shapes) is None]


def _skip_inplace(g, from_id, to_id, mode):
    if from_id not in g.nodes or to_id not in g.nodes:
        raise MorphismError("skip endpoint does not exist")
    why = _skip_check(g, from_id, to_id, mode)
    if why:
        raise MorphismError(why)
    shapes = g.shape_infer()
    target = g.nodes[to_id]
    (main,) = target.inputs
    if mode == "concat":
        c_main, c_skip = shapes[main][0], shapes[from_id][0]
        merge = g.add("ConcatChannels", [main, from_id], dict(offsets=[0, c_main]))
        w = target.params["weight"]
        nw = np.zeros((w.shape[0], c_main + c_skip) + w.shape[2:], F32)
        nw[:, :c_main] = w
        target.params["weight"] = nw
        target.attrs["in_channels"] = c_main + c_skip
        kind = "SkipConcat"
    else:
        merge = g.add("WeightedAdd", [main, from_id], params=dict(lam=np.ones(1, F32)))
        kind = "SkipAdd"
    g.replace_input(to_id, main, merge)
    return Morphism(kind, (from_id, to_id), {"merge_node": merge})


def skip(graph, from_id, to_id, mode="concat"):
    g = graph.clone()
    _skip_inplace(g, from_id, to_id, mode)
    g.validate()
    return g


# -- random composition ----------------------------------------------------------

def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _sample_one(g, rng, calibration, max_channels=None):
    for _ in range(MAX_RETRIES):
        op = _pick(rng, OPERATORS)
        if op == "deepen":
            sites = deepen_sites(g)
            if sites:
                site = _pick(rng, sites)
                return _deepen_inplace(g, site, _pick(rng, DEEPEN_KERNELS), calibration, rng)
        elif op == "widen":
            sites = widen_sites(g, max_channels)
            if sites:
                site = _pick(rng, sites)
                return _widen_inplace(g, site, _pick(rng, widen_factors(g, site, max_channels)))
        else:
            first = _pick(rng, SKIP_MODES)
            for mode in (first, SKIP_MODES[1 - SKIP_MODES.index(first)]):
                pairs = skip_pairs(g, mode)
                if pairs:
                    return _skip_inplace(g, *_pick(rng, pairs), mode)
    raise MorphismError(f"no applicable morphism found in {MAX_RETRIES} draws")


def apply_net_morphs(graph, n_nm, rng, calibration=None, max_channels=None):
    """Apply ``n_nm`` uniformly sampled morphisms to a copy of ``graph``.

    Operator type, site and attribute are each drawn uniformly. ``calibration``
    is a batch of inputs used to set the statistics of inserted batch norms.
    ``max_channels`` optionally bounds the width a widening may produce.
    Returns ``(new_graph, [Morphism, ...])``.
    """
    if n_nm < 1:
        raise ValueError(f"n_nm must be >= 1, got {n_nm}")
    g = graph.clone()
    applied = [_sample_one(g, rng, calibration, max_channels) for _ in range(n_nm)]
    try:
        g.validate()
    except GraphError as exc:  # pragma: no cover - would be a morphism bug
        raise MorphismError(f"morphism produced an invalid graph: {exc}") from exc
    return g, applied


def verify_preservation(before, after, n_samples=64, tolerance=1e-4, seed=0, inputs=None):
    """Max absolute deviation of infer-mode class probabilities on sampled inputs."""
    ia = before.nodes[before.input_id].attrs
    ib = after.nodes[after.input_id].attrs
    if ia != ib:
        raise GraphError(f"input specs differ: {ia} vs {ib}")
    if inputs is None:
        rng = np.random.default_rng(seed)
        inputs = rng.standard_normal((n_samples, ia["channels"], ia["height"], ia["width"]))
    inputs = np.asarray(inputs, dtype=F32)
    pa = before.forward(inputs, mode="infer")
    pb = after.forward(inputs, mode="infer")
    if pa.shape != pb.shape:
        raise GraphError(f"output shapes differ: {pa.shape} vs {pb.shape}")
    dev = float(np.max(np.abs(pa.astype(np.float64) - pb.astype(np.float64))))
    return PreservationReport(dev, len(inputs), tolerance, dev <= tolerance)
