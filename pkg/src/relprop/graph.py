"""Channel-level relevance graphs, top-k relevance paths, channel filtering.

The graph condenses one relevance map into a layered DAG: one layer of nodes
for the input boundary plus one per convolution layer (networks without
convolutions fall back to linear-layer boundaries so the machinery stays
usable). A node is a (layer, channel) pair scored by the relevance mass its
channel holds at that boundary; an edge j -> k weighs the relevance that
flows from source channel j into target channel k during the backward step
through the layer between them.

Edge weights are exactly the per-channel restriction of the backward step:
restrict the upper relevance to channel k alone, run the step, and sum what
lands on channel j. Because the restriction keeps the same denominators,
the full [C_in, C_out] matrix collapses to one im2col + one matrix product
per layer instead of C_out backward passes; the definitional loop lives in
the test suite and the two routes are asserted equal.

"Longest" paths maximize the *sum* of edge weights (node scores are
display-only). The k-best dynamic program keeps at most k partial paths per
node ordered by (-weight, lexicographic channel sequence); for sum
aggregation this order is exact including ties. The optional bottleneck
aggregation (``aggregate="min"``) returns exact weights but may order
equal-weight paths beyond the first k candidates arbitrarily.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import GraphError, ShapeError
from .lrp import PixelBounds, RelevanceMap, _guarded_divide, rho
from .network import ChannelMask, ForwardTrace
from .tensor import DTYPE, _im2col, conv2d, linear

__all__ = [
    "Path",
    "RelevanceGraph",
    "build_relevance_graph",
    "top_k_paths",
    "paths_to_mask",
    "get_optimizer",
    "retain_by_deviation",
    "to_dot",
    "to_json",
]


@dataclass(frozen=True)
class Path:
    """One node per graph layer, ordered input -> output.

    ``nodes`` holds (net_layer_id, channel) pairs; the first id is -1 for
    the input boundary. ``weight`` is the aggregated edge weight.
    """

    nodes: tuple[tuple[int, int], ...]
    weight: float

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(c for _, c in self.nodes)


@dataclass
class RelevanceGraph:
    """Layered DAG over channels; ``edges[g]`` connects layer g to g+1."""

    layer_ids: tuple[int, ...]
    scores: list[np.ndarray]
    edges: list[np.ndarray]
    class_index: int

    @property
    def n_layers(self) -> int:
        return len(self.layer_ids)

    def channels(self, g: int) -> int:
        return int(self.scores[g].size)

    def total_paths(self) -> int:
        total = 1
        for s in self.scores:
            total *= int(s.size)
        return total

    def check_consistency(self) -> None:
        if len(self.scores) != self.n_layers or len(self.edges) != self.n_layers - 1:
            raise GraphError("layer/score/edge counts disagree")
        for g, e in enumerate(self.edges):
            if e.shape != (self.channels(g), self.channels(g + 1)):
                raise GraphError(
                    f"edge block {g} has shape {e.shape}, expected "
                    f"({self.channels(g)}, {self.channels(g + 1)})"
                )


def _channel_sums(tensor: np.ndarray) -> np.ndarray:
    """Per-channel relevance mass: sum over spatial axes (identity on vectors)."""
    if tensor.ndim == 1:
        return tensor.astype(np.float64)
    return tensor.reshape(tensor.shape[0], -1).sum(axis=1).astype(np.float64)


def _conv_edge_masses(layer, params, a, r_above, rule, bounds):
    """[C_in, C_out] relevance mass matrix for one conv backward step."""
    weight = params[layer.weight_name]
    c_out, c_in, kh, kw = weight.shape
    stride, padding = layer.stride, layer.padding
    q = r_above.shape[1] * r_above.shape[2]
    s2 = None

    def patches(v):
        vp = np.pad(v, ((0, 0), (padding, padding), (padding, padding)))
        return _im2col(vp, kh, kw, stride)  # [C_in*kh*kw, Q]

    def mass(v, w):
        m = patches(v) @ s2.T  # [C_in*kh*kw, C_out]
        return np.einsum(
            "jmk,kjm->jk",
            m.reshape(c_in, kh * kw, c_out),
            w.reshape(c_out, c_in, kh * kw),
        )

    if rule.kind == "zb":
        w_pos = np.maximum(weight, DTYPE(0))
        w_neg = np.minimum(weight, DTYPE(0))
        z = (
            conv2d(a, weight, stride=stride, padding=padding)
            - conv2d(bounds.low, w_pos, stride=stride, padding=padding)
            - conv2d(bounds.high, w_neg, stride=stride, padding=padding)
        )
        s = _guarded_divide(r_above, z, can_raise=False, where="zb edge", stats=None)
        s2 = s.reshape(c_out, q)
        e = mass(a, weight) - mass(bounds.low, w_pos) - mass(bounds.high, w_neg)
        return e.astype(np.float64)

    rw = rho(weight, rule)
    rb = rho(params[layer.bias_name], rule) if layer.bias else None
    z = conv2d(a, rw, rb, stride=stride, padding=padding)
    if rule.kind == "epsilon":
        z = z + DTYPE(rule.eps)
    s = _guarded_divide(
        r_above, z, can_raise=rule.eps == 0, where="graph edge", stats=None
    )
    s2 = s.reshape(c_out, q)
    return mass(a, rw).astype(np.float64)


def _linear_edge_masses(layer, params, a, r_above, rule):
    rw = rho(params[layer.weight_name], rule)
    rb = rho(params[layer.bias_name], rule) if layer.bias else None
    z = linear(a, rw, rb)
    if rule.kind == "epsilon":
        z = z + DTYPE(rule.eps)
    s = _guarded_divide(
        r_above, z, can_raise=rule.eps == 0, where="graph edge", stats=None
    )
    return (a[:, None].astype(np.float64) * rw.T * s[None, :]).astype(np.float64)


def build_relevance_graph(trace: ForwardTrace, rmap: RelevanceMap) -> RelevanceGraph:
    """Condense a relevance map into the layered channel graph.

    Graph layers: the input boundary, then the output boundary of every
    convolution (or of every linear layer when the network has none).
    """
    net = trace.net
    ids = net.conv_indices or net.linear_indices
    if not ids:
        raise GraphError("network has no weighted layers to graph")
    if len(rmap.relevances) != len(net.layers) + 1:
        raise GraphError("relevance map does not match the trace")
    for i, r in enumerate(rmap.relevances):
        want = trace.inputs[i].shape if i < len(net.layers) else trace.scores.shape
        if r.shape != want:
            raise GraphError(f"relevance boundary {i} has shape {r.shape}")

    layer_ids = (-1,) + tuple(ids)
    scores = [_channel_sums(rmap.relevances[0])]
    for i in ids:
        scores.append(_channel_sums(rmap.relevances[i + 1]))

    bounds = None
    if rmap.rules.uses_zb():
        bounds = PixelBounds.from_normalization(net.normalization, net.input_shape)

    edges = []
    for i in ids:
        layer = net.layers[i]
        a = trace.inputs[i]
        r_above = rmap.relevances[i + 1]
        rule = rmap.rules.rule_for(i)
        if layer.kind == "conv":
            e = _conv_edge_masses(layer, net.params, a, r_above, rule, bounds)
        else:
            e = _linear_edge_masses(layer, net.params, a, r_above, rule)
        edges.append(e)

    graph = RelevanceGraph(
        layer_ids=layer_ids,
        scores=scores,
        edges=edges,
        class_index=rmap.class_index,
    )
    graph.check_consistency()
    return graph


# ---------------------------------------------------------------------------
# k-best paths


def top_k_paths(graph: RelevanceGraph, k: int, aggregate: str = "sum") -> list[Path]:
    """The k maximum-weight paths, ordered by (-weight, channel sequence).

    Requesting more paths than exist returns them all with a warning.
    """
    if k < 1:
        raise GraphError(f"k must be >= 1, got {k}")
    if aggregate not in ("sum", "min"):
        raise GraphError(f"unknown aggregation {aggregate!r}")
    graph.check_consistency()
    total = graph.total_paths()
    if k > total:
        warnings.warn(
            f"requested {k} paths but only {total} exist; returning all",
            stacklevel=2,
        )
        k = total

    # Partial state per node: weights[node, slot] and the channel tuple per
    # slot, ordered by (-weight, lexicographic channels).
    width = graph.channels(0)
    weights = np.zeros((width, 1))
    if aggregate == "min":
        weights = np.full((width, 1), np.inf)
    chans: list[list[tuple[int, ...]]] = [[(c,)] for c in range(width)]

    for e in graph.edges:
        n_next = e.shape[1]
        new_weights = np.full((n_next, k), -np.inf)
        new_chans: list[list[tuple[int, ...]]] = [[] for _ in range(n_next)]
        slots = weights.shape[1]
        for kk in range(n_next):
            if aggregate == "sum":
                cand = weights + e[:, kk][:, None]  # [prev_nodes, slots]
            else:
                cand = np.minimum(weights, e[:, kk][:, None])
            flat = cand.ravel()
            valid = np.isfinite(flat)
            n_valid = int(valid.sum())
            take = min(k, n_valid)
            if take == 0:
                continue
            if n_valid > take:
                kth = np.partition(flat[valid], -take)[-take]
                strong = np.flatnonzero(flat > kth)
                tied = np.flatnonzero(valid & (flat == kth))
            else:
                kth = None
                strong = np.flatnonzero(valid)
                tied = np.array([], dtype=int)

            picked = [
                (-flat[i], chans[i // slots][i % slots]) for i in strong
            ]
            picked.sort(key=lambda t: (t[0], t[1]))
            room = take - len(picked)
            if room > 0 and tied.size:
                tie_paths = sorted(chans[i // slots][i % slots] for i in tied)
                picked.extend((-kth, p) for p in tie_paths[:room])
            for slot, (negw, prefix) in enumerate(picked[:take]):
                new_weights[kk, slot] = -negw
                new_chans[kk].append(prefix + (kk,))
        weights = new_weights
        chans = new_chans

    final = []
    for node, prefixes in enumerate(chans):
        for slot, channel_seq in enumerate(prefixes):
            final.append((-weights[node, slot], channel_seq))
    final.sort(key=lambda t: (t[0], t[1]))
    return [
        Path(
            nodes=tuple(zip(graph.layer_ids, channel_seq)),
            weight=float(-negw),
        )
        for negw, channel_seq in final[:k]
    ]


def paths_to_mask(paths, graph: RelevanceGraph | None = None) -> ChannelMask:
    """Union the path channels into a keep-mask over maskable layers.

    Input-boundary nodes are ignored (input channels are data, not units to
    silence). With a graph given, every one of its non-input layers gets an
    entry, so an empty path list masks everything off. Without a graph the
    layers are taken from the paths themselves, which must be non-empty.
    """
    kept: dict[int, set[int]] = {}
    if graph is not None:
        for layer_id in graph.layer_ids[1:]:
            kept[layer_id] = set()
    elif not paths:
        raise GraphError("cannot derive layers from an empty path list")
    for path in paths:
        for layer_id, channel in path.nodes[1:]:
            kept.setdefault(layer_id, set()).add(int(channel))
    return ChannelMask({i: frozenset(cs) for i, cs in kept.items()})


# ---------------------------------------------------------------------------
# Deviation-based channel retention


def retain_by_deviation(sums, literal: bool = False) -> np.ndarray:
    """Threshold a vector at (mean - population std).

    Default keeps entries strictly above the threshold and zeroes the rest;
    ``literal=True`` inverts the selection (zeroing what the default keeps).
    """
    sums = np.asarray(sums, dtype=np.float64)
    if sums.ndim != 1:
        raise ShapeError("expected a vector of per-channel sums")
    threshold = sums.mean() - sums.std()
    if literal:
        return np.where(sums > threshold, 0.0, sums).astype(DTYPE)
    return np.where(sums > threshold, sums, 0.0).astype(DTYPE)


def get_optimizer(forward_result, backward_result, index: int, literal: bool = False):
    """Per-channel retention of forward/backward disagreement at one layer.

    Subtracts the backward tensor from the forward tensor at ``index``,
    sums the difference over spatial axes, and keeps channels whose summed
    deviation exceeds one population standard deviation below the mean
    (``literal=True`` selects the complement instead).
    """
    if not 0 <= index < len(forward_result):
        raise IndexError(f"index {index} out of range for {len(forward_result)} layers")
    if len(forward_result) != len(backward_result):
        raise ShapeError("forward and backward collections differ in length")
    fwd = np.asarray(forward_result[index], dtype=np.float64)
    bwd = np.asarray(backward_result[index], dtype=np.float64)
    if fwd.shape != bwd.shape:
        raise ShapeError(
            f"tensors at index {index} disagree: {fwd.shape} vs {bwd.shape}"
        )
    diff = fwd - bwd
    sums = diff if diff.ndim == 1 else diff.reshape(diff.shape[0], -1).sum(axis=1)
    return retain_by_deviation(sums, literal=literal)


# ---------------------------------------------------------------------------
# Export


def _node_name(g: int, c: int) -> str:
    return f"L{g}_{c}"


def to_dot(graph: RelevanceGraph, paths=(), max_edges_per_pair: int | None = None) -> str:
    """Graphviz text; top-k path edges are drawn red and thick.

    ``max_edges_per_pair`` keeps only the heaviest |weight| edges between
    each layer pair (path edges always survive) so large graphs stay
    renderable.
    """
    graph.check_consistency()
    path_edges = set()
    for path in paths:
        for g in range(len(path.nodes) - 1):
            path_edges.add((g, path.nodes[g][1], path.nodes[g + 1][1]))

    lines = ["digraph relevance {", "  rankdir=LR;", "  node [shape=box];"]
    for g in range(graph.n_layers):
        for c in range(graph.channels(g)):
            score = graph.scores[g][c]
            lines.append(f'  {_node_name(g, c)} [label="L{g}C{c}:{score:.3}"];')
    for g, e in enumerate(graph.edges):
        pairs = [(j, kk) for j in range(e.shape[0]) for kk in range(e.shape[1])]
        if max_edges_per_pair is not None and len(pairs) > max_edges_per_pair:
            order = np.argsort(-np.abs(e).ravel(), kind="stable")
            keep = set(map(int, order[:max_edges_per_pair]))
            pairs = [
                (j, kk)
                for idx, (j, kk) in enumerate(pairs)
                if idx in keep or (g, j, kk) in path_edges
            ]
        for j, kk in pairs:
            attrs = f'label="{e[j, kk]:.4g}"'
            if (g, j, kk) in path_edges:
                attrs += " color=red penwidth=2"
            lines.append(f"  {_node_name(g, j)} -> {_node_name(g + 1, kk)} [{attrs}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_json(graph: RelevanceGraph, paths=()) -> dict:
    """A plain-dict rendering of the graph (full edge matrices included)."""
    graph.check_consistency()
    return {
        "class_index": graph.class_index,
        "layers": [
            {
                "graph_layer": g,
                "net_layer": int(graph.layer_ids[g]),
                "scores": [float(v) for v in graph.scores[g]],
            }
            for g in range(graph.n_layers)
        ],
        "edges": [
            {"from_layer": g, "weights": e.tolist()}
            for g, e in enumerate(graph.edges)
        ],
        "paths": [
            {
                "nodes": [[int(i), int(c)] for i, c in p.nodes],
                "weight": p.weight,
            }
            for p in paths
        ],
    }
