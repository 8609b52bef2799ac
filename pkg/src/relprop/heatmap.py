"""Spatial heatmaps from relevance maps or activations, rendered to RGB.

Values are normalized by the maximum absolute value and mapped through a
diverging colormap whose midpoint is pinned: value 0 hits table entry 128
exactly, strictly positive values land above it and strictly negative ones
below, however small they are. An all-zero map renders uniformly at the
midpoint (with a warning) rather than dividing by zero.

The built-in ``seismic`` table is generated at import from five anchors
(dark blue, blue, white, red, dark red) sampled piecewise-linearly into 256
entries; entry 128 is exact white. ``gray`` maps [-1,1] linearly to black..white.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import GraphError, ShapeError
from .imageio import bilinear_resize, nearest_resize
from .lrp import RelevanceMap
from .network import ForwardTrace


def _anchor_color(v: float) -> tuple[float, float, float]:
    """Piecewise-linear diverging palette on [-1, 1]."""
    anchors = [
        (-1.0, (0.0, 0.0, 128.0)),
        (-0.5, (0.0, 0.0, 255.0)),
        (0.0, (255.0, 255.0, 255.0)),
        (0.5, (255.0, 0.0, 0.0)),
        (1.0, (128.0, 0.0, 0.0)),
    ]
    for (v0, c0), (v1, c1) in zip(anchors, anchors[1:]):
        if v <= v1:
            t = 0.0 if v1 == v0 else (v - v0) / (v1 - v0)
            return tuple(a + t * (b - a) for a, b in zip(c0, c1))
    return anchors[-1][1]


def _make_seismic() -> np.ndarray:
    table = np.zeros((256, 3), dtype=np.uint8)
    for i in range(256):
        v = (i - 128) / 128.0 if i < 128 else (i - 128) / 127.0
        table[i] = np.round(_anchor_color(v))
    return table


def _make_gray() -> np.ndarray:
    table = np.zeros((256, 3), dtype=np.uint8)
    for i in range(256):
        v = (i - 128) / 128.0 if i < 128 else (i - 128) / 127.0
        table[i] = round((v + 1.0) / 2.0 * 255.0)
    return table


COLORMAPS: dict[str, np.ndarray] = {"seismic": _make_seismic(), "gray": _make_gray()}
MIDPOINT_INDEX = 128


def value_to_index(norm: np.ndarray) -> np.ndarray:
    """Map values in [-1, 1] to table indices with an exact, sign-true midpoint.

    0 -> 128; positive values -> 128 + ceil(v * 127); negative values ->
    128 - ceil(-v * 128). The two halves use their own scale so both ends of
    the table are reachable.
    """
    norm = np.clip(np.asarray(norm, dtype=np.float64), -1.0, 1.0)
    idx = np.full(norm.shape, MIDPOINT_INDEX, dtype=np.int64)
    pos = norm > 0
    neg = norm < 0
    idx[pos] = MIDPOINT_INDEX + np.ceil(norm[pos] * 127.0).astype(np.int64)
    idx[neg] = MIDPOINT_INDEX - np.ceil(-norm[neg] * 128.0).astype(np.int64)
    return np.clip(idx, 0, 255)


@dataclass(frozen=True)
class Heatmap:
    """A 2-D field of signed intensities plus its provenance tag."""

    values: np.ndarray
    kind: str
    graph_layer: int


def _path_channels(paths, graph_layer: int):
    """The (net_layer_id, sorted channels) referenced at one path position."""
    if not paths:
        raise GraphError("need at least one path to select channels")
    depth = len(paths[0].nodes)
    if not 0 <= graph_layer < depth:
        raise GraphError(
            f"graph layer {graph_layer} out of range; paths span layers "
            f"0..{depth - 1}"
        )
    ids = {p.nodes[graph_layer][0] for p in paths}
    if len(ids) != 1:
        raise GraphError(f"paths disagree on the layer at position {graph_layer}")
    channels = sorted({int(p.nodes[graph_layer][1]) for p in paths})
    return ids.pop(), channels


def _sum_selected(tensor: np.ndarray, channels, graph_layer: int) -> np.ndarray:
    if tensor.ndim != 3:
        raise GraphError(
            f"graph layer {graph_layer} is not spatial; no heatmap there"
        )
    bad = [c for c in channels if c < 0 or c >= tensor.shape[0]]
    if bad:
        raise GraphError(f"channels {bad} out of range for {tensor.shape[0]}")
    return tensor[channels].sum(axis=0)


def relevance_heatmap(rmap: RelevanceMap, paths, graph_layer: int) -> Heatmap:
    """Relevance mass of the paths' channels at one graph layer.

    Layer 0 is the input boundary and sums over *all* color channels; deeper
    layers sum the relevance of exactly the channels the paths visit there.
    """
    if graph_layer == 0:
        values = rmap.relevances[0].sum(axis=0)
        return Heatmap(values=values, kind="relevance", graph_layer=0)
    net_id, channels = _path_channels(paths, graph_layer)
    boundary = rmap.relevances[net_id + 1]
    values = _sum_selected(boundary, channels, graph_layer)
    return Heatmap(values=values, kind="relevance", graph_layer=graph_layer)


def activation_heatmap(trace: ForwardTrace, paths, graph_layer: int) -> Heatmap:
    """Activation mass (post-relu where one follows) of the paths' channels."""
    if graph_layer == 0:
        values = trace.inputs[0].sum(axis=0)
        return Heatmap(values=values, kind="activation", graph_layer=0)
    net_id, channels = _path_channels(paths, graph_layer)
    act_index = trace.net.relu_after(net_id)
    tensor = trace.outputs[net_id if act_index is None else act_index]
    values = _sum_selected(tensor, channels, graph_layer)
    return Heatmap(values=values, kind="activation", graph_layer=graph_layer)


def heatmap_scale(hm: Heatmap) -> float:
    return float(np.abs(hm.values).max())


def render(
    hm: Heatmap,
    colormap: str = "seismic",
    upscale=None,
    mode: str = "bilinear",
    overlay: np.ndarray | None = None,
    alpha: float = 0.5,
):
    """Colormap a heatmap; returns ``(rgb uint8 [H,W,3], scale)``.

    ``upscale`` is a target (H, W) no smaller than the map; with ``overlay``
    (an [H,W,3] float image in [0,1]) the map is resized to the overlay and
    alpha-blended onto it. Interpolation (``bilinear`` or ``nearest``)
    happens on normalized values, before color mapping.
    """
    if colormap not in COLORMAPS:
        raise ShapeError(f"unknown colormap {colormap!r}")
    if mode not in ("bilinear", "nearest"):
        raise ShapeError(f"unknown upscale mode {mode!r}")
    values = np.asarray(hm.values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError(f"heatmap values must be 2-D, got {values.shape}")
    scale = float(np.abs(values).max())
    if scale == 0.0:
        warnings.warn(
            f"all-zero {hm.kind} heatmap at graph layer {hm.graph_layer}; "
            "rendering the colormap midpoint",
            stacklevel=2,
        )
        norm = values
    else:
        norm = values / scale

    target = None
    if overlay is not None:
        overlay = np.asarray(overlay, dtype=np.float64)
        if overlay.ndim != 3 or overlay.shape[2] != 3:
            raise ShapeError(f"overlay must be [H,W,3], got {overlay.shape}")
        target = overlay.shape[:2]
    elif upscale is not None:
        target = (int(upscale), int(upscale)) if np.isscalar(upscale) else tuple(upscale)
    if target is not None and tuple(target) != norm.shape:
        if target[0] < norm.shape[0] or target[1] < norm.shape[1]:
            raise ShapeError(
                f"refusing to downscale a heatmap {norm.shape} -> {target}"
            )
        if mode == "bilinear":
            norm = bilinear_resize(norm, target[0], target[1]).astype(np.float64)
            norm = np.clip(norm, -1.0, 1.0)
        else:
            norm = nearest_resize(norm, target[0], target[1])

    rgb = COLORMAPS[colormap][value_to_index(norm)]
    if overlay is not None:
        blended = (1.0 - alpha) * (overlay * 255.0) + alpha * rgb.astype(np.float64)
        rgb = np.clip(np.round(blended), 0, 255).astype(np.uint8)
    return rgb, scale
