"""Network descriptions, validation, and forward execution with tracing.

A network is a flat sequence of layers (conv / relu / maxpool / flatten /
linear) plus a name->tensor parameter store. Layer descriptions carry the
*declared* geometry (channel counts, kernel sizes); :func:`build_network`
walks the shape chain once, derives the exact weight shape every layer
requires, and checks the provided tensors against it, so a mismatch is
reported with the layer index and tensor name instead of surfacing later as
an opaque kernel error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BuildError, MaskError, ShapeError
from .tensor import (
    DTYPE,
    SwitchMap,
    conv2d,
    conv_output_extent,
    flatten,
    linear,
    maxpool2d,
    relu,
)

KINDS = ("conv", "relu", "maxpool", "flatten", "linear")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential network. Use the classmethod constructors."""

    kind: str
    name: str | None = None
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    size: int = 0
    out_features: int = 0
    bias: bool = True

    @classmethod
    def conv(cls, name, out_channels, kernel, stride=1, padding=0, bias=True):
        return cls(
            "conv",
            name=name,
            out_channels=out_channels,
            kernel=kernel,
            stride=stride,
            padding=padding,
            bias=bias,
        )

    @classmethod
    def relu(cls):
        return cls("relu")

    @classmethod
    def maxpool(cls, size=2, stride=None):
        return cls("maxpool", size=size, stride=size if stride is None else stride)

    @classmethod
    def flatten(cls):
        return cls("flatten")

    @classmethod
    def linear(cls, name, out_features, bias=True):
        return cls("linear", name=name, out_features=out_features, bias=bias)

    @property
    def weight_name(self) -> str | None:
        return f"{self.name}.weight" if self.kind in ("conv", "linear") else None

    @property
    def bias_name(self) -> str | None:
        if self.kind in ("conv", "linear") and self.bias:
            return f"{self.name}.bias"
        return None


def _layer_output_shape(layer: LayerSpec, shape, index: int):
    """Shape arithmetic for one layer; raises BuildError with context."""
    kind = layer.kind
    if kind == "conv":
        if len(shape) != 3:
            raise BuildError(f"layer {index}: conv needs a [C,H,W] input, got {shape}")
        c, h, w = shape
        if layer.stride < 1 or layer.padding < 0 or layer.kernel < 1:
            raise BuildError(f"layer {index}: bad conv geometry")
        ho = conv_output_extent(h, layer.kernel, layer.stride, layer.padding)
        wo = conv_output_extent(w, layer.kernel, layer.stride, layer.padding)
        if ho < 1 or wo < 1:
            raise BuildError(
                f"layer {index}: kernel {layer.kernel} does not fit input {h}x{w}"
            )
        return (layer.out_channels, ho, wo)
    if kind == "relu":
        return shape
    if kind == "maxpool":
        if len(shape) != 3:
            raise BuildError(f"layer {index}: maxpool needs a [C,H,W] input")
        c, h, w = shape
        if layer.size < 1 or layer.stride < 1:
            raise BuildError(f"layer {index}: bad pool geometry")
        if layer.size > h or layer.size > w:
            raise BuildError(
                f"layer {index}: pool window {layer.size} exceeds input {h}x{w}"
            )
        return (
            c,
            (h - layer.size) // layer.stride + 1,
            (w - layer.size) // layer.stride + 1,
        )
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "linear":
        if len(shape) != 1:
            raise BuildError(
                f"layer {index}: linear needs a flat input; add a flatten layer"
            )
        return (layer.out_features,)
    raise BuildError(f"layer {index}: unknown kind {kind!r}")


def _expected_param_shapes(layer: LayerSpec, in_shape):
    """Weight/bias shapes a layer requires for a given input shape."""
    if layer.kind == "conv":
        w = (layer.out_channels, in_shape[0], layer.kernel, layer.kernel)
        return w, (layer.out_channels,) if layer.bias else None
    if layer.kind == "linear":
        w = (layer.out_features, in_shape[0])
        return w, (layer.out_features,) if layer.bias else None
    return None, None


@dataclass(frozen=True)
class Network:
    """A validated network: layers, parameters, and the derived shape chain.

    ``boundary_shapes`` has ``len(layers) + 1`` entries; entry ``i`` is the
    input shape of layer ``i`` and the last entry is the output shape.
    """

    layers: tuple[LayerSpec, ...]
    params: dict[str, np.ndarray]
    input_shape: tuple[int, ...]
    boundary_shapes: tuple[tuple[int, ...], ...]
    labels: tuple[str, ...] | None = None
    normalization: tuple[tuple[float, ...], tuple[float, ...]] | None = None
    name: str = "network"

    @property
    def conv_indices(self) -> tuple[int, ...]:
        return tuple(i for i, l in enumerate(self.layers) if l.kind == "conv")

    @property
    def linear_indices(self) -> tuple[int, ...]:
        return tuple(i for i, l in enumerate(self.layers) if l.kind == "linear")

    @property
    def pool_indices(self) -> tuple[int, ...]:
        return tuple(i for i, l in enumerate(self.layers) if l.kind == "maxpool")

    def parameter_count(self) -> int:
        seen = set()
        total = 0
        for layer in self.layers:
            for tname in (layer.weight_name, layer.bias_name):
                if tname is not None and tname not in seen:
                    seen.add(tname)
                    total += int(self.params[tname].size)
        return total

    def relu_after(self, index: int) -> int | None:
        """Index of the relu directly following layer ``index``, if any."""
        nxt = index + 1
        if nxt < len(self.layers) and self.layers[nxt].kind == "relu":
            return nxt
        return None


def build_network(
    layers, params, input_shape, labels=None, normalization=None, name="network"
) -> Network:
    """Validate a layer sequence against a parameter store.

    Checks the full shape chain, the existence and exact shape of every
    referenced tensor, and label-count consistency. Parameters are cast to
    float32 once here.
    """
    layers = tuple(layers)
    if not layers:
        raise BuildError("a network needs at least one layer")
    input_shape = tuple(int(e) for e in input_shape)
    if any(e < 1 for e in input_shape):
        raise BuildError(f"bad input shape {input_shape}")

    cast: dict[str, np.ndarray] = {}
    shapes = [input_shape]
    for i, layer in enumerate(layers):
        out_shape = _layer_output_shape(layer, shapes[-1], i)
        w_shape, b_shape = _expected_param_shapes(layer, shapes[-1])
        for tname, expect in ((layer.weight_name, w_shape), (layer.bias_name, b_shape)):
            if tname is None:
                continue
            if tname not in params:
                raise BuildError(f"layer {i}: missing parameter tensor {tname!r}")
            tensor = np.ascontiguousarray(params[tname], dtype=DTYPE)
            if tensor.shape != expect:
                raise BuildError(
                    f"layer {i}: tensor {tname!r} has shape {tensor.shape}, "
                    f"expected {expect}"
                )
            cast[tname] = tensor
        shapes.append(out_shape)

    if labels is not None:
        labels = tuple(str(s) for s in labels)
        n_out = int(np.prod(shapes[-1]))
        if len(labels) != n_out:
            raise BuildError(
                f"{len(labels)} labels for {n_out} outputs"
            )
    if normalization is not None:
        mean, std = normalization
        if len(mean) != input_shape[0] or len(std) != input_shape[0]:
            raise BuildError("normalization must have one entry per input channel")
        if any(s <= 0 for s in std):
            raise BuildError("normalization std entries must be positive")
        normalization = (tuple(float(m) for m in mean), tuple(float(s) for s in std))

    return Network(
        layers=layers,
        params=cast,
        input_shape=input_shape,
        boundary_shapes=tuple(shapes),
        labels=labels,
        normalization=normalization,
        name=name,
    )


# ---------------------------------------------------------------------------
# JSON architecture documents


def arch_from_json(doc: dict):
    """Parse an architecture document into ``(layers, meta)``.

    ``meta`` carries input_shape, normalization, labels, the raw rules
    section (consumed by the rule parser), and the architecture name.
    """
    try:
        raw_layers = doc["layers"]
        input_shape = tuple(int(e) for e in doc["input_shape"])
    except (KeyError, TypeError) as exc:
        raise BuildError(f"architecture document missing field: {exc}") from exc
    layers = []
    for i, entry in enumerate(raw_layers):
        kind = entry.get("kind")
        if kind == "conv":
            layers.append(
                LayerSpec.conv(
                    entry["name"],
                    int(entry["out_channels"]),
                    int(entry["kernel"]),
                    stride=int(entry.get("stride", 1)),
                    padding=int(entry.get("padding", 0)),
                    bias=bool(entry.get("bias", True)),
                )
            )
        elif kind == "relu":
            layers.append(LayerSpec.relu())
        elif kind == "maxpool":
            layers.append(
                LayerSpec.maxpool(
                    size=int(entry.get("size", 2)),
                    stride=int(entry["stride"]) if "stride" in entry else None,
                )
            )
        elif kind == "flatten":
            layers.append(LayerSpec.flatten())
        elif kind == "linear":
            layers.append(
                LayerSpec.linear(
                    entry["name"],
                    int(entry["out_features"]),
                    bias=bool(entry.get("bias", True)),
                )
            )
        else:
            raise BuildError(f"layer {i}: unknown kind {kind!r}")
    norm = None
    if "normalization" in doc:
        norm = (tuple(doc["normalization"]["mean"]), tuple(doc["normalization"]["std"]))
    meta = {
        "input_shape": input_shape,
        "normalization": norm,
        "labels": doc.get("labels"),
        "rules": doc.get("rules"),
        "name": doc.get("name", "network"),
    }
    return layers, meta


def load_arch(path):
    """Read an architecture JSON file; returns ``(layers, meta)``."""
    with open(path, "r", encoding="utf-8") as fh:
        return arch_from_json(json.load(fh))


def network_from_arch(layers, meta, params, labels=None) -> Network:
    return build_network(
        layers,
        params,
        meta["input_shape"],
        labels=labels if labels is not None else meta.get("labels"),
        normalization=meta.get("normalization"),
        name=meta.get("name", "network"),
    )


def random_params(layers, input_shape, rng, scale=None) -> dict[str, np.ndarray]:
    """Seeded He-style random parameters matching a layer sequence.

    ``scale`` overrides the per-layer ``sqrt(2 / fan_in)`` weight std.
    Biases are zero. Useful for demos and for exercising full-size
    architectures without trained weights.
    """
    params: dict[str, np.ndarray] = {}
    shape = tuple(int(e) for e in input_shape)
    for i, layer in enumerate(layers):
        w_shape, b_shape = _expected_param_shapes(layer, shape)
        if w_shape is not None:
            fan_in = int(np.prod(w_shape[1:]))
            std = scale if scale is not None else np.sqrt(2.0 / fan_in)
            params[layer.weight_name] = (
                rng.standard_normal(w_shape) * std
            ).astype(DTYPE)
        if b_shape is not None:
            params[layer.bias_name] = np.zeros(b_shape, dtype=DTYPE)
        shape = _layer_output_shape(layer, shape, i)
    return params


def describe_arch(layers, input_shape):
    """Shape chain and parameter count by pure arithmetic (no tensors).

    Returns ``(rows, total_params)`` where each row is
    ``(index, kind, out_shape, param_count)``.
    """
    rows = []
    shape = tuple(int(e) for e in input_shape)
    total = 0
    for i, layer in enumerate(layers):
        w_shape, b_shape = _expected_param_shapes(layer, shape)
        count = 0
        if w_shape is not None:
            count += int(np.prod(w_shape))
        if b_shape is not None:
            count += int(np.prod(b_shape))
        shape = _layer_output_shape(layer, shape, i)
        total += count
        rows.append((i, layer.kind, shape, count))
    return rows, total


# ---------------------------------------------------------------------------
# Forward execution


@dataclass
class ForwardTrace:
    """Everything recorded during one forward pass.

    ``inputs[i]``/``outputs[i]`` are the tensors entering/leaving layer
    ``i``; ``switches`` maps pool layer indices to their SwitchMap. The
    boundary view: boundary ``i`` equals ``inputs[i]`` for ``i < n`` and the
    final output for ``i == n``.
    """

    net: Network
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    switches: dict[int, SwitchMap] = field(default_factory=dict)

    @property
    def scores(self) -> np.ndarray:
        return self.outputs[-1]

    def boundary(self, i: int) -> np.ndarray:
        n = len(self.net.layers)
        if not 0 <= i <= n:
            raise IndexError(f"boundary {i} out of range 0..{n}")
        return self.inputs[i] if i < n else self.outputs[-1]


def _run_layer(net: Network, layer: LayerSpec, x: np.ndarray):
    """Returns (output, switches-or-None)."""
    if layer.kind == "conv":
        w = net.params[layer.weight_name]
        b = net.params[layer.bias_name] if layer.bias else None
        return conv2d(x, w, b, stride=layer.stride, padding=layer.padding), None
    if layer.kind == "relu":
        return relu(x), None
    if layer.kind == "maxpool":
        pooled, switches = maxpool2d(x, layer.size, layer.stride)
        return pooled, switches
    if layer.kind == "flatten":
        return flatten(x), None
    if layer.kind == "linear":
        w = net.params[layer.weight_name]
        b = net.params[layer.bias_name] if layer.bias else None
        return linear(x, w, b), None
    raise BuildError(f"unknown layer kind {layer.kind!r}")


def forward_trace(net: Network, image) -> ForwardTrace:
    """Run the network, recording every intermediate tensor and pool switch."""
    x = np.ascontiguousarray(image, dtype=DTYPE)
    if x.shape != net.input_shape:
        raise ShapeError(
            f"input shape {x.shape} does not match network input {net.input_shape}"
        )
    inputs, outputs, switches = [], [], {}
    for i, layer in enumerate(net.layers):
        inputs.append(x)
        x, sw = _run_layer(net, layer, x)
        if sw is not None:
            switches[i] = sw
        outputs.append(x)
    return ForwardTrace(net=net, inputs=inputs, outputs=outputs, switches=switches)


# ---------------------------------------------------------------------------
# Channel masking


@dataclass(frozen=True)
class ChannelMask:
    """Per-conv-layer sets of channels to keep.

    Layers listed in ``kept`` have every channel outside the set zeroed
    (after the relu that directly follows the conv, when there is one, so
    surviving activations are identical to the unmasked run). Conv layers
    not listed are left untouched. An entry with an empty set keeps nothing
    at that layer.
    """

    kept: dict[int, frozenset[int]]

    def validate(self, net: Network) -> None:
        for idx, channels in self.kept.items():
            if idx < 0 or idx >= len(net.layers) or net.layers[idx].kind != "conv":
                raise MaskError(f"layer {idx} is not a convolution layer")
            width = net.layers[idx].out_channels
            bad = [c for c in channels if c < 0 or c >= width]
            if bad:
                raise MaskError(
                    f"layer {idx} has {width} channels; invalid entries {sorted(bad)}"
                )


def masked_forward(net: Network, image, mask: ChannelMask) -> np.ndarray:
    """Forward pass with non-kept channels zeroed; returns the score vector.

    Masking happens after each listed conv's directly-following relu (or
    right after the conv when no relu follows), so a mask that keeps every
    channel reproduces the plain forward exactly.
    """
    mask.validate(net)
    apply_at: dict[int, frozenset[int]] = {}
    for conv_idx, channels in mask.kept.items():
        point = net.relu_after(conv_idx)
        apply_at[conv_idx if point is None else point] = channels

    x = np.ascontiguousarray(image, dtype=DTYPE)
    if x.shape != net.input_shape:
        raise ShapeError(
            f"input shape {x.shape} does not match network input {net.input_shape}"
        )
    for i, layer in enumerate(net.layers):
        x, _ = _run_layer(net, layer, x)
        if i in apply_at:
            keep = np.zeros(x.shape[0], dtype=bool)
            for c in apply_at[i]:
                keep[c] = True
            x = np.where(keep[:, None, None], x, DTYPE(0))
    return x


def softmax(scores) -> np.ndarray:
    """Numerically stable softmax for display purposes."""
    s = np.asarray(scores, dtype=np.float64)
    s = s - s.max()
    e = np.exp(s)
    return (e / e.sum()).astype(DTYPE)


def top_scores(scores, labels=None, k=5):
    """Top-k (index, label, score) triples sorted by descending score."""
    scores = np.asarray(scores)
    k = min(k, scores.size)
    order = np.argsort(-scores, kind="stable")[:k]
    probs = softmax(scores)
    return [
        (
            int(i),
            labels[int(i)] if labels is not None else str(int(i)),
            float(scores[int(i)]),
            float(probs[int(i)]),
        )
        for i in order
    ]
