"""Mirrored reconstruction of individual feature-map channels.

A reconstruction network is the spatial feature extractor (the prefix of
conv / relu / maxpool layers before the first flatten or linear) run in
reverse: every convolution becomes its transposed convolution with the same
(tied) weights and no bias, every pooling becomes an unpooling driven by the
switches recorded on the forward pass, and every relu either rectifies again
(the default) or passes through (for linearity checks).

Reconstruction of one unit: run the image forward to the chosen layer, zero
every channel except one, then apply the mirror suffix back to pixel space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BuildError
from .network import Network, _run_layer
from .tensor import DTYPE, SwitchMap, conv_transpose2d, max_unpool2d, relu


@dataclass(frozen=True)
class DeconvNetwork:
    """The mirror of a network's feature extractor.

    ``mirror[m]`` is ``(kind, forward_index)`` with ``forward_index``
    descending; the weights are shared with the source network, never
    copied.
    """

    net: Network
    feature_end: int
    mirror: tuple[tuple[str, int], ...]


def build_deconv(net: Network) -> DeconvNetwork:
    """Mirror the conv/relu/maxpool prefix of ``net``."""
    feature_end = len(net.layers)
    for i, layer in enumerate(net.layers):
        if layer.kind in ("flatten", "linear"):
            feature_end = i
            break
    if feature_end == 0:
        raise BuildError("network has no spatial feature extractor to mirror")
    mirror = tuple(
        (net.layers[i].kind, i) for i in range(feature_end - 1, -1, -1)
    )
    return DeconvNetwork(net=net, feature_end=feature_end, mirror=mirror)


def feature_forward(dec: DeconvNetwork, image, layer_index: int):
    """Forward through layers ``0..layer_index``; returns (activation, switches).

    ``switches`` maps pool layer indices passed on the way to their
    SwitchMap, exactly what the mirror suffix needs.
    """
    if not 0 <= layer_index < dec.feature_end:
        raise IndexError(
            f"layer {layer_index} outside the feature extractor "
            f"(0..{dec.feature_end - 1})"
        )
    net = dec.net
    x = np.ascontiguousarray(image, dtype=DTYPE)
    if x.shape != net.input_shape:
        raise BuildError(
            f"input shape {x.shape} does not match network input {net.input_shape}"
        )
    switches: dict[int, SwitchMap] = {}
    in_shapes: dict[int, tuple[int, ...]] = {}
    for i in range(layer_index + 1):
        in_shapes[i] = x.shape
        x, sw = _run_layer(net, net.layers[i], x)
        if sw is not None:
            switches[i] = sw
    return x, switches, in_shapes


def apply_mirror(
    dec: DeconvNetwork,
    layer_index: int,
    payload,
    switches,
    in_shapes,
    apply_relu: bool = True,
) -> np.ndarray:
    """Run the mirror suffix from ``layer_index`` back to pixel space.

    With ``apply_relu=False`` the suffix is a purely linear map of the
    payload (pool switches held fixed), which is what the linearity tests
    exercise.
    """
    if not 0 <= layer_index < dec.feature_end:
        raise IndexError(f"layer {layer_index} outside the feature extractor")
    net = dec.net
    x = np.ascontiguousarray(payload, dtype=DTYPE)
    start = dec.feature_end - 1 - layer_index
    for kind, i in dec.mirror[start:]:
        layer = net.layers[i]
        if kind == "conv":
            x = conv_transpose2d(
                x,
                net.params[layer.weight_name],
                stride=layer.stride,
                padding=layer.padding,
            )
            want = in_shapes[i]
            if x.shape != want:
                # strided convs with non-divisible extents lose the floor
                # remainder; restore it with zeros at the bottom/right edge
                padded = np.zeros(want, dtype=DTYPE)
                padded[:, : x.shape[1], : x.shape[2]] = x
                x = padded
        elif kind == "relu":
            if apply_relu:
                x = relu(x)
        elif kind == "maxpool":
            x = max_unpool2d(x, switches[i])
        else:  # pragma: no cover - the builder only admits the three kinds
            raise BuildError(f"unexpected mirror kind {kind!r}")
    return x


def reconstruct_feature(
    dec: DeconvNetwork,
    image,
    layer_index: int,
    channel: int,
    apply_relu: bool = True,
) -> np.ndarray:
    """Pixel-space reconstruction of one channel at one feature layer.

    Runs the image forward to ``layer_index``, keeps only ``channel`` of the
    activation, and mirrors back. The result has the input's shape.
    """
    activation, switches, in_shapes = feature_forward(dec, image, layer_index)
    if not 0 <= channel < activation.shape[0]:
        raise IndexError(
            f"channel {channel} out of range for {activation.shape[0]} channels"
        )
    payload = np.zeros_like(activation)
    payload[channel] = activation[channel]
    out = apply_mirror(
        dec, layer_index, payload, switches, in_shapes, apply_relu=apply_relu
    )
    if out.shape != dec.net.input_shape:  # pragma: no cover - shape algebra
        raise BuildError(
            f"reconstruction produced {out.shape}, expected {dec.net.input_shape}"
        )
    return out
