"""Dense float32 tensors and the numeric kernels built on them.

Tensors are plain numpy ``float32`` arrays in row-major layout: images and
feature maps are ``[C, H, W]``, vectors are 1-D, linear weights are
``[N_out, N_in]`` and convolution weights ``[C_out, C_in, kH, kW]``. All
kernels are pure functions; nothing here mutates its inputs.

Convolution is cross-correlation (no kernel flip). It is computed by
unrolling input patches into a matrix (``im2col``) and multiplying, and the
transposed convolution is its exact adjoint (``col2im`` scatter-add), so
``<conv2d(x, w), y> == <x, conv_transpose2d(y, w)>`` holds to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError, SwitchIndexError

DTYPE = np.float32


def as_tensor(data, shape=None) -> np.ndarray:
    """Coerce ``data`` to a contiguous float32 array, optionally reshaped.

    Raises ShapeError if the element count does not match ``shape`` or any
    extent is < 1.
    """
    arr = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        want = int(np.prod(shape)) if len(shape) else 1
        if arr.size != want:
            raise ShapeError(
                f"cannot view {arr.size} elements as shape {tuple(shape)}"
            )
        arr = arr.reshape(shape)
    if arr.ndim == 0:
        raise ShapeError("tensors must have at least one axis")
    if any(e < 1 for e in arr.shape):
        raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
    return np.ascontiguousarray(arr)


def _as_f32(x, name: str, ndim: int) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=DTYPE)
    if x.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {x.shape}")
    return x


def relu(x) -> np.ndarray:
    """Elementwise max(x, 0)."""
    return np.maximum(np.asarray(x, dtype=DTYPE), DTYPE(0))


def flatten(x) -> np.ndarray:
    """Row-major flatten to a vector."""
    return np.ascontiguousarray(x, dtype=DTYPE).reshape(-1)


def linear(x, weight, bias=None) -> np.ndarray:
    """Affine map ``weight @ x + bias`` for a 1-D input."""
    x = _as_f32(x, "input", 1)
    weight = _as_f32(weight, "weight", 2)
    if weight.shape[1] != x.shape[0]:
        raise ShapeError(
            f"weight expects {weight.shape[1]} inputs, got {x.shape[0]}"
        )
    out = weight @ x
    if bias is not None:
        bias = _as_f32(bias, "bias", 1)
        if bias.shape[0] != weight.shape[0]:
            raise ShapeError(
                f"bias has {bias.shape[0]} entries for {weight.shape[0]} outputs"
            )
        out = out + bias
    return out


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def _check_conv_args(stride: int, padding: int) -> None:
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Unroll sliding patches of a padded [C,Hp,Wp] tensor to [C*kh*kw, Ho*Wo]."""
    c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2 = xp.strides
    windows = as_strided(
        xp,
        shape=(c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
    )
    return windows.reshape(c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patch columns back to [C,Hp,Wp]."""
    c, hp, wp = shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((c, hp, wp), dtype=DTYPE)
    patches = cols.reshape(c, kh, kw, ho, wo)
    for ki in range(kh):
        rows = slice(ki, ki + stride * (ho - 1) + 1, stride)
        for kj in range(kw):
            out[:, rows, kj : kj + stride * (wo - 1) + 1 : stride] += patches[
                :, ki, kj
            ]
    return out


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation of ``x`` [C_in,H,W] with ``weight`` [C_out,C_in,kH,kW]."""
    x = _as_f32(x, "input", 3)
    weight = _as_f32(weight, "weight", 4)
    _check_conv_args(stride, padding)
    c_out, c_in, kh, kw = weight.shape
    if c_in != x.shape[0]:
        raise ShapeError(
            f"weight expects {c_in} input channels, tensor has {x.shape[0]}"
        )
    hp = x.shape[1] + 2 * padding
    wp = x.shape[2] + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"kernel {kh}x{kw} exceeds padded input {hp}x{wp}"
        )
    if bias is not None:
        bias = _as_f32(bias, "bias", 1)
        if bias.shape[0] != c_out:
            raise ShapeError(
                f"bias has {bias.shape[0]} entries for {c_out} output channels"
            )
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = weight.reshape(c_out, -1) @ _im2col(xp, kh, kw, stride)
    if bias is not None:
        out = out + bias[:, None]
    return np.ascontiguousarray(out.reshape(c_out, ho, wo))


def conv_transpose2d(y, weight, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Exact adjoint of :func:`conv2d` with the same weight/stride/padding.

    Maps ``y`` [C_out,H',W'] back to input space [C_in,H,W] with
    ``H = (H' - 1) * stride + kH - 2 * padding``.
    """
    y = _as_f32(y, "input", 3)
    weight = _as_f32(weight, "weight", 4)
    _check_conv_args(stride, padding)
    c_out, c_in, kh, kw = weight.shape
    if c_out != y.shape[0]:
        raise ShapeError(
            f"weight expects {c_out} channels, tensor has {y.shape[0]}"
        )
    ho, wo = y.shape[1], y.shape[2]
    hp = (ho - 1) * stride + kh
    wp = (wo - 1) * stride + kw
    if hp - 2 * padding < 1 or wp - 2 * padding < 1:
        raise ShapeError(
            f"output extent would be empty for padding {padding}"
        )
    cols = weight.reshape(c_out, -1).T @ y.reshape(c_out, -1)
    xp = _col2im(cols, (c_in, hp, wp), kh, kw, stride)
    if padding:
        xp = xp[:, padding : hp - padding, padding : wp - padding]
    return np.ascontiguousarray(xp)


@dataclass(frozen=True)
class SwitchMap:
    """Records, per pooled cell, the flat index of the winning input cell.

    ``indices`` has the pooled shape [C,H',W']; each entry is a row-major
    flat index into a tensor of ``input_shape``. Ties inside a pooling
    window resolve to the first maximum in row-major window order.
    """

    input_shape: tuple[int, int, int]
    indices: np.ndarray

    def __post_init__(self):
        if self.indices.shape[0] != self.input_shape[0]:
            raise ShapeError(
                "switch map channel count does not match its input shape"
            )


def maxpool2d(x, size: int, stride: int | None = None):
    """Max pooling with floor semantics; returns ``(pooled, SwitchMap)``.

    Cells not covered by any full window (when extents are not divisible)
    are dropped, matching ``H' = (H - size) // stride + 1``.
    """
    x = _as_f32(x, "input", 3)
    if size < 1:
        raise ShapeError(f"pool size must be >= 1, got {size}")
    stride = size if stride is None else stride
    if stride < 1:
        raise ShapeError(f"pool stride must be >= 1, got {stride}")
    c, h, w = x.shape
    if size > h or size > w:
        raise ShapeError(f"pool window {size} exceeds input {h}x{w}")
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    s0, s1, s2 = x.strides
    windows = as_strided(
        x,
        shape=(c, ho, wo, size, size),
        strides=(s0, s1 * stride, s2 * stride, s1, s2),
    )
    flat = windows.reshape(c, ho, wo, size * size)
    arg = flat.argmax(axis=3)
    pooled = np.take_along_axis(flat, arg[..., None], axis=3)[..., 0]
    wi, wj = np.divmod(arg, size)
    oh = np.arange(ho).reshape(1, ho, 1)
    ow = np.arange(wo).reshape(1, 1, wo)
    ch = np.arange(c).reshape(c, 1, 1)
    rows = oh * stride + wi
    cols = ow * stride + wj
    idx = (ch * h + rows) * w + cols
    return np.ascontiguousarray(pooled), SwitchMap((c, h, w), idx.astype(np.int64))


def max_unpool2d(pooled, switches: SwitchMap) -> np.ndarray:
    """Scatter pooled values back to the recorded argmax positions.

    All other cells are zero. If the switch map carries overlapping targets
    (possible when the pool stride is smaller than its window), later cells
    in row-major scan order overwrite earlier ones.
    """
    pooled = _as_f32(pooled, "input", 3)
    if pooled.shape != switches.indices.shape:
        raise ShapeError(
            f"pooled shape {pooled.shape} does not match switch map "
            f"{switches.indices.shape}"
        )
    total = int(np.prod(switches.input_shape))
    idx = switches.indices.ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= total):
        raise SwitchIndexError(
            f"switch map points outside a tensor of shape {switches.input_shape}"
        )
    out = np.zeros(total, dtype=DTYPE)
    out[idx] = pooled.ravel()
    return out.reshape(switches.input_shape)
