"""Image decoding, resampling, normalization, and deterministic writers.

Decoding and PNG encoding go through Pillow; resampling does not. The
bilinear resampler here is center-aligned and fully vectorized, so resized
pixels are reproducible to the bit across platforms and library versions,
and the test suite can pin its arithmetic against a loop oracle.

Tensor convention: files are [H,W,3] uint8; the network eats [3,H,W]
float32, scaled to [0,1] and then normalized per channel.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, ShapeError
from .tensor import DTYPE


def _source_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center-aligned sample positions: lower index, upper index, fraction."""
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, (pos - lo).astype(np.float64)


def bilinear_resize(img, out_h: int, out_w: int) -> np.ndarray:
    """Resample a [H,W] or [H,W,C] array to (out_h, out_w), float32 result."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ShapeError(f"expected [H,W] or [H,W,C], got shape {img.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError("target extents must be >= 1")
    y0, y1, fy = _source_coords(out_h, img.shape[0])
    x0, x1, fx = _source_coords(out_w, img.shape[1])
    if img.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(DTYPE)


def nearest_resize(img, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resample with the same center-aligned grid."""
    img = np.asarray(img)
    if img.ndim not in (2, 3):
        raise ShapeError(f"expected [H,W] or [H,W,C], got shape {img.shape}")
    ys = np.minimum(
        (((np.arange(out_h) + 0.5) * img.shape[0]) // out_h).astype(np.int64),
        img.shape[0] - 1,
    )
    xs = np.minimum(
        (((np.arange(out_w) + 0.5) * img.shape[1]) // out_w).astype(np.int64),
        img.shape[1] - 1,
    )
    return img[ys][:, xs]


def decode_image(path) -> np.ndarray:
    """Decode any Pillow-readable file to [H,W,3] uint8."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc


def load_image(path, target_hw, normalization=None) -> np.ndarray:
    """Decode, resize (only if needed), scale to [0,1], normalize, to [3,H,W].

    An image already at the target size passes through without resampling,
    so its pixel values survive exactly.
    """
    raw = decode_image(path)
    h, w = (int(v) for v in target_hw)
    if raw.shape[:2] != (h, w):
        img = bilinear_resize(raw.astype(np.float64), h, w)
    else:
        img = raw.astype(DTYPE)
    x = img / DTYPE(255.0)
    if normalization is not None:
        mean, std = normalization
        x = (x - np.asarray(mean, dtype=DTYPE)) / np.asarray(std, dtype=DTYPE)
    return np.ascontiguousarray(x.transpose(2, 0, 1).astype(DTYPE))


def denormalize_to_rgb(x, normalization=None) -> np.ndarray:
    """Invert :func:`load_image` back to a [H,W,3] float array in [0,1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"expected [3,H,W], got {x.shape}")
    img = x.transpose(1, 2, 0)
    if normalization is not None:
        mean, std = normalization
        img = img * np.asarray(std) + np.asarray(mean)
    return np.clip(img, 0.0, 1.0)


def png_bytes(rgb: np.ndarray) -> bytes:
    """Encode [H,W,3] uint8 to PNG bytes (deterministic for fixed pixels)."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"expected [H,W,3] uint8, got {rgb.shape}")
    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def ppm_bytes(rgb: np.ndarray) -> bytes:
    """Encode [H,W,3] uint8 as binary PPM (P6), a zero-dependency format."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"expected [H,W,3] uint8, got {rgb.shape}")
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii")
    return header + rgb.tobytes()


def write_image(path, rgb: np.ndarray) -> None:
    """Write [H,W,3] uint8 as PNG or PPM depending on the file suffix."""
    path = Path(path)
    data = ppm_bytes(rgb) if path.suffix.lower() == ".ppm" else png_bytes(rgb)
    path.write_bytes(data)
