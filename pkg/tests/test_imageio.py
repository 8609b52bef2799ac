"""Decoding, resampling, and normalization round trips."""

import io

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from PIL import Image

from relprop.errors import DecodeError, ShapeError
from relprop.imageio import (
    bilinear_resize,
    decode_image,
    denormalize_to_rgb,
    load_image,
    nearest_resize,
    png_bytes,
    ppm_bytes,
    write_image,
)

from oracles import naive_bilinear_resize


def save_png(path, rgb):
    Image.fromarray(rgb.astype(np.uint8), mode="RGB").save(path)


class TestBilinear:
    @pytest.mark.parametrize(
        "in_shape,out_shape",
        [((6, 6), (9, 9)), ((8, 5), (4, 10)), ((7, 7, 3), (14, 14)),
         ((10, 10, 3), (7, 3))],
    )
    def test_matches_loop_oracle(self, in_shape, out_shape, rng):
        img = rng.uniform(0, 255, in_shape)
        got = bilinear_resize(img, *out_shape)
        want = naive_bilinear_resize(img, *out_shape)
        assert got.shape[:2] == out_shape
        assert_allclose(got, want, rtol=1e-4, atol=1e-3)

    def test_constant_stays_constant(self):
        img = np.full((5, 7), 42.0)
        out = bilinear_resize(img, 13, 3)
        assert_allclose(out, 42.0, rtol=1e-6)

    def test_identity_at_same_size(self, rng):
        img = rng.uniform(0, 1, (6, 6, 3))
        assert_allclose(bilinear_resize(img, 6, 6), img, rtol=1e-6)

    def test_checkerboard_halves_to_mid_gray(self):
        """2x downscale of a 1-pixel checkerboard averages each 2x2 block."""
        idx = np.indices((448, 448)).sum(axis=0) % 2
        board = (idx * 255).astype(np.float64)
        out = bilinear_resize(board, 224, 224)
        assert np.abs(out - 127.5).max() <= 1.0

    def test_rejects_bad_shapes(self):
        with pytest.raises(ShapeError):
            bilinear_resize(np.zeros(5), 2, 2)
        with pytest.raises(ShapeError):
            bilinear_resize(np.zeros((4, 4)), 0, 2)


class TestNearest:
    def test_integer_upscale_replicates_blocks(self):
        img = np.array([[1, 2], [3, 4]])
        out = nearest_resize(img, 4, 4)
        assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2],
                                 [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_identity_at_same_size(self, rng):
        img = rng.integers(0, 255, (5, 5, 3))
        assert_array_equal(nearest_resize(img, 5, 5), img)


class TestLoadImage:
    def test_exact_size_passes_through(self, tmp_path, rng):
        rgb = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
        path = tmp_path / "img.png"
        save_png(path, rgb)
        x = load_image(path, (16, 16))
        assert x.shape == (3, 16, 16)
        assert x.dtype == np.float32
        assert_allclose(x, rgb.transpose(2, 0, 1) / 255.0, atol=1e-6)

    def test_resize_applied_when_needed(self, tmp_path, rng):
        rgb = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
        path = tmp_path / "img.png"
        save_png(path, rgb)
        x = load_image(path, (4, 4))
        want = naive_bilinear_resize(rgb.astype(np.float64), 4, 4) / 255.0
        assert_allclose(x, want.transpose(2, 0, 1), rtol=1e-4, atol=1e-4)

    def test_normalization_arithmetic(self, tmp_path):
        rgb = np.full((4, 4, 3), 128, dtype=np.uint8)
        path = tmp_path / "img.png"
        save_png(path, rgb)
        norm = ((0.5, 0.25, 0.0), (0.5, 0.25, 1.0))
        x = load_image(path, (4, 4), norm)
        v = 128 / 255.0
        assert_allclose(x[0], (v - 0.5) / 0.5, atol=1e-6)
        assert_allclose(x[1], (v - 0.25) / 0.25, atol=1e-6)
        assert_allclose(x[2], v, atol=1e-6)

    def test_garbage_file_raises_decode_error(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"this is not an image at all")
        with pytest.raises(DecodeError):
            load_image(path, (4, 4))

    def test_missing_file_raises_file_not_found(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image(tmp_path / "absent.png", (4, 4))

    def test_denormalize_round_trip(self, tmp_path, rng):
        rgb = rng.integers(0, 256, (6, 6, 3)).astype(np.uint8)
        path = tmp_path / "img.png"
        save_png(path, rgb)
        norm = ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))
        x = load_image(path, (6, 6), norm)
        back = denormalize_to_rgb(x, norm)
        assert_allclose(back, rgb / 255.0, atol=1e-5)


class TestWriters:
    def test_png_bytes_round_trip(self, rng):
        rgb = rng.integers(0, 256, (5, 9, 3)).astype(np.uint8)
        back = np.asarray(Image.open(io.BytesIO(png_bytes(rgb))).convert("RGB"))
        assert_array_equal(back, rgb)

    def test_ppm_layout(self):
        rgb = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
        data = ppm_bytes(rgb)
        assert data.startswith(b"P6\n2 2\n255\n")
        assert data[len(b"P6\n2 2\n255\n"):] == rgb.tobytes()

    def test_ppm_decodes_with_pillow(self, rng):
        rgb = rng.integers(0, 256, (4, 7, 3)).astype(np.uint8)
        back = np.asarray(Image.open(io.BytesIO(ppm_bytes(rgb))).convert("RGB"))
        assert_array_equal(back, rgb)

    def test_write_image_dispatches_on_suffix(self, tmp_path, rng):
        rgb = rng.integers(0, 256, (4, 4, 3)).astype(np.uint8)
        png_path = tmp_path / "out.png"
        ppm_path = tmp_path / "out.ppm"
        write_image(png_path, rgb)
        write_image(ppm_path, rgb)
        assert png_path.read_bytes().startswith(b"\x89PNG")
        assert ppm_path.read_bytes().startswith(b"P6")
        assert_array_equal(decode_image(png_path), rgb)
        assert_array_equal(decode_image(ppm_path), rgb)
