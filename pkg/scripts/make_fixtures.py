"""Generate the bundled label file and synthetic sample photographs.

Writes:

* ``assets/imagenet_labels.txt`` — the 1000 ImageNet-1k class names, one
  per line, taken from torchvision's bundled metadata (no download).
* ``assets/fixtures/{castle,barn,zebra}.png`` and ``.ppm`` twins — small
  procedurally drawn 224x224 stand-ins for the three sample categories.
  They exercise the full pipeline deterministically; nobody expects a
  random-weight or even pretrained network to classify them correctly.

Run from the repository root::

    python3 scripts/make_fixtures.py
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from relprop.imageio import write_image  # noqa: E402


def labels() -> list[str]:
    from torchvision.models import VGG16_Weights

    return list(VGG16_Weights.IMAGENET1K_V1.meta["categories"])


def _canvas(sky, ground, horizon=140):
    img = np.zeros((224, 224, 3), dtype=np.float64)
    img[:horizon] = sky
    img[horizon:] = ground
    return img


def _rect(img, y0, y1, x0, x1, color):
    img[y0:y1, x0:x1] = color


def draw_castle() -> np.ndarray:
    img = _canvas(sky=(168, 205, 235), ground=(96, 142, 74))
    wall = (158, 152, 144)
    dark = (110, 104, 98)
    _rect(img, 100, 180, 52, 172, wall)
    for x0 in (40, 160):
        _rect(img, 70, 180, x0, x0 + 24, wall)
        for i in range(3):
            _rect(img, 60, 70, x0 + i * 9, x0 + i * 9 + 5, wall)
    for i in range(6):
        _rect(img, 92, 100, 56 + i * 20, 56 + i * 20 + 10, wall)
    _rect(img, 140, 180, 100, 124, dark)
    for x0 in (70, 140):
        _rect(img, 115, 135, x0, x0 + 12, dark)
    return img


def draw_barn() -> np.ndarray:
    img = _canvas(sky=(190, 216, 240), ground=(150, 176, 96), horizon=150)
    red = (158, 62, 48)
    roof = (92, 66, 58)
    _rect(img, 110, 190, 60, 164, red)
    for i in range(24):
        img[90 + i, 60 + i : 164 - i] = roof
    _rect(img, 150, 190, 100, 124, (72, 48, 40))
    _rect(img, 120, 140, 72, 90, (230, 230, 225))
    _rect(img, 120, 140, 134, 152, (230, 230, 225))
    return img


def draw_zebra() -> np.ndarray:
    img = _canvas(sky=(205, 222, 185), ground=(168, 158, 100), horizon=120)
    yy, xx = np.mgrid[0:224, 0:224]
    body = ((yy - 140) / 45.0) ** 2 + ((xx - 112) / 70.0) ** 2 <= 1.0
    img[body] = (235, 235, 235)
    stripes = body & (((xx + (yy - 140) // 3) // 9) % 2 == 0)
    img[stripes] = (30, 30, 30)
    for x0 in (75, 95, 125, 145):
        _rect(img, 170, 205, x0, x0 + 9, (235, 235, 235))
        _rect(img, 178, 186, x0, x0 + 9, (30, 30, 30))
    _rect(img, 95, 135, 160, 182, (235, 235, 235))
    for i in range(4):
        _rect(img, 98 + i * 10, 102 + i * 10, 160, 182, (30, 30, 30))
    return img


def main() -> None:
    assets = ROOT / "assets"
    fixtures = assets / "fixtures"
    fixtures.mkdir(parents=True, exist_ok=True)

    (assets / "imagenet_labels.txt").write_text("\n".join(labels()) + "\n")
    print(f"wrote {assets / 'imagenet_labels.txt'}")

    rng = np.random.default_rng(2024)
    for name, draw in (
        ("castle", draw_castle),
        ("barn", draw_barn),
        ("zebra", draw_zebra),
    ):
        img = draw()
        noise = rng.normal(0.0, 4.0, size=img.shape)
        rgb = np.clip(img + noise, 0, 255).astype(np.uint8)
        for suffix in (".png", ".ppm"):
            path = fixtures / f"{name}{suffix}"
            write_image(path, rgb)
            print(f"wrote {path}")


if __name__ == "__main__":
    main()
