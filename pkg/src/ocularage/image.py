"""Grayscale raster helpers.

A gray image is a 2-D ``float32`` array of shape ``(height, width)`` with
values in [0, 1]; row-major like any C-ordered numpy array.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IoError


def as_gray(pixels, copy=False) -> np.ndarray:
    img = np.array(pixels, dtype=np.float32, copy=copy)
    if img.ndim != 2:
        raise ValueError(f"gray image must be 2-D, got shape {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("gray image values must lie in [0, 1]")
    return img


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(img), mode="L").save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return arr.astype(np.float32) / 255.0


def load_png_u8(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
