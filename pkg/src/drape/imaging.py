"""Image file helpers: 8-bit PNG with a declared display gamma, EXR floats."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .texels import read_exr, write_exr

DEFAULT_GAMMA = 2.2


def encode_8bit(linear: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    x = np.clip(np.nan_to_num(linear), 0.0, 1.0)
    if gamma != 1.0:
        x = x ** (1.0 / gamma)
    return np.round(x * 255.0).astype(np.uint8)


def decode_8bit(data: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64) / 255.0
    return x ** gamma if gamma != 1.0 else x


def write_png(path: str | os.PathLike, linear: np.ndarray, gamma: float = DEFAULT_GAMMA) -> None:
    Image.fromarray(encode_8bit(linear, gamma)).save(str(path), optimize=False)


def read_png(path: str | os.PathLike, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    img = np.asarray(Image.open(str(path)))
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[..., :3]
    return decode_8bit(img, gamma)


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(str(path))


def read_mask(path: str | os.PathLike) -> np.ndarray:
    m = np.asarray(Image.open(str(path)))
    if m.ndim == 3:
        m = m[..., 0]
    return m > 127


def write_labels(path: str | os.PathLike, labels: np.ndarray) -> None:
    """Small non-negative integer labels as an 8-bit (or 16-bit) grayscale PNG."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0:
        raise ValueError("labels must be non-negative")
    dtype = np.uint8 if labels.max(initial=0) < 256 else np.uint16
    Image.fromarray(labels.astype(dtype)).save(str(path))


def read_labels(path: str | os.PathLike) -> np.ndarray:
    return np.asarray(Image.open(str(path))).astype(np.int64)


def read_image(path: str | os.PathLike, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Linear RGB from PNG (gamma-decoded) or EXR (already linear)."""
    p = Path(path)
    if p.suffix.lower() == ".exr":
        return read_exr(p)
    return read_png(p, gamma)


def write_image(path: str | os.PathLike, linear: np.ndarray, gamma: float = DEFAULT_GAMMA) -> None:
    p = Path(path)
    if p.suffix.lower() == ".exr":
        write_exr(p, linear)
    else:
        write_png(p, linear, gamma)
