"""Masked image losses and quality metrics."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(ValueError):
    pass


def _pair(a, b, mask=None):
    a = np.asarray(getattr(a, "rgb", a), dtype=np.float64)
    b = np.asarray(getattr(b, "image", b), dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"resolution mismatch: {a.shape} vs {b.shape}")
    if mask is not None:
        mask = np.asarray(mask, bool)
        if mask.shape != a.shape[:2]:
            raise MetricError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
    return a, b, mask


def masked_l1(rendered, reference, mask=None) -> float:
    """Sum of absolute channel differences over masked pixels.

    ``reference`` may be a ReferenceImage-like object with ``image`` and
    ``mask`` attributes, in which case ``mask`` defaults to its mask.
    """
    if mask is None:
        mask = getattr(reference, "mask", None)
    a, b, mask = _pair(rendered, reference, mask)
    if mask is None:
        raise MetricError("masked_l1 needs a mask")
    return float(np.abs(a - b)[mask].sum())


def image_mse(rendered, reference, mask) -> float:
    """Mean over masked pixels and channels of the squared difference."""
    a, b, mask = _pair(rendered, reference, mask)
    if not mask.any():
        raise MetricError("empty mask: MSE undefined")
    return float(np.mean((a - b)[mask] ** 2))


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float) -> np.ndarray:
    """Per-pixel SSIM with an 11x11 Gaussian window (sigma 1.5), channel-averaged."""
    a = a[..., None] if a.ndim == 2 else a
    b = b[..., None] if b.ndim == 2 else b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    truncate = (SSIM_WINDOW // 2) / SSIM_SIGMA
    out = np.zeros(a.shape[:2])
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]

        def g(z):
            return gaussian_filter(z, SSIM_SIGMA, truncate=truncate, mode="reflect")

        mx, my = g(x), g(y)
        vx = g(x * x) - mx * mx
        vy = g(y * y) - my * my
        cxy = g(x * y) - mx * my
        out += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return out / a.shape[2]


def image_ssim(rendered, reference, mask, data_range: float = 1.0) -> float:
    """Mean SSIM over the masked pixels; ``data_range`` is the value scale (255 for 8-bit)."""
    a, b, mask = _pair(rendered, reference, mask)
    if not mask.any():
        raise MetricError("empty mask: SSIM undefined")
    return float(np.clip(ssim_map(a, b, data_range)[mask].mean(), -1.0, 1.0))


def masked_metrics(rendered, reference, mask, scale: float = 255.0) -> dict:
    """L1, MSE and SSIM on the ``scale`` value range (8-bit by default)."""
    a, b, mask = _pair(rendered, reference, mask)
    a, b = a * scale, b * scale
    return {"l1": masked_l1(a, b, mask), "mse": image_mse(a, b, mask),
            "ssim": image_ssim(a, b, mask, data_range=scale)}
