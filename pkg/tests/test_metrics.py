import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from drape.metrics import (MetricError, image_mse, image_ssim, masked_l1, masked_metrics,
                           ssim_map)


def test_identical_images():
    rng = np.random.default_rng(0)
    a = rng.random((16, 16, 3))
    m = np.ones((16, 16), bool)
    assert masked_l1(a, a, m) == 0
    assert image_mse(a, a, m) == 0
    assert image_ssim(a, a, m) == pytest.approx(1.0, abs=1e-12)


def test_empty_mask_l1_is_zero():
    rng = np.random.default_rng(1)
    assert masked_l1(rng.random((4, 4, 3)), rng.random((4, 4, 3)), np.zeros((4, 4), bool)) == 0


def test_single_pixel_l1():
    a = np.zeros((4, 4, 3))
    b = a.copy()
    b[2, 1] = (0.5, 0, 0)
    m = np.zeros((4, 4), bool)
    m[2, 1] = True
    assert masked_l1(a, b, m) == 0.5


def test_empty_mask_undefined():
    a = np.zeros((4, 4, 3))
    with pytest.raises(MetricError):
        image_mse(a, a, np.zeros((4, 4), bool))
    with pytest.raises(MetricError):
        image_ssim(a, a, np.zeros((4, 4), bool))


def test_shape_mismatch_rejected():
    with pytest.raises(MetricError):
        image_mse(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), np.ones((4, 4), bool))
    with pytest.raises(MetricError):
        image_mse(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.ones((3, 4), bool))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 255), st.integers(0, 2 ** 31))
def test_constant_offset_mse(d, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256 - d, (8, 8, 3)).astype(float)
    m = rng.random((8, 8)) < 0.7
    m[0, 0] = True
    assert image_mse(a + d, a, m) == d * d


def test_mse_matches_naive_sum():
    rng = np.random.default_rng(2)
    a, b = rng.random((20, 30, 3)), rng.random((20, 30, 3))
    m = rng.random((20, 30)) < 0.4
    tot, cnt = 0.0, 0
    for i in range(20):
        for j in range(30):
            if m[i, j]:
                for c in range(3):
                    tot += (a[i, j, c] - b[i, j, c]) ** 2
                    cnt += 1
    assert abs(image_mse(a, b, m) - tot / cnt) <= 1e-9 * tot / cnt


def test_ssim_map_matches_skimage():
    rng = np.random.default_rng(3)
    a = rng.random((40, 50, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    _, ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                   use_sample_covariance=False, channel_axis=2, full=True)
    np.testing.assert_allclose(ssim_map(a, b, 1.0), ref.mean(axis=2), atol=1e-10)


def test_masked_metrics_scale():
    rng = np.random.default_rng(4)
    a, b = rng.random((12, 12, 3)), rng.random((12, 12, 3))
    m = np.ones((12, 12), bool)
    r = masked_metrics(a, b, m)
    assert r["mse"] == pytest.approx(image_mse(a, b, m) * 255 ** 2)
    assert r["l1"] == pytest.approx(masked_l1(a, b, m) * 255)
    assert r["ssim"] == pytest.approx(image_ssim(a, b, m), abs=1e-12)
