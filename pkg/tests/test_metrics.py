import math

import numpy as np
import pytest

from lfmkit.errors import NumericalError
from lfmkit.metrics import (contrast, expected_log_hessian, fisher_information, fwhm, gaussian_window, metric_row,
                            pearson, psnr, ssim, ssim_map)


def test_psnr_identical_and_peak():
    a = np.random.default_rng(0).random((8, 8))
    assert math.isinf(psnr(a, a))
    assert metric_row("psnr", psnr(a, a))["value"] == "identical"
    assert psnr(a + 0.1, a, peak=1.0) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        psnr(a, np.zeros_like(a))


def test_ssim_against_direct_formula():
    rng = np.random.default_rng(1)
    x, y = rng.random((11, 11)), rng.random((11, 11))
    g = np.outer(gaussian_window(11, 1.5), gaussian_window(11, 1.5))
    L = float(y.max())
    mx, my = (g * x).sum(), (g * y).sum()
    vx, vy = (g * x * x).sum() - mx**2, (g * y * y).sum() - my**2
    cxy = (g * x * y).sum() - mx * my
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    ref = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    assert ssim_map(x, y).shape == (1, 1)
    assert ssim(x, y) == pytest.approx(ref, rel=1e-10)


def test_ssim_volume_and_range():
    rng = np.random.default_rng(2)
    v = rng.random((3, 20, 20))
    assert ssim(v, v) == 1.0
    s = ssim(v + 0.3 * rng.random(v.shape), v)
    assert -1.0 <= s < 1.0


def test_pearson_properties():
    rng = np.random.default_rng(3)
    a = rng.random(100)
    assert pearson(a, a) == pytest.approx(1.0)
    assert pearson(a, -a) == pytest.approx(-1.0)
    with pytest.raises(NumericalError):
        pearson(a, np.ones_like(a))


def test_contrast_and_fwhm_edge_cases():
    assert contrast(np.array([1.0, 3.0])) == pytest.approx(0.5)
    img = np.zeros((4, 4))
    img[1:3, 1:3] = [[1, 3], [3, 1]]
    assert contrast(img, (1, 3, 1, 3)) == pytest.approx(0.5)
    with pytest.raises(NumericalError):
        contrast(np.zeros(4))
    tri = np.array([0.0, 1.0, 2.0, 1.0, 0.0])
    assert fwhm(tri) == pytest.approx(2.0)
    assert fwhm(tri, sample_pitch=0.5) == pytest.approx(1.0)
    with pytest.raises(NumericalError):
        fwhm(np.array([1.0, 1.0, 1.0]))


def test_fisher_equals_minus_expected_log_hessian():
    yy, xx = np.mgrid[-15:16, -15:16].astype(float)

    def psf_at(p, _b):
        s = 2.5 + 0.2 * p[2]
        h = np.exp(-((xx - p[0]) ** 2 / (2 * s * s) + (yy - p[1]) ** 2 / (2 * 1.3 * s * s)))
        return h / h.sum()

    F = fisher_information(psf_at, (0.3, -0.2, 0.0), h_step=(1e-3, 1e-3, 1e-3), eps_rel=0.0)
    H = expected_log_hessian(psf_at, (0.3, -0.2, 0.0), h_step=(1e-3, 1e-3, 1e-3), eps_rel=0.0)
    assert np.allclose(F.F, -H, rtol=1e-3, atol=1e-6)
    assert F.is_symmetric() and F.is_psd()
    assert F.F[2, 2] > 0


def test_fisher_degenerate():
    with pytest.raises(NumericalError):
        fisher_information(lambda p, b: np.zeros((5, 5)), (0, 0, 0))
