import numpy as np
import pytest

from lfmkit import kernels

BACKENDS = ["python"]
try:
    kernels.backend_module("compiled")
    BACKENDS.append("compiled")
except ImportError:  # pragma: no cover - depends on the build
    pass


def _naive_forward(x, cls, ks):
    H, W = x.shape
    R = (ks.shape[1] - 1) // 2
    out = np.zeros_like(x)
    for i in range(H):
        for j in range(W):
            k = ks[cls[i, j]]
            for a in range(-R, R + 1):
                for b in range(-R, R + 1):
                    if 0 <= i + a < H and 0 <= j + b < W:
                        out[i + a, j + b] += x[i, j] * k[a + R, b + R]
    return out


@pytest.mark.parametrize("backend", BACKENDS)
def test_sv_conv_matches_naive(backend):
    rng = np.random.default_rng(0)
    x = rng.random((9, 8))
    cls = rng.integers(0, 3, size=x.shape).astype(np.int32)
    ks = rng.random((3, 5, 5))
    assert np.allclose(kernels.sv_conv_forward(x, cls, ks, backend=backend), _naive_forward(x, cls, ks))


@pytest.mark.parametrize("backend", BACKENDS)
def test_sv_conv_adjoint_identity(backend):
    rng = np.random.default_rng(1)
    x, y = rng.random((10, 10)), rng.random((10, 10))
    cls = rng.integers(0, 4, size=x.shape).astype(np.int32)
    ks = rng.random((4, 7, 7))
    lhs = np.sum(kernels.sv_conv_forward(x, cls, ks, backend=backend) * y)
    rhs = np.sum(x * kernels.sv_conv_adjoint(y, cls, ks, backend=backend))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_backends_agree_bitwise():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(2)
    x = rng.random((21, 21))
    cls = rng.integers(0, 9, size=x.shape).astype(np.int32)
    ks = rng.random((9, 9, 9))
    for fn in (kernels.sv_conv_forward, kernels.sv_conv_adjoint):
        assert np.array_equal(fn(x, cls, ks, backend="python"), fn(x, cls, ks, backend="compiled"))
    gx, gy = rng.uniform(-1, 22, 5000), rng.uniform(-1, 22, 5000)
    a, da = kernels.bin_points(gx, gy, 0.5, (21, 21), backend="python")
    b, db = kernels.bin_points(gx, gy, 0.5, (21, 21), backend="compiled")
    assert da == db and np.array_equal(a, b)
    t, r = rng.random((5, 6)), rng.random((20, 20))
    assert np.allclose(kernels.ncc_valid(t, r, backend="python"), kernels.ncc_valid(t, r, backend="compiled"),
                       atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_bin_points_rounding_and_drops(backend):
    gx = np.array([0.49, 0.51, 2.0, -0.6, 5.0])
    gy = np.array([0.0, 0.0, 1.49, 0.0, 0.0])
    img, dropped = kernels.bin_points(gx, gy, 1.0, (3, 3), backend=backend)
    assert dropped == 2
    assert img[0, 0] == 1.0 and img[1, 0] == 1.0 and img[2, 1] == 1.0


@pytest.mark.parametrize("backend", BACKENDS)
def test_ncc_oracle(backend):
    rng = np.random.default_rng(3)
    r = rng.random((12, 12))
    t = r[3:7, 2:8]
    out = kernels.ncc_valid(t, r, backend=backend)
    assert out.shape == (9, 7)
    assert out[3, 2] == pytest.approx(1.0, abs=1e-12)
    w = r[5:9, 1:7]
    assert out[5, 1] == pytest.approx(np.corrcoef(t.ravel(), w.ravel())[0, 1], abs=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_threads_do_not_change_results(backend):
    rng = np.random.default_rng(4)
    x = rng.random((30, 30))
    ks = rng.random((1, 9, 9))
    saved = kernels.get_threads()
    try:
        kernels.set_threads(1)
        a = kernels.sv_conv_forward(x, None, ks, backend=backend)
        kernels.set_threads(4)
        b = kernels.sv_conv_forward(x, None, ks, backend=backend)
    finally:
        kernels.set_threads(saved)
    assert np.array_equal(a, b)


def test_kernel_validation():
    with pytest.raises(ValueError):
        kernels.sv_conv_forward(np.ones((4, 4)), None, np.ones((2, 3, 3)))
    with pytest.raises(ValueError):
        kernels.sv_conv_forward(np.ones((4, 4)), None, np.ones((1, 4, 4)))
