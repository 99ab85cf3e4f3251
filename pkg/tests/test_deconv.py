import numpy as np
import pytest

from lfmkit.deconv import DeconvConfig, backprojection, poisson_loglik, richardson_lucy, richardson_lucy_array
from lfmkit.errors import DimensionError, NumericalError
from lfmkit.lightfield import Volume3D
from lfmkit.optics.projection import Projector, forward_project


@pytest.fixture(scope="module")
def problem(small_psfs):
    rng = np.random.default_rng(0)
    V = 35
    truth = np.zeros((3, V, V))
    truth[:, 10:25, 10:25] = rng.random((3, 15, 15))
    P = Projector(small_psfs, (V, V), "periodic")
    I = np.maximum(P.forward(truth), 0)
    return truth, I, P


def test_likelihood_increases(small_psfs, problem):
    truth, I, P = problem
    eps = 1e-9 * I.max()
    ll = []
    richardson_lucy_array(I, small_psfs, DeconvConfig(iterations=8, mode="periodic"), projector=P,
                          callback=lambda it, v: ll.append(poisson_loglik(I, P.forward(v), eps)))
    assert all(b >= a - 1e-9 * abs(a) for a, b in zip(ll, ll[1:]))


def test_flux_is_preserved_where_covered(small_psfs, problem):
    _, I, P = problem
    v = richardson_lucy_array(I, small_psfs, DeconvConfig(iterations=3, mode="periodic"), projector=P)
    assert P.forward(v).sum() == pytest.approx(I.sum(), rel=1e-2)


def test_backprojection_init_and_smoothing(small_psfs, problem):
    _, I, P = problem
    for cfg in (DeconvConfig(iterations=2, mode="periodic", init="backprojection"),
                DeconvConfig(iterations=2, mode="periodic", smooth=True)):
        v = richardson_lucy_array(I, small_psfs, cfg, projector=P)
        assert v.shape == (3, 35, 35) and v.min() >= 0
    bp = backprojection(I, small_psfs, projector=P)
    assert bp.min() >= 0


def test_wrapper_types(small_psfs, problem):
    truth, *_ = problem
    lf = forward_project(Volume3D(truth), small_psfs, "periodic")
    vol = richardson_lucy(lf, small_psfs, DeconvConfig(iterations=2, mode="periodic"))
    assert isinstance(vol, Volume3D) and vol.data.shape == truth.shape
    with pytest.raises(DimensionError):
        richardson_lucy(np.ones((20, 21)), small_psfs)


def test_invalid_inputs(small_psfs):
    with pytest.raises(NumericalError):
        richardson_lucy_array(np.zeros((14, 14)), small_psfs)
    with pytest.raises(ValueError):
        richardson_lucy_array(-np.ones((14, 14)), small_psfs)
    with pytest.raises(ValueError):
        DeconvConfig(iterations=0)
    with pytest.raises(DimensionError):
        richardson_lucy_array(np.ones((35, 35)), small_psfs, init=np.ones((2, 35, 35)))


def test_deterministic(small_psfs, problem):
    _, I, P = problem
    cfg = DeconvConfig(iterations=3, mode="periodic")
    a = richardson_lucy_array(I, small_psfs, cfg, projector=P)
    b = richardson_lucy_array(I, small_psfs, cfg)
    assert np.array_equal(a, b)
