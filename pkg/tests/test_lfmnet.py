import numpy as np
import pytest
from scipy import signal

from lfmkit.errors import ConfigError, ContainerError, DimensionError, NumericalError
from lfmkit.lfmnet import checkpoint
from lfmkit.lfmnet.data import SyntheticSource, SyntheticSpec
from lfmkit.lfmnet.infer import forward_symmetrized, infer, infer_patchwise, pad_lenslets, undo_dihedral
from lfmkit.lfmnet.layers import Conv2d, Conv4dInput, ConvTranspose2x, reflect_pad_backward, t1_to_t2, t2_to_t1
from lfmkit.lfmnet.model import LFMNet, NetworkSpec
from lfmkit.lfmnet.train import Adam, TrainConfig, dihedral, loss_and_grad, split_indices, train
from lfmkit.lightfield import lf_to_spatial, spatial_to_lf


def _tiny(**kw):
    base = dict(fov=3, nD=2, A=(3, 3), base_channels=2, dtype="float64")
    base.update(kw)
    return NetworkSpec(**base)


def test_conv4d_matches_loops(rng):
    layer = Conv4dInput(2, 3, np.random.default_rng(0))
    x = rng.random((1, 1, 3, 4, 5, 6))
    y = layer.forward(x)
    assert y.shape == (1, 2, 3, 4, 3, 4)
    xp = np.pad(x[0, 0], ((1, 1), (1, 1), (0, 0), (0, 0)), mode="reflect")
    w, b = layer.params["w"], layer.params["b"]
    for d in range(2):
        for a in range(3):
            for c in range(4):
                for i in range(3):
                    for j in range(4):
                        ref = np.sum(xp[a:a + 3, c:c + 3, i:i + 3, j:j + 3] * w[d, 0]) + b[d]
                        assert y[0, d, a, c, i, j] == pytest.approx(ref, rel=1e-12)


def test_conv2d_matches_scipy(rng):
    layer = Conv2d(2, 3, 3, 1, np.random.default_rng(1))
    x = rng.random((1, 2, 7, 6))
    y = layer.forward(x)
    xp = np.pad(x[0], ((0, 0), (1, 1), (1, 1)), mode="reflect")
    for o in range(3):
        ref = sum(signal.correlate2d(xp[c], layer.params["w"][o, c], mode="valid") for c in range(2))
        assert np.allclose(y[0, o], ref + layer.params["b"][o], atol=1e-12)
    strided = Conv2d(2, 3, 3, 2, np.random.default_rng(1))
    assert np.allclose(strided.forward(x)[0], y[0, :, ::2, ::2])


def test_transpose_conv_paints_blocks(rng):
    layer = ConvTranspose2x(2, 1, np.random.default_rng(2))
    x = rng.random((1, 2, 3, 4))
    y = layer.forward(x)
    w = layer.params["w"]
    blk = np.einsum("chw,cpq->hpwq", x[0], w[:, 0]).reshape(6, 8)
    assert np.allclose(y[0, 0], blk + layer.params["b"][0])


def test_reflect_pad_adjoint(rng):
    pads = ((0, 0), (2, 1), (1, 3))
    x = rng.random((2, 5, 6))
    g = rng.random(np.pad(x, pads, mode="reflect").shape)
    lhs = np.sum(np.pad(x, pads, mode="reflect") * g)
    assert lhs == pytest.approx(np.sum(x * reflect_pad_backward(g, pads)), rel=1e-12)


def test_t1_t2_round_trip(rng):
    t = rng.random((1, 2, 3, 4, 5, 6))
    img = t1_to_t2(t)
    assert img.shape == (1, 2, 15, 24)
    assert img[0, 1, 2 * 3 + 1, 5 * 4 + 2] == t[0, 1, 1, 2, 2, 5]
    assert np.array_equal(t2_to_t1(img, (3, 4)), t)
    with pytest.raises(DimensionError):
        t2_to_t1(img, (4, 4))


def test_spec_validation_and_dict_round_trip():
    for bad in (dict(fov=4), dict(variant="deep"), dict(dtype="float16"), dict(A=(1, 3)),
                dict(enc=((3,),)), dict(dec=((2,), ()))):
        with pytest.raises(ConfigError):
            _tiny(**bad)
    s = _tiny(variant="full", skip=True)
    assert NetworkSpec.from_dict(s.to_dict()).to_dict() == s.to_dict()
    with pytest.raises(ConfigError):
        NetworkSpec.from_dict(dict(s.to_dict(), colour="red"))


def test_channel_caps_and_param_order():
    spec = _tiny(variant="full", base_channels=4, max_channels=16)
    assert [spec.channels(i) for i in range(5)] == [4, 8, 16, 16, 16]
    names = list(LFMNet(spec).parameters())
    assert names[:2] == ["conv4d.b", "conv4d.w"] and names[-1] == "head.w"


def test_forward_shape_and_errors(rng):
    net = LFMNet(_tiny())
    out = net.forward(rng.random((2, 3, 3, 6, 7)))
    assert out.shape == (2, 2, 12, 15) == net.output_shape((2, 3, 3, 6, 7))
    with pytest.raises(DimensionError):
        net.forward(rng.random((3, 4, 6, 6)))  # wrong angular size
    with pytest.raises(DimensionError):
        net.forward(rng.random((3, 3, 2, 2)))  # smaller than fov


def test_dihedral_matches_sensor_symmetry(rng):
    A, S = 3, 4
    sensor = rng.random((A * S, A * S))
    vol = rng.random((2, A * S, A * S))
    lf = spatial_to_lf(sensor, A)
    ops = {1: lambda a: a[::-1, :], 2: lambda a: a[:, ::-1], 4: lambda a: a.T}
    for code in range(8):
        s2, v2 = sensor, vol
        for bit in (1, 2, 4):
            if code & bit:
                s2 = ops[bit](s2)
                v2 = np.stack([ops[bit](p) for p in v2])
        lf_t, vol_t = dihedral(lf, vol, code)
        assert np.array_equal(lf_to_spatial(lf_t), s2) and np.array_equal(vol_t, v2)


def test_adam_first_step_is_signed_lr():
    p = {"x.w": np.array([1.0, -2.0, 3.0])}
    Adam(p, lr=0.1).step(p, {"x.w": np.array([5.0, -0.5, 0.0])})
    assert np.allclose(p["x.w"], [0.9, -1.9, 3.0])


def test_split_is_partition():
    tr, va = split_indices(10, 0.3, 4)
    assert len(va) == 3 and sorted(np.concatenate([tr, va]).tolist()) == list(range(10))
    assert np.array_equal(split_indices(10, 0.3, 4)[1], va)
    assert len(split_indices(3, 0.1, 0)[1]) == 1


def test_train_deterministic_and_keeps_best(rng):
    x = rng.random((6, 3, 3, 4, 4))
    y = rng.random((6, 2, 6, 6))
    cfg = TrainConfig(epochs=4, batch=2, lr=1e-2, seed=3, superpose=0.5, schedule="cosine")
    runs = []
    for _ in range(2):
        net = LFMNet(_tiny())
        res = train(net, x, y, cfg)
        runs.append((res, net))
    assert runs[0][0].loss_curve == runs[1][0].loss_curve
    res, net = runs[0]
    assert res.best_val == min(res.val_curve) and res.best_epoch == res.val_curve.index(res.best_val) + 1
    for k, v in net.parameters().items():
        assert np.array_equal(v, res.best_params[k])


def test_train_rejects_bad_inputs(rng):
    net = LFMNet(_tiny())
    x = rng.random((2, 3, 3, 4, 4))
    with pytest.raises(DimensionError):
        train(net, x, rng.random((3, 2, 6, 6)))
    with pytest.raises(NumericalError):
        train(net, np.full_like(x, np.nan), rng.random((2, 2, 6, 6)), TrainConfig(epochs=1, val_frac=0))
    for bad in (dict(epochs=0), dict(lr=0.0), dict(val_frac=1.0), dict(schedule="step"), dict(superpose=2.0),
                dict(loss="l1")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_checkpoint_corruption():
    net = LFMNet(_tiny())
    buf = checkpoint.dumps(net, {"note": "x"})
    back, meta = checkpoint.loads(buf)
    assert meta == {"note": "x"}
    assert all(np.array_equal(a, b) for a, b in zip(net.parameters().values(), back.parameters().values()))
    for bad in (b"XXXX" + buf[4:], buf[:-3], buf + b"\0", buf[:8] + b"[" + buf[9:], buf[:20]):
        with pytest.raises(ContainerError):
            checkpoint.loads(bad)


def test_pad_and_patch_errors(rng):
    lf = rng.random((3, 3, 5, 5))
    assert pad_lenslets(lf, 2).shape == (3, 3, 9, 9)
    assert np.array_equal(pad_lenslets(lf, 2)[:, :, 2:7, 2:7], lf)
    with pytest.raises(DimensionError):
        pad_lenslets(lf, 5)
    net = LFMNet(_tiny())
    with pytest.raises(DimensionError):
        infer_patchwise(net, lf, 7)
    with pytest.raises(DimensionError):
        infer_patchwise(net, lf, 2)
    assert infer(net, lf, pad=1).data.shape == (2, 15, 15)


def test_synthetic_pairs_are_linear_and_cropped():
    src = SyntheticSource(SyntheticSpec(A=7, nD=3, fov=3, nT=3, depth_range_um=(-3.0, 3.0), n_rays=10_000))
    lf, tg, sensor = src.pair(0)
    assert lf.shape == (7, 7, 5, 5) and tg.shape == (3, 21, 21)
    vol = src.volume(0)
    assert np.array_equal(tg, vol[:, 7:28, 7:28])
    v2 = src.volume(1)
    both = src.projector.forward(vol + v2)
    assert np.allclose(both, src.projector.forward(vol) + src.projector.forward(v2), atol=1e-12)
    assert src.rl_baseline(lf[None], 2).shape == (1, 3, 21, 21)


def test_symmetrized_forward_is_equivariant(rng):
    net = LFMNet(_tiny())
    lf = rng.random((3, 3, 5, 5))
    base = forward_symmetrized(net, lf)
    for code in range(8):
        lf_t, base_t = dihedral(lf, base, code)
        assert np.allclose(forward_symmetrized(net, lf_t), base_t, atol=1e-12)
        assert np.array_equal(undo_dihedral(dihedral(lf, base, code)[1], code), base)
    assert np.allclose(infer(net, lf, symmetrize=True).data, base[0])
    with pytest.raises(DimensionError):
        forward_symmetrized(net, rng.random((3, 3, 5, 6)))


def test_live_loss_gradient_and_bound(rng):
    net = LFMNet(_tiny())
    x = rng.random((2, 3, 3, 4, 4))
    y = np.where(rng.random((2, 2, 6, 6)) < 0.5, 0.0, rng.random((2, 2, 6, 6)))
    net.zero_grad()
    loss = loss_and_grad(net, x, y, "live")
    pred = net.forward(x)
    assert loss >= np.mean((pred - y) ** 2) - 1e-15  # upper bound on the plain MSE
    grads = {k: v.copy() for k, v in net.gradients().items()}
    params = net.parameters()
    h = 1e-6
    for name in ("head.w", "enc0.0.w", "conv4d.w"):
        p = params[name].reshape(-1)
        for i in rng.choice(p.size, 3, replace=False):
            old = p[i]
            p[i] = old + h
            net.forward(x)
            lp = np.mean(np.where(y > 0, net.preact - y, net.forward(x)) ** 2)
            p[i] = old - h
            net.forward(x)
            lm = np.mean(np.where(y > 0, net.preact - y, net.forward(x)) ** 2)
            p[i] = old
            assert grads[name].reshape(-1)[i] == pytest.approx((lp - lm) / (2 * h), rel=1e-4, abs=1e-9)
