import numpy as np
import pytest
from scipy import signal

from nowcast import autodiff as ad
from nowcast import gradcheck
from nowcast.advection import warp_arrays, warp_vjp_arrays
from nowcast.model import warp_tensor


def leaf(a, dtype=np.float64):
    return ad.Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


def test_relu_backward_gates():
    x = leaf([2.0, -3.0])
    with ad.Tape():
        loss = ad.total(ad.relu(x))
    ad.backward(loss)
    assert x.grad.tolist() == [1.0, 0.0]


def test_delta_kernel_conv_reproduces_input():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    y = ad.conv2d(ad.Tensor(x), ad.Tensor(w))
    assert np.array_equal(y.data, x)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_matches_scipy_oracle(stride):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    y = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), stride=stride).data
    for n in range(2):
        for o in range(4):
            ref = sum(signal.correlate2d(x[n, c], w[o, c], mode="same") for c in range(3)) + b[o]
            assert np.allclose(y[n, o], ref[::stride, ::stride], atol=1e-12)


def test_mean_gradient_uniform():
    x = leaf(np.random.default_rng(1).standard_normal(10))
    with ad.Tape():
        loss = ad.mean(x)
    ad.backward(loss)
    assert np.allclose(x.grad, 0.1)


def test_second_backward_raises():
    x = leaf([1.0, 2.0])
    with ad.Tape():
        loss = ad.mean(ad.mul(x, x))
    ad.backward(loss)
    with pytest.raises(ad.TapeError):
        ad.backward(loss)


def test_untracked_loss_raises():
    with pytest.raises(ad.TapeError):
        ad.backward(ad.mean(leaf([1.0])))


def test_shape_errors_name_the_op():
    with pytest.raises(ValueError, match="add"):
        ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4,))))
    with pytest.raises(ValueError, match="matmul"):
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))
    with pytest.raises(ValueError, match="conv2d"):
        ad.conv2d(ad.Tensor(np.zeros((1, 2, 4, 4))), ad.Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        ad.Tensor(np.zeros((1,) * 5))


def test_shared_subexpression_accumulates():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((3, 3))
    x = leaf(a)
    with ad.Tape():
        h = ad.sigmoid(x)
        loss = ad.total(ad.mul(h, h))  # h used twice
    ad.backward(loss)
    # same function with the subgraph duplicated instead of shared
    y = leaf(a)
    with ad.Tape():
        loss2 = ad.total(ad.mul(ad.sigmoid(y), ad.sigmoid(y)))
    ad.backward(loss2)
    s = 1 / (1 + np.exp(-a))
    assert np.allclose(x.grad, y.grad, atol=1e-15)
    assert np.allclose(x.grad, 2 * s * s * (1 - s))


def test_gaussian_sample_reparameterisation():
    mu, lv = leaf([1.0, -1.0]), leaf([0.0, 2.0])
    noise = np.array([0.5, -2.0])
    with ad.Tape():
        z = ad.gaussian_sample(mu, lv, noise)
        loss = ad.total(z)
    assert np.allclose(z.data, [1.5, -1.0 - 2.0 * np.e])
    ad.backward(loss)
    assert np.allclose(mu.grad, 1.0)
    assert np.allclose(lv.grad, 0.5 * noise * np.exp(0.5 * lv.data))
    assert np.array_equal(ad.gaussian_sample(mu, lv, np.zeros(2)).data, mu.data)


def test_warp_adapter_matches_advection_vjp_exactly():
    rng = np.random.default_rng(3)
    m = rng.uniform(-2, 2, (2, 2, 16, 16))
    s = rng.uniform(-1, 1, (2, 16, 16))
    x = rng.uniform(0, 3, (2, 16, 16))
    g = rng.standard_normal((2, 16, 16))
    mt, st, xt = leaf(m), leaf(s), leaf(x)
    with ad.Tape():
        out = warp_tensor(mt, st, xt)
        loss = ad.total(ad.mul(out, ad.Tensor(g)))
    ad.backward(loss)
    assert np.array_equal(out.data, warp_arrays(m[:, 0], m[:, 1], s, x))
    gu, gv, gs, gx = warp_vjp_arrays(g, m[:, 0], m[:, 1], s, x)
    assert np.array_equal(mt.grad[:, 0], gu) and np.array_equal(mt.grad[:, 1], gv)
    assert np.array_equal(st.grad, gs) and np.array_equal(xt.grad, gx)


def test_float32_default_with_float64_reductions():
    x = ad.Tensor(np.full(10**6, 0.1, np.float32))
    assert x.dtype == np.float32
    m = ad.mean(x)
    assert m.dtype == np.float32
    assert float(m.data) == pytest.approx(0.1, rel=1e-7)


# --- Adam -------------------------------------------------------------------


def test_adam_zero_gradients_keep_params():
    p = {"w": np.array([1.0, -2.0], np.float32)}
    before = p["w"].copy()
    state = ad.AdamState()
    for _ in range(5):
        ad.adam_step(p, {"w": np.zeros(2)}, state)
    assert np.array_equal(p["w"], before)
    assert not state.m["w"].any() and not state.v["w"].any()


def test_adam_constant_gradient_step_tends_to_lr():
    p = {"w": np.zeros(3)}
    state = ad.AdamState()
    g = np.array([0.3, -5.0, 1e-3])
    lr = 1e-2
    for _ in range(2000):
        prev = p["w"].copy()
        ad.adam_step(p, {"w": g}, state, lr=lr)
    step = p["w"] - prev
    assert np.allclose(np.abs(step), lr, rtol=1e-4)
    assert np.array_equal(np.sign(step), -np.sign(g))


def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.zeros(2)}
    ad.adam_step(p, {"w": np.array([4.0, -0.5])}, ad.AdamState(), lr=1e-4)
    assert np.allclose(p["w"], [-1e-4, 1e-4], rtol=1e-6)


def test_adam_deterministic():
    rng = np.random.default_rng(4)
    grads = [rng.standard_normal(5) for _ in range(10)]
    runs = []
    for _ in range(2):
        p, state = {"w": np.ones(5, np.float32)}, ad.AdamState()
        for g in grads:
            ad.adam_step(p, {"w": g}, state)
        runs.append(p["w"].tobytes())
    assert runs[0] == runs[1]


# --- finite-difference suite --------------------------------------------------


def test_every_op_passes_gradcheck():
    results = gradcheck.autodiff_checks(np.random.default_rng(0))
    names = {r.component for r in results}
    for op in ("add", "mul", "relu", "sigmoid", "mean", "l1_distance", "matmul", "reshape", "upsample2x",
               "conv2d", "conv2d_stride2", "gaussian_sample", "custom_warp"):
        assert f"ad.{op}" in names
    for r in results:
        assert r.checked > 0, r.line()
        assert r.ok, r.line()


def test_warp_gradcheck_and_losses():
    rng = np.random.default_rng(1)
    for r in (gradcheck.check_warp(rng), gradcheck.check_ved_loss(rng), gradcheck.check_evolver_loss(rng)):
        assert r.ok, r.line()


def test_gradcheck_detects_broken_vjp(monkeypatch):
    real = warp_vjp_arrays
    monkeypatch.setattr("nowcast.advection.warp_vjp_arrays",
                        lambda g, *a: tuple(1.01 * x for x in real(g, *a)))
    r = gradcheck.check_warp(np.random.default_rng(0))
    assert not r.ok and "warp" in r.line()
