import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nowcast.advection import warp_arrays
from nowcast.fields import FieldSequence, IntensityField, MotionField, PrecipField
from nowcast.flow import FlowConfig
from nowcast.supervision import (LossWeights, cosine_term, cosine_term_arrays, crop_mask, derive_targets,
                                 evolver_loss_arrays, kl_arrays, kl_divergence, loss_evolver, loss_ved,
                                 ved_loss_arrays)

from conftest import translated_blob_sequence


class Latent:
    def __init__(self, mu, log_var):
        self.mu, self.log_var = np.asarray(mu, float), np.asarray(log_var, float)


def flat_top(n, cx, cy, radius, amp, power=20):
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    return amp * np.exp(-((((x - cx) ** 2 + (y - cy) ** 2) / radius**2) ** power))


# --- targets ----------------------------------------------------------------


@pytest.mark.parametrize("method", ["darts", "lucas_kanade"])
def test_static_sequence_zero_targets(method):
    pair = derive_targets(translated_blob_sequence(shift=(0.0, 0.0)), FlowConfig(method=method))
    assert not pair.motion_target.u.any() and not pair.motion_target.v.any()
    assert not pair.intensity_target.values.any()


@pytest.mark.parametrize("method", ["darts", "lucas_kanade"])
def test_translation_targets(method):
    seq = translated_blob_sequence(shift=(2.0, 0.0))
    pair = derive_targets(seq, FlowConfig(method=method))
    support = seq[-1].values > 0.1 * seq[-1].values.max()
    assert abs(pair.motion_target.u[support].mean() - 2.0) < 0.25
    assert np.abs(pair.intensity_target.values[support]).mean() < 0.05 * 30


def test_translation_intensity_small_per_pixel():
    seq = translated_blob_sequence(shift=(1.0, 0.0))
    pair = derive_targets(seq, FlowConfig())
    support = seq[-1].values > 0.1 * seq[-1].values.max()
    assert np.abs(pair.intensity_target.values[support]).mean() < 0.05 * seq[-1].values.max()


def test_growth_target_carries_added_mass():
    # a flat-topped cell: growth in its textureless interior cannot be mistaken for motion
    n, radius = 64, 16
    amps = (30.0, 30.0, 60.0)
    seq = FieldSequence(tuple(
        PrecipField(flat_top(n, 28 + t, 32, radius, a), 600 * t) for t, a in enumerate(amps)
    ))
    pair = derive_targets(seq, FlowConfig())
    s = pair.intensity_target.values
    added = seq[-1].values.sum(dtype=np.float64) - seq[-2].values.sum(dtype=np.float64)
    assert s.sum() == pytest.approx(added, rel=0.05)
    y, x = np.mgrid[0:n, 0:n]
    core = (x - 30) ** 2 + (y - 32) ** 2 < (radius - 4) ** 2
    assert np.all(s[core] > 0)


@settings(max_examples=20, deadline=None)
@given(shift=st.tuples(st.floats(-2, 2), st.floats(-2, 2)), grow=st.floats(0.5, 2.0),
       method=st.sampled_from(["darts", "lucas_kanade"]))
def test_targets_reconstruct_next_frame(shift, grow, method):
    seq = translated_blob_sequence(shift=shift)
    seq = FieldSequence(tuple(PrecipField(f.values * grow**t, f.timestamp) for t, f in enumerate(seq)))
    pair = derive_targets(seq, FlowConfig(method=method))
    m = pair.motion_target
    out = warp_arrays(m.u, m.v, pair.intensity_target.values, seq[-2].values)
    mask = crop_mask(seq.n, pair.crop_margin)
    assert np.allclose(out[mask], seq[-1].values[mask], atol=1e-4)


def test_targets_need_context():
    seq = translated_blob_sequence(frames=2)
    with pytest.raises(ValueError):
        derive_targets(seq, FlowConfig())


# --- cosine -----------------------------------------------------------------


def rand_motion(seed, n=32):
    rng = np.random.default_rng(seed)
    return MotionField(*rng.uniform(0.5, 2.0, (2, n, n)) * rng.choice([-1, 1], (2, n, n)))


def test_cosine_cases():
    v = rand_motion(0)
    # the 1e-8 denominator guard leaves a residue of order 1e-8 / |v|^2
    assert cosine_term(v, v) == pytest.approx(0.0, abs=1e-7)
    assert cosine_term(v, MotionField(-v.u, -v.v)) == pytest.approx(2.0, abs=1e-7)
    assert cosine_term(v, MotionField(3 * v.u, 3 * v.v)) == pytest.approx(0.0, abs=1e-7)


def test_cosine_excludes_both_zero_pixels():
    v = np.zeros((2, 8, 8))
    v[0, :4] = 1.0
    value, grad = cosine_term_arrays(v, -v)
    assert value == pytest.approx(2.0)
    assert cosine_term_arrays(np.zeros((2, 8, 8)), np.zeros((2, 8, 8)))[0] == 0.0


@settings(max_examples=50, deadline=None)
@given(a=arrays(np.float64, (2, 4, 4), elements=st.floats(-5, 5)),
       b=arrays(np.float64, (2, 4, 4), elements=st.floats(-5, 5)))
def test_cosine_in_range(a, b):
    value = cosine_term_arrays(a, b)[0]
    assert -1e-12 <= value <= 2 + 1e-12


# --- KL ---------------------------------------------------------------------


def test_kl_cases():
    assert kl_divergence(Latent([0.0, 0.0], [0.0, 0.0])) == 0.0
    assert kl_divergence(Latent([1.0], [0.0])) == pytest.approx(0.5)
    # the two orders agree at unit variance and differ elsewhere
    assert kl_divergence(Latent([1.0], [0.0]), "prior_posterior") == pytest.approx(0.5)
    assert kl_divergence(Latent([0.0], [1.0])) == pytest.approx(0.5 * (np.e - 2))
    assert kl_divergence(Latent([0.0], [1.0]), "prior_posterior") == pytest.approx(0.5 / np.e)
    with pytest.raises(ValueError):
        kl_divergence(Latent([np.nan], [0.0]))
    with pytest.raises(ValueError):
        kl_arrays(np.zeros((1, 2)), np.zeros((1, 2)), "sideways")


def test_kl_non_negative_random_draws():
    rng = np.random.default_rng(0)
    for _ in range(100):
        mu, lv = rng.normal(0, 2, (2, 1, 16))
        for order in ("posterior_prior", "prior_posterior"):
            assert kl_arrays(mu, lv, order)[0] >= 0


def test_kl_batch_mean():
    mu = np.stack([np.ones(3), np.zeros(3)])
    assert kl_arrays(mu, np.zeros((2, 3)))[0] == pytest.approx(0.75)


# --- composite losses -------------------------------------------------------


def test_default_weights():
    w = LossWeights()
    assert (w.lambda_int, w.lambda_motion, w.lambda_cos, w.lambda_kl) == (0.995, 0.0033, 0.00165, 1e-6)
    assert w.kl_order == "posterior_prior"
    with pytest.raises(ValueError):
        LossWeights(lambda_cos=-1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_kl=float("inf"))


def test_ved_loss_zero_at_targets():
    seq = translated_blob_sequence(shift=(1.0, 0.5))
    pair = derive_targets(seq, FlowConfig())
    res = loss_ved(pair.motion_target, pair.intensity_target, pair, Latent(np.zeros(4), np.zeros(4)),
                   LossWeights())
    assert res.value == pytest.approx(0.0, abs=1e-9)
    assert all(v == pytest.approx(0.0, abs=1e-7) for v in res.terms.values())


def test_ved_loss_terms_positive_and_monotone_in_weights():
    rng = np.random.default_rng(1)
    args = [rng.normal(size=s) for s in ((2, 2, 16, 16), (2, 16, 16), (2, 2, 16, 16), (2, 16, 16),
                                          (2, 5), (2, 5))]
    base = ved_loss_arrays(*args, LossWeights())
    assert all(v > 0 for v in base.terms.values())
    for name in ("lambda_int", "lambda_motion", "lambda_cos", "lambda_kl"):
        more = ved_loss_arrays(*args, LossWeights(**{name: getattr(LossWeights(), name) * 2}))
        assert more.value > base.value


def test_ved_loss_rejects_bad_inputs():
    z = np.zeros
    with pytest.raises(ValueError):
        ved_loss_arrays(z((1, 2, 16, 16)), z((1, 16, 16)), z((1, 2, 8, 8)), z((1, 16, 16)), z((1, 2)),
                        z((1, 2)), LossWeights())
    bad = z((1, 16, 16))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        ved_loss_arrays(z((1, 2, 16, 16)), bad, z((1, 2, 16, 16)), z((1, 16, 16)), z((1, 2)), z((1, 2)),
                        LossWeights())


def test_ved_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    pm, tm = rng.normal(size=(2, 1, 2, 16, 16))
    pi, ti = rng.normal(size=(2, 1, 16, 16))
    mu, lv = rng.normal(size=(2, 1, 6))
    w = LossWeights(lambda_int=0.9, lambda_motion=0.3, lambda_cos=0.2, lambda_kl=0.1)
    res = ved_loss_arrays(pm, pi, tm, ti, mu, lv, w)
    f = lambda *a: ved_loss_arrays(*a, w).value
    h = 1e-6
    for name, idx, arr in (("motion", 0, pm), ("intensity", 1, pi), ("mu", 4, mu), ("log_var", 5, lv)):
        for _ in range(10):
            pos = tuple(rng.integers(s) for s in arr.shape)
            args = [pm, pi, tm, ti, mu, lv]
            up, dn = arr.copy(), arr.copy()
            up[pos] += h
            dn[pos] -= h
            args[idx] = up
            fu = f(*args)
            args[idx] = dn
            num = (fu - f(*args)) / (2 * h)
            assert res.grads[name][pos] == pytest.approx(num, rel=1e-4, abs=1e-8)


def test_evolver_loss_static_pair_zero():
    x = PrecipField(translated_blob_sequence()[0].values, 0)
    res = loss_evolver(MotionField.zeros(64), IntensityField.zeros(64), x, x)
    assert res.value == 0.0


def test_evolver_loss_translation_targets_small():
    seq = translated_blob_sequence(frames=4, shift=(1.0, 0.5))
    pair = derive_targets(seq[1:], FlowConfig())
    res = loss_evolver(pair.motion_target, pair.intensity_target, seq[2], seq[3])
    assert res.value < 0.01
    # motion alone already explains most of a rigid translation
    res = loss_evolver(pair.motion_target, IntensityField.zeros(64), seq[2], seq[3])
    assert res.value < 0.05


def test_evolver_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    pm = rng.uniform(-2, 2, (2, 16, 16))
    s = rng.uniform(-0.5, 0.5, (16, 16))
    x0, x1 = rng.uniform(1, 3, (2, 16, 16))
    res = evolver_loss_arrays(pm, s, x0, x1)
    h = 1e-6
    checked = 0
    for _ in range(60):
        pos = (0, *rng.integers(16, size=2))
        i, j = pos[1:]
        x, y = j - pm[0, i, j], i - pm[1, i, j]
        if min(abs(x - round(x)), abs(y - round(y))) < 1e-3 or not (0 < x < 15 and 0 < y < 15):
            continue
        up, dn = pm.copy(), pm.copy()
        up[pos] += h
        dn[pos] -= h
        num = (evolver_loss_arrays(up, s, x0, x1).value - evolver_loss_arrays(dn, s, x0, x1).value) / (2 * h)
        if abs(num) < 1e-9 and res.grads["motion"][pos] == 0:
            continue
        assert res.grads["motion"][pos] == pytest.approx(num, rel=1e-4, abs=1e-8)
        checked += 1
    assert checked > 10
