import numpy as np
import pytest

from nowcast import autodiff as ad
from nowcast.fields import FieldSequence
from nowcast.model import (ModelConfig, WeightsError, WeightsMismatch, decode_tensors, decode_weights,
                           encode_weights, evolve, evolver_names, init_params, load_weights, nowcast,
                           save_weights, tensors, ved_decode, ved_encode, ved_names)
from nowcast.training import latent_means

from conftest import TOY_MODEL, translated_blob_sequence


def context(n=32, frames=4, seed=0):
    rng = np.random.default_rng(seed)
    return FieldSequence.from_array(rng.gamma(1.0, 4.0, (frames, n, n)).astype(np.float32))


@pytest.mark.parametrize("n", [32, 64])
@pytest.mark.parametrize("reduc", [2, 4])
def test_shape_contracts(n, reduc):
    cfg = ModelConfig(context_frames=4, horizon=3, channels=4, evolver_dim=4, evolver_depth=1, reduc_factor=reduc)
    params = init_params(cfg)
    lat = ved_encode(params, context(n), cfg)
    assert lat.mu.shape == lat.log_var.shape == lat.sample.shape == (cfg.embed_dim, n // reduc, n // reduc)
    motion, intensity = ved_decode(params, lat, cfg)
    assert motion.u.shape == (n, n) and intensity.values.shape == (n, n)
    assert evolve(params, lat, 3, cfg).mu.shape == lat.mu.shape


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(horizon=0)
    with pytest.raises(ValueError):
        ModelConfig(reduc_factor=3)
    with pytest.raises(ValueError):
        ModelConfig(horizon=20, lead_time_classes=18)
    cfg = ModelConfig(channels=4, reduc_factor=8)
    with pytest.raises(ValueError):
        cfg.check_grid(12)
    with pytest.raises(ValueError):
        ved_encode(init_params(cfg), context(frames=3), cfg)


def test_zero_noise_sample_is_mean_and_deterministic(tiny_model):
    params = init_params(tiny_model, seed=1)
    a = ved_encode(params, context(), tiny_model)
    b = ved_encode(params, context(), tiny_model)
    assert np.array_equal(a.sample, a.mu)
    assert a.mu.tobytes() == b.mu.tobytes()
    noise = np.random.default_rng(0).standard_normal(a.mu.shape)
    c = ved_encode(params, context(), tiny_model, noise=noise[None])
    assert np.allclose(c.sample, c.mu + np.exp(0.5 * c.log_var) * noise, atol=1e-6)
    m1, s1 = ved_decode(params, a, tiny_model)
    m2, s2 = ved_decode(params, b, tiny_model)
    assert np.array_equal(m1.u, m2.u) and np.array_equal(s1.values, s2.values)


def test_evolver_lead_range(tiny_model):
    params = init_params(tiny_model)
    lat = ved_encode(params, context(), tiny_model)
    for k in (1, tiny_model.horizon + 1):
        with pytest.raises(ValueError):
            evolve(params, lat, k, tiny_model)
    # zero-initialised projection: the untrained evolver is the identity on L1
    assert np.array_equal(evolve(params, lat, 2, tiny_model).mu, lat.mu)


def test_parameter_count_independent_of_horizon():
    sizes = {h: sum(v.size for v in init_params(ModelConfig(horizon=h, channels=4, evolver_dim=4)).values())
             for h in (1, 6, 18)}
    assert len(set(sizes.values())) == 1


def test_untrained_model_is_persistence(tiny_model):
    seq = translated_blob_sequence(n=32, frames=4, sigma=4.0)
    out = nowcast(init_params(tiny_model), seq, tiny_model)
    assert len(out.frames) == tiny_model.horizon
    for k, f in enumerate(out.frames, start=1):
        assert np.array_equal(f.values, seq[-1].values)
        assert f.timestamp == seq[-1].timestamp + 600 * k


def test_nowcast_requires_matching_weights(tiny_model):
    seq = translated_blob_sequence(n=32, frames=4)
    with pytest.raises(WeightsMismatch):
        nowcast(None, seq, tiny_model)
    other = init_params(ModelConfig(channels=4, evolver_dim=8, evolver_depth=1, horizon=4))
    with pytest.raises(WeightsMismatch):
        nowcast(other, seq, tiny_model)


def test_lead_time_span_defaults():
    cfg = ModelConfig()
    assert cfg.horizon == 18 and cfg.lead_time_classes == 18
    assert [10 * k for k in range(1, cfg.horizon + 1)][-1] == 180


# --- TPNW -------------------------------------------------------------------


def test_weights_round_trip_byte_identical(tmp_path, tiny_model):
    params = init_params(tiny_model, seed=3)
    p = tmp_path / "w.tpnw"
    save_weights(params, tiny_model, p)
    back, cfg = load_weights(p)
    assert cfg == tiny_model
    assert set(back) == set(params)
    assert all(back[k].tobytes() == params[k].tobytes() for k in params)
    assert encode_weights(back, cfg) == p.read_bytes()


def test_malformed_weights(tiny_model):
    good = encode_weights(init_params(tiny_model), tiny_model)
    with pytest.raises(WeightsError, match="magic"):
        decode_weights(b"XXXX" + good[4:])
    with pytest.raises(WeightsError, match="version"):
        decode_weights(good[:4] + (9).to_bytes(4, "little") + good[8:])
    with pytest.raises(WeightsError, match="truncated"):
        decode_weights(good[:-3])
    with pytest.raises(WeightsError, match="trailing"):
        decode_weights(good + b"\0")
    with pytest.raises(WeightsError):
        decode_weights(good.replace(b"channels=", b"chanells="))


def test_parameter_groups_partition(tiny_model):
    params = init_params(tiny_model)
    ved, evo = set(ved_names(params)), set(evolver_names(params))
    assert not ved & evo
    assert set(params) - ved - evo == {"norm.input", "norm.flow", "norm.intensity"}


# --- trained behaviour (shared toy run) -----------------------------------------


def test_decoded_flow_matches_targets_on_held_out(toy_data, toy_ved):
    test = toy_data["test"]
    mu = latent_means(toy_ved.params, test, TOY_MODEL)
    motion, _ = decode_tensors(tensors(toy_ved.params), ad.Tensor(mu), TOY_MODEL)
    m = test.crop_margin
    err = (motion.data - test.motion)[:, :, m:-m, m:-m]
    rms = float(np.sqrt(np.mean(np.sum(err**2, axis=1))))
    assert rms < 0.5


def test_trained_evolver_distinguishes_leads(toy_data, toy_evolver):
    params = toy_evolver.params
    lat = ved_encode(params, FieldSequence.from_array(toy_data["test"].context[0]), TOY_MODEL)
    l2, l9 = evolve(params, lat, 2, TOY_MODEL), evolve(params, lat, 9, TOY_MODEL)
    assert not np.array_equal(l2.mu, l9.mu)
