import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shiftsafe import diffusion as dm
from shiftsafe.diffusion import (ContextVector, DiffusionConfig, DiffusionModel, SamplingError, forward_sample,
                                 make_schedule, pretrain_encoder, sample, step_embedding, train_noise_net)

SMALL = DiffusionConfig(T_diff=50, enc_hidden=(32, 32), net_hidden=(64, 64), enc_epochs=10, epochs=10, seed=3)


def ctx(eta):
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    return np.column_stack([eta, np.full_like(eta, 20.0), np.ones_like(eta), np.zeros_like(eta)])


@pytest.fixture(scope="module")
def gaussian_model():
    rng = np.random.default_rng(0)
    eta = rng.uniform(0.0, 1.0, 20000)
    y = rng.normal(2 * eta, 0.1)
    return dm.fit(SMALL, ctx(eta), y)


def test_schedule_single_step():
    s = make_schedule(1, 0.5, 0.5)
    assert s.alpha_bars[0] == 0.5 and s.ab(0) == 1.0


def test_schedule_product_oracle():
    s = make_schedule(100, 1e-4, 0.02)
    prod = 1.0
    for b in np.linspace(1e-4, 0.02, 100):
        prod *= 1.0 - b
    assert abs(s.alpha_bars[-1] - prod) < 1e-12


def test_forward_sample_examples():
    s = make_schedule(3, 1e-14, 1e-14)
    assert forward_sample(s, 1.7, -3.0, 2, 5.0) == pytest.approx(1.7, abs=1e-6)
    s = make_schedule(10)
    assert forward_sample(s, 0.4, 0.4, 7, 0.0) == pytest.approx(0.4)
    s = dm.VarianceSchedule(np.array([0.75]), np.array([0.25]), np.array([0.25]))
    assert forward_sample(s, 2.0, 0.0, 1, 1.0) == pytest.approx(1.0 + math.sqrt(0.75))
    with pytest.raises(ValueError):
        forward_sample(s, 0.0, 0.0, 2, 0.0)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-3, 3), st.integers(1, 100))
def test_forward_residual_identity(s0, f, e, j):
    s = make_schedule(100)
    ab = s.alpha_bars[j - 1]
    lhs = forward_sample(s, s0, f, j, e) - f
    assert lhs == pytest.approx(math.sqrt(ab) * (s0 - f) + math.sqrt(1 - ab) * e, abs=1e-12)


def test_step_embedding_shape_and_range():
    e = step_embedding(np.arange(1, 6), 16)
    assert e.shape == (5, 16) and np.all(np.abs(e) <= 1.0)


def test_encoder_fits_constant_target():
    C = ctx(np.linspace(0, 1, 500))
    m = DiffusionModel.init(SMALL, C, np.full(500, 3.0))
    pretrain_encoder(m, C, np.full(500, 3.0), epochs=30, lr=3e-3, seed=0, batch=64)
    pred = m.to_raw_units(m.encode(C))
    assert np.mean((pred - 3.0) ** 2) < 1e-3


def test_encoder_fits_linear_target_and_is_deterministic():
    eta = np.linspace(0, 1, 2001)
    C, y = ctx(eta), 2 * eta
    def run():
        m = DiffusionModel.init(SMALL, C, y)
        return pretrain_encoder(m, C, y, epochs=40, lr=3e-3, seed=1, batch=64)
    a, b = run(), run()
    held = ctx(np.linspace(0.0025, 0.9975, 200))
    assert np.max(np.abs(a.to_raw_units(a.encode(held)) - 2 * held[:, 0])) < 0.05
    for (Wa, ba), (Wb, bb) in zip(a.encoder, b.encoder):
        assert np.array_equal(Wa, Wb) and np.array_equal(ba, bb)


def test_noise_net_zero_epochs_is_identity():
    C = ctx(np.linspace(0, 1, 50))
    m = DiffusionModel.init(SMALL, C, C[:, 0])
    before = [W.copy() for W, _ in m.noise_net]
    train_noise_net(m, C, C[:, 0], epochs=0)
    assert all(np.array_equal(a, W) for a, (W, _) in zip(before, m.noise_net))


def test_noise_net_on_anchored_targets():
    # targets equal the encoder output, so s_j - f is pure scaled noise
    C = ctx(np.linspace(0, 1, 4000))
    m = DiffusionModel.init(SMALL, C, np.linspace(0, 1, 4000))
    y = m.to_raw_units(m.encode(C))
    train_noise_net(m, C, y, epochs=5, batch=128, lr=1e-3, seed=0)
    assert m.train_meta["noise_net"]["losses"][-1] <= 1.05
    m2 = DiffusionModel.init(SMALL, C, np.linspace(0, 1, 4000))
    train_noise_net(m2, C, y, epochs=5, batch=128, lr=1e-3, seed=0)
    assert m.train_meta["noise_net"]["losses"] == m2.train_meta["noise_net"]["losses"]


def test_sample_empty_and_zero_net_mean():
    m = DiffusionModel.init(SMALL, ctx(np.linspace(0, 1, 10)), np.linspace(0, 1, 10))
    assert sample(m, ContextVector(0.3, 20, 1, 0), 0, 0).size == 0
    m.zero_weights()
    m.encoder[-1] = (m.encoder[-1][0], np.array([1.5]))
    draws = sample(m, ContextVector(0.3, 20, 1, 0), 4000, 9)
    target = float(m.to_raw_units(1.5))
    assert abs(draws.mean() - target) < 3 * draws.std() / math.sqrt(draws.size)


def test_score_is_scaled_negative_noise():
    m = DiffusionModel.init(SMALL, ctx(np.linspace(0, 1, 10)), np.linspace(0, 1, 10))
    s = np.linspace(-2, 2, 7)
    c = m.std_context(ctx(0.4))
    f = m.encode(ctx(0.4))
    for j in (1, 17, 50):
        ab = m.schedule.alpha_bars[j - 1]
        assert np.allclose(m.score(s, j, f, c), -m.eps(s, j, f, c) / math.sqrt(1 - ab), rtol=0, atol=0)


def test_sampler_shape_check_and_nonfinite_guard():
    m = DiffusionModel.init(SMALL, ctx(np.linspace(0, 1, 10)), np.linspace(0, 1, 10))
    with pytest.raises(ValueError):
        m.sample_residual(ctx([0.1, 0.2]), np.zeros((SMALL.T_diff, 3), dtype=np.float32))
    W, b = m.noise_net[-1]
    m.noise_net[-1] = (W, np.array([np.inf]))
    m._emb_cache = None
    with pytest.raises(SamplingError):
        sample(m, ContextVector(0.5, 20, 1, 0), 8, 0)


def test_known_gaussian_target(gaussian_model):
    d = sample(gaussian_model, ContextVector(0.5, 20, 1, 0), 5000, 4)
    assert 0.97 <= d.mean() <= 1.03
    assert 0.07 <= d.std() <= 0.14


def test_roundtrip_and_reverse_determinism(gaussian_model, tmp_path):
    p = tmp_path / "m.json"
    gaussian_model.save(p)
    back = DiffusionModel.load(p)
    c = ContextVector(0.25, 20, 1, 0)
    a = sample(gaussian_model, c, 300, 17)
    assert np.array_equal(a, sample(back, c, 300, 17))
    assert np.array_equal(a, sample(gaussian_model, c, 300, 17))
    assert not np.array_equal(a, sample(gaussian_model, c, 300, 18))


def test_noise_mse_table(gaussian_model):
    rng = np.random.default_rng(5)
    eta = rng.uniform(0, 1, 3000)
    E = dm.noise_mse_per_step(gaussian_model, ctx(eta), rng.normal(2 * eta, 0.1), seed=0)
    assert E.shape == (SMALL.T_diff,) and np.all(E >= 0) and np.all(np.isfinite(E))
    assert E[-1] < 1.0  # heavy-noise steps are easy to denoise
