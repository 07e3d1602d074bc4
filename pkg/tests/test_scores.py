import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from shiftsafe.conformal import QuantileResult, ScoreSet, vanilla_quantile
from shiftsafe.diffusion import DiffusionConfig, DiffusionModel
from shiftsafe.scores import (PredictionErrorTensor, SigmaTable, UnboundedRegion, build_synthetic_scoreset,
                              episode_score, fit_sigma, index_grid, prediction_errors, region_radii,
                              synthetic_episode_score, synthetic_scores, valid_mask)


def tensor(T, H, N, fill=np.nan):
    return np.full((T - 1, H, N), fill)


def qr(c, d=0.0):
    return QuantileResult(c, c + d, d, 0.9, False)


def test_index_grid_size_and_bounds():
    g = index_grid(80, 10, 2)
    assert len(g) == 2 * sum(min(10, 80 - t) for t in range(1, 80)) == 1490
    assert np.all(g[:, 0] + g[:, 1] <= 80)
    assert valid_mask(5, 3, 1).sum() == len(index_grid(5, 3, 1))


def test_episode_score_examples():
    e = tensor(4, 3, 1)
    e[0, 0, 0], e[1, 0, 0], e[2, 0, 0] = 0.1, 0.3, 0.2
    assert episode_score(PredictionErrorTensor(e), SigmaTable(np.ones((3, 1)))) == pytest.approx(0.3)

    e = tensor(2, 1, 1)
    e[0, 0, 0] = 0.5
    assert episode_score(PredictionErrorTensor(e), SigmaTable(np.full((1, 1), 0.25))) == 2.0

    e = tensor(5, 3, 1)
    e[0, 1, 0], e[0, 2, 0] = 0.4, 0.9  # (t=1, tau=2) and (t=1, tau=3)
    sig = SigmaTable(np.array([[9.0], [1.0], [3.0]]))
    assert episode_score(PredictionErrorTensor(e), sig) == pytest.approx(0.4)


def test_error_tensor_rejects_bad_entries():
    with pytest.raises(ValueError):
        PredictionErrorTensor(np.full((3, 2, 1), -1.0))
    with pytest.raises(ValueError):
        PredictionErrorTensor(np.zeros((3, 2)))


def test_error_tensor_json_roundtrip():
    Y = np.cumsum(np.random.default_rng(0).normal(size=(21, 2, 2)), axis=0)
    E = prediction_errors(Y, 0.125, 4)
    back = PredictionErrorTensor.from_json(E.to_json())
    assert np.array_equal(np.isnan(back.entries), np.isnan(E.entries))
    assert np.allclose(np.nan_to_num(back.entries), np.nan_to_num(E.entries))


def test_prediction_errors_zero_on_uniform_motion():
    t = np.arange(41)[:, None]
    Y = np.concatenate([np.stack([0.1 * t, 0 * t + 0.5], -1), np.stack([3 - 0.05 * t, -0.02 * t], -1)], axis=1)
    E = prediction_errors(Y, 0.125, 10)
    assert np.nanmax(E.entries) < 1e-12
    assert np.isnan(E.entries[-1, 1:]).all()


def test_fit_sigma_floor_and_mean():
    z = PredictionErrorTensor(np.zeros((3, 2, 1)))
    assert np.all(fit_sigma([z, z], floor=1e-3).sigma == 1e-3)
    a, b = np.full((2, 1, 1), np.nan), np.full((2, 1, 1), np.nan)
    a[0, 0, 0], b[0, 0, 0] = 0.2, 0.4
    assert fit_sigma([PredictionErrorTensor(a), PredictionErrorTensor(b)]).sigma[0, 0] == pytest.approx(0.3)
    with pytest.raises(ValueError):
        fit_sigma([])
    with pytest.raises(ValueError):
        fit_sigma([z], floor=0.0)


def test_fit_sigma_matches_loop_oracle():
    rng = np.random.default_rng(1)
    eps = [PredictionErrorTensor(np.where(valid_mask(12, 4, 3), rng.exponential(size=(11, 4, 3)), np.nan))
           for _ in range(5)]
    got = fit_sigma(eps, floor=1e-3).sigma
    for h in range(4):
        for i in range(3):
            vals = [e.entries[t, h, i] for e in eps for t in range(11) if not math.isnan(e.entries[t, h, i])]
            assert got[h, i] == pytest.approx(max(sum(vals) / len(vals), 1e-3), rel=1e-12)


def test_sigma_table_validation_and_json():
    with pytest.raises(ValueError):
        SigmaTable(np.array([[1.0, 0.0]]))
    s = SigmaTable(np.array([[1.0, 2.0], [3.0, 4.0]]))
    back = SigmaTable.from_json(s.to_json())
    assert np.array_equal(back.sigma, s.sigma) and s(2, 1) == 4.0 and s.sigma_min == 1.0


def test_region_radii_examples():
    assert np.all(region_radii(qr(1.0), SigmaTable(np.ones((3, 2))), 5, 3, 2).radii == 1.0)
    rr = region_radii(qr(0.5, 0.1), SigmaTable(np.full((1, 1), 2.0)), 0, 1, 1)
    assert rr.radii[0, 0] == pytest.approx(1.2)
    with pytest.raises(UnboundedRegion):
        region_radii(QuantileResult(math.inf, math.inf, math.inf, 1.1, True), SigmaTable(np.ones((1, 1))), 0, 1, 1)
    with pytest.raises(ValueError):
        region_radii(qr(1.0), SigmaTable(np.ones((2, 1))), 0, 3, 1)


def test_case3_radii_pipeline_fixture():
    # two agents, H=3: r = bound / sigma_min feeds an LP quantile, radii = sigma (C + correction)
    from shiftsafe.conformal import robust_quantile_lp
    from shiftsafe.shift import propagate_to_radius
    sig = SigmaTable(np.array([[0.5, 0.25], [1.0, 0.75], [2.0, 1.5]]))
    cal = ScoreSet(np.arange(1, 101) / 100.0)
    r = propagate_to_radius(0.16354, sig)
    q = robust_quantile_lp(cal, 0.1, r, 0.0)
    rr = region_radii(q, sig, 7, 3, 2)
    level = 1 - (0.1 + (0.1 - 2) / 100)
    c = cal.scores[math.ceil(100 * level - 1e-9) - 1]
    want = sig.sigma * (c + 0.16354 / 0.25)
    assert np.allclose(rr.radii, want, rtol=1e-12)


def test_synthetic_scores_degenerate_models():
    sig = SigmaTable(np.ones((3, 2)))
    zero = DiffusionModel.constant(0.0)
    assert synthetic_episode_score(zero, 0.1, 6, 3, 2, sig, 0) == 0.0
    one = DiffusionModel.constant(1.0)
    assert synthetic_episode_score(one, 0.1, 6, 3, 2, sig, 0) == 1.0


def _tiny_model(seed=0):
    rng = np.random.default_rng(seed)
    C = np.column_stack([rng.random(2000), rng.integers(1, 6, 2000), rng.integers(1, 3, 2000), rng.integers(0, 2, 2000)])
    cfg = DiffusionConfig(T_diff=10, enc_hidden=(8,), net_hidden=(8,), emb_dim=4, seed=seed)
    return DiffusionModel.init(cfg, C, rng.exponential(size=2000))


def test_synthetic_scoreset_is_deterministic_and_sized():
    m = _tiny_model()
    sig = SigmaTable(np.full((2, 2), 0.5))
    a = build_synthetic_scoreset(m, 0.3, 6, 2, 2, sig, 50, 11)
    b = build_synthetic_scoreset(m, 0.3, 6, 2, 2, sig, 50, 11)
    assert a == b and a.K == 50
    assert build_synthetic_scoreset(m, 0.3, 6, 2, 2, sig, 1, 11).K == 1
    with pytest.raises(ValueError):
        synthetic_scores(m, 0.3, 6, 2, 2, sig, 0, 11)


def test_synthetic_score_streams_are_prefix_stable():
    m = _tiny_model()
    sig = SigmaTable(np.full((2, 2), 0.5))
    full = synthetic_scores(m, 0.3, 6, 2, 2, sig, 40, 5, batch_rows=64)
    assert np.array_equal(synthetic_scores(m, 0.3, 6, 2, 2, sig, 40, 5, batch_rows=10_000), full)


def test_synthetic_quantile_against_large_oracle():
    m = _tiny_model(1)
    sig = SigmaTable(np.full((2, 2), 0.5))
    q = np.quantile(synthetic_scores(m, 0.4, 6, 2, 2, sig, 1000, 1), 0.9)
    oracle = np.quantile(synthetic_scores(m, 0.4, 6, 2, 2, sig, 100_000, 2), 0.9)
    assert abs(q - oracle) <= 0.1 * oracle


# properties

err_st = arrays(float, (5, 3, 2), elements=st.floats(0, 10))
sig_st = arrays(float, (3, 2), elements=st.floats(0.01, 10))


@given(err_st, sig_st, st.floats(0.1, 10))
def test_score_scale_equivariance(e, s, lam):
    E, S = PredictionErrorTensor(e), SigmaTable(s)
    assert episode_score(E, S.scaled(lam)) == pytest.approx(episode_score(E, S) / lam, rel=1e-12)


@given(err_st, sig_st, st.integers(0, 29), st.floats(0, 5))
def test_score_monotone_in_entries(e, s, k, bump):
    E, S = PredictionErrorTensor(e), SigmaTable(s)
    e2 = e.copy()
    e2.flat[k] += bump
    assert episode_score(PredictionErrorTensor(e2), S) >= episode_score(E, S)


@given(sig_st, st.floats(0, 5), st.floats(0, 5), st.floats(0, 2))
def test_radii_monotone(s, c, d, extra):
    S = SigmaTable(s)
    base = region_radii(qr(c, d), S, 0, 3, 2).radii
    assert np.all(region_radii(qr(c + extra, d), S, 0, 3, 2).radii >= base)
    assert np.all(region_radii(qr(c, d + extra), S, 0, 3, 2).radii >= base)
    assert np.all(region_radii(qr(c, d), SigmaTable(s + extra), 0, 3, 2).radii >= base)


@given(st.lists(err_st, min_size=5, max_size=12), sig_st, st.floats(0.2, 5))
def test_radii_invariant_under_sigma_scaling(cal, s, lam):
    S = SigmaTable(s)
    def radii(tab):
        scores = ScoreSet(np.array([episode_score(PredictionErrorTensor(e), tab) for e in cal]))
        q = vanilla_quantile(scores, 0.5)
        return region_radii(q, tab, 0, 3, 2).radii
    assert np.allclose(radii(S.scaled(lam)), radii(S), rtol=1e-9)


@given(err_st, sig_st, st.floats(0, 3))
def test_simultaneous_coverage_equivalence(e, s, c):
    E, S = PredictionErrorTensor(e), SigmaTable(s)
    rr = region_radii(qr(c), S, 0, 3, 2).radii
    all_inside = bool(np.all(e <= rr[None]))
    assert all_inside == (episode_score(E, S) <= c)
