import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit, logit

from oracles import stage1_ref
from tsln.direct import SurveyDataset, rescale_weights
from tsln.errors import NoStableAreas, RankDeficientDesign
from tsln.inference import SamplerConfig, mcse_mean
from tsln.stage1 import (
    Stage1Spec,
    aggregate_stage1,
    alc_from_summary,
    build_stage1_model,
    design_matrix,
    fit_stage1,
    read_stage1_summary,
    smoothing_metrics,
    write_stage1_summary,
)


def random_survey(rng, M=6, n=40, m=None):
    m = m or M
    area = np.sort(rng.choice(m, size=n))
    area[:m] = np.arange(m)  # every area sampled
    area = np.sort(area)
    y = rng.integers(0, 2, n)
    return SurveyDataset(area, y, rng.uniform(0.5, 5, n), M)


def test_design_dummy_coding():
    cov = pd.DataFrame({"x": [0.1, 0.5, -1.0, 2.0], "c": ["a", "b", "c", "a"]})
    d = SurveyDataset([0, 0, 1, 1], [0, 1, 0, 1], np.ones(4), 2, covariates=cov)
    X, names = design_matrix(d, Stage1Spec(continuous=["x"], categorical={"c": "a"}))
    assert names == ["x", "c[b]", "c[c]"]
    np.testing.assert_array_equal(X[:, 1], [0, 1, 0, 0])


def test_duplicate_column_rank_deficient():
    cov = pd.DataFrame({"x": [0.1, 0.5, -1.0, 2.0], "x2": [0.1, 0.5, -1.0, 2.0]})
    d = SurveyDataset([0, 0, 1, 1], [0, 1, 0, 1], np.ones(4), 2, covariates=cov)
    with pytest.raises(RankDeficientDesign):
        design_matrix(d, Stage1Spec(continuous=["x", "x2"]))


def test_residual_sd_positive():
    with pytest.raises(ValueError):
        Stage1Spec(residual_sd=0.0)


def test_model_layout():
    rng = np.random.default_rng(0)
    d = random_survey(rng)
    cov = pd.DataFrame({"g": rng.integers(0, 3, d.n)})
    d = SurveyDataset(d.area, d.y, d.w_raw, d.M, covariates=cov)
    m = build_stage1_model(d, rescale_weights(d), Stage1Spec(grouping={"g": 3}))
    assert set(m.layout.blocks) == {"alpha", "log_sigma_g", "z_g", "log_sigma_area", "z_area", "eps"}
    assert m.dim == 1 + 1 + 3 + 1 + 6 + d.n


def test_qr_gives_same_density_up_to_reparameterisation():
    # with QR the same eta must be reachable; compare eta at mapped points
    rng = np.random.default_rng(1)
    d0 = random_survey(rng, n=30)
    cov = pd.DataFrame({"x": rng.normal(size=30), "z": rng.normal(size=30)})
    d = SurveyDataset(d0.area, d0.y, d0.w_raw, d0.M, covariates=cov)
    ws = rescale_weights(d)
    plain = build_stage1_model(d, ws, Stage1Spec(continuous=["x", "z"], include_area_effect=False))
    qr = build_stage1_model(d, ws, Stage1Spec(continuous=["x", "z"], include_area_effect=False, qr=True))
    X = cov.to_numpy()
    Q, R = np.linalg.qr(X)
    s = np.sqrt(29)
    beta = np.array([0.3, -0.7])
    x_plain = np.concatenate([[0.2], beta, np.zeros(30)])
    x_qr = np.concatenate([[0.2], (R / s) @ beta, np.zeros(30)])
    np.testing.assert_allclose(plain.evaluate("eta", x_plain), qr.evaluate("eta", x_qr), atol=1e-12)
    assert plain.log_density_and_grad(x_plain)[0] == pytest.approx(qr.log_density_and_grad(x_qr)[0])


def test_intercept_only_balanced():
    n = 60
    d = SurveyDataset(np.repeat(np.arange(3), 20), np.tile([0, 1], 30), np.ones(n), 3)
    f = fit_stage1(d, rescale_weights(d), Stage1Spec(include_area_effect=False),
                   SamplerConfig(chains=4, warmup=400, draws=500, seed=2))
    p = expit(f.draws.column("alpha"))
    assert abs(p.mean() - 0.5) < 4 * mcse_mean(p)
    assert f.diagnostics["max_rhat"] < 1.05
    assert f.pi_draws().shape == (2000, n)


def test_sr_grows_with_residual_sd():
    rng = np.random.default_rng(3)
    M = 8
    u = np.linspace(0.15, 0.6, M)
    area = np.repeat(np.arange(M), 12)
    d = SurveyDataset(area, rng.binomial(1, u[area]), rng.uniform(1, 3, area.size), M)
    ws = rescale_weights(d)
    sr = []
    for s in (0.01, 1.0, 3.0):
        f = fit_stage1(d, ws, Stage1Spec(residual_sd=s), SamplerConfig(chains=2, warmup=300, draws=300, seed=4))
        sr.append(smoothing_metrics(f.pi_draws(), d, ws).sr)
    assert sr[0] < sr[1] < sr[2]
    assert sr[0] < 0.5


def test_aggregate_matches_brute_force():
    rng = np.random.default_rng(5)
    M = 5
    d = random_survey(rng, M=M, n=30)
    ws = rescale_weights(d)
    N = rng.integers(50, 200, M).astype(float)
    pi = rng.uniform(0.02, 0.98, size=(40, d.n))
    s = aggregate_stage1(pi, d, ws, N, T_tilde=40, seed=0)
    ref = stage1_ref(pi, d.area, d.y, d.w_raw, N)
    for i, a in enumerate(s.area):
        r = ref[a]
        np.testing.assert_allclose(s.theta[i], r["theta"], atol=1e-10)
        assert s.tau_bar[i] == pytest.approx(r["tau"].mean(), abs=1e-10)
        assert s.var_theta[i] == pytest.approx(r["theta"].var(ddof=1), abs=1e-10)
        assert s.psi_d[i] == pytest.approx(r["psi_d"], abs=1e-10)
        assert s.psi_bar[i] == pytest.approx(r["psi"].mean(), abs=1e-10)
        assert s.mu_direct[i] == pytest.approx(r["mu_d"], abs=1e-12)


def test_identity_smoothing():
    rng = np.random.default_rng(6)
    d = random_survey(rng, n=40)
    ws = rescale_weights(d)
    pi = np.tile(d.y.astype(float), (10, 1))
    s = aggregate_stage1(pi, d, ws, np.full(d.M, 1e4), T_tilde=10)
    multi = s.n_i >= 2
    np.testing.assert_allclose(s.psi_b_mean[multi], 0.0, atol=1e-15)
    assert np.all(np.isnan(s.psi_b_mean[~multi]))  # variance undefined for singletons
    ok = s.stable
    np.testing.assert_allclose(s.theta[ok, 0], logit(s.mu_direct[ok]), atol=1e-12)
    m = smoothing_metrics(pi, d, ws)
    np.testing.assert_allclose(m.sr_draws, 1.0)


def test_constant_half_tau_is_16_psi():
    d = SurveyDataset([0, 0, 0, 0], [1, 0, 1, 0], np.ones(4), 1)
    pi = np.full((5, 4), 0.5)
    s = aggregate_stage1(pi, d, rescale_weights(d), [100.0], T_tilde=5)
    assert s.tau_bar[0] == pytest.approx(16 * s.psi_bar[0])
    np.testing.assert_allclose(s.theta, 0.0, atol=1e-15)


def test_sr_zero_at_overall():
    rng = np.random.default_rng(7)
    d = random_survey(rng, n=50)
    ws = rescale_weights(d)
    overall = np.sum(d.w_raw * d.y) / d.w_raw.sum()
    m = smoothing_metrics(np.full((4, d.n), overall), d, ws)
    np.testing.assert_allclose(m.sr_draws, 0.0, atol=1e-12)


def test_alc_one_when_medians_equal_direct():
    rng = np.random.default_rng(8)
    d = random_survey(rng, n=60)
    ws = rescale_weights(d)
    pi = np.tile(d.y.astype(float), (5, 1))
    assert smoothing_metrics(pi, d, ws).alc == pytest.approx(1.0)
    assert smoothing_metrics(pi, d, ws, intercept=False).alc == pytest.approx(1.0)


def test_no_stable_areas():
    d = SurveyDataset([0, 0, 1, 1], [1, 1, 0, 0], np.ones(4), 2)
    with pytest.raises(NoStableAreas):
        smoothing_metrics(np.full((3, 4), 0.5), d, rescale_weights(d))


def test_linear_in_draws():
    rng = np.random.default_rng(9)
    d = random_survey(rng, n=30)
    ws = rescale_weights(d)
    p1, p2 = rng.uniform(0.1, 0.9, (2, 1, d.n))
    N = np.full(d.M, 500.0)
    avg = aggregate_stage1(np.vstack([(p1 + p2) / 2] * 2), d, ws, N, T_tilde=2)
    sep = aggregate_stage1(np.vstack([p1, p2]), d, ws, N, T_tilde=2)
    mu_avg = expit(avg.theta[:, 0])
    mu_sep = expit(sep.theta).mean(axis=1)
    np.testing.assert_allclose(mu_avg, mu_sep, atol=1e-12)


def test_subset_is_seeded_and_sorted():
    rng = np.random.default_rng(10)
    d = random_survey(rng, n=30)
    ws = rescale_weights(d)
    pi = rng.uniform(0.1, 0.9, (100, d.n))
    a = aggregate_stage1(pi, d, ws, np.full(d.M, 500.0), T_tilde=20, seed=3)
    b = aggregate_stage1(pi, d, ws, np.full(d.M, 500.0), T_tilde=20, seed=3)
    np.testing.assert_array_equal(a.theta, b.theta)
    with pytest.raises(ValueError):
        aggregate_stage1(pi, d, ws, np.full(d.M, 500.0), T_tilde=200)
    c = a.subset_draws(5, seed=1)
    assert c.T_tilde == 5 and c.tau_bar is a.tau_bar


def test_summary_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    d = random_survey(rng, n=30)
    ws = rescale_weights(d)
    s = aggregate_stage1(rng.uniform(0.1, 0.9, (12, d.n)), d, ws, np.full(d.M, 500.0), T_tilde=12)
    write_stage1_summary(s, tmp_path)
    back = read_stage1_summary(tmp_path)
    np.testing.assert_allclose(back.theta, s.theta, rtol=1e-10)
    np.testing.assert_allclose(back.tau_bar, s.tau_bar, rtol=1e-10)
    assert back.area_id == [str(a) for a in s.area_id]
    assert alc_from_summary(back) == pytest.approx(alc_from_summary(s), rel=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_aggregate_properties(seed):
    rng = np.random.default_rng(seed)
    d = random_survey(rng, M=4, n=20)
    ws = rescale_weights(d)
    s = aggregate_stage1(rng.uniform(0, 1, (8, d.n)), d, ws, np.full(4, 100.0), T_tilde=8)
    assert np.all(np.isfinite(s.theta))
    multi = s.n_i >= 2
    assert np.all(s.tau_bar[multi] >= 0)
    assert np.all(np.isnan(s.tau_bar[~multi]))
    assert np.all(s.var_theta >= 0)
