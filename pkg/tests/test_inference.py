import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import gaussian_model, hpdi_ref
from tsln.errors import NonFiniteAtInit, TooFewSamples
from tsln.inference import (
    DrawMatrix,
    Gaussian,
    Model,
    ParameterLayout,
    SamplerConfig,
    convergence_table,
    ess_bulk,
    hpdi,
    mcse_mean,
    read_draws,
    rhat,
    sample,
    write_draws,
)


FAST = SamplerConfig(chains=4, warmup=500, draws=1000, seed=11)


def test_standard_gaussian_means():
    dm = sample(gaussian_model(np.eye(2)), config=FAST)
    for j in range(2):
        ch = dm.values[:, :, j]
        assert abs(ch.mean()) < 4 * mcse_mean(ch)
        assert rhat(ch) < 1.01


def test_correlated_gaussian_covariance():
    cov = np.array([[1.0, 0.9], [0.9, 1.0]])
    dm = sample(gaussian_model(cov), config=FAST)
    est = np.cov(dm.flat().T)
    np.testing.assert_allclose(est, cov, rtol=0.1, atol=0.05)


def test_sampler_is_deterministic():
    m = gaussian_model(np.eye(3))
    cfg = SamplerConfig(chains=2, warmup=100, draws=50, seed=5)
    a = sample(m, config=cfg)
    b = sample(m, config=cfg)
    np.testing.assert_array_equal(a.values, b.values)
    c = sample(m, config=SamplerConfig(chains=2, warmup=100, draws=50, seed=6))
    assert not np.array_equal(a.values, c.values)


def test_sampler_stats_and_thinning():
    dm = sample(gaussian_model(np.eye(2)), config=SamplerConfig(chains=2, warmup=200, draws=100, thin=2, seed=1))
    assert dm.values.shape == (2, 100, 2)
    assert set(dm.stats) >= {"divergences", "step_size", "n_steps", "accept_rate", "inv_metric"}
    assert all(0 < s for s in dm.stats["step_size"])


def test_init_failure():
    L = ParameterLayout()
    x = L.add("x", 1)
    # sd = 0 makes every point non-finite
    m = Model(L, [Gaussian(x, 0.0, 0.0)])
    with pytest.raises(NonFiniteAtInit):
        sample(m, config=SamplerConfig(chains=1, warmup=10, draws=10))


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(chains=0)
    with pytest.raises(ValueError):
        SamplerConfig(target_accept=1.2)


def test_rhat_iid_chains():
    rng = np.random.default_rng(0)
    vals = np.array([rhat(rng.normal(size=(4, 1000))) for _ in range(200)])
    assert np.mean(vals < 1.01) >= 0.99


def test_rhat_offset_chain():
    rng = np.random.default_rng(1)
    ch = rng.normal(size=(4, 1000))
    ch[0] += 10
    assert rhat(ch) > 1.5


def test_ess_iid_and_autocorrelated():
    rng = np.random.default_rng(2)
    iid = rng.normal(size=(4, 1000))
    assert 3000 < ess_bulk(iid) < 5000
    ar = np.zeros((4, 1000))
    for t in range(1, 1000):
        ar[:, t] = 0.9 * ar[:, t - 1] + rng.normal(size=4)
    # AR(1) with phi = 0.9: ESS / n = (1 - phi) / (1 + phi) ~ 0.053
    assert 100 < ess_bulk(ar) < 400


def test_convergence_table_shape():
    r, e = convergence_table(np.random.default_rng(3).normal(size=(2, 100, 5)))
    assert r.shape == e.shape == (5,)


def test_hpdi_symmetric_close_to_central():
    from scipy import stats

    n = 2001
    x = stats.norm.ppf((np.arange(n) + 0.5) / n)
    lo, hi = hpdi(x, 0.95)
    q = np.quantile(x, [0.025, 0.975])
    # one spacing of the order statistics near each end
    step = np.diff(x)[[45, -46]].max()
    assert abs(lo - q[0]) <= step + 1e-12
    assert abs(hi - q[1]) <= step + 1e-12


def test_hpdi_skewed_is_narrower():
    x = np.random.default_rng(5).exponential(size=4000)
    lo, hi = hpdi(x, 0.9)
    q = np.quantile(x, [0.05, 0.95])
    assert hi - lo < q[1] - q[0]
    assert lo < q[0]


def test_hpdi_too_few():
    with pytest.raises(TooFewSamples):
        hpdi(np.arange(10.0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=20, max_size=80), st.sampled_from([0.5, 0.8, 0.9, 0.95]))
def test_hpdi_matches_brute_force(xs, mass):
    x = np.asarray(xs)
    lo, hi = hpdi(x, mass)
    rlo, rhi = hpdi_ref(x, mass)
    assert hi - lo == pytest.approx(rhi - rlo, abs=1e-12)
    assert np.mean((x >= lo) & (x <= hi)) >= mass


def test_draws_roundtrip(tmp_path):
    dm = DrawMatrix(np.random.default_rng(6).normal(size=(3, 20, 2)), ["a", "b"])
    write_draws(dm, tmp_path, prefix="p", diagnostics={"rhat": np.ones(2)})
    back = read_draws(tmp_path, prefix="p")
    np.testing.assert_allclose(back.values, dm.values, rtol=1e-9)
    assert back.names == ["a", "b"]
    assert (tmp_path / "p_diagnostics.json").exists()


def test_draw_matrix_rejects_nonfinite():
    with pytest.raises(ValueError):
        DrawMatrix(np.full((1, 2, 1), np.nan), ["a"])
