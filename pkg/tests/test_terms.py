import numpy as np
import pytest

from oracles import TERM_FACTORIES, fd_grad, grad_rel_error, max_grad_error
from tsln.errors import DimensionMismatch, NonFiniteDensity
from tsln.inference import (
    TERM_KINDS,
    BernoulliLogitWeighted,
    Gaussian,
    HalfGaussian,
    ICARPairwise,
    Model,
    ParameterLayout,
    SoftSumToZero,
)


def test_every_kind_has_a_factory():
    assert set(TERM_KINDS) <= set(TERM_FACTORIES)


@pytest.mark.parametrize("kind", sorted(TERM_FACTORIES))
def test_gradient_matches_finite_differences(kind):
    assert max_grad_error(kind, points=25, seed=3) < 1e-5


def test_bernoulli_hand_value():
    L = ParameterLayout()
    eta = L.add("eta", 1)
    m = Model(L, [BernoulliLogitWeighted([1.0], eta, weights=[2.0])])
    lp, g = m.log_density_and_grad(np.zeros(1))
    assert lp == pytest.approx(2 * np.log(0.5))
    np.testing.assert_allclose(g, [1.0])


def test_icar_k2_hand_value():
    # -0.5 (s0 - s1)^2 at s = (a, -a): value -2 a^2, gradient (-2a, 2a)
    a = 0.7
    L = ParameterLayout()
    s = L.add("s", 2)
    m = Model(L, [ICARPairwise(s, [(0, 1)])])
    x = np.array([a, -a])
    lp, g = m.log_density_and_grad(x)
    assert lp == pytest.approx(-0.5 * (2 * a) ** 2)
    np.testing.assert_allclose(g, [-2 * a, 2 * a])
    np.testing.assert_allclose(g, fd_grad(lambda z: m.log_density_and_grad(z)[0], x), atol=1e-8)


def test_gaussian_matches_scipy():
    from scipy import stats

    L = ParameterLayout()
    x = L.add("x", 3)
    m = Model(L, [Gaussian(x, 0.5, 2.0)])
    v = np.array([0.1, -1.0, 3.0])
    ref = stats.norm(0.5, 2.0).logpdf(v).sum()
    lp0 = m.log_density_and_grad(np.full(3, 0.5))[0] - stats.norm(0.5, 2.0).logpdf(np.full(3, 0.5)).sum()
    assert m.log_density_and_grad(v)[0] - lp0 == pytest.approx(ref)


def test_replicated_gaussian_equals_explicit_sum():
    rng = np.random.default_rng(4)
    obs = rng.normal(size=(3, 40))
    L = ParameterLayout()
    th = L.add("th", 3)
    rep = Model(L, [Gaussian(obs, th, 0.8, scale=1 / 40)])
    L2 = ParameterLayout()
    th2 = L2.add("th", 3)
    from tsln.inference import Take

    cols = [Gaussian(obs[:, t], th2, 0.8, scale=1 / 40) for t in range(40)]
    ref = Model(L2, cols)
    x = rng.normal(size=3)
    a, ga = rep.log_density_and_grad(x)
    b, gb = ref.log_density_and_grad(x)
    assert a == pytest.approx(b, abs=1e-10)
    np.testing.assert_allclose(ga, gb, atol=1e-10)


def test_half_gaussian_jacobian():
    # density of u = log(sigma) with sigma ~ HalfNormal(sd)
    from scipy import stats

    L = ParameterLayout()
    u = L.add("u", 1, "log")
    m = Model(L, [HalfGaussian(u, 1.5)])
    us = np.array([-1.0, 0.3])
    lp = [m.log_density_and_grad(np.array([v]))[0] for v in us]
    ref = stats.halfnorm(scale=1.5).logpdf(np.exp(us)) + us
    assert lp[1] - lp[0] == pytest.approx(ref[1] - ref[0])


def test_sum_to_zero_penalises_mean_only():
    L = ParameterLayout()
    s = L.add("s", 4)
    m = Model(L, [SoftSumToZero(s, 0.1)])
    assert m.log_density_and_grad(np.array([1.0, -1.0, 2.0, -2.0]))[0] == 0.0
    assert m.log_density_and_grad(np.full(4, 0.1))[0] == pytest.approx(-0.5)


def test_prior_terms_reject_weights():
    L = ParameterLayout()
    u = L.add("u", 1)
    with pytest.raises(ValueError):
        SoftSumToZero(u, 0.0)
    with pytest.raises(ValueError):
        BernoulliLogitWeighted([1.0], u, weights=[-1.0])


def test_model_input_errors():
    L = ParameterLayout()
    u = L.add("u", 2)
    m = Model(L, [Gaussian(u, 0.0, 1.0)])
    with pytest.raises(DimensionMismatch):
        m.log_density_and_grad(np.zeros(3))
    with pytest.raises(NonFiniteDensity):
        m.log_density_and_grad(np.array([np.nan, 0.0]))


def test_layout_names_and_transforms():
    L = ParameterLayout()
    L.add("a", 1)
    L.add("b", 2, "log")
    L.add("c", 1, "logit")
    assert L.names() == ["a", "b[0]", "b[1]", "c"]
    x = np.array([0.0, 0.0, np.log(2.0), 0.0])
    np.testing.assert_allclose(L.constrain(x, "b"), [1.0, 2.0])
    np.testing.assert_allclose(L.constrain(x, "c"), [0.5])
    with pytest.raises(ValueError):
        L.add("a", 1)
