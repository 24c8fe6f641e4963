"""Closed library of log-density terms with exact gradients.

Every term returns its log density (up to an additive constant) and adds
its gradient with respect to the unconstrained vector into ``grad``.
Likelihood terms accept a per-observation power ``weights`` (survey
pseudo-likelihood) and a global power ``scale`` (e.g. ``1/T`` when T
replicated observations stand in for one).
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit, log_expit

from .expr import Node, as_node

__all__ = [
    "DensityTerm",
    "BernoulliLogitWeighted",
    "Gaussian",
    "HalfGaussian",
    "StudentT",
    "UniformLogit",
    "ICARPairwise",
    "SoftSumToZero",
    "TERM_KINDS",
]


class DensityTerm:
    kind = "abstract"
    is_likelihood = False

    def __init__(self, weights=None, scale: float = 1.0):
        if weights is not None and not self.is_likelihood:
            raise ValueError(f"{self.kind} is a prior term; per-observation weights are not allowed")
        if weights is not None:
            weights = np.asarray(weights, dtype=float)
            if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
                raise ValueError("observation weights must be finite and positive")
        if not (np.isfinite(scale) and scale > 0):
            raise ValueError("scale must be finite and positive")
        self.weights = weights
        self.scale = float(scale)

    def logp_grad(self, x, tape: dict, grad: np.ndarray) -> float:
        raise NotImplementedError

    def _power(self, v):
        return v * self.weights if self.weights is not None else v

    def __repr__(self):
        return f"{type(self).__name__}()"


class BernoulliLogitWeighted(DensityTerm):
    """``sum_j w_j log Bernoulli(y_j | logistic(eta_j))``."""

    kind = "bernoulli_logit_weighted"
    is_likelihood = True

    def __init__(self, y, eta: Node, weights=None, scale: float = 1.0):
        super().__init__(weights, scale)
        self.y = np.asarray(y, dtype=float)
        self.eta = as_node(eta)

    def logp_grad(self, x, tape, grad):
        eta = self.eta.value(x, tape)
        ll = self.y * eta + log_expit(-eta)  # y*eta - log(1 + e^eta)
        g = self.y - expit(eta)
        c = self.scale
        self.eta.backprop(c * self._power(g), x, tape, grad)
        return c * float(np.sum(self._power(ll)))


class Gaussian(DensityTerm):
    """``x ~ N(mu, sd^2)`` with any of ``x``, ``mu``, ``sd`` bound to parameters.

    A constant 2-d ``x`` of shape ``(k, T)`` holds T replicated
    observations of each of k means; it is reduced once to per-row
    sufficient statistics, which is exact for value and gradient.
    """

    kind = "gaussian"
    is_likelihood = True

    def __init__(self, x, mu=0.0, sd=1.0, weights=None, scale: float = 1.0):
        super().__init__(weights, scale)
        self.x, self.mu, self.sd = as_node(x), as_node(mu), as_node(sd)
        self._rep = None
        if self.x.is_constant and self.x.value(None, {}).ndim == 2:
            xv = self.x.value(None, {})
            xbar = xv.mean(axis=1)
            self._rep = (xv.shape[1], xbar, ((xv - xbar[:, None]) ** 2).mean(axis=1))

    def logp_grad(self, x, tape, grad):
        mu = self.mu.value(x, tape)
        sd = self.sd.value(x, tape)
        c = self.scale
        if self._rep is not None:
            T, xbar, s2 = self._rep
            r = xbar - mu
            q = r * r + s2
            ll = T * (-0.5 * q / sd**2 - np.log(sd))
            if not self.mu.is_constant:
                self.mu.backprop(c * self._power(T * r / sd**2), x, tape, grad)
            if not self.sd.is_constant:
                gsd = self._power(T * (q / sd**3 - 1.0 / sd))
                self.sd.backprop(c * _reduce_to(gsd, np.shape(sd)), x, tape, grad)
            return c * float(np.sum(self._power(ll)))
        xv = self.x.value(x, tape)
        z = (xv - mu) / sd
        ll = -0.5 * z * z - np.log(sd)
        ll = np.broadcast_to(ll, np.broadcast_shapes(np.shape(xv), np.shape(mu), np.shape(sd)))
        if not self.x.is_constant:
            self.x.backprop(c * _reduce_to(self._power(-z / sd), np.shape(xv)), x, tape, grad)
        if not self.mu.is_constant:
            self.mu.backprop(c * _reduce_to(self._power(z / sd), np.shape(mu)), x, tape, grad)
        if not self.sd.is_constant:
            self.sd.backprop(c * _reduce_to(self._power((z * z - 1.0) / sd), np.shape(sd)), x, tape, grad)
        return c * float(np.sum(self._power(ll)))


def _reduce_to(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class HalfGaussian(DensityTerm):
    """Half-normal prior on ``sigma = exp(u)`` including the log-Jacobian.

    ``u`` is the unconstrained (log-scale) node.
    """

    kind = "half_gaussian"

    def __init__(self, u: Node, sd: float = 1.0):
        super().__init__()
        self.u = as_node(u)
        self.sd = float(sd)

    def logp_grad(self, x, tape, grad):
        u = self.u.value(x, tape)
        r = np.exp(u) / self.sd
        self.u.backprop(1.0 - r * r, x, tape, grad)
        return float(np.sum(-0.5 * r * r + u))


class StudentT(DensityTerm):
    kind = "student_t"

    def __init__(self, x: Node, df: float = 3.0, loc: float = 0.0, scale_param: float = 2.0):
        super().__init__()
        self.x = as_node(x)
        self.df, self.loc, self.s = float(df), float(loc), float(scale_param)

    def logp_grad(self, x, tape, grad):
        v = self.x.value(x, tape)
        z = (v - self.loc) / self.s
        nu = self.df
        self.x.backprop(-(nu + 1.0) * z / (nu + z * z) / self.s, x, tape, grad)
        return float(np.sum(-0.5 * (nu + 1.0) * np.log1p(z * z / nu)))


class UniformLogit(DensityTerm):
    """Uniform(0, 1) prior on ``logistic(u)``: the log-Jacobian of the map."""

    kind = "uniform_logit_transformed"

    def __init__(self, u: Node):
        super().__init__()
        self.u = as_node(u)

    def logp_grad(self, x, tape, grad):
        u = self.u.value(x, tape)
        self.u.backprop(1.0 - 2.0 * expit(u), x, tape, grad)
        return float(np.sum(log_expit(u) + log_expit(-u)))


class ICARPairwise(DensityTerm):
    """Unit-precision intrinsic CAR: ``-0.5 * sum_{i~k} (s_i - s_k)^2``."""

    kind = "icar_pairwise"

    def __init__(self, s: Node, edges):
        super().__init__()
        self.s = as_node(s)
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        self.a, self.b = e[:, 0], e[:, 1]

    def logp_grad(self, x, tape, grad):
        s = self.s.value(x, tape)
        d = s[self.a] - s[self.b]
        n = s.shape[-1]
        g = np.bincount(self.b, weights=d, minlength=n) - np.bincount(self.a, weights=d, minlength=n)
        self.s.backprop(g, x, tape, grad)
        return float(-0.5 * np.dot(d, d))


class SoftSumToZero(DensityTerm):
    """Tight Gaussian penalty ``mean(s) ~ N(0, sd^2)`` pinning an ICAR field."""

    kind = "soft_sum_to_zero"

    def __init__(self, s: Node, sd: float):
        super().__init__()
        if not sd > 0:
            raise ValueError("sum-to-zero penalty sd must be positive")
        self.s = as_node(s)
        self.sd = float(sd)

    def logp_grad(self, x, tape, grad):
        s = self.s.value(x, tape)
        n = s.shape[-1]
        m = s.mean()
        self.s.backprop(np.full(n, -m / (self.sd**2 * n)), x, tape, grad)
        return float(-0.5 * (m / self.sd) ** 2)


TERM_KINDS = {
    cls.kind: cls
    for cls in (BernoulliLogitWeighted, Gaussian, HalfGaussian, StudentT, UniformLogit, ICARPairwise, SoftSumToZero)
}
