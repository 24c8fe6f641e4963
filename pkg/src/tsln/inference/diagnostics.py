"""Convergence diagnostics and highest posterior density intervals."""
from __future__ import annotations

import math

import numpy as np
from scipy import stats

from ..errors import TooFewDraws, TooFewSamples

__all__ = ["rhat", "ess_bulk", "rhat_ess", "mcse_mean", "hpdi", "convergence_table"]


def _check(chains: np.ndarray) -> np.ndarray:
    a = np.asarray(chains, dtype=float)
    if a.ndim != 2:
        raise ValueError("expected a (chains, draws) array")
    if a.shape[0] < 2 or a.shape[1] < 4:
        raise TooFewDraws(f"need >= 2 chains with >= 4 draws each, got {a.shape}")
    return a


def _split(a: np.ndarray) -> np.ndarray:
    half = a.shape[1] // 2
    return np.vstack((a[:, :half], a[:, -half:]))


def _z_scale(a: np.ndarray) -> np.ndarray:
    r = stats.rankdata(a, method="average").reshape(a.shape)
    return stats.norm.ppf((r - 0.375) / (a.size + 0.25))


def _rhat_basic(a: np.ndarray) -> float:
    n = a.shape[1]
    w = np.mean(np.var(a, axis=1, ddof=1))
    b = n * np.var(np.mean(a, axis=1), ddof=1)
    if w <= 0:
        return float("nan")
    return float(np.sqrt(((n - 1) / n * w + b / n) / w))


def rhat(chains) -> float:
    """Rank-normalised split R-hat (max of bulk and folded-tail versions).

    Returns NaN when every draw is identical.
    """
    a = _check(chains)
    if np.ptp(a) == 0:
        return float("nan")
    s = _split(a)
    bulk = _rhat_basic(_z_scale(s))
    folded = np.abs(s - np.median(s))
    tail = _rhat_basic(_z_scale(folded)) if np.ptp(folded) > 0 else bulk
    return float(max(bulk, tail))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    m = 2 ** math.ceil(math.log2(2 * n))
    f = np.fft.rfft(x - x.mean(axis=-1, keepdims=True), n=m)
    return np.fft.irfft(f * np.conj(f), n=m)[..., :n] / n


def _ess(a: np.ndarray) -> float:
    m, n = a.shape
    acov = _autocov(a)
    chain_mean = a.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n + (np.var(chain_mean, ddof=1) if m > 1 else 0.0)
    if var_plus <= 0:
        return float("nan")
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer initial positive sequence, then monotone
    t = 0
    pair_sums = []
    while t + 1 < n:
        p = rho[t] + rho[t + 1]
        if p < 0:
            break
        pair_sums.append(p)
        t += 2
    ps = np.minimum.accumulate(np.asarray(pair_sums)) if pair_sums else np.array([1.0])
    tau = -1.0 + 2.0 * ps.sum()
    tau = max(tau, 1.0 / math.log10(m * n))
    return float(m * n / tau)


def ess_bulk(chains) -> float:
    """Bulk effective sample size on rank-normalised split chains."""
    a = _check(chains)
    if np.ptp(a) == 0:
        return float("nan")
    return _ess(_z_scale(_split(a)))


def rhat_ess(dm, param) -> tuple[float, float]:
    """R-hat and bulk ESS of one parameter of a :class:`DrawMatrix`.

    ``param`` is an index or a parameter name.
    """
    j = dm.index(param) if isinstance(param, str) else int(param)
    a = dm.values[:, :, j]
    return rhat(a), ess_bulk(a)


def mcse_mean(chains) -> float:
    """Monte Carlo standard error of the posterior mean (plain ESS)."""
    a = _check(chains)
    sd = a.std(ddof=1)
    if sd == 0:
        return 0.0
    return float(sd / math.sqrt(_ess(_split(a))))


def convergence_table(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """R-hat and bulk ESS for every column of a (chains, draws, K) array."""
    K = values.shape[2]
    r = np.empty(K)
    e = np.empty(K)
    for k in range(K):
        r[k] = rhat(values[:, :, k])
        e[k] = ess_bulk(values[:, :, k])
    return r, e


def hpdi(samples, mass: float = 0.95) -> tuple[float, float]:
    """Narrowest interval spanning ``ceil(mass * n)`` order-statistic gaps.

    The interval runs from sorted sample ``i`` to sample ``i + k`` with
    ``k = ceil(mass * n)``; among equally narrow windows the lowest one is
    returned.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n < 20:
        raise TooFewSamples(f"HPDI needs at least 20 samples, got {n}")
    if not 0.0 < mass < 1.0:
        raise ValueError("mass must lie in (0, 1)")
    k = min(math.ceil(mass * n - 1e-9), n - 1)
    widths = x[k:] - x[: n - k]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k])
