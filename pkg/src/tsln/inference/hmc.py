"""Hamiltonian Monte Carlo with step-size and diagonal-metric adaptation.

Trajectories have a fixed integration time ``L``; the number of leapfrog
steps is ``ceil(L / eps)`` jittered uniformly by +/-50% each iteration.
Warmup follows the usual windowed scheme: a fast interval tuning only the
step size, doubling slow windows that estimate the diagonal metric, and a
terminal fast interval.  The step size is tuned by Nesterov dual averaging
and frozen at its averaged value when warmup ends.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict

import numpy as np

from ..errors import AllDivergent, NonFiniteAtInit
from .draws import DrawMatrix
from .model import Model

__all__ = ["SamplerConfig", "sample", "chain_rng"]

log = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    draws: int = 1000
    seed: int = 0
    target_accept: float = 0.8
    integration_time: float = 2.0
    max_steps: int = 256
    init_radius: float = 2.0
    thin: int = 1
    max_energy_error: float = 1000.0
    n_jobs: int = 1

    def __post_init__(self):
        if self.chains < 1 or self.draws < 1 or self.warmup < 0 or self.thin < 1:
            raise ValueError("chains, draws and thin must be >= 1; warmup >= 0")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.integration_time <= 0 or self.max_steps < 1:
            raise ValueError("integration_time must be positive and max_steps >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Counter-based stream for one chain, independent of execution order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(chain),))))


class _DualAveraging:
    def __init__(self, eps0: float, delta: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.delta, self.gamma, self.t0, self.kappa = delta, gamma, t0, kappa
        self.restart(eps0)

    def restart(self, eps0: float):
        self.mu = math.log(10.0 * eps0)
        self.count = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept: float) -> float:
        self.count += 1
        eta = 1.0 / (self.count + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - min(1.0, accept))
        x = self.mu - self.s_bar * math.sqrt(self.count) / self.gamma
        w = self.count ** (-self.kappa)
        self.x_bar = (1.0 - w) * self.x_bar + w * x
        return math.exp(x)

    def final(self) -> float:
        return math.exp(self.x_bar)


def _slow_windows(warmup: int) -> list[tuple[int, int]]:
    """(start, end) iteration ranges over which the metric is estimated."""
    if warmup < 20:
        return []
    init_buf, term_buf, base = 75, 50, 25
    if warmup < init_buf + term_buf + base:
        init_buf = int(0.15 * warmup)
        term_buf = int(0.1 * warmup)
        base = warmup - init_buf - term_buf
    end_slow = warmup - term_buf
    windows = []
    start, size = init_buf, base
    while start < end_slow:
        stop = start + size
        if stop + 2 * size > end_slow:
            stop = end_slow
        windows.append((start, stop))
        start, size = stop, 2 * size
    return windows


def _leapfrog(model, x, p, g, eps, n, inv_metric):
    p = p + 0.5 * eps * g
    lp = -np.inf
    for i in range(n):
        x = x + eps * inv_metric * p
        lp, g = model.lp_grad(x)
        if not np.isfinite(lp):
            return x, p, -np.inf, g
        if i + 1 < n:
            p = p + eps * g
    p = p + 0.5 * eps * g
    return x, p, lp, g


def _init_step(model, x, lp, g, inv_metric, eps, rng) -> float:
    """Double or halve ``eps`` until one leapfrog step crosses 80% acceptance."""
    target = math.log(0.8)
    direction = 0
    for _ in range(60):
        p = rng.standard_normal(x.size) / np.sqrt(inv_metric)
        h0 = -lp + 0.5 * np.sum(inv_metric * p * p)
        _, p1, lp1, _ = _leapfrog(model, x, p, g, eps, 1, inv_metric)
        with np.errstate(over="ignore"):  # a blown-up momentum is just a rejection
            h1 = -lp1 + 0.5 * np.sum(inv_metric * p1 * p1) if np.isfinite(lp1) else np.inf
        dh = h0 - h1
        if direction == 0:
            direction = 1 if dh > target else -1
        if direction == 1 and not dh > target:
            break
        if direction == -1 and not dh < target:
            break
        eps = eps * 2.0 if direction == 1 else eps / 2.0
        if eps > 1e7 or eps < 1e-12:
            break
    return float(min(max(eps, 1e-10), 1e6))


def _n_steps(eps: float, cfg: SamplerConfig, rng) -> int:
    base = cfg.integration_time / eps
    lo = max(1, math.ceil(0.5 * base))
    hi = max(lo, math.ceil(1.5 * base))
    return int(min(rng.integers(lo, hi + 1), cfg.max_steps))


def _run_chain(model: Model, x0: np.ndarray, cfg: SamplerConfig, chain: int) -> dict:
    rng = chain_rng(cfg.seed, chain)
    dim = model.dim
    inv_metric = np.ones(dim)
    x = np.array(x0, dtype=float)
    lp, g = model.lp_grad(x)
    eps = _init_step(model, x, lp, g, inv_metric, 1.0, rng) if cfg.warmup > 0 else 0.1
    da = _DualAveraging(eps, cfg.target_accept)
    windows = _slow_windows(cfg.warmup)
    win_end = {stop: start for start, stop in windows}
    in_window = np.zeros(max(cfg.warmup, 1), dtype=bool)
    for start, stop in windows:
        in_window[start:stop] = True
    w_n, w_mean, w_m2 = 0, np.zeros(dim), np.zeros(dim)

    n_keep = cfg.draws
    total = cfg.warmup + n_keep * cfg.thin
    out = np.empty((n_keep, dim))
    accept_sum, div_post, div_warm, steps_sum = 0.0, 0, 0, 0
    k = 0
    for it in range(total):
        n = _n_steps(eps, cfg, rng)
        p0 = rng.standard_normal(dim) / np.sqrt(inv_metric)
        h0 = -lp + 0.5 * np.sum(inv_metric * p0 * p0)
        x1, p1, lp1, g1 = _leapfrog(model, x, p0, g, eps, n, inv_metric)
        if np.isfinite(lp1) and np.all(np.isfinite(g1)):
            with np.errstate(over="ignore"):  # overflow counts as a divergence
                h1 = -lp1 + 0.5 * np.sum(inv_metric * p1 * p1)
            dh = h1 - h0
        else:
            dh = np.inf
        diverged = not (dh <= cfg.max_energy_error)
        accept = 0.0 if diverged else min(1.0, math.exp(-dh)) if dh > 0 else 1.0
        if not diverged and rng.uniform() < accept:
            x, lp, g = x1, lp1, g1

        if it < cfg.warmup:
            div_warm += diverged
            eps = da.update(accept)
            if in_window[it]:
                w_n += 1
                d = x - w_mean
                w_mean += d / w_n
                w_m2 += d * (x - w_mean)
            if (it + 1) in win_end and w_n > 2:
                var = w_m2 / (w_n - 1)
                inv_metric = (w_n / (w_n + 5.0)) * var + 1e-3 * (5.0 / (w_n + 5.0))
                w_n, w_mean, w_m2 = 0, np.zeros(dim), np.zeros(dim)
                eps = _init_step(model, x, lp, g, inv_metric, eps, rng)
                da.restart(eps)
            if it + 1 == cfg.warmup:
                eps = da.final()
        else:
            j = it - cfg.warmup
            accept_sum += accept
            div_post += diverged
            steps_sum += n
            if j % cfg.thin == 0:
                out[k] = x
                k += 1
    n_post = total - cfg.warmup
    return {
        "values": out,
        "divergences": div_post,
        "warmup_divergences": div_warm,
        "step_size": eps,
        "n_steps": steps_sum / n_post,
        "accept_rate": accept_sum / n_post,
        "inv_metric": inv_metric,
        "all_divergent": div_post == n_post,
    }


def _initial_points(model: Model, init, cfg: SamplerConfig) -> np.ndarray:
    dim = model.dim
    if init is not None:
        x0 = np.broadcast_to(np.asarray(init, dtype=float), (cfg.chains, dim)).copy()
        for c in range(cfg.chains):
            lp, g = model.lp_grad(x0[c])
            if not (np.isfinite(lp) and np.all(np.isfinite(g))):
                raise NonFiniteAtInit(f"log density not finite at the initial point of chain {c}")
        return x0
    x0 = np.empty((cfg.chains, dim))
    for c in range(cfg.chains):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(cfg.seed), spawn_key=(c, 1))))
        for _ in range(100):
            cand = rng.uniform(-cfg.init_radius, cfg.init_radius, dim)
            lp, g = model.lp_grad(cand)
            if np.isfinite(lp) and np.all(np.isfinite(g)):
                x0[c] = cand
                break
        else:
            raise NonFiniteAtInit(f"no finite initial point found for chain {c} after 100 attempts")
    return x0


def sample(model: Model, init=None, config: SamplerConfig | None = None) -> DrawMatrix:
    """Draw from ``model`` with adaptive HMC.

    Parameters
    ----------
    model : Model
    init : array, optional
        Initial point, shape ``(dim,)`` (shared) or ``(chains, dim)``.
        Defaults to uniform draws on ``[-init_radius, init_radius]``.
    config : SamplerConfig

    Returns
    -------
    DrawMatrix
        Post-warmup draws on the unconstrained scale, with per-chain
        sampler statistics in ``stats``.
    """
    cfg = config or SamplerConfig()
    x0 = _initial_points(model, init, cfg)
    if cfg.n_jobs != 1 and cfg.chains > 1:
        from joblib import Parallel, delayed

        res = Parallel(n_jobs=cfg.n_jobs)(delayed(_run_chain)(model, x0[c], cfg, c) for c in range(cfg.chains))
    else:
        res = [_run_chain(model, x0[c], cfg, c) for c in range(cfg.chains)]
    if any(r["all_divergent"] for r in res):
        raise AllDivergent("every post-warmup transition of at least one chain diverged")
    stats = {key: [r[key] for r in res] for key in ("divergences", "warmup_divergences", "step_size", "n_steps", "accept_rate")}
    stats["inv_metric"] = np.stack([r["inv_metric"] for r in res])
    dm = DrawMatrix(np.stack([r["values"] for r in res]), model.layout.names(), stats)
    log.debug("sampled %d chains: step sizes %s, divergences %s", cfg.chains, stats["step_size"], stats["divergences"])
    return dm
