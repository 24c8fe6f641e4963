"""Synthetic census with informative within-area sampling.

A population of areas with known prevalences is generated once; repeated
survey samples are then drawn by selecting areas with probability
proportional to size and, within each selected area, individuals with
probabilities that favour ``y = 0``.  The resulting weights are therefore
informative: ignoring them biases prevalence estimates downward.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import logit

from . import seeds
from .direct import SurveyDataset
from .errors import SampleExceedsPopulation

__all__ = [
    "CensusConfig",
    "SyntheticCensus",
    "generate_census",
    "draw_sample",
    "sample_statistics",
]


@dataclass(frozen=True)
class CensusConfig:
    """Census and design parameters.

    ``pop_mode="range"`` draws each area population uniformly from the
    integers in ``pop_range``; ``pop_mode="choice"`` draws from the two-point
    set ``pop_choices``.
    """

    areas: int = 100
    u_range: tuple = (0.1, 0.4)
    pop_mode: str = "range"
    pop_range: tuple = (500, 3000)
    pop_choices: tuple = (500, 3000)
    g_sd: float = 0.01
    sampling_fraction: float = 0.004
    sampled_areas: int = 60
    h_scale: float = 0.8

    def __post_init__(self):
        lo, hi = self.u_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("u_range must lie inside (0, 1)")
        if self.pop_mode not in ("range", "choice"):
            raise ValueError("pop_mode must be 'range' or 'choice'")
        if not 1 <= self.sampled_areas <= self.areas:
            raise ValueError("sampled_areas must be in [1, areas]")
        if self.sampling_fraction <= 0 or self.g_sd < 0 or self.h_scale < 0:
            raise ValueError("sampling_fraction must be positive; g_sd and h_scale non-negative")

    @property
    def area_sample_scale(self) -> float:
        # per-area fraction inflated so the expected total matches the design
        return self.areas / self.sampled_areas * self.sampling_fraction


@dataclass
class SyntheticCensus:
    """Unit-level population.

    Unit arrays (``area``, ``y``, ``z``, ``pi``, ``w``) are area-major; area
    arrays have length ``M``.
    """

    area: np.ndarray
    y: np.ndarray
    z: np.ndarray
    pi: np.ndarray
    w: np.ndarray
    N: np.ndarray
    mu: np.ndarray
    U: np.ndarray
    k: np.ndarray
    n_target: np.ndarray
    config: CensusConfig = field(default_factory=CensusConfig)

    @property
    def M(self) -> int:
        return self.N.size

    @property
    def size(self) -> int:
        return self.y.size

    @property
    def area_ids(self) -> list[str]:
        return [f"a{i:03d}" for i in range(self.M)]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.N)])

    def areas_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "area_id": self.area_ids,
            "population": self.N,
            "mu_true": self.mu,
            "U": self.U,
            "k": self.k,
            "n_target": self.n_target,
        })


def generate_census(seed: int, config: CensusConfig | None = None) -> SyntheticCensus:
    """Generate the census from the ``"census"`` sub-stream of ``seed``."""
    cfg = config or CensusConfig()
    rng = seeds.rng(seed, "census")
    M = cfg.areas
    U = np.linspace(cfg.u_range[0], cfg.u_range[1], M)
    if cfg.pop_mode == "range":
        N = rng.integers(cfg.pop_range[0], cfg.pop_range[1] + 1, M)
    else:
        N = rng.choice(np.asarray(cfg.pop_choices), M)
    Y = rng.binomial(N, U)
    mu = Y / N
    g = rng.normal(0.0, cfg.g_sd, M)
    # guard the logit against an all-0 or all-1 area
    k_star = logit(np.clip(mu, 0.5 / N, 1.0 - 0.5 / N)) + g
    k = (k_star - k_star.mean()) / k_star.std()
    n_target = np.rint(cfg.area_sample_scale * N).astype(np.int64)

    area = np.repeat(np.arange(M), N)
    offsets = np.concatenate([[0], np.cumsum(N)])
    y = np.zeros(area.size, dtype=np.int8)
    for i in range(M):
        y[offsets[i]:offsets[i] + Y[i]] = 1
    h = rng.exponential(1.0, area.size)
    z = (y == 0) + cfg.h_scale * h
    zsum = np.bincount(area, weights=z, minlength=M)
    pi = z / zsum[area]
    with np.errstate(divide="ignore"):
        w = 1.0 / (n_target[area] * pi)
    return SyntheticCensus(area, y, z, pi, w, N, mu, U, k, n_target, cfg)


@dataclass
class SurveySample:
    """A survey drawn from a census plus what evaluation needs."""

    data: SurveyDataset
    areas: np.ndarray
    populations: np.ndarray
    truth: np.ndarray
    k: np.ndarray

    def survey_frame(self) -> pd.DataFrame:
        d = self.data
        return pd.DataFrame({
            "area_id": [d.area_ids[a] for a in d.area],
            "y": d.y,
            "w_raw": d.w_raw,
        })


def draw_sample(c: SyntheticCensus, seed: int, replicate: int = 0) -> SurveySample:
    """Two-stage informative sample from the ``("replicate", r)`` sub-stream.

    Areas are drawn with probability proportional to ``N_i`` without
    replacement; within each selected area ``n_i`` units are drawn without
    replacement with probabilities ``pi``.  numpy's weighted sampling
    without replacement is the successive draw-remove-renormalise scheme.
    Weights ``1 / (n_i pi)`` are rescaled to sum to ``N_i`` in each area.
    """
    cfg = c.config
    rng = seeds.rng(seed, "replicate", replicate)
    areas = np.sort(rng.choice(c.M, size=cfg.sampled_areas, replace=False, p=c.N / c.N.sum()))
    off = c.offsets
    idx_parts = []
    w_parts = []
    for a in areas:
        n_a = int(c.n_target[a])
        p = c.pi[off[a]:off[a + 1]]
        if n_a > np.count_nonzero(p):
            raise SampleExceedsPopulation(f"area {a} needs {n_a} units but only {np.count_nonzero(p)} are selectable")
        if n_a == 0:
            continue
        j = rng.choice(c.N[a], size=n_a, replace=False, p=p)
        w = c.w[off[a] + j]
        idx_parts.append(off[a] + j)
        w_parts.append(w * c.N[a] / w.sum())
    idx = np.concatenate(idx_parts)
    d = SurveyDataset(c.area[idx], c.y[idx], np.concatenate(w_parts), c.M, tuple(c.area_ids))
    return SurveySample(d, areas, c.N.astype(float), c.mu.copy(), c.k.copy())


def sample_statistics(c: SyntheticCensus, seed: int, replicates: int = 100) -> pd.DataFrame:
    """Per-replicate design statistics.

    ``median_n_i`` is the median sample size over all ``M`` areas (zero for
    areas not selected); ``stable_fraction`` is the share of selected areas
    whose direct estimate lies strictly inside (0, 1) with ``n_i >= 2``.
    """
    rows = []
    for r in range(replicates):
        s = draw_sample(c, seed, r)
        n_i = s.data.n_i
        ysum = np.bincount(s.data.area, weights=s.data.y, minlength=c.M)
        sel = n_i > 0
        stable = (n_i >= 2) & (ysum > 0) & (ysum < n_i)
        rows.append({
            "replicate": r,
            "n": s.data.n,
            "median_n_i": float(np.median(n_i)),
            "median_n_i_sampled": float(np.median(n_i[sel])),
            "stable_fraction": stable.sum() / sel.sum(),
        })
    return pd.DataFrame(rows)
