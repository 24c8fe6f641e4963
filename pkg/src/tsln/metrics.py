"""Performance metrics against known truth and benchmark-level concordance."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import EmptyGroup, ZeroTruth
from .inference import hpdi

__all__ = ["AreaMetrics", "MetricReport", "area_metrics", "interval_overlap", "group_metrics", "metric_report"]


@dataclass
class AreaMetrics:
    arb: np.ndarray
    rrmse: np.ndarray
    covered: np.ndarray
    width: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def area_metrics(mu, truth, mass: float = 0.95) -> AreaMetrics:
    """Per-area ARB, RRMSE, HPDI coverage and width.

    Parameters
    ----------
    mu : array (T, M)
        Posterior draws.
    truth : array (M,)
        True proportions in (0, 1).

    Notes
    -----
    ``ARB = |mean_t(mu_t - truth)| / truth``,
    ``RRMSE = sqrt(mean_t (mu_t - truth)^2) / truth`` and coverage uses
    strict inequalities ``lo < truth < hi``.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    truth = np.asarray(truth, dtype=float)
    if np.any(truth <= 0):
        raise ZeroTruth("relative metrics need strictly positive truth")
    err = mu - truth
    arb = np.abs(err.mean(axis=0)) / truth
    rrmse = np.sqrt(np.mean(err**2, axis=0)) / truth
    M = truth.size
    lo = np.empty(M)
    hi = np.empty(M)
    for i in range(M):
        lo[i], hi[i] = hpdi(mu[:, i], mass)
    return AreaMetrics(arb, rrmse, (lo < truth) & (truth < hi), hi - lo, lo, hi)


def interval_overlap(a_lo, a_hi, b_lo, b_hi) -> np.ndarray:
    """Share of interval ``a`` covered by interval ``b``, clipped to [0, 1].

    A zero-width ``a`` counts as fully covered when it lies inside ``b``.
    """
    a_lo, a_hi, b_lo, b_hi = (np.asarray(v, dtype=float) for v in (a_lo, a_hi, b_lo, b_hi))
    inter = np.clip(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0.0, None)
    width = a_hi - a_lo
    with np.errstate(divide="ignore", invalid="ignore"):
        iop = np.where(width > 0, inter / width, ((a_lo >= b_lo) & (a_hi <= b_hi)).astype(float))
    return np.clip(iop, 0.0, 1.0)


def group_metrics(mu, population, groups, mass: float = 0.95, z: float = 1.96) -> pd.DataFrame:
    """Benchmark-level ARB, RRMSE and interval overlap.

    ``C_k`` is the population-weighted mean of ``mu`` over a group's member
    areas, per draw; it is compared with the group direct estimate
    ``target`` (ARB, RRMSE relative to ``target``), and its HPDI with the
    direct interval ``target +/- z se``.

    Parameters
    ----------
    groups : list of BenchmarkGroup
    """
    if not groups:
        raise EmptyGroup("no groups supplied")
    mu = np.asarray(mu, dtype=float)
    pop = np.asarray(population, dtype=float)
    rows = []
    for g in groups:
        if g.members.size == 0:
            raise EmptyGroup(f"group {g.system}:{g.label} has no member areas")
        w = pop[g.members] / pop[g.members].sum()
        c = mu[:, g.members] @ w
        lo, hi = hpdi(c, mass)
        err = c - g.target
        rows.append({
            "system": g.system,
            "group": g.label,
            "target": g.target,
            "se": g.se,
            "c_mean": float(c.mean()),
            "arb": float(abs(err.mean()) / g.target),
            "rrmse": float(np.sqrt(np.mean(err**2)) / g.target),
            "hpdi_lo": lo,
            "hpdi_hi": hi,
            "iop": float(interval_overlap(lo, hi, g.target - z * g.se, g.target + z * g.se)),
        })
    return pd.DataFrame(rows)


@dataclass
class MetricReport:
    """Summary of one fit against truth.

    ``coverage`` pools areas; ``per_area`` holds the area breakdown and
    ``groups`` the benchmark-level table (if any).
    """

    marb: float
    mrrmse: float
    coverage: float
    mean_hpdi_width: float
    per_area: pd.DataFrame
    groups: pd.DataFrame | None = None
    extra: dict = field(default_factory=dict)

    @property
    def miop(self) -> float:
        return float(self.groups["iop"].mean()) if self.groups is not None else float("nan")

    @property
    def group_marb(self) -> float:
        return float(self.groups["arb"].mean()) if self.groups is not None else float("nan")

    @property
    def group_mrrmse(self) -> float:
        return float(self.groups["rrmse"].mean()) if self.groups is not None else float("nan")

    def to_dict(self) -> dict:
        out = {
            "marb": self.marb,
            "mrrmse": self.mrrmse,
            "coverage": self.coverage,
            "mean_hpdi_width": self.mean_hpdi_width,
        }
        if self.groups is not None:
            out.update(miop=self.miop, group_marb=self.group_marb, group_mrrmse=self.group_mrrmse)
        out.update(self.extra)
        return out


def metric_report(mu, truth, area_ids=None, population=None, groups=None, mass: float = 0.95) -> MetricReport:
    am = area_metrics(mu, truth, mass)
    per_area = pd.DataFrame({
        "area_id": area_ids if area_ids is not None else np.arange(len(am.arb)),
        "arb": am.arb,
        "rrmse": am.rrmse,
        "covered": am.covered,
        "hpdi_lo": am.lo,
        "hpdi_hi": am.hi,
        "width": am.width,
    })
    gm = group_metrics(mu, population, groups, mass) if groups else None
    return MetricReport(float(am.arb.mean()), float(am.rrmse.mean()), float(am.covered.mean()), float(am.width.mean()), per_area, gm)


def pooled_coverage(reports: list[MetricReport]) -> float:
    """Coverage pooled over areas and replicates."""
    return float(np.mean(np.concatenate([r.per_area["covered"].to_numpy() for r in reports])))


def per_area_coverage(reports: list[MetricReport]) -> pd.Series:
    """Coverage of each area across replicates."""
    df = pd.concat([r.per_area[["area_id", "covered"]] for r in reports])
    return df.groupby("area_id")["covered"].mean()


__all__ += ["pooled_coverage", "per_area_coverage"]
