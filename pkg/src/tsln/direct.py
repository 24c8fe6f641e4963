"""Survey weights and design-based (Hajek) direct estimation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .errors import EmptyArea, EmptyGroup, UnknownPopulation, ZeroPoint

__all__ = [
    "SurveyDataset",
    "WeightSet",
    "DirectEstimate",
    "rescale_weights",
    "sampling_variance",
    "hajek",
    "direct_estimates",
    "national_direct",
    "aggregate_direct",
    "cv",
]


@dataclass(frozen=True, eq=False)
class SurveyDataset:
    """Individual-level survey records.

    Parameters
    ----------
    area : int array (n,)
        Area index of each record, in ``[0, M)``.
    y : array (n,)
        Binary outcome.
    w_raw : array (n,)
        Positive design weights.
    M : int
        Total number of areas (sampled and non-sampled).
    area_ids : sequence, optional
        Identifier for each of the ``M`` areas; defaults to ``range(M)``.
    covariates : DataFrame, optional
        Extra per-record columns (continuous covariates, categorical
        covariates, grouping factors), aligned with ``y``.
    """

    area: np.ndarray
    y: np.ndarray
    w_raw: np.ndarray
    M: int
    area_ids: Optional[tuple] = None
    covariates: Optional[pd.DataFrame] = field(default=None, repr=False)

    def __post_init__(self):
        area = np.asarray(self.area, dtype=np.int64)
        y = np.asarray(self.y)
        w = np.asarray(self.w_raw, dtype=float)
        if not (area.shape == y.shape == w.shape) or area.ndim != 1:
            raise ValueError("area, y and w_raw must be 1-d arrays of equal length")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("y must be binary (0/1)")
        if not (np.all(np.isfinite(w)) and np.all(w > 0)):
            raise ValueError("raw weights must be finite and positive")
        if area.size and (area.min() < 0 or area.max() >= self.M):
            raise ValueError(f"area index outside [0, {self.M})")
        ids = tuple(range(self.M)) if self.area_ids is None else tuple(self.area_ids)
        if len(ids) != self.M:
            raise ValueError("area_ids must have length M")
        if self.covariates is not None and len(self.covariates) != len(y):
            raise ValueError("covariates must have one row per record")
        object.__setattr__(self, "area", area)
        object.__setattr__(self, "y", y.astype(np.int8))
        object.__setattr__(self, "w_raw", w)
        object.__setattr__(self, "area_ids", ids)
        if self.covariates is not None:
            object.__setattr__(self, "covariates", self.covariates.reset_index(drop=True))

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def n_i(self) -> np.ndarray:
        """Sample size of every area (zeros for non-sampled areas)."""
        return np.bincount(self.area, minlength=self.M)

    @property
    def sampled(self) -> np.ndarray:
        return np.flatnonzero(self.n_i > 0)

    def subset_areas(self, areas) -> "SurveyDataset":
        keep = np.isin(self.area, np.asarray(areas))
        cov = None if self.covariates is None else self.covariates.loc[keep]
        return SurveyDataset(self.area[keep], self.y[keep], self.w_raw[keep], self.M, self.area_ids, cov)


@dataclass(frozen=True)
class WeightSet:
    """``w`` sums to ``n_i`` within each area; ``w_tilde`` sums to ``n`` overall."""

    w: np.ndarray
    w_tilde: np.ndarray


@dataclass(frozen=True)
class DirectEstimate:
    mu: float
    psi: Optional[float]
    n: int
    N: float
    stable: bool


def rescale_weights(d: SurveyDataset) -> WeightSet:
    """Within-area (direct estimation) and global (pseudo-likelihood) weights."""
    n_i = d.n_i
    tot_i = np.bincount(d.area, weights=d.w_raw, minlength=d.M)
    w = n_i[d.area] * d.w_raw / tot_i[d.area]
    w_tilde = d.n * d.w_raw / d.w_raw.sum()
    return WeightSet(w, w_tilde)


def sampling_variance(w, values, center, n: int, N: float) -> float:
    """Approximate sampling variance of a Hajek-type mean.

    ``(1/n) (1 - n/N) (1/(n-1)) sum(w^2 (values - center)^2)``; undefined
    (NaN) for ``n < 2``.
    """
    if n < 2:
        return float("nan")
    w = np.asarray(w, dtype=float)
    r = np.asarray(values, dtype=float) - center
    return float((1.0 - n / N) / (n * (n - 1)) * np.sum(w * w * r * r))


def _check_population(N, n, label) -> float:
    if N is None or not np.isfinite(N) or N <= 0:
        raise UnknownPopulation(f"population of {label} is unknown or non-positive: {N!r}")
    if N < n:
        raise UnknownPopulation(f"population of {label} ({N}) is smaller than its sample ({n})")
    return float(N)


def hajek(d: SurveyDataset, ws: WeightSet, area: int, N: float) -> DirectEstimate:
    """Hajek estimate, sampling variance and stability flag for one area.

    A singleton sample returns ``psi=None`` and ``stable=False``.
    """
    mask = d.area == area
    n = int(mask.sum())
    if n == 0:
        raise EmptyArea(f"area {d.area_ids[area]!r} has no sampled records")
    N = _check_population(N, n, d.area_ids[area])
    w, y = ws.w[mask], d.y[mask]
    mu = float(np.sum(w * y) / n)
    if n == 1:
        return DirectEstimate(mu, None, n, N, False)
    psi = sampling_variance(w, y, mu, n, N)
    return DirectEstimate(mu, psi, n, N, bool(0.0 < mu < 1.0))


def _per_area(d: SurveyDataset, ws: WeightSet, populations):
    """Vectorised Hajek estimates over all sampled areas."""
    n_i = d.n_i
    areas = np.flatnonzero(n_i > 0)
    pop = np.asarray(populations, dtype=float)
    n = n_i[areas]
    N = pop[areas]
    for a, Na, na in zip(areas, N, n):
        _check_population(Na, na, d.area_ids[a])
    mu_all = np.bincount(d.area, weights=ws.w * d.y, minlength=d.M) / np.maximum(n_i, 1)
    r = d.y - mu_all[d.area]
    ss = np.bincount(d.area, weights=ws.w**2 * r**2, minlength=d.M)[areas]
    mu = mu_all[areas]
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = np.where(n >= 2, (1.0 - n / N) / (n * (n - 1.0)) * ss, np.nan)
    stable = (n >= 2) & (mu > 0) & (mu < 1)
    return areas, mu, psi, n, N, stable


def direct_estimates(d: SurveyDataset, ws: WeightSet, populations) -> pd.DataFrame:
    """Direct estimates for every sampled area.

    Returns a frame indexed by area index with columns
    ``area_id, mu, psi, n, N, stable``.
    """
    areas, mu, psi, n, N, stable = _per_area(d, ws, populations)
    return pd.DataFrame(
        {"area_id": [d.area_ids[a] for a in areas], "mu": mu, "psi": psi, "n": n, "N": N, "stable": stable},
        index=pd.Index(areas, name="area"),
    )


def national_direct(d: SurveyDataset) -> float:
    """Overall Hajek estimate pooling every record with its raw weight."""
    return float(np.sum(d.w_raw * d.y) / np.sum(d.w_raw))


def aggregate_direct(d: SurveyDataset, groups, populations) -> pd.DataFrame:
    """Group-level Hajek estimates from pooled records.

    Parameters
    ----------
    groups : array-like of length M
        Group label of every area; ``None``/NaN marks areas outside all
        groups.
    populations : array-like of length M
        Area populations; a group's population is the sum over its member
        areas, sampled or not.

    Returns
    -------
    DataFrame indexed by group label with ``mu, psi, n, N, stable``.
    Raw weights are renormalised to sum to the group sample size, then the
    area-level formulas are applied to the pooled records.
    """
    labels = pd.Series(list(groups), dtype=object)
    if len(labels) != d.M:
        raise ValueError("groups must give one label per area")
    pop = np.asarray(populations, dtype=float)
    member = labels.notna().to_numpy()
    rows = {}
    for g in pd.unique(labels[member]):
        areas = np.flatnonzero((labels == g).to_numpy())
        mask = np.isin(d.area, areas)
        n = int(mask.sum())
        if n == 0:
            raise EmptyGroup(f"benchmark group {g!r} has no sampled records")
        N = _check_population(pop[areas].sum(), n, f"group {g!r}")
        wr, y = d.w_raw[mask], d.y[mask]
        w = n * wr / wr.sum()
        mu = float(np.sum(w * y) / n)
        psi = sampling_variance(w, y, mu, n, N)
        rows[g] = {"mu": mu, "psi": psi, "n": n, "N": N, "stable": bool(n >= 2 and 0 < mu < 1)}
    out = pd.DataFrame.from_dict(rows, orient="index")
    out.index.name = "group"
    return out


def cv(point: float, sd: float) -> float:
    """Coefficient of variation in percent."""
    if point == 0:
        raise ZeroPoint("coefficient of variation undefined at a zero point estimate")
    return 100.0 * sd / abs(point)
