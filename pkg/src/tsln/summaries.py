"""Decision-oriented posterior summaries: odds ratios, exceedance and LISA classes."""
from __future__ import annotations

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .errors import DegenerateNational, DiagnosticsFailed, DrawCountMismatch, TooFewDraws
from .graph import AreaGraph, row_standardize
from .inference import DrawMatrix, convergence_table, hpdi

__all__ = [
    "EVIDENCE",
    "odds_ratio_draws",
    "exceedance",
    "lisa_probabilities",
    "lisa_classify",
    "classify",
    "summarize",
    "national_rollup",
]

EVIDENCE = ("HC", "H", "N", "L", "LC")
RHAT_BAR = 1.03


def odds_ratio_draws(mu, national: float) -> np.ndarray:
    """``[mu / (1 - mu)] / [national / (1 - national)]`` elementwise."""
    if not 0.0 < national < 1.0:
        raise DegenerateNational(f"national reference {national} is not inside (0, 1)")
    mu = np.asarray(mu, dtype=float)
    if np.any((mu <= 0) | (mu >= 1)):
        raise ValueError("prevalence draws must lie inside (0, 1)")
    return (mu / (1.0 - mu)) / (national / (1.0 - national))


def exceedance(or_draws, min_draws: int = 100) -> np.ndarray | float:
    """Posterior probability that the odds ratio exceeds 1 (per column)."""
    a = np.asarray(or_draws, dtype=float)
    if a.shape[0] < min_draws:
        raise TooFewDraws(f"exceedance needs at least {min_draws} draws, got {a.shape[0]}")
    ep = np.mean(a > 1.0, axis=0)
    return float(ep) if np.ndim(ep) == 0 else ep


def lisa_probabilities(mu, national: float, W) -> tuple[np.ndarray, np.ndarray]:
    """Per-area ``P(z > 0)`` and ``P(lag > 0)``.

    ``mu`` has shape ``(T, M)``; ``z = mu - national`` and the spatial lag of
    each draw is ``z W^T`` with ``W`` row-standardized.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.ndim != 2 or mu.shape[1] != W.shape[0]:
        raise DrawCountMismatch(f"draws of shape {mu.shape} do not match a graph of {W.shape[0]} areas")
    z = mu - national
    lag = (W @ z.T).T if sp.issparse(W) else z @ np.asarray(W).T
    return np.mean(z > 0, axis=0), np.mean(lag > 0, axis=0)


def classify(pz, pl) -> np.ndarray:
    """Evidence class from own and neighbourhood exceedance probabilities."""
    pz = np.asarray(pz, dtype=float)
    pl = np.asarray(pl, dtype=float)
    out = np.full(pz.shape, "N", dtype=object)
    hi = pz > 0.8
    lo = pz < 0.2
    out[hi & (pl > 0.8)] = "HC"
    out[hi & (pl <= 0.8)] = "H"
    out[lo & (pl < 0.2)] = "LC"
    out[lo & (pl >= 0.2)] = "L"
    return out


def lisa_classify(mu, national: float, graph_or_weights) -> np.ndarray:
    """Five-way evidence class (HC, H, N, L, LC) for every area."""
    W = row_standardize(graph_or_weights) if isinstance(graph_or_weights, AreaGraph) else graph_or_weights
    return classify(*lisa_probabilities(mu, national, W))


def national_rollup(mu, population) -> np.ndarray:
    """Population-weighted mean prevalence for each draw."""
    pop = np.asarray(population, dtype=float)
    return np.asarray(mu, dtype=float) @ (pop / pop.sum())


def summarize(fit, frame, graph: AreaGraph, national: float, mass: float = 0.95, rhat_bar: float = RHAT_BAR) -> tuple[pd.DataFrame, dict]:
    """Per-area summary table and a national roll-up.

    Parameters
    ----------
    fit : Stage2Fit or DrawMatrix
        A fitted model, or prevalence draws ``(chains, draws, M)`` whose
        names are the area ids.
    frame : AreaFrame
    graph : AreaGraph
        Used for the LISA spatial lag.
    national : float
        Overall direct estimate used as the odds-ratio reference.

    Returns
    -------
    table : DataFrame
        One row per area: ``area_id, median, hpdi_lo, hpdi_hi, cv_pct,
        or_median, or_lo, or_hi, ep, evidence``.
    rollup : dict
        Posterior median and HPDI of the population-weighted prevalence.

    Raises
    ------
    DiagnosticsFailed
        If any area's prevalence has R-hat at or above ``rhat_bar``.
    """
    if isinstance(fit, DrawMatrix):
        mu, r, area_ids = fit.flat(), convergence_table(fit.values)[0], list(fit.names)
    else:
        mu, r, area_ids = fit.mu_flat, np.asarray(fit.diagnostics["rhat_mu"]), fit.area_ids
    bad = ~(r < rhat_bar)
    if bad.any():
        raise DiagnosticsFailed(f"{int(bad.sum())} areas have R-hat >= {rhat_bar} (max {np.nanmax(r):.3f})")
    orr = odds_ratio_draws(mu, national)
    M = mu.shape[1]
    lo = np.empty(M)
    hi = np.empty(M)
    olo = np.empty(M)
    ohi = np.empty(M)
    for i in range(M):
        lo[i], hi[i] = hpdi(mu[:, i], mass)
        olo[i], ohi[i] = hpdi(orr[:, i], mass)
    med = np.median(mu, axis=0)
    table = pd.DataFrame({
        "area_id": area_ids,
        "median": med,
        "hpdi_lo": lo,
        "hpdi_hi": hi,
        "cv_pct": 100.0 * mu.std(axis=0, ddof=1) / med,
        "or_median": np.median(orr, axis=0),
        "or_lo": olo,
        "or_hi": ohi,
        "ep": exceedance(orr),
        "evidence": lisa_classify(mu, national, graph),
    })
    nat = national_rollup(mu, frame.population)
    nlo, nhi = hpdi(nat, mass)
    rollup = {
        "median": float(np.median(nat)),
        "hpdi_lo": nlo,
        "hpdi_hi": nhi,
        "rollup_of_medians": float(np.sum(med * frame.population) / frame.population.sum()),
        "national_direct": float(national),
    }
    return table, rollup
