"""Stage 1: survey-weighted individual-level logistic model and its area summaries.

The linear predictor is

    logit(pi_ij) = alpha + x_ij' beta + sum_g sigma_g u_g[k_g(ij)]
                   + sigma_a e_i + sigma_e eps_ij

with every random effect non-centred, ``sigma_e`` fixed, and each record's
Bernoulli likelihood raised to its global weight ``w_tilde``.  Posterior
draws of ``pi`` are then collapsed to area-level logit-scale inputs for the
area model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.special import expit, logit

from .direct import SurveyDataset, WeightSet, national_direct
from .errors import DegenerateProportion, DivergentChains, NoStableAreas, RankDeficientDesign
from .inference import (
    Add,
    BernoulliLogitWeighted,
    Exp,
    Gaussian,
    HalfGaussian,
    MatVec,
    Model,
    Mul,
    ParameterLayout,
    SamplerConfig,
    StudentT,
    Take,
    convergence_table,
    sample,
)
from .inference.draws import DrawMatrix

__all__ = [
    "Stage1Spec",
    "Stage1Fit",
    "Stage1Summary",
    "SmoothingMetrics",
    "design_matrix",
    "build_stage1_model",
    "fit_stage1",
    "aggregate_stage1",
    "smoothing_metrics",
    "alc_from_summary",
    "write_stage1_summary",
    "read_stage1_summary",
]

log = logging.getLogger(__name__)

CLAMP = 1e-6


@dataclass
class Stage1Spec:
    """Structure and priors of the individual-level model.

    Parameters
    ----------
    continuous : list of str
        Continuous covariate columns of ``SurveyDataset.covariates``.
    categorical : dict of str -> reference level
        Categorical columns, dummy-coded against the given reference.
    grouping : dict of str -> int
        Grouping-factor columns (integer codes) and their cardinality; each
        receives an exchangeable Gaussian random effect.
    include_area_effect : bool
        Area-level random intercept over sampled areas.
    residual_sd : float
        Fixed scale of the individual residual.
    """

    continuous: list = field(default_factory=list)
    categorical: dict = field(default_factory=dict)
    grouping: dict = field(default_factory=dict)
    include_area_effect: bool = True
    residual_sd: float = 2.0
    fixed_sd: float = 2.0
    intercept_df: float = 3.0
    intercept_scale: float = 2.0
    scale_sd: float = 1.0
    qr: bool = False

    def __post_init__(self):
        if not self.residual_sd > 0:
            raise ValueError("residual_sd must be positive")
        for name, card in self.grouping.items():
            if int(card) < 1:
                raise ValueError(f"grouping factor {name!r} needs a positive cardinality")


def design_matrix(d: SurveyDataset, spec: Stage1Spec) -> tuple[np.ndarray, list[str]]:
    """Fixed-effect design (without intercept) and its column names.

    Raises
    ------
    RankDeficientDesign
        If ``[1, X]`` does not have full column rank.
    """
    cols, names = [], []
    cov = d.covariates
    needed = list(spec.continuous) + list(spec.categorical) + list(spec.grouping)
    if needed and cov is None:
        raise KeyError("stage-1 spec references covariates but the survey has none")
    for c in spec.continuous:
        cols.append(cov[c].to_numpy(dtype=float))
        names.append(c)
    for c, ref in spec.categorical.items():
        values = cov[c].astype(str)
        levels = sorted(values.unique())
        if str(ref) not in levels:
            raise ValueError(f"reference level {ref!r} not observed in column {c!r}")
        for lev in levels:
            if lev == str(ref):
                continue
            cols.append((values == lev).to_numpy(dtype=float))
            names.append(f"{c}[{lev}]")
    X = np.column_stack(cols) if cols else np.zeros((d.n, 0))
    full = np.column_stack([np.ones(d.n), X])
    if np.linalg.matrix_rank(full) < full.shape[1]:
        raise RankDeficientDesign(f"fixed-effect design {['(intercept)'] + names} is not of full column rank")
    return X, names


def build_stage1_model(d: SurveyDataset, ws: WeightSet, spec: Stage1Spec) -> Model:
    X, xnames = design_matrix(d, spec)
    lay = ParameterLayout()
    n = d.n
    alpha = lay.add("alpha", 1)
    parts = [alpha]
    terms = [StudentT(alpha, spec.intercept_df, 0.0, spec.intercept_scale)]
    if X.shape[1]:
        if spec.qr:
            # eta = Q* b~ with b = R*^-1 b~; the prior stays on b
            Q, R = np.linalg.qr(X)
            scale = np.sqrt(max(n - 1, 1))
            bt = lay.add("beta_qr", X.shape[1])
            parts.append(MatVec(Q * scale, bt))
            terms.append(Gaussian(MatVec(np.linalg.inv(R / scale), bt), 0.0, spec.fixed_sd))
        else:
            beta = lay.add("beta", X.shape[1])
            parts.append(MatVec(X, beta))
            terms.append(Gaussian(beta, 0.0, spec.fixed_sd))
    for gname, card in spec.grouping.items():
        idx = d.covariates[gname].to_numpy()
        if np.any(idx < 0) or np.any(idx >= card):
            raise ValueError(f"grouping factor {gname!r} has codes outside [0, {card})")
        ls = lay.add(f"log_sigma_{gname}", 1, "log")
        u = lay.add(f"z_{gname}", int(card))
        parts.append(Take(Mul(Exp(ls), u), idx.astype(np.int64)))
        terms += [HalfGaussian(ls, spec.scale_sd), Gaussian(u, 0.0, 1.0)]
    if spec.include_area_effect:
        sampled = d.sampled
        local = np.searchsorted(sampled, d.area)
        ls = lay.add("log_sigma_area", 1, "log")
        e = lay.add("z_area", sampled.size)
        parts.append(Take(Mul(Exp(ls), e), local))
        terms += [HalfGaussian(ls, spec.scale_sd), Gaussian(e, 0.0, 1.0)]
    eps = lay.add("eps", n)
    parts.append(Mul(spec.residual_sd, eps))
    terms.append(Gaussian(eps, 0.0, 1.0))
    eta = Add(*parts)
    terms.append(BernoulliLogitWeighted(d.y, eta, weights=ws.w_tilde))
    model = Model(lay, terms, {"eta": eta})
    model.fixed_names = xnames
    return model


@dataclass
class Stage1Fit:
    spec: Stage1Spec
    model: Model
    draws: DrawMatrix
    diagnostics: dict

    def pi_draws(self, max_draws: int | None = None, chunk: int = 256) -> np.ndarray:
        """Posterior draws of every record's probability, shape ``(T, n)``."""
        flat = self.draws.flat()
        if max_draws is not None:
            flat = flat[:max_draws]
        out = [expit(self.model.evaluate("eta", flat[s:s + chunk])) for s in range(0, flat.shape[0], chunk)]
        return np.vstack(out)


def fit_stage1(
    d: SurveyDataset,
    ws: WeightSet,
    spec: Stage1Spec,
    config: SamplerConfig | None = None,
    max_divergence_rate: float = 0.01,
) -> Stage1Fit:
    """Fit the stage-1 model by HMC.

    Raises
    ------
    RankDeficientDesign
    DivergentChains
        If more than ``max_divergence_rate`` of post-warmup transitions
        diverged.
    """
    cfg = config or SamplerConfig()
    model = build_stage1_model(d, ws, spec)
    dm = sample(model, config=cfg)
    total = dm.chains * dm.draws * cfg.thin
    n_div = int(np.sum(dm.stats["divergences"]))
    # residual draws are exchangeable nuisance; report the structural parameters
    keep = [j for j, nm in enumerate(dm.names) if not nm.startswith("eps")]
    r, e = convergence_table(dm.values[:, :, keep])
    diag = {
        "params": [dm.names[j] for j in keep],
        "rhat": r,
        "ess": e,
        "divergences": dm.stats["divergences"],
        "step_size": dm.stats["step_size"],
        "max_rhat": float(np.nanmax(r)) if r.size else float("nan"),
    }
    if n_div > max_divergence_rate * total:
        raise DivergentChains(f"{n_div} of {total} stage-1 transitions diverged")
    return Stage1Fit(spec, model, dm, diag)


@dataclass
class Stage1Summary:
    """Area-level inputs to stage 2, one entry per sampled area.

    ``theta`` holds the retained subset of logit-scale draws, shape
    ``(m, T_tilde)``; the other arrays have length ``m``.
    """

    area: np.ndarray
    area_id: list
    theta: np.ndarray
    tau_bar: np.ndarray
    var_theta: np.ndarray
    psi_d: np.ndarray
    psi_b_mean: np.ndarray
    psi_bar: np.ndarray
    inv_binvar_mean: np.ndarray
    n_i: np.ndarray
    N_i: np.ndarray
    mu_direct: np.ndarray
    stable: np.ndarray
    theta_median: np.ndarray
    mu_s1_median: np.ndarray
    clamp_rate: float = 0.0
    sr_draws: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.area.size

    @property
    def T_tilde(self) -> int:
        return self.theta.shape[1]

    def subset_draws(self, T_tilde: int, seed: int = 0) -> "Stage1Summary":
        """Same summary with a smaller retained subset of ``theta`` draws."""
        idx = _subset_index(self.T_tilde, T_tilde, seed)
        return _replace(self, theta=self.theta[:, idx])


def _replace(s: Stage1Summary, **kw) -> Stage1Summary:
    from dataclasses import replace

    return replace(s, **kw)


def _subset_index(T: int, T_tilde: int, seed) -> np.ndarray:
    if T_tilde > T:
        raise ValueError(f"cannot retain {T_tilde} of {T} draws")
    # prefix of one seeded permutation: smaller subsets nest inside larger ones
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return np.sort(rng.permutation(T)[:T_tilde])


def _area_operator(d: SurveyDataset, ws: WeightSet, areas: np.ndarray) -> sp.csr_array:
    """(n, m) matrix mapping record values to within-area Hajek means."""
    local = np.searchsorted(areas, d.area)
    n_i = d.n_i[areas]
    return sp.csr_array((ws.w / n_i[local], (np.arange(d.n), local)), shape=(d.n, areas.size))


def aggregate_stage1(
    pi: np.ndarray,
    d: SurveyDataset,
    ws: WeightSet,
    populations,
    T_tilde: int = 500,
    seed=0,
    clamp: float = CLAMP,
    max_clamp_rate: float | None = None,
    chunk: int = 256,
) -> Stage1Summary:
    """Collapse record-level probability draws to area-level stage-2 inputs.

    For each draw ``t`` and sampled area ``i``: ``mu_s1`` is the Hajek mean
    of ``pi``, ``B`` the weighted mean of ``pi - y``, ``psi_s1 = psi_D +
    v(B)`` where ``v`` is the direct sampling-variance functional applied to
    the residuals ``pi - y`` about ``B``; ``theta = logit(mu_s1)`` and
    ``tau = psi_s1 / (mu_s1 (1 - mu_s1))^2``.  Means and variances use every
    draw; only ``theta`` is subsampled to ``T_tilde`` draws.

    Raises
    ------
    DegenerateProportion
        If ``max_clamp_rate`` is given and more than that fraction of
        ``mu_s1`` values needed clamping into ``[clamp, 1 - clamp]``.
    """
    pi = np.asarray(pi, dtype=float)
    T = pi.shape[0]
    if pi.ndim != 2 or pi.shape[1] != d.n:
        raise ValueError(f"pi must have shape (T, {d.n})")
    if T < 2:
        raise ValueError("need at least two draws")
    idx = _subset_index(T, T_tilde, seed)
    areas = d.sampled
    m = areas.size
    local = np.searchsorted(areas, d.area)
    A = _area_operator(d, ws, areas)
    n_i = d.n_i[areas].astype(float)
    N_i = np.asarray(populations, dtype=float)[areas]
    fpc = _fpc(n_i, N_i)
    y = d.y.astype(float)
    mu_d = y @ A
    W2 = _indicator(local, m, ws.w**2)
    psi_d = fpc * ((y - mu_d[local]) ** 2 @ W2)

    mu_s1 = np.empty((T, m))
    psi_b = np.empty((T, m))
    for s in range(0, T, chunk):
        p = pi[s:s + chunk]
        mu_s1[s:s + chunk] = p @ A
        r = p - y
        b = r @ A
        psi_b[s:s + chunk] = fpc * ((r - b[:, local]) ** 2 @ W2)
    psi_s1 = psi_d + psi_b
    clamped = (mu_s1 < clamp) | (mu_s1 > 1.0 - clamp)
    clamp_rate = float(clamped.mean())
    if max_clamp_rate is not None and clamp_rate > max_clamp_rate:
        raise DegenerateProportion(f"{clamp_rate:.1%} of stage-1 area proportions needed clamping")
    mu_c = np.clip(mu_s1, clamp, 1.0 - clamp)
    theta = logit(mu_c)
    inv_binvar = 1.0 / (mu_c * (1.0 - mu_c)) ** 2
    tau = psi_s1 * inv_binvar

    overall = national_direct(d)
    denom = np.sum(np.abs(mu_d - overall))
    sr = 1.0 - np.abs(mu_d - mu_s1).sum(axis=1) / denom if denom > 0 else None

    return Stage1Summary(
        area=areas,
        area_id=[d.area_ids[a] for a in areas],
        theta=np.ascontiguousarray(theta[idx].T),
        tau_bar=tau.mean(axis=0),
        var_theta=theta.var(axis=0, ddof=1),
        psi_d=psi_d,
        psi_b_mean=psi_b.mean(axis=0),
        psi_bar=psi_s1.mean(axis=0),
        inv_binvar_mean=inv_binvar.mean(axis=0),
        n_i=n_i.astype(int),
        N_i=N_i,
        mu_direct=mu_d,
        stable=(n_i >= 2) & (mu_d > 0) & (mu_d < 1),
        theta_median=np.median(theta, axis=0),
        mu_s1_median=np.median(mu_s1, axis=0),
        clamp_rate=clamp_rate,
        sr_draws=sr,
    )


def _indicator(local: np.ndarray, m: int, values=None) -> sp.csr_array:
    n = local.size
    v = np.ones(n) if values is None else values
    return sp.csr_array((v, (np.arange(n), local)), shape=(n, m))


def _fpc(n_i, N_i):
    # NaN for singleton areas, where the variance is undefined
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(n_i > 1, (1.0 - n_i / N_i) / (n_i * (n_i - 1.0)), np.nan)


@dataclass
class SmoothingMetrics:
    sr_draws: np.ndarray
    sr: float
    alc: float


def _alc(mu_med, mu_d, psi_d, stable, intercept: bool) -> float:
    ok = stable & np.isfinite(psi_d) & (psi_d > 0)
    if not ok.any():
        raise NoStableAreas("no stable direct estimates to regress on")
    x, yv, wt = mu_d[ok], mu_med[ok], 1.0 / psi_d[ok]
    if intercept:
        if ok.sum() < 2 or np.ptp(x) == 0:
            raise NoStableAreas("need two distinct stable direct estimates for the ALC slope")
        xm = np.sum(wt * x) / wt.sum()
        ym = np.sum(wt * yv) / wt.sum()
        return float(np.sum(wt * (x - xm) * (yv - ym)) / np.sum(wt * (x - xm) ** 2))
    return float(np.sum(wt * x * yv) / np.sum(wt * x * x))


def smoothing_metrics(pi, d: SurveyDataset, ws: WeightSet, populations=None, intercept: bool = True) -> SmoothingMetrics:
    """Smoothing ratio per draw (and its median) and the area linear comparison.

    ``SR_t = 1 - sum_i |mu_D_i - mu_s1_i^t| / sum_i |mu_D_i - mu_D|`` with
    ``mu_D`` the overall direct estimate; ``ALC`` is the weighted (``1/psi_D``)
    least-squares slope of the posterior median of ``mu_s1`` on ``mu_D``
    over stable areas.  ``populations=None`` omits the finite-population
    correction from ``psi_D``.
    """
    pi = np.asarray(pi, dtype=float)
    areas = d.sampled
    if populations is None:
        populations = np.full(d.M, np.inf)
    A = _area_operator(d, ws, areas)
    local = np.searchsorted(areas, d.area)
    y = d.y.astype(float)
    mu_d = y @ A
    mu_s1 = pi @ A
    n_i = d.n_i[areas].astype(float)
    N_i = np.asarray(populations, dtype=float)[areas]
    psi_d = _fpc(n_i, N_i) * ((y - mu_d[local]) ** 2 @ _indicator(local, areas.size, ws.w**2))
    stable = (n_i >= 2) & (mu_d > 0) & (mu_d < 1)
    if not stable.any():
        raise NoStableAreas("no stable direct estimates")
    overall = national_direct(d)
    denom = np.sum(np.abs(mu_d - overall))
    if denom == 0:
        raise NoStableAreas("all area direct estimates equal the overall estimate; SR undefined")
    sr = 1.0 - np.abs(mu_d - mu_s1).sum(axis=1) / denom
    alc = _alc(np.median(mu_s1, axis=0), mu_d, psi_d, stable, intercept)
    return SmoothingMetrics(sr, float(np.median(sr)), alc)


def alc_from_summary(s: Stage1Summary, intercept: bool = True) -> float:
    return _alc(s.mu_s1_median, s.mu_direct, s.psi_d, s.stable, intercept)


_SIDECAR = ["area_id", "tau_bar", "var_theta", "psi_d", "psi_b_mean", "n_i"]
_EXTRA = ["area", "psi_bar", "inv_binvar_mean", "N_i", "mu_direct", "stable", "theta_median", "mu_s1_median"]


def write_stage1_summary(s: Stage1Summary, out_dir, prefix: str = "stage1") -> tuple[Path, Path]:
    """Long-format draws CSV and a per-area sidecar CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    draws = pd.DataFrame({
        "area_id": np.repeat(np.asarray(s.area_id, dtype=object), s.T_tilde),
        "draw": np.tile(np.arange(s.T_tilde), s.m),
        "theta_s1": s.theta.ravel(),
    })
    p1 = out / f"{prefix}_theta.csv"
    draws.to_csv(p1, index=False, float_format="%.12g")
    side = pd.DataFrame({c: getattr(s, c) for c in _SIDECAR + _EXTRA})
    side["clamp_rate"] = s.clamp_rate
    p2 = out / f"{prefix}_areas.csv"
    side.to_csv(p2, index=False, float_format="%.12g")
    return p1, p2


def read_stage1_summary(out_dir, prefix: str = "stage1") -> Stage1Summary:
    out = Path(out_dir)
    side = pd.read_csv(out / f"{prefix}_areas.csv", dtype={"area_id": str})
    draws = pd.read_csv(out / f"{prefix}_theta.csv", dtype={"area_id": str})
    T = int(draws["draw"].max()) + 1
    wide = draws.pivot(index="area_id", columns="draw", values="theta_s1").loc[side["area_id"]]
    return Stage1Summary(
        area=side["area"].to_numpy(dtype=np.int64),
        area_id=list(side["area_id"]),
        theta=wide.to_numpy(dtype=float).reshape(len(side), T),
        tau_bar=side["tau_bar"].to_numpy(float),
        var_theta=side["var_theta"].to_numpy(float),
        psi_d=side["psi_d"].to_numpy(float),
        psi_b_mean=side["psi_b_mean"].to_numpy(float),
        psi_bar=side["psi_bar"].to_numpy(float),
        inv_binvar_mean=side["inv_binvar_mean"].to_numpy(float),
        n_i=side["n_i"].to_numpy(np.int64),
        N_i=side["N_i"].to_numpy(float),
        mu_direct=side["mu_direct"].to_numpy(float),
        stable=side["stable"].to_numpy(bool),
        theta_median=side["theta_median"].to_numpy(float),
        mu_s1_median=side["mu_s1_median"].to_numpy(float),
        clamp_rate=float(side["clamp_rate"].iloc[0]) if len(side) else 0.0,
    )
