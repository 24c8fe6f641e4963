"""Stage 2: spatial Fay-Herriot model over all areas.

Each retained stage-1 draw ``theta_hat_i^(t)`` enters as a Gaussian
observation of the latent ``theta_i`` with variance ``tau_bar_i +
var(theta_hat_i)``; the ``T_tilde`` replicates are jointly down-weighted by
``1 / T_tilde`` so that they carry the information of one observation.
The linear predictor is

    theta_i = lambda_0 + Z_i Lambda + alpha gamma_i + G_i Gamma_r[i]
              + zeta_i + eta_h[i]

with a BYM2 (or IID) field ``zeta``, nesting effects ``eta`` and a latent
external field ``gamma`` observed with classical measurement error.
Non-sampled areas have no likelihood term and are predicted through the
linear predictor.  Sampling variances of areas with unstable direct
estimates are imputed by a generalized variance function (GVF).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .direct import SurveyDataset, aggregate_direct
from .errors import (
    DisconnectedGraph,
    DivergentChains,
    EmptyGroup,
    MissingSummary,
    NonPositiveVariance,
    TooFewStableAreas,
    UnknownArea,
)
from .graph import AreaGraph
from .inference import (
    BYM2,
    Add,
    Const,
    Exp,
    Gaussian,
    HalfGaussian,
    ICARPairwise,
    Logistic,
    MatVec,
    Model,
    Mul,
    ParameterLayout,
    SamplerConfig,
    SoftSumToZero,
    Sqrt,
    StudentT,
    Take,
    UniformLogit,
    convergence_table,
    sample,
)
from .inference.draws import DrawMatrix
from .stage1 import Stage1Summary

__all__ = [
    "AreaFrame",
    "Stage2Spec",
    "BenchmarkGroup",
    "GVFResult",
    "Stage2Fit",
    "gvf_design",
    "fit_gvf",
    "build_stage2_model",
    "fit_stage2",
    "benchmark_groups",
    "benchmark",
]

log = logging.getLogger(__name__)


@dataclass
class AreaFrame:
    """Area-level covariates and structure for all ``M`` areas.

    Parameters
    ----------
    area_ids : sequence
    population : array (M,)
    Z : array (M, p), optional
        Fixed-effect design (already dummy coded), without intercept.
    G : array (M, q), optional
        Continuous covariates; their coefficients vary by ``remote``.
    remote : int array (M,), optional
        Region class of each area (codes ``0..R-1``).
    nest : int array (M,), optional
        Nesting group of each area (codes ``0..H-1``).
    bench : dict of str -> array (M,)
        Benchmark systems: group label per area, ``None`` outside all groups.
    ext_est, ext_se : array (M,), optional
        External logit-scale estimate and its standard error; NaN where
        unavailable.
    """

    area_ids: list
    population: np.ndarray
    Z: Optional[np.ndarray] = None
    z_names: list = field(default_factory=list)
    G: Optional[np.ndarray] = None
    g_names: list = field(default_factory=list)
    remote: Optional[np.ndarray] = None
    nest: Optional[np.ndarray] = None
    bench: dict = field(default_factory=dict)
    ext_est: Optional[np.ndarray] = None
    ext_se: Optional[np.ndarray] = None

    def __post_init__(self):
        self.area_ids = list(self.area_ids)
        M = len(self.area_ids)
        self.population = np.asarray(self.population, dtype=float)
        if self.population.shape != (M,) or np.any(~(self.population > 0)):
            raise ValueError("population must be positive for every area")
        for name in ("Z", "G"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float).reshape(M, -1)
                if not np.all(np.isfinite(v)):
                    raise ValueError(f"{name} contains non-finite values")
                setattr(self, name, v)
        for name in ("remote", "nest"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.int64)
                if v.shape != (M,) or v.min() < 0:
                    raise ValueError(f"{name} must hold a non-negative code per area")
                setattr(self, name, v)
        if (self.ext_est is None) != (self.ext_se is None):
            raise ValueError("ext_est and ext_se must be given together")
        if self.ext_est is not None:
            self.ext_est = np.asarray(self.ext_est, dtype=float)
            self.ext_se = np.asarray(self.ext_se, dtype=float)
            has = np.isfinite(self.ext_est)
            if np.any(~(self.ext_se[has] > 0)):
                raise NonPositiveVariance("external estimates need a positive standard error")

    @property
    def M(self) -> int:
        return len(self.area_ids)

    def index_of(self, area_id) -> int:
        try:
            return self._index[area_id]
        except AttributeError:
            self._index = {a: i for i, a in enumerate(self.area_ids)}
            return self.index_of(area_id)
        except KeyError:
            raise UnknownArea(f"unknown area id {area_id!r}") from None


@dataclass
class Stage2Spec:
    """Components and priors of the area-level model.

    ``spatial`` is ``"bym2"``, ``"iid"`` or ``"none"``; ``gvf`` is
    ``"joint"`` (GVF sampled with the model), ``"two_step"`` (GVF fitted
    first, imputed variances plugged in) or ``"off"``.  ``fixed_rho``
    pins the BYM2 mixing parameter.
    """

    use_fixed: bool = True
    varying: bool = True
    spatial: str = "bym2"
    nesting: bool = True
    external: bool = True
    gvf: str = "joint"
    fixed_sd: float = 2.0
    intercept_df: float = 3.0
    intercept_scale: float = 2.0
    scale_sd: float = 2.0
    ext_prior_sd: float = 2.0
    sum_to_zero_scale: float = 0.001
    fixed_rho: Optional[float] = None
    bench_p: float = 0.5
    min_stable: int = 10

    def __post_init__(self):
        if self.spatial not in ("bym2", "iid", "none"):
            raise ValueError("spatial must be 'bym2', 'iid' or 'none'")
        if self.gvf not in ("joint", "two_step", "off"):
            raise ValueError("gvf must be 'joint', 'two_step' or 'off'")
        if not self.bench_p > 0:
            raise ValueError("benchmark discrepancy p must be positive")
        if self.fixed_rho is not None and not 0.0 <= self.fixed_rho <= 1.0:
            raise ValueError("fixed_rho must lie in [0, 1]")


@dataclass
class BenchmarkGroup:
    system: str
    label: object
    members: np.ndarray
    target: float
    se: float


@dataclass
class GVFResult:
    """GVF posterior and the variances it implies for stage-1 areas.

    ``imputed_psi`` and ``imputed_tau`` have one entry per stage-1 area;
    ``replace`` flags the areas whose variance is replaced.
    """

    omega: np.ndarray
    sigma: np.ndarray
    L: np.ndarray
    replace: np.ndarray
    imputed_psi: np.ndarray
    imputed_tau: np.ndarray
    draws: Optional[DrawMatrix] = None


def _needs_imputation(s1: Stage1Summary) -> np.ndarray:
    return ~s1.stable | ~np.isfinite(s1.tau_bar) | ~(s1.tau_bar > 0)


def gvf_design(s1: Stage1Summary, frame: AreaFrame) -> np.ndarray:
    """Standardized GVF covariates with an intercept column, one row per stage-1 area.

    Covariates: ``log n_i``, ``log N_i``, the first continuous covariate
    (when the frame has one) and the median stage-1 logit estimate.
    Constant columns are dropped.
    """
    cols = [np.log(s1.n_i.astype(float)), np.log(s1.N_i)]
    if frame.G is not None and frame.G.shape[1]:
        cols.append(frame.G[s1.area, 0])
    cols.append(s1.theta_median)
    X = np.column_stack(cols)
    sd = X.std(axis=0)
    keep = sd > 1e-12
    X = (X[:, keep] - X[:, keep].mean(axis=0)) / sd[keep]
    return np.column_stack([np.ones(s1.m), X])


def _gvf_terms(lay: ParameterLayout, s1: Stage1Summary, L: np.ndarray, spec: Stage2Spec, min_stable: int):
    fit_rows = ~_needs_imputation(s1) & (s1.psi_bar > 0)
    if fit_rows.sum() < min_stable:
        raise TooFewStableAreas(f"GVF needs at least {min_stable} stable areas, got {int(fit_rows.sum())}")
    omega = lay.add("gvf_omega", L.shape[1])
    ls = lay.add("log_sigma_gvf", 1, "log")
    target = 0.5 * np.log(s1.psi_bar[fit_rows])
    terms = [
        Gaussian(omega, 0.0, spec.fixed_sd),
        HalfGaussian(ls, spec.scale_sd),
        Gaussian(target, MatVec(L[fit_rows], omega), Exp(ls)),
    ]
    return omega, ls, terms


def fit_gvf(s1: Stage1Summary, frame: AreaFrame, spec: Stage2Spec | None = None, config: SamplerConfig | None = None) -> GVFResult:
    """Fit ``log sqrt(psi_i) ~ N(L_i omega, sigma^2)`` on stable areas.

    The imputed variance of an area is the posterior mean of the lognormal
    mean ``exp(2 L_i omega + sigma^2)``; on the logit scale it is multiplied
    by the stage-1 mean of ``(mu (1 - mu))^-2``.

    Raises
    ------
    TooFewStableAreas
    """
    spec = spec or Stage2Spec()
    cfg = config or SamplerConfig(chains=2, warmup=500, draws=500)
    L = gvf_design(s1, frame)
    lay = ParameterLayout()
    _, _, terms = _gvf_terms(lay, s1, L, spec, spec.min_stable)
    dm = sample(Model(lay, terms), config=cfg)
    flat = dm.flat()
    omega = flat[:, : L.shape[1]]
    sigma = np.exp(flat[:, L.shape[1]])
    psi = gvf_impute(L, omega, sigma)
    return GVFResult(omega, sigma, L, _needs_imputation(s1), psi, psi * s1.inv_binvar_mean, dm)


def gvf_impute(L: np.ndarray, omega: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Posterior mean over draws of ``exp(2 L omega + sigma^2)``."""
    omega = np.atleast_2d(omega)
    sigma = np.atleast_1d(sigma)
    return np.mean(np.exp(2.0 * omega @ L.T + sigma[:, None] ** 2), axis=0)


def _block_design(G: np.ndarray, groups: np.ndarray, R: int) -> sp.csr_array:
    M, q = G.shape
    rows = np.repeat(np.arange(M), q)
    cols = (groups[:, None] * q + np.arange(q)).ravel()
    return sp.csr_array((G.ravel(), (rows, cols)), shape=(M, R * q))


def _group_matrix(groups: list[BenchmarkGroup], population: np.ndarray) -> sp.csr_array:
    rows, cols, vals = [], [], []
    for k, g in enumerate(groups):
        w = population[g.members]
        rows.extend([k] * g.members.size)
        cols.extend(g.members.tolist())
        vals.extend((w / w.sum()).tolist())
    return sp.csr_array((vals, (rows, cols)), shape=(len(groups), population.size))


def build_stage2_model(
    s1: Stage1Summary,
    frame: AreaFrame,
    graph: AreaGraph | None,
    spec: Stage2Spec,
    gvf: GVFResult | None = None,
    groups: list[BenchmarkGroup] | None = None,
) -> Model:
    """Assemble the stage-2 posterior over all ``M`` areas."""
    M = frame.M
    lay = ParameterLayout()
    terms = []
    lam0 = lay.add("intercept", 1)
    terms.append(StudentT(lam0, spec.intercept_df, 0.0, spec.intercept_scale))
    parts = [Take(lam0, np.zeros(M, dtype=np.int64))]
    derived = {}

    if spec.use_fixed and frame.Z is not None and frame.Z.shape[1]:
        lam = lay.add("Lambda", frame.Z.shape[1])
        parts.append(MatVec(frame.Z, lam))
        terms.append(Gaussian(lam, 0.0, spec.fixed_sd))

    if spec.external and frame.ext_est is not None:
        has = np.flatnonzero(np.isfinite(frame.ext_est))
        if has.size:
            g_hat, g_se = frame.ext_est[has], frame.ext_se[has]
            g_raw = lay.add("gamma_raw", has.size)
            gamma = Add(Const(g_hat), Mul(Const(g_se), g_raw))
            a = lay.add("alpha", 1)
            sel = sp.csr_array((np.ones(has.size), (has, np.arange(has.size))), shape=(M, has.size))
            parts.append(Mul(a, MatVec(sel, gamma)))
            terms += [
                Gaussian(g_hat, gamma, g_se),
                Gaussian(gamma, 0.0, spec.ext_prior_sd),
                Gaussian(a, 0.0, spec.fixed_sd),
            ]
            derived["gamma"] = gamma

    if frame.G is not None and frame.G.shape[1]:
        if spec.varying and frame.remote is not None:
            R = int(frame.remote.max()) + 1
            Gb = _block_design(frame.G, frame.remote, R)
        else:
            Gb = frame.G
        gam = lay.add("Gamma", Gb.shape[1])
        parts.append(MatVec(Gb, gam))
        terms.append(Gaussian(gam, 0.0, spec.fixed_sd))

    if spec.spatial == "bym2":
        if graph is None or not graph.is_connected:
            raise DisconnectedGraph("BYM2 needs a connected adjacency graph")
        if graph.M != M:
            raise ValueError(f"graph has {graph.M} areas, frame has {M}")
        s = lay.add("s", M)
        v = lay.add("v", M)
        ls = lay.add("log_sigma_zeta", 1, "log")
        if spec.fixed_rho is None:
            ru = lay.add("rho", 1, "logit")
            rho = Logistic(ru)
            terms.append(UniformLogit(ru))
        else:
            rho = Const(np.array([spec.fixed_rho]))
        zeta = BYM2(s, v, rho, Exp(ls), graph.kappa)
        terms += [
            ICARPairwise(s, graph.edges),
            SoftSumToZero(s, spec.sum_to_zero_scale * np.sqrt(M)),
            Gaussian(v, 0.0, 1.0),
            HalfGaussian(ls, spec.scale_sd),
        ]
        parts.append(zeta)
        derived.update(zeta=zeta, rho=rho, sigma_zeta=Exp(ls))
    elif spec.spatial == "iid":
        v = lay.add("v", M)
        ls = lay.add("log_sigma_zeta", 1, "log")
        zeta = Mul(Exp(ls), v)
        terms += [Gaussian(v, 0.0, 1.0), HalfGaussian(ls, spec.scale_sd)]
        parts.append(zeta)
        derived.update(zeta=zeta, sigma_zeta=Exp(ls))

    if spec.nesting and frame.nest is not None:
        H = int(frame.nest.max()) + 1
        e = lay.add("eta_raw", H)
        ls = lay.add("log_sigma_eta", 1, "log")
        eta = Mul(Exp(ls), e)
        parts.append(Take(eta, frame.nest))
        terms += [Gaussian(e, 0.0, 1.0), HalfGaussian(ls, spec.scale_sd)]
        derived["eta"] = eta

    theta = Add(*parts)
    derived["theta"] = theta
    mu = Logistic(theta)
    derived["mu"] = mu

    # likelihood of the stage-1 draws
    T = s1.T_tilde
    repl = _needs_imputation(s1) if spec.gvf != "off" else np.zeros(s1.m, dtype=bool)
    fixed_rows = ~repl
    if spec.gvf == "off":
        ok = np.isfinite(s1.tau_bar) & (s1.tau_bar > 0)
        if not ok.all():
            log.warning("dropping %d areas with unusable variances (GVF off)", int((~ok).sum()))
        fixed_rows &= ok
    if fixed_rows.any():
        sd = np.sqrt(s1.tau_bar[fixed_rows] + s1.var_theta[fixed_rows])
        terms.append(Gaussian(s1.theta[fixed_rows], Take(theta, s1.area[fixed_rows]), sd, scale=1.0 / T))
    if repl.any():
        if spec.gvf == "joint":
            L = gvf_design(s1, frame)
            omega, lsg, gterms = _gvf_terms(lay, s1, L, spec, spec.min_stable)
            terms += gterms
            lognorm = Exp(Add(MatVec(2.0 * L[repl], omega), Exp(Mul(2.0, lsg))))
            sd = Sqrt(Add(Mul(Const(s1.inv_binvar_mean[repl]), lognorm), Const(s1.var_theta[repl])))
            derived["gvf_psi"] = lognorm
        else:
            if gvf is None:
                gvf = fit_gvf(s1, frame, spec)
            sd = np.sqrt(gvf.imputed_tau[repl] + s1.var_theta[repl])
        terms.append(Gaussian(s1.theta[repl], Take(theta, s1.area[repl]), sd, scale=1.0 / T))

    if groups:
        B = _group_matrix(groups, frame.population)
        target = np.array([g.target for g in groups])
        se = np.array([g.se for g in groups])
        c_tilde = MatVec(B, mu)
        terms.append(Gaussian(target, c_tilde, spec.bench_p * se))
        derived["C_tilde"] = c_tilde

    return Model(lay, terms, derived)


@dataclass
class Stage2Fit:
    """Stage-2 posterior.

    ``theta`` and ``mu`` have shape ``(chains, draws, M)``.
    """

    spec: Stage2Spec
    model: Model
    draws: DrawMatrix
    theta: np.ndarray
    mu: np.ndarray
    area_ids: list
    diagnostics: dict
    gvf: Optional[GVFResult] = None
    groups: list = field(default_factory=list)
    inputs: tuple = ()

    def component(self, name: str) -> np.ndarray:
        """Draws of a derived quantity, flattened over chains: ``(T, ...)``."""
        return self.model.evaluate(name, self.draws.flat())

    @property
    def mu_flat(self) -> np.ndarray:
        """``(T, M)`` draws of every area's prevalence."""
        return self.mu.reshape(-1, self.mu.shape[2])


def _check_inputs(s1: Stage1Summary, frame: AreaFrame, sampled) -> None:
    for a, aid in zip(s1.area, s1.area_id):
        if a >= frame.M or str(frame.area_ids[a]) != str(aid):
            raise UnknownArea(f"stage-1 area {aid!r} does not match the area frame")
    if sampled is not None:
        missing = set(np.asarray(sampled).tolist()) - set(s1.area.tolist())
        if missing:
            ids = [frame.area_ids[i] for i in sorted(missing)]
            raise MissingSummary(f"sampled areas without a stage-1 summary: {ids[:10]}")


def fit_stage2(
    s1: Stage1Summary,
    frame: AreaFrame,
    graph: AreaGraph | None,
    spec: Stage2Spec | None = None,
    config: SamplerConfig | None = None,
    sampled=None,
    groups: list[BenchmarkGroup] | None = None,
    gvf: GVFResult | None = None,
    max_divergence_rate: float = 0.01,
) -> Stage2Fit:
    """Fit the stage-2 model by HMC.

    Parameters
    ----------
    sampled : array of area indices, optional
        Areas with survey records; each must have a stage-1 summary.
    groups : list of BenchmarkGroup, optional
        Adds benchmark likelihood terms (see :func:`benchmark`).

    Raises
    ------
    DisconnectedGraph, MissingSummary, TooFewStableAreas, DivergentChains
    """
    spec = spec or Stage2Spec()
    cfg = config or SamplerConfig()
    _check_inputs(s1, frame, sampled)
    if spec.gvf == "two_step" and gvf is None and _needs_imputation(s1).any():
        gvf = fit_gvf(s1, frame, spec, replace(cfg, chains=min(cfg.chains, 2)))
    model = build_stage2_model(s1, frame, graph, spec, gvf, groups)
    dm = sample(model, config=cfg)
    flat = dm.flat()
    theta = model.evaluate("theta", flat).reshape(dm.chains, dm.draws, frame.M)
    mu = model.evaluate("mu", flat).reshape(dm.chains, dm.draws, frame.M)
    r, e = convergence_table(mu)
    n_div = int(np.sum(dm.stats["divergences"]))
    total = dm.chains * dm.draws * cfg.thin
    diag = {
        "rhat_mu": r,
        "ess_mu": e,
        "max_rhat": float(np.nanmax(r)),
        "min_ess": float(np.nanmin(e)),
        "divergences": dm.stats["divergences"],
        "step_size": dm.stats["step_size"],
        "n_steps": dm.stats["n_steps"],
    }
    if n_div > max_divergence_rate * total:
        raise DivergentChains(f"{n_div} of {total} stage-2 transitions diverged")
    return Stage2Fit(spec, model, dm, theta, mu, list(frame.area_ids), diag, gvf, list(groups or []), (s1, frame, graph, sampled))


def benchmark_groups(d: SurveyDataset, frame: AreaFrame, systems: list[str] | None = None) -> list[BenchmarkGroup]:
    """Benchmark targets from pooled direct estimates of each group.

    Raises
    ------
    EmptyGroup
        A group has no sampled records.
    NonPositiveVariance
        A group's direct variance is zero or undefined.
    """
    out = []
    for name in systems if systems is not None else list(frame.bench):
        labels = np.asarray(frame.bench[name], dtype=object)
        est = aggregate_direct(d, labels, frame.population)
        for g, row in est.iterrows():
            members = np.flatnonzero(pd.Series(labels).eq(g).to_numpy())
            if members.size == 0:
                raise EmptyGroup(f"benchmark group {g!r} has no member areas")
            if not (np.isfinite(row["psi"]) and row["psi"] > 0):
                raise NonPositiveVariance(f"benchmark group {name}:{g} has variance {row['psi']}")
            out.append(BenchmarkGroup(name, g, members, float(row["mu"]), float(np.sqrt(row["psi"]))))
    return out


def benchmark(fit: Stage2Fit, groups: list[BenchmarkGroup], config: SamplerConfig | None = None, p: float | None = None) -> Stage2Fit:
    """Refit with benchmark terms ``C_k ~ N(C_hat_k, (p se_k)^2)``.

    ``C_k`` is the population-weighted mean of ``mu`` over the group's
    member areas; areas outside every group are not constrained.
    """
    if not groups:
        raise EmptyGroup("no benchmark groups supplied")
    for g in groups:
        if not (np.isfinite(g.se) and g.se > 0):
            raise NonPositiveVariance(f"benchmark group {g.system}:{g.label} has non-positive standard error")
        if g.members.size == 0:
            raise EmptyGroup(f"benchmark group {g.system}:{g.label} is empty")
    s1, frame, graph, sampled = fit.inputs
    spec = fit.spec if p is None else replace(fit.spec, bench_p=p)
    cfg = config or SamplerConfig(
        chains=fit.draws.chains, draws=fit.draws.draws, warmup=max(fit.draws.draws, 200)
    )
    return fit_stage2(s1, frame, graph, spec, cfg, sampled, groups, fit.gvf)
