"""Repeated-sampling experiment over stage-1 smoothing settings.

Each cell is one (replicate, residual sd, area-effect flag) combination:
draw a survey sample from the census, fit the stage-1 model, aggregate,
fit the simulation stage-2 model (intercept + area covariate + IID field)
and score the result against the census truth.
"""
from __future__ import annotations

import csv
import logging
import os
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import seeds
from .direct import rescale_weights
from .inference import SamplerConfig
from .metrics import metric_report
from .stage1 import Stage1Spec, aggregate_stage1, alc_from_summary, fit_stage1
from .stage2 import AreaFrame, Stage2Spec, fit_stage2
from .synthetic import CensusConfig, SyntheticCensus, draw_sample, generate_census

__all__ = ["ExperimentConfig", "run_cell", "run_experiment", "RESULT_COLUMNS", "analyse"]

log = logging.getLogger(__name__)

RESULT_COLUMNS = [
    "replicate", "sigma_e", "area_re", "status", "sr", "alc", "marb", "mrrmse", "coverage",
    "mean_hpdi_width", "n", "stable_fraction", "rhat_s1", "rhat_s2", "divergences_s1",
    "divergences_s2", "clamp_rate", "seconds", "error",
]


@dataclass
class ExperimentConfig:
    seed: int = 144
    replicates: int = 20
    sigma_e: tuple = (0.25, 1.0, 2.0, 3.5)
    area_re: tuple = (True, False)
    census: CensusConfig = field(default_factory=CensusConfig)
    stage1_mcmc: dict = field(default_factory=lambda: {"chains": 2, "warmup": 500, "draws": 500})
    stage2_mcmc: dict = field(default_factory=lambda: {"chains": 2, "warmup": 500, "draws": 500})
    T_tilde: int = 500
    alc_intercept: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not self.sigma_e or any(not s > 0 for s in self.sigma_e):
            raise ValueError("sigma_e values must be positive and non-empty")
        if not self.area_re:
            raise ValueError("area_re grid must be non-empty")

    def cells(self) -> list[tuple[int, float, bool]]:
        return [(r, float(s), bool(re)) for r in range(self.replicates) for s in self.sigma_e for re in self.area_re]


SIM_STAGE2 = Stage2Spec(spatial="iid", nesting=False, external=False, varying=False, gvf="off")


def _frame(c: SyntheticCensus) -> AreaFrame:
    return AreaFrame(c.area_ids, c.N, Z=c.k[:, None], z_names=["k"])


def run_cell(census: SyntheticCensus, cfg: ExperimentConfig, replicate: int, sigma_e: float, area_re: bool) -> dict:
    """Fit and score one cell; failures are reported in ``status``/``error``."""
    t0 = time.perf_counter()
    row = {k: np.nan for k in RESULT_COLUMNS}
    row.update(replicate=replicate, sigma_e=sigma_e, area_re=area_re, status="ok", error="")
    tag = (replicate, int(round(sigma_e * 1000)), int(area_re))
    try:
        smp = draw_sample(census, cfg.seed, replicate)
        d = smp.data
        ws = rescale_weights(d)
        row["n"] = d.n
        n_i = d.n_i[smp.areas]
        ysum = np.bincount(d.area, weights=d.y, minlength=d.M)[smp.areas]
        row["stable_fraction"] = float(np.mean((n_i >= 2) & (ysum > 0) & (ysum < n_i)))
        s1cfg = SamplerConfig(seed=seeds.derive_seed(cfg.seed, "stage1", *tag), **cfg.stage1_mcmc)
        f1 = fit_stage1(d, ws, Stage1Spec(include_area_effect=area_re, residual_sd=sigma_e), s1cfg)
        row["rhat_s1"] = f1.diagnostics["max_rhat"]
        row["divergences_s1"] = int(np.sum(f1.diagnostics["divergences"]))
        summ = aggregate_stage1(
            f1.pi_draws(), d, ws, smp.populations, T_tilde=cfg.T_tilde, seed=seeds.derive_seed(cfg.seed, "subset", *tag)
        )
        row["sr"] = float(np.median(summ.sr_draws))
        row["alc"] = alc_from_summary(summ, cfg.alc_intercept)
        row["clamp_rate"] = summ.clamp_rate
        s2cfg = SamplerConfig(seed=seeds.derive_seed(cfg.seed, "stage2", *tag), **cfg.stage2_mcmc)
        f2 = fit_stage2(summ, _frame(census), None, SIM_STAGE2, s2cfg, sampled=smp.areas)
        row["rhat_s2"] = f2.diagnostics["max_rhat"]
        row["divergences_s2"] = int(np.sum(f2.diagnostics["divergences"]))
        rep = metric_report(f2.mu_flat, census.mu, census.area_ids)
        row.update({k: v for k, v in rep.to_dict().items() if k in row})
    except Exception as exc:  # recorded per cell; the grid keeps going
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
        log.warning("cell %s failed: %s", tag, traceback.format_exc(limit=2))
    row["seconds"] = time.perf_counter() - t0
    return row


def run_experiment(cfg: ExperimentConfig, out_dir=None, census: SyntheticCensus | None = None, progress=None) -> pd.DataFrame:
    """Run every cell; rows are appended to ``results.csv.partial`` as they
    finish and the file is renamed to ``results.csv`` at the end."""
    census = census or generate_census(cfg.seed, cfg.census)
    cells = cfg.cells()
    writer = fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        partial = out / "results.csv.partial"
        fh = open(partial, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
    if cfg.n_jobs != 1:
        from joblib import Parallel, delayed

        it = Parallel(n_jobs=cfg.n_jobs, return_as="generator")(delayed(run_cell)(census, cfg, *c) for c in cells)
    else:
        it = (run_cell(census, cfg, *c) for c in cells)
    rows = []
    try:
        for row in it:
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
            if progress is not None:
                progress(len(rows), len(cells), row)
    finally:
        if fh is not None:
            fh.close()
    df = pd.DataFrame(rows, columns=RESULT_COLUMNS).sort_values(["replicate", "sigma_e", "area_re"], kind="stable")
    df = df.reset_index(drop=True)
    if out_dir is not None:
        df.to_csv(partial, index=False, float_format="%.10g")
        os.replace(partial, Path(out_dir) / "results.csv")
    return df


def analyse(df: pd.DataFrame) -> dict:
    """Binned summaries of the smoothing/performance relationship."""
    ok = df[df["status"] == "ok"]
    by_cell = ok.groupby(["sigma_e", "area_re"]).agg(
        alc=("alc", "mean"), sr=("sr", "median"), coverage=("coverage", "mean"),
        mrrmse=("mrrmse", "median"), marb=("marb", "median"), fits=("alc", "size"),
    ).reset_index()
    slope, intercept = np.polyfit(ok["sr"], ok["alc"], 1) if len(ok) > 1 else (np.nan, np.nan)
    resid = ok["alc"] - (slope * ok["sr"] + intercept)
    r2 = 1.0 - resid.var() / ok["alc"].var() if len(ok) > 2 else np.nan
    return {
        "cells": by_cell,
        "alc_on_sr_slope": float(slope),
        "alc_on_sr_intercept": float(intercept),
        "alc_on_sr_r2": float(r2),
        "failed": int((df["status"] != "ok").sum()),
    }
