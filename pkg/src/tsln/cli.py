"""Command-line entry point: ``tsln {simulate,fit,summarize,experiment}``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration or input
error, 3 failed sampler diagnostics.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import config as C
from . import seeds
from .direct import direct_estimates, national_direct, rescale_weights
from .errors import (
    AllDivergent,
    ConfigError,
    DiagnosticsFailed,
    DisconnectedGraph,
    DivergentChains,
    DuplicateAreaId,
    StillDisconnected,
    UnknownArea,
)
from .experiment import analyse, run_experiment
from .inference import DrawMatrix, read_draws, write_draws
from .io import lattice_edges, load_graph, read_areas, read_survey, write_json
from .stage1 import aggregate_stage1, fit_stage1, write_stage1_summary
from .stage2 import benchmark_groups, fit_stage2
from .summaries import summarize
from .synthetic import draw_sample, generate_census

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_FAILURE", "EXIT_CONFIG", "EXIT_DIAGNOSTICS"]

log = logging.getLogger("tsln")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DIAGNOSTICS = 0, 1, 2, 3

CONFIG_ERRORS = (ConfigError, UnknownArea, DuplicateAreaId, StillDisconnected, DisconnectedGraph, FileNotFoundError)
DIAGNOSTIC_ERRORS = (DiagnosticsFailed, DivergentChains, AllDivergent)


def cmd_simulate(cfg: dict, out: Path) -> None:
    """Synthetic census, area file, lattice adjacency and survey replicates."""
    census_cfg = C.census_config(cfg["simulate"]["census"])
    c = generate_census(cfg["seed"], census_cfg)
    ids = c.area_ids
    pd.DataFrame({"area_id": np.asarray(ids)[c.area], "y": c.y, "z": c.z, "pi": c.pi}).to_csv(
        out / "census.csv", index=False, float_format="%.10g"
    )
    areas = c.areas_frame()
    areas.to_csv(out / "areas.csv", index=False, float_format="%.10g")
    ncol = int(np.ceil(np.sqrt(c.M)))
    lattice_edges(ids, ncol).to_csv(out / "edges.csv", index=False)
    for r in range(cfg["simulate"]["replicates"]):
        smp = draw_sample(c, cfg["seed"], r)
        smp.survey_frame().to_csv(out / f"survey_r{r:03d}.csv", index=False, float_format="%.10g")
    log.info("simulated %d areas, census size %d, %d survey replicates", c.M, c.size, cfg["simulate"]["replicates"])


def cmd_fit(cfg: dict, out: Path) -> None:
    """Direct estimates, stage-1 fit and aggregation, stage-2 fit."""
    paths = cfg["paths"]
    frame = read_areas(paths["areas"], cfg)
    d = read_survey(paths["survey"], frame.area_ids, cfg)
    ws = rescale_weights(d)
    spec2 = C.stage2_spec(cfg)
    graph = None
    if paths["edges"] is not None:
        graph = load_graph(paths["edges"], frame.area_ids, cfg)
    elif spec2.spatial == "bym2":
        raise ConfigError("stage2.spatial = 'bym2' needs paths.edges")

    direct = direct_estimates(d, ws, frame.population)
    direct.to_csv(out / "direct.csv", float_format="%.10g")
    national = national_direct(d)
    write_json({"national_direct": national, "n": d.n, "sampled_areas": int(d.sampled.size)}, out / "national.json")

    seed = cfg["seed"]
    f1 = fit_stage1(d, ws, C.stage1_spec(cfg), C.sampler_config(cfg, "stage1", seeds.derive_seed(seed, "stage1")))
    write_json({k: v for k, v in f1.diagnostics.items()}, out / "stage1_diagnostics.json")
    s1 = aggregate_stage1(
        f1.pi_draws(), d, ws, frame.population, T_tilde=cfg["mcmc"]["T_tilde"], seed=seeds.derive_seed(seed, "subset")
    )
    write_stage1_summary(s1, out)

    groups = None
    if cfg["benchmark"]["enabled"]:
        groups = benchmark_groups(d, frame, cfg["benchmark"]["systems"] or None)
    f2 = fit_stage2(
        s1, frame, graph, spec2, C.sampler_config(cfg, "stage2", seeds.derive_seed(seed, "stage2")),
        sampled=d.sampled, groups=groups,
    )
    diag = {k: f2.diagnostics[k] for k in ("max_rhat", "min_ess", "divergences", "step_size", "n_steps")}
    diag["rhat_mu"] = dict(zip(frame.area_ids, np.asarray(f2.diagnostics["rhat_mu"]).tolist()))
    diag["ess_mu"] = dict(zip(frame.area_ids, np.asarray(f2.diagnostics["ess_mu"]).tolist()))
    write_draws(DrawMatrix(f2.mu, list(frame.area_ids)), out, prefix="mu", diagnostics=diag)
    write_draws(f2.draws, out, prefix="stage2")
    log.info("stage-2 fit done: max R-hat %.3f, min ESS %.0f", diag["max_rhat"], diag["min_ess"])


def cmd_summarize(cfg: dict, out: Path) -> None:
    """Decision summaries from saved prevalence draws."""
    paths = cfg["paths"]
    fit_dir = Path(paths["fit_dir"]) if paths["fit_dir"] else out
    frame = read_areas(paths["areas"], cfg)
    if paths["edges"] is None:
        raise ConfigError("summaries need paths.edges for the spatial lag")
    graph = load_graph(paths["edges"], frame.area_ids, cfg)
    try:
        mu = read_draws(fit_dir, prefix="mu")
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    if list(mu.names) != list(frame.area_ids):
        raise ConfigError("prevalence draws do not match the areas file")
    nat_path = fit_dir / "national.json"
    if not nat_path.exists():
        raise ConfigError(f"{nat_path} not found; run fit first")
    national = float(pd.read_json(nat_path, typ="series")["national_direct"])
    table, rollup = summarize(mu, frame, graph, national, cfg["summary"]["mass"], cfg["summary"]["rhat_bar"])
    table.to_csv(out / "summaries.csv", index=False, float_format="%.10g")
    write_json(rollup, out / "rollup.json")


def cmd_experiment(cfg: dict, out: Path) -> None:
    """Repeated-sampling grid and its binned analysis."""
    ecfg = C.experiment_config(cfg)

    def progress(i, n, row):
        log.info("cell %d/%d sigma_e=%s re=%s %s alc=%.3f cov=%.2f", i, n, row["sigma_e"], row["area_re"],
                 row["status"], row["alc"], row["coverage"])

    df = run_experiment(ecfg, out, progress=progress)
    res = analyse(df)
    res["cells"].to_csv(out / "cells.csv", index=False, float_format="%.10g")
    write_json({k: v for k, v in res.items() if k != "cells"}, out / "analysis.json")


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "summarize": cmd_summarize, "experiment": cmd_experiment}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsln", description="Two-stage logistic-normal small area estimation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        s = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        s.add_argument("--config", type=Path, default=None, help="JSON configuration file")
        s.add_argument("--out", type=Path, required=True, help="output directory")
        s.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = C.load_config(args.config, args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        C.dump_config(cfg, args.out)
        COMMANDS[args.command](cfg, args.out)
    except DIAGNOSTIC_ERRORS as exc:
        print(f"tsln {args.command}: diagnostics failed: {exc}", file=sys.stderr)
        return EXIT_DIAGNOSTICS
    except CONFIG_ERRORS as exc:
        print(f"tsln {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("unhandled error", exc_info=True)
        print(f"tsln {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
