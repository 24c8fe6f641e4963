"""Pipeline configuration: one JSON document merged over explicit defaults."""
from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .experiment import ExperimentConfig
from .inference import SamplerConfig
from .stage1 import Stage1Spec
from .stage2 import Stage2Spec
from .synthetic import CensusConfig

__all__ = ["DEFAULTS", "load_config", "merge", "dump_config", "sampler_config", "stage1_spec", "stage2_spec",
           "census_config", "experiment_config"]

DEFAULT_SEED = 144

DEFAULTS: dict = {
    "seed": DEFAULT_SEED,
    "paths": {"survey": None, "areas": None, "edges": None, "fit_dir": None},
    "survey": {"area_col": "area_id", "y_col": "y", "weight_col": "w_raw"},
    "areas": {"id_col": "area_id", "population_col": "population"},
    "graph": {"bridges": [], "augment_singletons": False},
    "stage1": {
        "continuous": [],
        "categorical": {},
        "grouping": {},
        "include_area_effect": True,
        "residual_sd": 2.0,
        "fixed_sd": 2.0,
        "intercept_df": 3.0,
        "intercept_scale": 2.0,
        "scale_sd": 1.0,
        "qr": False,
    },
    "stage2": {
        "fixed_continuous": [],
        "fixed_categorical": {},
        "continuous": [],
        "remote_col": None,
        "nest_col": None,
        "ext_est_col": None,
        "ext_se_col": None,
        "use_fixed": True,
        "varying": True,
        "spatial": "bym2",
        "nesting": True,
        "external": True,
        "gvf": "joint",
        "fixed_sd": 2.0,
        "intercept_df": 3.0,
        "intercept_scale": 2.0,
        "scale_sd": 2.0,
        "ext_prior_sd": 2.0,
        "sum_to_zero_scale": 0.001,
        "fixed_rho": None,
        "min_stable": 10,
    },
    "mcmc": {
        "stage1": {"chains": 4, "warmup": 1000, "draws": 1000, "target_accept": 0.8, "thin": 1,
                   "integration_time": 2.0, "max_steps": 256},
        "stage2": {"chains": 4, "warmup": 3000, "draws": 3000, "target_accept": 0.8, "thin": 1,
                   "integration_time": 2.0, "max_steps": 256},
        "T_tilde": 500,
        "n_jobs": 1,
    },
    "benchmark": {"enabled": False, "systems": [], "p": 0.5},
    "summary": {"mass": 0.95, "rhat_bar": 1.03},
    "simulate": {"replicates": 1, "census": {}},
    "experiment": {
        "replicates": 20,
        "sigma_e": [0.25, 1.0, 2.0, 3.5],
        "area_re": [True, False],
        "stage1_mcmc": {"chains": 2, "warmup": 500, "draws": 500, "target_accept": 0.8,
                        "integration_time": 2.0, "max_steps": 256},
        "stage2_mcmc": {"chains": 2, "warmup": 500, "draws": 500, "target_accept": 0.8,
                        "integration_time": 2.0, "max_steps": 256},
        "T_tilde": 500,
        "alc_intercept": True,
        "n_jobs": 1,
        "census": {},
    },
}


def merge(base: dict, override: dict, path: str = "") -> dict:
    """Recursive merge of ``override`` into ``base``.

    Unknown keys are rejected; maps whose default is empty (column maps,
    census settings) are taken verbatim.
    """
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            out[k] = merge(base[k], v, where)
        else:
            out[k] = v
    return out


def load_config(path=None, seed: int | None = None) -> dict:
    """Read a JSON config (or start from defaults), apply a seed override and validate.

    Relative paths are resolved against the config file's directory.

    Raises
    ------
    ConfigError
    """
    user = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            user = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {p} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        base = p.resolve().parent
    cfg = merge(DEFAULTS, user)
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    for k, v in cfg["paths"].items():
        if v is not None:
            cfg["paths"][k] = str((base / v).resolve()) if not Path(v).is_absolute() else v
    validate(cfg)
    return cfg


def _build(cls, kw: dict, label: str):
    names = {f.name for f in fields(cls)}
    try:
        return cls(**{k: (tuple(v) if isinstance(v, list) and k.endswith("range") else v) for k, v in kw.items() if k in names})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {label} settings: {exc}") from None


def sampler_config(cfg: dict, stage: str, seed: int) -> SamplerConfig:
    kw = dict(cfg["mcmc"][stage])
    kw.setdefault("n_jobs", cfg["mcmc"].get("n_jobs", 1))
    return _build(SamplerConfig, {**kw, "seed": seed}, f"mcmc.{stage}")


def stage1_spec(cfg: dict) -> Stage1Spec:
    return _build(Stage1Spec, cfg["stage1"], "stage1")


def stage2_spec(cfg: dict) -> Stage2Spec:
    return _build(Stage2Spec, {**cfg["stage2"], "bench_p": cfg["benchmark"]["p"]}, "stage2")


def census_config(d: dict) -> CensusConfig:
    return _build(CensusConfig, d, "census")


def experiment_config(cfg: dict) -> ExperimentConfig:
    e = dict(cfg["experiment"])
    e["census"] = census_config(e.get("census", {}))
    e["sigma_e"] = tuple(e["sigma_e"])
    e["area_re"] = tuple(e["area_re"])
    e["seed"] = cfg["seed"]
    return _build(ExperimentConfig, e, "experiment")


def validate(cfg: dict) -> None:
    sim = cfg["simulate"]
    if not isinstance(sim["replicates"], int) or sim["replicates"] < 1:
        raise ConfigError("simulate.replicates must be an integer >= 1")
    census_config(sim["census"])
    experiment_config(cfg)
    stage1_spec(cfg)
    stage2_spec(cfg)
    for stage in ("stage1", "stage2"):
        sampler_config(cfg, stage, 0)
    if not isinstance(cfg["mcmc"]["T_tilde"], int) or cfg["mcmc"]["T_tilde"] < 1:
        raise ConfigError("mcmc.T_tilde must be a positive integer")
    if not cfg["benchmark"]["p"] > 0:
        raise ConfigError("benchmark.p must be positive")
    for pair in cfg["graph"]["bridges"]:
        if len(pair) != 2:
            raise ConfigError("graph.bridges entries must be [area_a, area_b] pairs")


def dump_config(cfg: dict, out_dir) -> Path:
    """Write the fully resolved configuration next to the outputs."""
    p = Path(out_dir) / "config.resolved.json"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str))
    return p
