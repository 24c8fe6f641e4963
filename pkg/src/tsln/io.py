"""CSV readers and writers for surveys, area frames and adjacency lists."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd

from .direct import SurveyDataset
from .errors import ConfigError, DuplicateAreaId, UnknownArea
from .graph import AreaGraph, build_graph, repair_graph
from .stage2 import AreaFrame

__all__ = ["read_areas", "read_survey", "read_edges", "load_graph", "write_json", "lattice_edges"]


def _read_csv(path, label: str, **kw) -> pd.DataFrame:
    if path is None:
        raise ConfigError(f"no {label} file configured")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{label} file {p} not found")
    return pd.read_csv(p, **kw)


def _require(df: pd.DataFrame, cols, label: str) -> None:
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise ConfigError(f"{label} file lacks columns {missing}")


def _codes(s: pd.Series) -> np.ndarray:
    """Integer codes of a label column in sorted-label order."""
    return pd.Categorical(s.astype(str), categories=sorted(s.astype(str).unique())).codes.astype(np.int64)


def read_areas(path, cfg: dict) -> AreaFrame:
    """Area frame from the areas CSV according to the ``areas``/``stage2``/``benchmark`` config."""
    ac, s2 = cfg["areas"], cfg["stage2"]
    df = _read_csv(path, "areas", dtype={ac["id_col"]: str})
    _require(df, [ac["id_col"], ac["population_col"]], "areas")
    ids = df[ac["id_col"]].tolist()
    if len(set(ids)) != len(ids):
        raise DuplicateAreaId("areas file repeats an area id")

    z_cols, z_names = [], []
    _require(df, s2["fixed_continuous"], "areas")
    for c in s2["fixed_continuous"]:
        z_cols.append(df[c].to_numpy(float))
        z_names.append(c)
    _require(df, list(s2["fixed_categorical"]), "areas")
    for c, ref in s2["fixed_categorical"].items():
        vals = df[c].astype(str)
        levels = sorted(vals.unique())
        if str(ref) not in levels:
            raise ConfigError(f"reference level {ref!r} not present in column {c!r}")
        for lev in levels:
            if lev != str(ref):
                z_cols.append((vals == lev).to_numpy(float))
                z_names.append(f"{c}[{lev}]")
    _require(df, s2["continuous"], "areas")
    G = df[s2["continuous"]].to_numpy(float) if s2["continuous"] else None
    remote = None
    if s2["remote_col"]:
        _require(df, [s2["remote_col"]], "areas")
        remote = _codes(df[s2["remote_col"]])
    nest = None
    if s2["nest_col"]:
        _require(df, [s2["nest_col"]], "areas")
        nest = _codes(df[s2["nest_col"]])
    bench = {}
    for b in cfg["benchmark"]["systems"]:
        _require(df, [b], "areas")
        col = df[b]
        bench[b] = np.array([None if pd.isna(v) else str(v) for v in col], dtype=object)
    ext_est = ext_se = None
    if s2["ext_est_col"]:
        _require(df, [s2["ext_est_col"], s2["ext_se_col"]], "areas")
        ext_est = df[s2["ext_est_col"]].to_numpy(float)
        ext_se = df[s2["ext_se_col"]].to_numpy(float)
    return AreaFrame(
        ids,
        df[ac["population_col"]].to_numpy(float),
        Z=np.column_stack(z_cols) if z_cols else None,
        z_names=z_names,
        G=G,
        g_names=list(s2["continuous"]),
        remote=remote,
        nest=nest,
        bench=bench,
        ext_est=ext_est,
        ext_se=ext_se,
    )


def read_survey(path, area_ids, cfg: dict) -> SurveyDataset:
    """Survey records mapped onto the area frame's ids."""
    sc = cfg["survey"]
    df = _read_csv(path, "survey", dtype={sc["area_col"]: str})
    _require(df, [sc["area_col"], sc["y_col"], sc["weight_col"]], "survey")
    index = {a: i for i, a in enumerate(area_ids)}
    unknown = set(df[sc["area_col"]]) - set(index)
    if unknown:
        raise UnknownArea(f"survey references areas missing from the areas file: {sorted(unknown)[:5]}")
    area = df[sc["area_col"]].map(index).to_numpy(np.int64)
    extra = [c for c in df.columns if c not in (sc["area_col"], sc["y_col"], sc["weight_col"])]
    cov = df[extra].reset_index(drop=True) if extra else None
    return SurveyDataset(area, df[sc["y_col"]].to_numpy(), df[sc["weight_col"]].to_numpy(float), len(area_ids), tuple(area_ids), cov)


def read_edges(path) -> list[tuple[str, str]]:
    df = _read_csv(path, "edges", dtype=str)
    _require(df, ["area_a", "area_b"], "edges")
    return list(zip(df["area_a"], df["area_b"]))


def load_graph(path, area_ids, cfg: dict) -> AreaGraph:
    """Adjacency from the edge list, with configured bridges and singleton augmentation."""
    g = build_graph(read_edges(path), area_ids)
    gc = cfg["graph"]
    if gc["bridges"] or gc["augment_singletons"]:
        g = repair_graph(g, [tuple(map(str, b)) for b in gc["bridges"]], gc["augment_singletons"])
    return g


def lattice_edges(ids: list, ncol: int) -> pd.DataFrame:
    """Rook adjacency of ids laid out row-major on a grid with ``ncol`` columns."""
    M = len(ids)
    rows = []
    for i in range(M):
        r, c = divmod(i, ncol)
        if c + 1 < ncol and i + 1 < M:
            rows.append((ids[i], ids[i + 1]))
        if i + ncol < M:
            rows.append((ids[i], ids[i + ncol]))
    return pd.DataFrame(rows, columns=["area_a", "area_b"])


def write_json(obj, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))
    return p


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, pd.DataFrame):
        return o.to_dict(orient="records")
    return str(o)
