import json
import time

import numpy as np
import pandas as pd
import pytest

from tsln.cli import EXIT_CONFIG, EXIT_DIAGNOSTICS, EXIT_OK, main

TINY = {"chains": 2, "warmup": 200, "draws": 200}


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """Five areas on a path, four of them surveyed."""
    d = tmp_path_factory.mktemp("toy")
    rng = np.random.default_rng(0)
    ids = [f"r{i}" for i in range(5)]
    pd.DataFrame({"area_id": ids, "population": [800, 1200, 600, 1500, 900]}).to_csv(d / "areas.csv", index=False)
    pd.DataFrame({"area_a": ids[:-1], "area_b": ids[1:]}).to_csv(d / "edges.csv", index=False)
    rows = []
    for i, p in zip(range(4), (0.15, 0.25, 0.2, 0.35)):
        for _ in range(12):
            rows.append((ids[i], int(rng.uniform() < p), rng.uniform(20, 80)))
    pd.DataFrame(rows, columns=["area_id", "y", "w_raw"]).to_csv(d / "survey.csv", index=False)
    cfg = {
        "paths": {"survey": "survey.csv", "areas": "areas.csv", "edges": "edges.csv"},
        "stage2": {"gvf": "off", "nesting": False, "external": False},
        "mcmc": {"stage1": TINY, "stage2": TINY, "T_tilde": 50},
    }
    (d / "cfg.json").write_text(json.dumps(cfg))
    return d


def test_toy_end_to_end(toy, tmp_path):
    t0 = time.perf_counter()
    assert main(["fit", "--config", str(toy / "cfg.json"), "--out", str(tmp_path / "fit")]) == EXIT_OK
    cfg = json.loads((toy / "cfg.json").read_text())
    cfg["paths"]["fit_dir"] = str(tmp_path / "fit")
    (toy / "cfg_sum.json").write_text(json.dumps(cfg))
    assert main(["summarize", "--config", str(toy / "cfg_sum.json"), "--out", str(tmp_path / "sum")]) == EXIT_OK
    assert time.perf_counter() - t0 < 60
    diag = json.loads((tmp_path / "fit" / "mu_diagnostics.json").read_text())
    assert {"rhat_mu", "ess_mu", "max_rhat", "min_ess"} <= set(diag)
    assert set(diag["rhat_mu"]) == {f"r{i}" for i in range(5)}
    tab = pd.read_csv(tmp_path / "sum" / "summaries.csv")
    assert len(tab) == 5 and tab["median"].between(0, 1).all()
    assert (tmp_path / "fit" / "config.resolved.json").exists()


def test_rerun_is_byte_identical(toy, tmp_path):
    for name in ("a", "b"):
        assert main(["fit", "--config", str(toy / "cfg.json"), "--out", str(tmp_path / name), "--seed", "5"]) == EXIT_OK
    for f in ("direct.csv", "stage1_areas.csv", "mu_chain0.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_diagnostic_failure_exit(toy, tmp_path):
    fit = tmp_path / "fit"
    assert main(["fit", "--config", str(toy / "cfg.json"), "--out", str(fit)]) == EXIT_OK
    cfg = json.loads((toy / "cfg.json").read_text())
    cfg["paths"].update(fit_dir=str(fit), survey=str(toy / "survey.csv"), areas=str(toy / "areas.csv"),
                        edges=str(toy / "edges.csv"))
    cfg["summary"] = {"rhat_bar": 0.5}
    (tmp_path / "strict.json").write_text(json.dumps(cfg))
    assert main(["summarize", "--config", str(tmp_path / "strict.json"), "--out", str(tmp_path / "s")]) == EXIT_DIAGNOSTICS


def test_config_errors(toy, tmp_path):
    assert main(["fit", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text(json.dumps({"stage3": {}}))
    assert main(["fit", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    survey = pd.read_csv(toy / "survey.csv")
    survey.loc[0, "area_id"] = "zz"
    survey.to_csv(tmp_path / "survey.csv", index=False)
    cfg = json.loads((toy / "cfg.json").read_text())
    cfg["paths"].update(survey=str(tmp_path / "survey.csv"), areas=str(toy / "areas.csv"), edges=str(toy / "edges.csv"))
    (tmp_path / "unk.json").write_text(json.dumps(cfg))
    assert main(["fit", "--config", str(tmp_path / "unk.json"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_simulate(tmp_path):
    cfg = {"simulate": {"replicates": 2, "census": {"areas": 20, "sampled_areas": 10}}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "sim")]) == EXIT_OK
    areas = pd.read_csv(tmp_path / "sim" / "areas.csv")
    assert len(areas) == 20
    for r in range(2):
        s = pd.read_csv(tmp_path / "sim" / f"survey_r{r:03d}.csv")
        assert set(s.area_id) <= set(areas.area_id)
