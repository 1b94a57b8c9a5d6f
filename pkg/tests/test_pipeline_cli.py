import json

import numpy as np
import pandas as pd
import pytest

from matchsynth.cli import main
from matchsynth.pipeline import PLOT_KEYS, RunReport, StageError, emit_plot_data, run_pipeline

SPEC = "n_treated=8\nn_donors=60\nsigma=0.1\n"


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    spec = root / "dgp.spec"
    spec.write_text(SPEC, encoding="utf-8")
    assert main(["simulate", "--spec", str(spec), "--seed", "3", "--out", str(root / "data")]) == 0
    data = root / "data"
    cfg = data / "study.cfg"
    cfg.write_text(cfg.read_text(encoding="utf-8") + "placebo_years=2013\nrobustness=k=1\n", encoding="utf-8")
    return data


def _run(sim, out, *extra):
    return main(["run", "--config", str(sim / "study.cfg"), "--panel", str(sim / "panel.csv"),
                 "--covariates", str(sim / "covariates.csv"), "--out", str(out), *extra])


@pytest.fixture(scope="module")
def full_run(sim, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert _run(sim, out) == 0
    return out


def test_simulate_writes_inputs_and_truth(sim):
    assert {p.name for p in sim.iterdir()} >= {"panel.csv", "covariates.csv", "truth.csv", "income.csv", "study.cfg"}
    truth = pd.read_csv(sim / "truth.csv")
    assert len(truth) == 68
    np.testing.assert_allclose(truth["tau_true"].iloc[:8], -1.0)
    assert (truth["tau_true"].iloc[8:] == 0).all()


def test_full_run_artifacts_and_report(full_run):
    names = {p.name for p in full_run.iterdir()}
    assert names == {"matches.csv", "balance.csv", "effects.csv", "pooled.csv", "weights.csv", "placebo.csv",
                     "robustness.csv", "effect_summary.csv", "pca_loadings.csv", "pca_scores.csv", "tree.csv",
                     "tree.txt", "report.json"}
    rep = RunReport.load(full_run / "report.json")
    assert rep.data["provenance"]["version"] and len(rep.data["provenance"]["inputs"]) == 3
    assert rep.data["panel"]["n_treated"] == 8
    pooled = pd.read_csv(full_run / "pooled.csv")
    assert len(pooled) == 5 and {"ci90_lo", "ci90_hi"} <= set(pooled.columns)
    assert (pooled["ci90_lo"] <= pooled["effect_pp"]).all() and (pooled["effect_pp"] <= pooled["ci90_hi"]).all()
    weights = pd.read_csv(full_run / "weights.csv")
    for _, grp in weights.groupby("treated_id"):
        assert grp["weight"].sum() == pytest.approx(1.0)


def test_rerun_is_byte_identical(sim, full_run, tmp_path):
    assert _run(sim, tmp_path / "again") == 0
    for path in full_run.iterdir():
        assert path.read_bytes() == (tmp_path / "again" / path.name).read_bytes(), path.name


def test_match_stage_alone(sim, tmp_path):
    assert _run(sim, tmp_path / "m", "--stages", "match") == 0
    assert {p.name for p in (tmp_path / "m").iterdir()} == {"matches.csv", "balance.csv", "report.json"}
    rep = json.loads((tmp_path / "m" / "report.json").read_text(encoding="utf-8"))
    assert "match" in rep and "pooled" not in rep


def test_later_stages_rerun_from_artifacts(sim, full_run, tmp_path):
    out = tmp_path / "staged"
    assert _run(sim, out, "--stages", "match") == 0
    assert _run(sim, out, "--stages", "estimate") == 0
    assert _run(sim, out, "--stages", "heterogeneity") == 0
    for name in ("effects.csv", "pooled.csv", "weights.csv", "effect_summary.csv", "tree.csv"):
        assert (out / name).read_bytes() == (full_run / name).read_bytes(), name
    rep = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert {"match", "pooled", "heterogeneity"} <= set(rep)


def test_stage_failure_rolls_back(sim, tmp_path, capsys):
    out = tmp_path / "fresh"
    assert _run(sim, out, "--stages", "heterogeneity") == 3
    assert "heterogeneity" in capsys.readouterr().err
    assert not out.exists()

    out = tmp_path / "existing"
    assert _run(sim, out, "--stages", "match") == 0
    before = {p.name: p.read_bytes() for p in out.iterdir()}
    matches = pd.read_csv(out / "matches.csv")
    matches.loc[0, "donor_id"] = "NOPE"
    matches.to_csv(out / "matches.csv", index=False)
    before["matches.csv"] = (out / "matches.csv").read_bytes()
    assert _run(sim, out, "--stages", "estimate") == 3
    assert {p.name: p.read_bytes() for p in out.iterdir()} == before


def test_run_pipeline_raises_stage_error(sim, tmp_path):
    with pytest.raises(StageError) as info:
        run_pipeline(sim / "study.cfg", sim / "panel.csv", sim / "covariates.csv", tmp_path / "x",
                     stages="heterogeneity")
    assert info.value.stage == "heterogeneity"


def test_validation_errors_exit_2(sim, tmp_path, capsys):
    assert _run(sim, tmp_path / "o", "--k", "0") == 2
    assert "k must be" in capsys.readouterr().err
    assert main(["run", "--config", str(sim / "study.cfg"), "--panel", str(tmp_path / "none.csv"),
                 "--covariates", str(sim / "covariates.csv"), "--out", str(tmp_path / "o")]) == 2
    assert _run(sim, tmp_path / "o", "--stages", "match,dance") == 2


@pytest.mark.parametrize("key, columns", [
    ("pooled", ["year", "effect", "lo80", "hi80", "lo90", "hi90", "lo95", "hi95"]),
    ("per_unit", ["unit_id", "year", "effect_pp", "period", "mean_effect_pp"]),
    ("balance", ["covariate", "smd_pre", "smd_post"]),
    ("trends", ["year", "treated_mean_pp", "donor_mean_pp", "price_usd_per_kg"]),
    ("tree", ["node_id", "parent", "split_var", "threshold", "n", "mean", "sse"]),
    ("pca", ["component", "variable", "loading", "explained_ratio"]),
    ("weights", ["fit", "donor_id", "weight"]),
    ("placebo", ["pseudo_shock_year", "year", "effect_pp", "ci95_lo", "ci95_hi"]),
])
def test_plot_command_writes_csv_and_png(full_run, tmp_path, key, columns):
    out = tmp_path / f"{key}.csv"
    assert main(["plot", "--report", str(full_run / "report.json"), "--figure", key, "--out", str(out)]) == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == columns and len(frame) > 0
    assert out.with_suffix(".png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert json.loads(out.with_suffix(".json").read_text(encoding="utf-8"))["figure"] == key


def test_per_unit_plot_has_every_unit_year(full_run):
    rep = RunReport.load(full_run / "report.json")
    plot = emit_plot_data(rep, "per_unit")
    assert len(plot.frame) == 8 * 16
    assert plot.meta["truncate"] == [-5.5, 3.5]


def test_unknown_figure_key(full_run, tmp_path, capsys):
    with pytest.raises(ValueError, match="valid keys"):
        emit_plot_data(RunReport.load(full_run / "report.json"), "pie")
    assert main(["plot", "--report", str(full_run / "report.json"), "--figure", "pie",
                 "--out", str(tmp_path / "p.csv")]) == 2
    err = capsys.readouterr().err
    assert all(k in err for k in PLOT_KEYS)
