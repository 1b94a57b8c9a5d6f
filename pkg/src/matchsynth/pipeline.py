"""End-to-end study runs: staged execution, artifacts, report and plot data."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .ascm import Design, estimate_effects, estimate_pooled, pooled_frame, weight_report, weights_frame
from .dgp import DgpSpec, simulate_panel, write_simulation
from .heterogeneity import TreeParams, effect_summary, tree_fit
from .inference import placebo_in_time, robustness_suite
from .matching import (
    AuditRule,
    MatchResult,
    balance,
    balance_report,
    match_nearest,
    matching_covariates,
    precipitation_pca,
)
from .panel import PanelDataset, StudyConfig, load_panel

logger = logging.getLogger(__name__)

STAGES = ("match", "estimate", "inference", "heterogeneity")
PER_UNIT_TRUNCATION = (-5.5, 3.5)
REPORT_NAME = "report.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _clean(obj):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _records(frame: pd.DataFrame) -> list[dict]:
    return [dict(zip(frame.columns, row)) for row in frame.itertuples(index=False, name=None)]


@dataclass
class RunReport:
    data: dict
    files: list[Path] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(_clean(self.data), sort_keys=True, indent=2, allow_nan=False) + "\n"

    def section(self, name: str) -> dict:
        return self.data[name]

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


class _Writer:
    """Tracks files written during a run so a failed run can be rolled back."""

    def __init__(self, out: Path):
        self.out = out
        self.created_dir = not out.exists()
        out.mkdir(parents=True, exist_ok=True)
        self.written: list[Path] = []
        self.backups: dict[Path, bytes] = {}

    def _track(self, path: Path) -> None:
        if path not in self.written:
            if path.exists():
                self.backups[path] = path.read_bytes()
            self.written.append(path)

    def csv(self, name: str, frame: pd.DataFrame) -> Path:
        path = self.out / name
        self._track(path)
        frame.to_csv(path, index=False, lineterminator="\n")
        return path

    def text(self, name: str, content: str) -> Path:
        path = self.out / name
        self._track(path)
        path.write_text(content, encoding="utf-8")
        return path

    def rollback(self) -> None:
        for path in self.written:
            if path in self.backups:
                path.write_bytes(self.backups[path])
            elif path.exists():
                path.unlink()
        if self.created_dir:
            shutil.rmtree(self.out, ignore_errors=True)


def _stage(name: str, fn: Callable, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - every stage failure is reported with its stage
        raise StageError(name, exc) from exc


def _parse_stages(stages: str | Sequence[str] | None) -> tuple[str, ...]:
    if stages is None:
        return STAGES
    if isinstance(stages, str):
        stages = [s.strip() for s in stages.split(",") if s.strip()]
    unknown = [s for s in stages if s not in STAGES]
    if unknown or not stages:
        raise ValueError(f"unknown stage(s) {unknown}; valid stages: {', '.join(STAGES)}")
    return tuple(s for s in STAGES if s in stages)


def _match_section(match: MatchResult) -> dict:
    return {
        "k": match.k,
        "metric": match.metric,
        "replacement": match.replacement,
        "audit": match.audit,
        "excluded_donors": list(match.excluded),
        "n_retained_donors": len(match.retained_donors),
        "balance": _records(balance_report(match)),
    }


def _load_match(out: Path, panel: PanelDataset, table: pd.DataFrame, config: StudyConfig) -> MatchResult:
    path = out / "matches.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run the match stage first")
    frame = pd.read_csv(path, dtype={"treated_id": str, "donor_id": str}, float_precision="round_trip")
    m = MatchResult.from_frame(frame, config.k)
    pre, post = balance(table, panel.exposure, m)
    return MatchResult(m.donor_sets, m.distances, pre, post, m.k, config.metric)


def _trends(panel: PanelDataset, price: pd.DataFrame | None) -> dict:
    treated = panel.exposure == 1
    out = {
        "years": panel.years,
        "treated_mean_pp": panel.outcome[treated].mean(axis=0),
        "donor_mean_pp": panel.outcome[~treated].mean(axis=0),
        "price_usd_per_kg": [None] * panel.years.size,
    }
    if price is not None:
        lookup = dict(zip(price["year"].astype(int), price["price_usd_per_kg"].astype(float)))
        out["price_usd_per_kg"] = [lookup.get(int(y)) for y in panel.years]
    return out


def _summary_years(panel: PanelDataset) -> list[int]:
    post = [int(y) for y in panel.post_years]
    wanted = [panel.shock_year + 1, panel.shock_year + 2]
    years = [y for y in wanted if y in post]
    return years or post


def read_price(path: str | Path) -> pd.DataFrame:
    price = pd.read_csv(path)
    missing = [c for c in ("year", "price_usd_per_kg") if c not in price.columns]
    if missing:
        raise ValueError(f"price file is missing columns {missing}")
    return price


def run_pipeline(
    config: StudyConfig | str | Path,
    panel_path: str | Path,
    covariates_path: str | Path,
    out_dir: str | Path,
    stages: str | Sequence[str] | None = None,
    price_path: str | Path | None = None,
    config_path: str | Path | None = None,
) -> RunReport:
    """Run the requested stages and write artifacts plus ``report.json``.

    Stages not requested are not recomputed; a later stage reads the earlier
    stage's CSV artifacts from ``out_dir``. On a stage failure every file
    written by this run is removed (or restored) and :class:`StageError` is
    raised.
    """
    if not isinstance(config, StudyConfig):
        config_path = config
        config = StudyConfig.from_file(config)
    stages = _parse_stages(stages)
    panel = load_panel(panel_path, covariates_path, config)
    price = read_price(price_path) if price_path is not None else None
    out = Path(out_dir)

    inputs = {"panel": sha256_file(panel_path), "covariates": sha256_file(covariates_path)}
    if config_path is not None:
        inputs["config"] = sha256_file(config_path)
    if price_path is not None:
        inputs["price"] = sha256_file(price_path)

    prior = out / REPORT_NAME
    data: dict = {}
    if set(stages) != set(STAGES) and prior.exists():
        data = json.loads(prior.read_text(encoding="utf-8"))
    data["config"] = config.as_dict()
    data["provenance"] = {
        "package": "matchsynth",
        "version": __version__,
        "seed": config.seed,
        "inputs": inputs,
        "stages": list(stages),
        "ridge_lambda_selection": "fixed (no cross-validation)",
        "pca_scaled": config.pca_scale,
    }
    data["panel"] = {
        "n_units": panel.n_units,
        "n_treated": panel.n_treated,
        "n_donors": panel.n_donors,
        "years": [int(panel.years[0]), int(panel.years[-1])],
        "shock_year": panel.shock_year,
    }

    writer = _Writer(out)
    try:
        _run_stages(stages, panel, config, price, writer, data)
        report = RunReport(data, list(writer.written))
        writer.text(REPORT_NAME, report.to_json())
        report.files = list(writer.written)
        return report
    except StageError:
        writer.rollback()
        raise
    except Exception as exc:
        writer.rollback()
        raise StageError("report", exc) from exc


def _run_stages(stages, panel, config, price, writer: _Writer, data: dict) -> None:
    out = writer.out
    table = _stage("match", matching_covariates, panel, config.pca_scale)
    design = None
    match = None
    unit_frame = None

    if "match" in stages:
        audit = AuditRule.from_config(config)
        match = _stage("match", match_nearest, panel, config.k, audit, config.metric, table)
        writer.csv("matches.csv", match.to_frame())
        writer.csv("balance.csv", balance_report(match))
        data["match"] = _match_section(match)

    if "estimate" in stages or "inference" in stages:
        if match is None:
            match = _stage("estimate" if "estimate" in stages else "inference", _load_match, out, panel, table, config)
        design = Design(panel, config, table)

    if "estimate" in stages:
        def estimate():
            units = estimate_effects(panel, match, config, design)
            pooled_fit, pooled = estimate_pooled(panel, match, config, design)
            return units, pooled_fit, pooled

        units, pooled_fit, pooled = _stage("estimate", estimate)
        unit_frame = units.frame()
        writer.csv("effects.csv", unit_frame)
        writer.csv("pooled.csv", pooled_frame(pooled_fit, pooled))
        wf = weights_frame([pooled_fit] + list(units.fits.values()))
        writer.csv("weights.csv", wf)
        data["pooled"] = {
            "years": pooled.years,
            "effect": pooled.point,
            "observed": pooled_fit.observed,
            "counterfactual": pooled_fit.counterfactual,
            "bias_correction": pooled_fit.bias_correction,
            "pre_rmspe": pooled_fit.pre_rmspe,
            "balance_gap": pooled_fit.balance_gap,
            "infeasible_balance": pooled_fit.infeasible_balance,
            "intervals": {str(lv): {"lo": lo, "hi": hi} for lv, (lo, hi) in pooled.intervals.items()},
            "clamped_levels": pooled.meta.get("clamped_levels", []),
            "pool_weight": config.pool_weight,
        }
        series = []
        for fit in units.fits.values():
            for y, v in zip(fit.pre_years, fit.pre_gap):
                series.append((fit.unit, int(y), float(v), "pre"))
            for y, v in zip(fit.years, fit.effects):
                series.append((fit.unit, int(y), float(v), "post"))
        data["per_unit"] = {
            "series": [dict(zip(("unit_id", "year", "effect_pp", "period"), r)) for r in series],
            "mean": {"years": units.mean.years, "effect": units.mean.point},
            "failures": dict(sorted(units.failures.items())),
            "infeasible_balance": sorted(u for u, f in units.fits.items() if f.infeasible_balance),
            "truncate": list(PER_UNIT_TRUNCATION),
        }
        unit_w = weight_report(list(units.fits.values()))
        pooled_w = weight_report([pooled_fit])
        data["weights"] = {
            "pooled": _records(pooled_w),
            "unit_mean": _records(unit_w),
        }
        data["trends"] = _trends(panel, price)

    if "inference" in stages:
        if config.placebo_years:
            rep = _stage("inference", placebo_in_time, panel, match, config, config.placebo_years)
            frame = rep.to_frame()
            writer.csv("placebo.csv", frame)
            data["placebo"] = {
                "true_shock": rep.true_shock,
                "rows": _records(frame),
                "indistinguishable_from_zero": {str(r.pseudo_year): r.indistinguishable for r in rep.runs},
            }
        if config.robustness:
            rob = _stage("inference", robustness_suite, panel, config, config.robustness, None, False, table)
            frame = rob.to_frame()
            writer.csv("robustness.csv", frame)
            data["robustness"] = {
                "check_year": rob.check_year,
                "rows": _records(frame),
                "sign_agreement": rob.sign_agreement(),
                "directionally_consistent": rob.directionally_consistent,
                "errors": {v.label: v.error for v in rob.variants if v.error},
                "retained_donors": {v.label: len(v.match.retained_donors) for v in rob.variants if v.match},
            }

    if "heterogeneity" in stages:
        if unit_frame is None:
            path = out / "effects.csv"
            if not path.exists():
                raise StageError("heterogeneity", FileNotFoundError(f"{path} not found; run the estimate stage first"))
            unit_frame = pd.read_csv(path, dtype={"unit_id": str}, float_precision="round_trip")
        data["heterogeneity"] = _stage("heterogeneity", _heterogeneity, panel, config, table, unit_frame, writer)


def _heterogeneity(panel, config, table, unit_frame: pd.DataFrame, writer: _Writer) -> dict:
    years = _summary_years(panel)
    targets = {}
    for unit, grp in unit_frame.groupby("unit_id", sort=False):
        targets[str(unit)] = effect_summary(dict(zip(grp["year"].astype(int), grp["effect_pp"])), years)
    units = [u for u in panel.treated_units if u in targets]
    summary = pd.DataFrame({"unit_id": units, "effect_summary_pp": [targets[u] for u in units]})
    writer.csv("effect_summary.csv", summary)

    pca = precipitation_pca(panel, config.pca_scale)
    load = pd.DataFrame(pca.loadings, columns=list(pca.variables))
    load.insert(0, "component", [f"PC{k + 1}" for k in range(load.shape[0])])
    load.insert(1, "explained_ratio", pca.explained_ratio)
    writer.csv("pca_loadings.csv", load)
    scores = pd.DataFrame(pca.scores, columns=[f"PC{k + 1}" for k in range(pca.scores.shape[1])])
    scores.insert(0, "unit_id", list(panel.units))
    writer.csv("pca_scores.csv", scores)
    section = {
        "summary_years": years,
        "targets": _records(summary),
        "pca": {
            "scaled": config.pca_scale,
            "variables": list(pca.variables),
            "explained_ratio": pca.explained_ratio,
            "loadings": _records(load),
        },
    }
    params = TreeParams()
    if len(units) < params.min_split:
        section["tree"] = {"skipped": f"{len(units)} treated units, fewer than min_split={params.min_split}"}
        return section
    model = tree_fit(summary["effect_summary_pp"].to_numpy(), table.loc[units].reset_index(drop=True), params)
    nodes = model.to_frame()
    writer.csv("tree.csv", nodes)
    dump = model.dump()
    writer.text("tree.txt", dump)
    section["tree"] = {
        "params": {"min_split": params.min_split, "min_bucket": params.min_bucket,
                   "max_depth": params.max_depth, "cp": params.cp},
        "nodes": _records(nodes),
        "text": dump,
        "note": "descriptive associations only",
    }
    return section


# ---------------------------------------------------------------------------
# simulation front end

def simulate_command(spec_path: str | Path, seed: int, out_dir: str | Path) -> dict[str, Path]:
    """Write an oracle panel, covariates, ground truth and a matching study config."""
    spec = DgpSpec.from_file(spec_path)
    panel, truth = simulate_panel(spec, seed)
    paths = write_simulation(panel, truth, out_dir)
    cfg = Path(out_dir) / "study.cfg"
    cfg.write_text(f"shock_year={spec.shock_year}\nseed={seed}\n", encoding="utf-8")
    paths["config"] = cfg
    return paths


# ---------------------------------------------------------------------------
# plot data

@dataclass
class PlotData:
    frame: pd.DataFrame
    meta: dict = field(default_factory=dict)


def _need(report: dict, section: str, stage: str) -> dict:
    if section not in report:
        raise ValueError(f"report has no '{section}' section; run the {stage} stage")
    return report[section]


def _pooled_plot(report):
    sec = _need(report, "pooled", "estimate")
    frame = pd.DataFrame({"year": sec["years"], "effect": sec["effect"]})
    for lv in ("80", "90", "95"):
        iv = sec["intervals"].get(lv)
        frame[f"lo{lv}"] = iv["lo"] if iv else np.nan
        frame[f"hi{lv}"] = iv["hi"] if iv else np.nan
    return PlotData(frame, {"clamped_levels": sec.get("clamped_levels", [])})


def _per_unit_plot(report):
    sec = _need(report, "per_unit", "estimate")
    frame = pd.DataFrame(sec["series"], columns=["unit_id", "year", "effect_pp", "period"])
    mean = dict(zip(sec["mean"]["years"], sec["mean"]["effect"]))
    frame["mean_effect_pp"] = [mean.get(y, np.nan) for y in frame["year"]]
    return PlotData(frame, {"truncate": sec["truncate"]})


def _balance_plot(report):
    sec = _need(report, "match", "match")
    return PlotData(pd.DataFrame(sec["balance"], columns=["covariate", "smd_pre", "smd_post"]))


def _trends_plot(report):
    sec = _need(report, "trends", "estimate")
    frame = pd.DataFrame({k: sec[k] for k in ("years", "treated_mean_pp", "donor_mean_pp", "price_usd_per_kg")})
    frame = frame.rename(columns={"years": "year"})
    return PlotData(frame, {"price_supplied": any(v is not None for v in sec["price_usd_per_kg"])})


def _tree_plot(report):
    sec = _need(report, "heterogeneity", "heterogeneity")["tree"]
    if "nodes" not in sec:
        raise ValueError(f"no tree in report: {sec.get('skipped')}")
    return PlotData(pd.DataFrame(sec["nodes"], columns=["node_id", "parent", "split_var", "threshold", "n", "mean",
                                                        "sse"]))


def _pca_plot(report):
    sec = _need(report, "heterogeneity", "heterogeneity")["pca"]
    rows = []
    for rec in sec["loadings"]:
        for var in sec["variables"]:
            rows.append((rec["component"], var, rec[var], rec["explained_ratio"]))
    return PlotData(pd.DataFrame(rows, columns=["component", "variable", "loading", "explained_ratio"]),
                    {"scaled": sec["scaled"]})


def _weights_plot(report):
    sec = _need(report, "weights", "estimate")
    rows = [("pooled", r["donor_id"], r["weight"]) for r in sec["pooled"]]
    rows += [("unit_mean", r["donor_id"], r["weight"]) for r in sec["unit_mean"]]
    return PlotData(pd.DataFrame(rows, columns=["fit", "donor_id", "weight"]))


def _placebo_plot(report):
    sec = _need(report, "placebo", "inference (with placebo_years)")
    frame = pd.DataFrame(sec["rows"], columns=["pseudo_shock_year", "year", "effect_pp", "ci95_lo", "ci95_hi"])
    return PlotData(frame, {"true_shock": sec["true_shock"]})


PLOT_KEYS: dict[str, Callable[[dict], PlotData]] = {
    "pooled": _pooled_plot,
    "per_unit": _per_unit_plot,
    "balance": _balance_plot,
    "trends": _trends_plot,
    "tree": _tree_plot,
    "pca": _pca_plot,
    "weights": _weights_plot,
    "placebo": _placebo_plot,
}


def emit_plot_data(report: RunReport | dict, key: str) -> PlotData:
    """Figure-ready long-format table for one figure key."""
    data = report.data if isinstance(report, RunReport) else report
    if key not in PLOT_KEYS:
        raise ValueError(f"unknown figure key {key!r}; valid keys: {', '.join(PLOT_KEYS)}")
    return PLOT_KEYS[key](data)


def write_plot(report: RunReport | dict, key: str, out: str | Path) -> list[Path]:
    """Write the CSV for ``key`` at ``out``, a JSON sidecar with metadata, and a PNG."""
    from .plotting import render

    plot = emit_plot_data(report, key)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    plot.frame.to_csv(out, index=False, lineterminator="\n")
    meta_path = out.with_suffix(".json")
    meta_path.write_text(json.dumps(_clean({"figure": key, **plot.meta}), sort_keys=True, indent=2) + "\n",
                         encoding="utf-8")
    png = out.with_suffix(".png")
    render(key, plot, png)
    return [out, meta_path, png]
