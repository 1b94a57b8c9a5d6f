"""Jackknife+ intervals over pre-periods, placebo-in-time runs and robustness variants."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .ascm import Design, EffectSeries, UnitProblem, estimate_effects, estimate_pooled, fit_core
from .matching import AuditRule, MatchResult, match_nearest
from .panel import PanelDataset, StudyConfig, variant_label

logger = logging.getLogger(__name__)


@dataclass
class JackknifeResult:
    intervals: dict[int, tuple[np.ndarray, np.ndarray]]
    residuals: np.ndarray  # leave-one-out residual per omitted pre-period
    loo_counterfactual: np.ndarray  # (T0, T1)
    omitted_years: np.ndarray
    clamped: list[int] = field(default_factory=list)


def jackknife_ranks(level: int, n: int) -> tuple[int, int, bool]:
    """1-based order-statistic ranks ``(lower, upper)`` for a ``level``% interval.

    Upper rank is ``ceil(level/100 * (n + 1))`` and lower rank is
    ``floor((1 - level/100) * (n + 1))``, evaluated in integer arithmetic.
    Ranks outside ``1..n`` are clamped to the extreme order statistic and
    reported via the third element.
    """
    hi = -(-(level * (n + 1)) // 100)
    lo = ((100 - level) * (n + 1)) // 100
    clamped = hi > n or lo < 1
    return max(lo, 1), min(hi, n), clamped


def jackknife_plus(prob: UnitProblem, levels: Sequence[int], point: np.ndarray | None = None) -> JackknifeResult:
    """Jackknife+ effect intervals from leave-one-pre-period-out refits.

    Each pre-period ``s`` is dropped in turn, weights and ridge models are
    refit on the rest, and the refit predicts both ``s`` (giving the residual
    ``r_s``) and every post-period. Counterfactual bounds are order
    statistics of ``cf_s,t -/+ |r_s|``, mapped to effects as
    ``observed - bound``. Intervals are widened if needed so they contain
    the full-sample point estimate.
    """
    pre, post = np.asarray(prob.pre), np.asarray(prob.post)
    n = pre.size
    if n < 3:
        raise ValueError(f"jackknife+ needs at least 3 pre-periods, got {n}")
    resid = np.empty(n)
    loo = np.empty((n, post.size))
    for k, s in enumerate(pre):
        keep = np.delete(pre, k)
        try:
            core = fit_core(prob, keep, np.r_[s, post])
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise RuntimeError(f"leave-one-out refit omitting {int(prob.years[s])} failed: {exc}") from exc
        resid[k] = prob.y[s] - core.counterfactual[0]
        loo[k] = core.counterfactual[1:]
    observed = prob.y[post]
    if point is None:
        point = observed - fit_core(prob, pre, post).counterfactual
    lower_set = np.sort(loo - np.abs(resid)[:, None], axis=0)
    upper_set = np.sort(loo + np.abs(resid)[:, None], axis=0)
    intervals, clamped = {}, []
    for level in sorted(levels):
        r_lo, r_hi, was_clamped = jackknife_ranks(level, n)
        if was_clamped:
            clamped.append(level)
        cf_lo, cf_hi = lower_set[r_lo - 1], upper_set[r_hi - 1]
        lo = np.minimum(observed - cf_hi, point)
        hi = np.maximum(observed - cf_lo, point)
        intervals[level] = (lo, hi)
    return JackknifeResult(intervals, resid, loo, prob.years[pre], clamped)


@dataclass
class PlaceboRun:
    pseudo_year: int
    pooled: EffectSeries
    unit_mean: EffectSeries
    pre_shock_years: np.ndarray
    indistinguishable: bool | None  # None when no pre-shock years are evaluated


@dataclass
class PlaceboReport:
    true_shock: int
    runs: list[PlaceboRun]

    @property
    def pseudo_shock_years(self) -> list[int]:
        return [r.pseudo_year for r in self.runs]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.runs:
            lo, hi = r.pooled.intervals.get(95, (np.full(r.pooled.years.size, np.nan),) * 2)
            for k, y in enumerate(r.pooled.years):
                rows.append((r.pseudo_year, int(y), float(r.pooled.point[k]), float(lo[k]), float(hi[k])))
        return pd.DataFrame(rows, columns=["pseudo_shock_year", "year", "effect_pp", "ci95_lo", "ci95_hi"])


def placebo_in_time(panel: PanelDataset, match: MatchResult, config: StudyConfig,
                    pseudo_years: Sequence[int]) -> PlaceboReport:
    """Re-estimate with counterfeit shock years.

    For a pseudo year before the true shock, the years in
    ``[pseudo, true_shock)`` are the spuriousness check: the run is flagged
    indistinguishable from zero when every such year's pooled 95% interval
    (or the widest available level) contains zero.
    """
    t0 = int(panel.years[0])
    for p in pseudo_years:
        if not t0 < p <= int(panel.years[-1]) or p - t0 < 2:
            raise ValueError(f"pseudo shock year {p} leaves fewer than 2 pre-periods or lies outside the panel")
    runs = []
    for p in pseudo_years:
        shifted = panel.with_shock_year(int(p))
        cfg = config.with_overrides(shock_year=int(p))
        design = Design(shifted, cfg)
        _, pooled = estimate_pooled(shifted, match, cfg, design)
        units = estimate_effects(shifted, match, cfg, design)
        check = pooled.years[pooled.years < panel.shock_year]
        verdict = None
        if check.size and pooled.intervals:
            lo, hi = pooled.intervals[max(pooled.intervals)]
            sel = pooled.years < panel.shock_year
            verdict = bool(np.all((lo[sel] <= 0) & (hi[sel] >= 0)))
        runs.append(PlaceboRun(int(p), pooled, units.mean, check, verdict))
    return PlaceboReport(panel.shock_year, runs)


@dataclass
class VariantResult:
    label: str
    config: StudyConfig
    match: MatchResult | None
    pooled: EffectSeries | None
    unit_mean: EffectSeries | None
    error: str | None = None


@dataclass
class RobustnessReport:
    main_label: str
    variants: list[VariantResult]
    check_year: int

    def sign_agreement(self) -> dict[str, bool | None]:
        """Whether each variant's pooled estimate at ``check_year`` has the main sign."""
        main = self.variants[0].pooled
        ref = np.sign(main.at(self.check_year)) if main is not None else None
        out = {}
        for v in self.variants:
            if v.pooled is None or ref is None:
                out[v.label] = None
            else:
                out[v.label] = bool(np.sign(v.pooled.at(self.check_year)) == ref)
        return out

    @property
    def directionally_consistent(self) -> bool:
        return all(x is True for x in self.sign_agreement().values())

    def to_frame(self) -> pd.DataFrame:
        main = self.variants[0].pooled
        rows = []
        for v in self.variants:
            if v.pooled is None:
                continue
            for k, y in enumerate(v.pooled.years):
                agree = bool(np.sign(v.pooled.point[k]) == np.sign(main.at(int(y))))
                rows.append((v.label, int(y), float(v.pooled.point[k]), agree))
        return pd.DataFrame(rows, columns=["variant", "year", "effect_pp", "sign_agrees_main"])


def apply_variant(config: StudyConfig, variant: Sequence[tuple[str, str]]) -> StudyConfig:
    changes = {}
    for key, value in variant:
        if key == "k":
            changes["k"] = int(value)
        elif key == "audit":
            if value not in ("on", "off", "true", "false", "1", "0"):
                raise ValueError(f"audit must be on/off, got {value!r}")
            changes["audit"] = value in ("on", "true", "1")
        elif key == "metric":
            changes["metric"] = value
        else:
            raise ValueError(f"unsupported variant key {key!r}")
    return config.with_overrides(**changes)


def robustness_suite(panel: PanelDataset, config: StudyConfig, variants: Sequence[Sequence[tuple[str, str]]],
                     main: tuple[MatchResult, EffectSeries, EffectSeries] | None = None,
                     intervals: bool = False, table: pd.DataFrame | None = None) -> RobustnessReport:
    """Pooled and cross-unit estimates for the main run and each variant.

    A failing variant is recorded with its error and the suite continues.
    Directional consistency is judged at ``shock_year + 2`` (or the last
    post year when the panel is shorter).
    """
    post = panel.post_years
    check_year = int(panel.shock_year + 2) if panel.shock_year + 2 <= post[-1] else int(post[-1])
    results = []
    design = Design(panel, config, table)
    if main is None:
        m = match_nearest(panel, config.k, AuditRule.from_config(config), config.metric, table=design.table)
        _, pooled = estimate_pooled(panel, m, config, design, intervals=intervals)
        mean = estimate_effects(panel, m, config, design).mean
        main = (m, pooled, mean)
    results.append(VariantResult("main", config, *main))
    for variant in variants:
        label = variant_label(variant)
        try:
            cfg = apply_variant(config, variant)
            m = match_nearest(panel, cfg.k, AuditRule.from_config(cfg), cfg.metric, table=design.table)
            _, pooled = estimate_pooled(panel, m, cfg, design, intervals=intervals)
            mean = estimate_effects(panel, m, cfg, design).mean
            results.append(VariantResult(label, cfg, m, pooled, mean))
        except Exception as exc:  # noqa: BLE001 - suite records and continues
            logger.warning("robustness variant %s failed: %s", label, exc)
            results.append(VariantResult(label, config, None, None, None, f"{type(exc).__name__}: {exc}"))
    return RobustnessReport("main", results, check_year)
