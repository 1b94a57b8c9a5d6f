"""Augmented synthetic control: simplex weights plus ridge bias correction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .matching import MatchResult, matching_covariates, standardize
from .panel import PanelDataset, StudyConfig, pool_weights
from .simplex import MAX_ITER, TOL, simplex_ls

logger = logging.getLogger(__name__)

# balance penalty ladder, relative to the outcome/covariate scale ratio
PENALTY_LADDER = (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)


class FitError(RuntimeError):
    """A single synthetic-control fit failed."""


@dataclass(frozen=True)
class SCWeights:
    weights: np.ndarray
    objective: float
    pre_rmspe: float
    balance_gap: float
    penalty: float = 0.0
    iterations: int = 0
    infeasible_balance: bool = False
    degenerate: bool = False
    donors: tuple[str, ...] | None = None


def fit_sc_weights(
    treated_pre,
    donors_pre,
    x_treated=None,
    x_donors=None,
    balance_tolerance: float = np.inf,
    donors: Sequence[str] | None = None,
    max_iter: int = MAX_ITER,
    tol: float = TOL,
) -> SCWeights:
    """Convex donor weights reproducing the treated pre-period path.

    ``donors_pre`` has one row per donor. Covariate balance
    ``||x_treated - x_donors.T @ w|| <= balance_tolerance`` is imposed through
    a quadratic penalty that is escalated along :data:`PENALTY_LADDER`; if the
    largest penalty still misses the tolerance the weights are returned with
    ``infeasible_balance=True``.
    """
    y = np.asarray(treated_pre, dtype=float)
    A = np.atleast_2d(np.asarray(donors_pre, dtype=float))
    if A.shape[1] != y.size:
        raise ValueError(f"donor matrix has {A.shape[1]} periods, treated series has {y.size}")
    if y.size < 2:
        raise ValueError("at least 2 pre-periods are required")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(A))):
        raise ValueError("NaN or infinite values in synthetic-control inputs")
    J = A.shape[0]
    has_x = x_treated is not None and x_donors is not None and np.size(x_treated) > 0
    if has_x:
        x = np.asarray(x_treated, dtype=float)
        X = np.asarray(x_donors, dtype=float).reshape(J, -1)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(X))):
            raise ValueError("NaN or infinite covariates")
    donors = tuple(donors) if donors is not None else None

    def gap(w):
        return float(np.linalg.norm(x - w @ X)) if has_x else 0.0

    def pack(w, iters, penalty=0.0, infeasible=False, degenerate=False):
        w = np.where(w < 0, 0.0, w)
        w = w / w.sum()
        resid = y - w @ A
        obj = float(resid @ resid)
        return SCWeights(w, obj, float(np.sqrt(obj / y.size)), gap(w), penalty, iters,
                         infeasible, degenerate, donors)

    if J == 1:
        return pack(np.ones(1), 0)
    if np.all(A == A[0]):
        return pack(np.full(J, 1.0 / J), 0, degenerate=True)

    w, iters = simplex_ls(y, A, max_iter=max_iter, tol=tol)
    if not has_x or not np.isfinite(balance_tolerance) or gap(w) <= balance_tolerance:
        return pack(w, iters)

    out_scale = float(np.sum((A - y) ** 2))
    cov_scale = float(np.sum((X - x) ** 2))
    base = out_scale / cov_scale if cov_scale > 0 else 1.0
    mu = 0.0
    for factor in PENALTY_LADDER:
        mu = base * factor
        s = np.sqrt(mu)
        w, it = simplex_ls(np.r_[y, s * x], np.hstack([A, s * X]), max_iter=max_iter, tol=tol)
        iters += it
        if gap(w) <= balance_tolerance:
            return pack(w, iters, mu)
    return pack(w, iters, mu, infeasible=True)


@dataclass(frozen=True)
class RidgeModels:
    intercept: np.ndarray  # (n_targets,)
    coef: np.ndarray  # (n_targets, n_features)
    lam: float
    donors: tuple[str, ...] | None = None

    def predict(self, features) -> np.ndarray:
        """Predictions with shape ``(n_rows, n_targets)``."""
        F = np.atleast_2d(np.asarray(features, dtype=float))
        return self.intercept + F @ self.coef.T


def fit_ridge_models(features, targets, lam: float, donors: Sequence[str] | None = None) -> RidgeModels:
    """Ridge regression per target column with an unpenalized intercept.

    ``features`` is ``(n_donors, p)``; ``targets`` is ``(n_donors, n_targets)``.
    Solves ``(Fc'Fc + lam I) b = Fc' yc`` on donor-centered data.
    """
    F = np.asarray(features, dtype=float)
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    J = Y.shape[0]
    F = F.reshape(J, -1)
    if J < 1:
        raise ValueError("ridge needs at least one donor")
    if lam < 0:
        raise ValueError("ridge penalty must be nonnegative")
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(Y))):
        raise ValueError("ridge inputs must be finite")
    p = F.shape[1]
    fbar = F.mean(axis=0)
    ybar = Y.mean(axis=0)
    if p == 0:
        return RidgeModels(ybar, np.zeros((Y.shape[1], 0)), lam, tuple(donors) if donors else None)
    Fc = F - fbar
    G = Fc.T @ Fc
    if lam == 0 and np.linalg.matrix_rank(Fc) < p:
        raise np.linalg.LinAlgError(
            "ridge system is singular at lambda=0 (more features than identified by donors); use lambda > 0"
        )
    B = np.linalg.solve(G + lam * np.eye(p), Fc.T @ (Y - ybar))
    return RidgeModels(ybar - fbar @ B, B.T, lam, tuple(donors) if donors else None)


def augmented_counterfactual(weights, models: RidgeModels, donors_post, f_treated, f_donors):
    """Synthetic outcome plus ridge bias correction.

    Returns ``(counterfactual, bias_correction, synthetic)`` per target period.
    """
    if isinstance(weights, SCWeights):
        if weights.donors is not None and models.donors is not None and weights.donors != models.donors:
            raise ValueError("weights and ridge models were fitted on differently ordered donor sets")
        w = weights.weights
    else:
        w = np.asarray(weights, dtype=float)
    Yp = np.atleast_2d(np.asarray(donors_post, dtype=float))
    if Yp.shape[0] != w.size:
        raise ValueError(f"{w.size} weights but {Yp.shape[0]} donor rows")
    synthetic = w @ Yp
    m_t = models.predict(np.asarray(f_treated, dtype=float)[None, :])[0]
    m_d = models.predict(f_donors)
    bias = m_t - w @ m_d
    return synthetic + bias, bias, synthetic


@dataclass(frozen=True)
class UnitProblem:
    """Everything one synthetic-control fit needs, already on the model scale.

    Outcome arrays span the full year range; ``pre`` and ``post`` index the
    year columns used for weight fitting and for counterfactuals.
    """

    unit: str
    donors: tuple[str, ...]
    years: np.ndarray
    y: np.ndarray  # (T,)
    donors_y: np.ndarray  # (J, T)
    cov_treated: np.ndarray  # (p,) standardized covariates
    cov_donors: np.ndarray  # (J, p)
    lag_center: np.ndarray  # (T,)
    lag_scale: np.ndarray  # (T,)
    pre: np.ndarray
    post: np.ndarray
    lam: float
    lag_count: int
    balance_tol: float


@dataclass(frozen=True)
class CoreFit:
    weights: SCWeights
    models: RidgeModels
    targets: np.ndarray
    counterfactual: np.ndarray
    bias: np.ndarray
    synthetic: np.ndarray
    lag_idx: np.ndarray


def fit_core(prob: UnitProblem, fit_idx: np.ndarray, target_idx: np.ndarray) -> CoreFit:
    """Fit weights on ``fit_idx`` years and predict ``target_idx`` years."""
    fit_idx = np.asarray(fit_idx, dtype=int)
    target_idx = np.asarray(target_idx, dtype=int)
    sc = fit_sc_weights(
        prob.y[fit_idx], prob.donors_y[:, fit_idx], prob.cov_treated, prob.cov_donors,
        prob.balance_tol, donors=prob.donors,
    )
    lag_idx = fit_idx[len(fit_idx) - min(prob.lag_count, len(fit_idx)):]
    f_t, f_d = _features(prob, lag_idx)
    models = fit_ridge_models(f_d, prob.donors_y[:, target_idx], prob.lam, donors=prob.donors)
    cf, bias, synth = augmented_counterfactual(sc, models, prob.donors_y[:, target_idx], f_t, f_d)
    return CoreFit(sc, models, target_idx, cf, bias, synth, lag_idx)


def _features(prob: UnitProblem, lag_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c, s = prob.lag_center[lag_idx], prob.lag_scale[lag_idx]
    f_t = np.r_[prob.cov_treated, (prob.y[lag_idx] - c) / s]
    f_d = np.hstack([prob.cov_donors.reshape(len(prob.donors), -1), (prob.donors_y[:, lag_idx] - c) / s])
    return f_t, f_d


@dataclass(frozen=True)
class AscmFit:
    unit: str
    donors: tuple[str, ...]
    weights: np.ndarray
    pre_rmspe: float
    balance_gap: float
    infeasible_balance: bool
    degenerate: bool
    ridge: RidgeModels
    years: np.ndarray  # post-shock years
    observed: np.ndarray
    counterfactual: np.ndarray
    effects: np.ndarray
    bias_correction: np.ndarray
    synthetic: np.ndarray
    pre_years: np.ndarray
    pre_gap: np.ndarray  # in-sample pre-period residual of the synthetic path
    problem: UnitProblem = field(repr=False, default=None)

    def effect_by_year(self) -> dict[int, float]:
        return {int(y): float(e) for y, e in zip(self.years, self.effects)}


def fit_unit(prob: UnitProblem) -> AscmFit:
    core = fit_core(prob, prob.pre, prob.post)
    observed = prob.y[prob.post]
    pre_synth = core.weights.weights @ prob.donors_y[:, prob.pre]
    return AscmFit(
        unit=prob.unit,
        donors=prob.donors,
        weights=core.weights.weights,
        pre_rmspe=core.weights.pre_rmspe,
        balance_gap=core.weights.balance_gap,
        infeasible_balance=core.weights.infeasible_balance,
        degenerate=core.weights.degenerate,
        ridge=core.models,
        years=prob.years[prob.post],
        observed=observed,
        counterfactual=core.counterfactual,
        effects=observed - core.counterfactual,
        bias_correction=core.bias,
        synthetic=core.synthetic,
        pre_years=prob.years[prob.pre],
        pre_gap=prob.y[prob.pre] - pre_synth,
        problem=prob,
    )


@dataclass
class EffectSeries:
    years: np.ndarray
    point: np.ndarray
    intervals: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    kind: str = "pooled"
    meta: dict = field(default_factory=dict)

    def at(self, year: int) -> float:
        idx = np.flatnonzero(self.years == year)
        if idx.size == 0:
            raise KeyError(f"no estimate for year {year}")
        return float(self.point[idx[0]])

    def to_frame(self) -> pd.DataFrame:
        data = {"year": self.years, "effect": self.point}
        for level in sorted(self.intervals):
            lo, hi = self.intervals[level]
            data[f"lo{level}"] = lo
            data[f"hi{level}"] = hi
        return pd.DataFrame(data)


class Design:
    """Model-scale inputs shared by every fit on one panel.

    Covariates are the z-scored matching covariates; lag features are
    centered and scaled per year over all panel units.
    """

    def __init__(self, panel: PanelDataset, config: StudyConfig, table: pd.DataFrame | None = None):
        self.panel = panel
        self.config = config
        if table is None:
            table = matching_covariates(panel, config.pca_scale)
        self.table = table
        self.z, _ = standardize(table)
        Y = panel.outcome
        self.lag_center = Y.mean(axis=0)
        sd = Y.std(axis=0, ddof=1)
        self.lag_scale = np.where(sd > 0, sd, 1.0)
        self.pre = np.flatnonzero(panel.years < panel.shock_year)
        self.post = np.flatnonzero(panel.years >= panel.shock_year)

    def problem(self, unit: str, y: np.ndarray, cov: np.ndarray, donors: Sequence[str]) -> UnitProblem:
        donors = tuple(donors)
        rows = self.panel.index_of(donors)
        return UnitProblem(
            unit=unit,
            donors=donors,
            years=self.panel.years,
            y=np.asarray(y, dtype=float),
            donors_y=self.panel.outcome[rows],
            cov_treated=np.asarray(cov, dtype=float),
            cov_donors=self.z.loc[list(donors)].to_numpy(),
            lag_center=self.lag_center,
            lag_scale=self.lag_scale,
            pre=self.pre,
            post=self.post,
            lam=self.config.ridge_lambda,
            lag_count=self.config.lag_count,
            balance_tol=self.config.balance_tol,
        )

    def unit_problem(self, unit: str, donors: Sequence[str]) -> UnitProblem:
        return self.problem(unit, self.panel.series(unit), self.z.loc[unit].to_numpy(), donors)

    def pooled_problem(self, donors: Sequence[str]) -> UnitProblem:
        w = pool_weights(self.panel, self.config.pool_weight)
        rows = self.panel.index_of(w.index)
        weights = w.to_numpy()
        y = weights @ self.panel.outcome[rows]
        cov = weights @ self.z.loc[list(w.index)].to_numpy()
        return self.problem("pooled", y, cov, donors)


@dataclass
class UnitEffects:
    fits: dict[str, AscmFit]
    failures: dict[str, str]
    mean: EffectSeries

    def frame(self) -> pd.DataFrame:
        return effects_frame(self.fits.values())


def estimate_effects(panel: PanelDataset, match: MatchResult, config: StudyConfig,
                     design: Design | None = None) -> UnitEffects:
    """One augmented synthetic control per treated unit on its matched donors."""
    design = design or Design(panel, config)
    fits: dict[str, AscmFit] = {}
    failures: dict[str, str] = {}
    for unit in panel.treated_units:
        if unit not in match.donor_sets:
            failures[unit] = "no matched donor set"
            continue
        try:
            fits[unit] = fit_unit(design.unit_problem(unit, match.donor_sets[unit]))
        except (ValueError, np.linalg.LinAlgError, FitError) as exc:
            failures[unit] = f"{type(exc).__name__}: {exc}"
            logger.warning("fit failed for %s: %s", unit, exc)
    years = panel.post_years
    if fits:
        point = np.mean([f.effects for f in fits.values()], axis=0)
    else:
        point = np.full(years.size, np.nan)
    mean = EffectSeries(years, point, {}, "cross-unit-mean",
                        {"n_units": len(fits), "n_failed": len(failures)})
    return UnitEffects(fits, failures, mean)


def estimate_pooled(panel: PanelDataset, match: MatchResult, config: StudyConfig,
                    design: Design | None = None, intervals: bool = True) -> tuple[AscmFit, EffectSeries]:
    """Single fit on the weight-averaged treated pseudo-unit.

    The donor pool is the union of all matched donors. Jackknife+ intervals
    are attached at ``config.ci_levels`` when ``intervals`` is set and there
    are at least three pre-periods.
    """
    design = design or Design(panel, config)
    prob = design.pooled_problem(match.retained_donors)
    fit = fit_unit(prob)
    series = EffectSeries(fit.years, fit.effects.copy(), {}, "pooled")
    if intervals and prob.pre.size >= 3:
        from .inference import jackknife_plus

        jk = jackknife_plus(prob, config.ci_levels, point=fit.effects)
        series.intervals = jk.intervals
        series.meta["clamped_levels"] = jk.clamped
    return fit, series


def effects_frame(fits: Sequence[AscmFit] | object) -> pd.DataFrame:
    rows = []
    for f in fits:
        for k, y in enumerate(f.years):
            rows.append((f.unit, int(y), f.effects[k], f.counterfactual[k], f.observed[k], f.bias_correction[k]))
    return pd.DataFrame(rows, columns=["unit_id", "year", "effect_pp", "counterfactual_pp", "observed_pp",
                                       "bias_correction_pp"])


def pooled_frame(fit: AscmFit, series: EffectSeries) -> pd.DataFrame:
    df = effects_frame([fit])
    for level in (80, 90, 95):
        lo, hi = series.intervals.get(level, (np.full(fit.years.size, np.nan),) * 2)
        df[f"ci{level}_lo"] = lo
        df[f"ci{level}_hi"] = hi
    return df


def weights_frame(fits: Sequence[AscmFit]) -> pd.DataFrame:
    rows = [(f.unit, d, float(w)) for f in fits for d, w in zip(f.donors, f.weights)]
    return pd.DataFrame(rows, columns=["treated_id", "donor_id", "weight"])


def weight_report(fits: Sequence[AscmFit]) -> pd.DataFrame:
    """Donor weights; for several fits, the mean weight across them.

    A donor absent from a unit's donor set contributes weight 0 for that
    unit.
    """
    fits = list(fits)
    if not fits:
        return pd.DataFrame(columns=["donor_id", "weight"])
    totals: dict[str, float] = {}
    for f in fits:
        for d, w in zip(f.donors, f.weights):
            totals[d] = totals.get(d, 0.0) + float(w)
    donors = sorted(totals)
    return pd.DataFrame({"donor_id": donors, "weight": [totals[d] / len(fits) for d in donors]})
