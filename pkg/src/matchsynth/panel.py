"""Unit-by-year panels: ingestion, validation and outcome transforms.

Outcomes are annual deforestation rates in percentage points with the sign
convention ``positive = forest loss``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

PREC_COLUMNS = tuple(f"prec_m{m:02d}" for m in range(1, 13))
COVARIATE_COLUMNS = (
    "elevation_m",
    "slope_deg",
    "pop_density",
    "road_density",
    "protected_share",
    "forest_pct_base",
    "forest_ha_base",
) + PREC_COLUMNS
PANEL_COLUMNS = ("unit_id", "year", "forest_ha")

CONFIG_KEYS = (
    "shock_year",
    "k",
    "balance_tol",
    "ridge_lambda",
    "lag_count",
    "ci_levels",
    "seed",
    "pool_weight",
    "metric",
    "audit",
    "audit_quantile",
    "exclude",
    "placebo_years",
    "robustness",
    "pca_scale",
)


class PanelValidationError(ValueError):
    """Input data violates the panel schema or its invariants."""


@dataclass(frozen=True)
class StudyConfig:
    shock_year: int
    k: int = 5
    balance_tol: float = 1.0
    ridge_lambda: float = 0.1
    lag_count: int = 3
    ci_levels: tuple[int, ...] = (80, 90, 95)
    seed: int = 0
    pool_weight: str = "forest"
    metric: str = "euclidean"
    audit: bool = True
    audit_quantile: float = 0.01
    exclude: tuple[str, ...] = ()
    placebo_years: tuple[int, ...] = ()
    robustness: tuple[tuple[tuple[str, str], ...], ...] = ()
    pca_scale: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.ridge_lambda < 0:
            raise ValueError(f"ridge_lambda must be >= 0, got {self.ridge_lambda}")
        if self.balance_tol < 0:
            raise ValueError(f"balance_tol must be >= 0, got {self.balance_tol}")
        if self.lag_count < 0:
            raise ValueError(f"lag_count must be >= 0, got {self.lag_count}")
        if not self.ci_levels:
            raise ValueError("ci_levels must be nonempty")
        bad = [lv for lv in self.ci_levels if lv not in (80, 90, 95)]
        if bad:
            raise ValueError(f"ci_levels must be a subset of {{80, 90, 95}}, got {bad}")
        if self.pool_weight not in ("forest", "land"):
            raise ValueError(f"pool_weight must be 'forest' or 'land', got {self.pool_weight!r}")
        if self.metric not in ("euclidean", "mahalanobis"):
            raise ValueError(f"metric must be 'euclidean' or 'mahalanobis', got {self.metric!r}")
        if not 0.0 <= self.audit_quantile < 1.0:
            raise ValueError("audit_quantile must lie in [0, 1)")

    def with_overrides(self, **changes) -> "StudyConfig":
        return replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "StudyConfig":
        unknown = sorted(set(values) - set(CONFIG_KEYS))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        if "shock_year" not in values:
            raise ValueError("config is missing required key 'shock_year'")
        kw: dict = {"shock_year": int(values["shock_year"])}
        if "k" in values:
            kw["k"] = int(values["k"])
        for key in ("balance_tol", "ridge_lambda", "audit_quantile"):
            if key in values:
                kw[key] = float(values[key])
        for key in ("lag_count", "seed"):
            if key in values:
                kw[key] = int(values[key])
        if "ci_levels" in values:
            kw["ci_levels"] = tuple(sorted(int(v) for v in _split_list(values["ci_levels"])))
        for key in ("pool_weight", "metric"):
            if key in values:
                kw[key] = values[key].strip().lower()
        for key in ("audit", "pca_scale"):
            if key in values:
                kw[key] = _parse_bool(values[key], key)
        if "exclude" in values:
            kw["exclude"] = tuple(_split_list(values["exclude"]))
        if "placebo_years" in values:
            kw["placebo_years"] = tuple(int(v) for v in _split_list(values["placebo_years"]))
        if "robustness" in values:
            kw["robustness"] = parse_variants(values["robustness"])
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "StudyConfig":
        return cls.from_mapping(read_key_values(path))

    def as_dict(self) -> dict:
        return {
            "shock_year": self.shock_year,
            "k": self.k,
            "balance_tol": self.balance_tol,
            "ridge_lambda": self.ridge_lambda,
            "lag_count": self.lag_count,
            "ci_levels": list(self.ci_levels),
            "seed": self.seed,
            "pool_weight": self.pool_weight,
            "metric": self.metric,
            "audit": self.audit,
            "audit_quantile": self.audit_quantile,
            "exclude": list(self.exclude),
            "placebo_years": list(self.placebo_years),
            "robustness": [variant_label(v) for v in self.robustness],
            "pca_scale": self.pca_scale,
        }


def _split_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _parse_bool(text: str, key: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{key}: expected a boolean, got {text!r}")


def parse_variants(text: str) -> tuple[tuple[tuple[str, str], ...], ...]:
    """Parse ``"k=1;audit=off"`` into one variant per ``;``-separated chunk.

    Within a chunk, comma-separated ``key=value`` settings are combined, so
    ``"k=1,audit=off"`` is a single variant changing both.
    """
    variants = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        settings = []
        for item in chunk.split(","):
            key, sep, value = item.partition("=")
            if not sep:
                raise ValueError(f"robustness variant {chunk!r}: expected key=value")
            key = key.strip().lower()
            if key not in ("k", "audit", "metric"):
                raise ValueError(f"robustness variant key must be k, audit or metric, got {key!r}")
            settings.append((key, value.strip().lower()))
        variants.append(tuple(settings))
    return tuple(variants)


def variant_label(variant: Sequence[tuple[str, str]]) -> str:
    return ",".join(f"{k}={v}" for k, v in variant)


def read_key_values(path: str | Path) -> dict[str, str]:
    """Read a flat ``key=value`` text file; ``#`` starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key = key.strip().lower()
        if key in values:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Rectangular unit-by-year panel with unit covariates and exposure flags.

    ``outcome`` and ``forest_area`` are ``(n_units, n_years)`` arrays aligned
    with ``units`` and ``years``. Arrays are made read-only on construction.
    """

    units: tuple[str, ...]
    years: np.ndarray
    outcome: np.ndarray
    covariates: pd.DataFrame
    exposure: np.ndarray
    shock_year: int
    forest_area: np.ndarray | None = None
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        years = np.asarray(self.years, dtype=int)
        outcome = np.array(self.outcome, dtype=float)
        exposure = np.asarray(self.exposure, dtype=int)
        n, t = len(self.units), len(years)
        if len(set(self.units)) != n:
            raise PanelValidationError("duplicate unit identifiers")
        if t == 0 or np.any(np.diff(years) != 1):
            raise PanelValidationError("years must be a contiguous nonempty range")
        if outcome.shape != (n, t):
            raise PanelValidationError(f"outcome has shape {outcome.shape}, expected {(n, t)}")
        if not np.all(np.isfinite(outcome)):
            i, j = np.argwhere(~np.isfinite(outcome))[0]
            raise PanelValidationError(f"non-finite outcome for unit {self.units[i]} year {years[j]}")
        if exposure.shape != (n,) or not np.all(np.isin(exposure, (0, 1))):
            raise PanelValidationError("exposure must be a 0/1 flag per unit")
        n1 = int(exposure.sum())
        if n1 < 1 or n1 == n:
            raise PanelValidationError(f"need at least one treated and one donor unit, got N1={n1}, N={n}")
        if not years[0] < self.shock_year <= years[-1]:
            raise PanelValidationError(
                f"shock_year {self.shock_year} must lie in ({years[0]}, {years[-1]}]"
            )
        if self.shock_year - years[0] < 2:
            raise PanelValidationError("at least 2 pre-shock periods are required")
        cov = self.covariates
        if list(cov.index) != list(self.units):
            raise PanelValidationError("covariate rows must be indexed by the panel units in order")
        forest = None
        if self.forest_area is not None:
            forest = np.array(self.forest_area, dtype=float)
            if forest.shape != (n, t):
                raise PanelValidationError("forest_area must match the outcome shape")
            implied = rates_from_forest(forest)
            if not np.allclose(implied, outcome[:, 1:], rtol=0.0, atol=1e-9):
                i, j = np.argwhere(~np.isclose(implied, outcome[:, 1:], rtol=0.0, atol=1e-9))[0]
                raise PanelValidationError(
                    f"outcome disagrees with forest area for unit {self.units[i]} year {years[j + 1]}"
                )
            forest.setflags(write=False)
        for arr in (years, outcome, exposure):
            arr.setflags(write=False)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "outcome", outcome)
        object.__setattr__(self, "exposure", exposure)
        object.__setattr__(self, "forest_area", forest)
        object.__setattr__(self, "_index", {u: i for i, u in enumerate(self.units)})

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_treated(self) -> int:
        return int(self.exposure.sum())

    @property
    def n_donors(self) -> int:
        return self.n_units - self.n_treated

    @property
    def treated_units(self) -> list[str]:
        return [u for u, v in zip(self.units, self.exposure) if v == 1]

    @property
    def donor_units(self) -> list[str]:
        return [u for u, v in zip(self.units, self.exposure) if v == 0]

    @property
    def pre_mask(self) -> np.ndarray:
        return self.years < self.shock_year

    @property
    def post_years(self) -> np.ndarray:
        return self.years[self.years >= self.shock_year]

    @property
    def pre_years(self) -> np.ndarray:
        return self.years[self.years < self.shock_year]

    def index_of(self, units: Iterable[str]) -> np.ndarray:
        try:
            return np.array([self._index[u] for u in units], dtype=int)
        except KeyError as exc:
            raise KeyError(f"unknown unit {exc.args[0]!r}") from None

    def series(self, unit: str) -> np.ndarray:
        return self.outcome[self._index[unit]]

    def with_shock_year(self, shock_year: int) -> "PanelDataset":
        return PanelDataset(
            units=self.units,
            years=self.years,
            outcome=self.outcome,
            covariates=self.covariates,
            exposure=self.exposure,
            shock_year=shock_year,
            forest_area=self.forest_area,
        )

    def with_outcome(self, outcome: np.ndarray) -> "PanelDataset":
        """Copy with replaced outcomes; forest areas are dropped."""
        return PanelDataset(
            units=self.units,
            years=self.years,
            outcome=outcome,
            covariates=self.covariates,
            exposure=self.exposure,
            shock_year=self.shock_year,
        )


def rates_from_forest(forest: np.ndarray) -> np.ndarray:
    forest = np.asarray(forest, dtype=float)
    prev = forest[..., :-1]
    return -100.0 * (forest[..., 1:] - prev) / prev


def compute_outcome(forest_series: Sequence[float], years: Sequence[int] | None = None) -> np.ndarray:
    """Annual deforestation rate ``-100 * (F_t - F_{t-1}) / F_{t-1}``.

    The result has one element fewer than the input; element ``k`` is the
    rate for the year of input element ``k + 1``.
    """
    forest = np.asarray(forest_series, dtype=float)
    if forest.ndim != 1 or forest.size < 2:
        raise ValueError("need a 1-d forest series with at least two years")
    zero = np.flatnonzero(forest[:-1] == 0)
    if zero.size:
        k = int(zero[0])
        label = years[k] if years is not None else f"index {k}"
        raise ZeroDivisionError(f"forest area is zero in {label}; the following rate is undefined")
    return rates_from_forest(forest)


def reconstruct_forest(initial: float, rates: Sequence[float]) -> np.ndarray:
    """Inverse of :func:`compute_outcome` given the first-year forest area."""
    factors = 1.0 - np.asarray(rates, dtype=float) / 100.0
    return initial * np.concatenate(([1.0], np.cumprod(factors)))


def baseline_average(covariate_series: Mapping[int, float], years: Iterable[int] = (2013, 2014)) -> float:
    years = list(years)
    if not years:
        raise ValueError("need at least one baseline year")
    missing = [y for y in years if y not in covariate_series]
    if missing:
        raise KeyError(f"baseline years missing from series: {missing}")
    return float(np.mean([covariate_series[y] for y in years]))


def avoided_hectares(effect_pp: float, forest_ha: float) -> float:
    """Forest loss avoided by an effect of ``effect_pp`` on ``forest_ha`` hectares."""
    if forest_ha < 0:
        raise ValueError("forest_ha must be nonnegative")
    return -effect_pp / 100.0 * forest_ha


def land_area(covariates: pd.DataFrame) -> pd.Series:
    """Land area in hectares implied by baseline forest hectares and percent cover."""
    pct = covariates["forest_pct_base"].astype(float)
    if np.any(pct <= 0):
        bad = list(covariates.index[pct <= 0])
        raise ValueError(f"land area undefined for units with zero forest percent: {bad[:5]}")
    return covariates["forest_ha_base"].astype(float) * 100.0 / pct


def pool_weights(panel: PanelDataset, weight_field: str = "forest") -> pd.Series:
    treated = panel.treated_units
    cov = panel.covariates.loc[treated]
    if weight_field == "forest":
        w = cov["forest_ha_base"].astype(float)
    elif weight_field == "land":
        w = land_area(cov)
    else:
        raise ValueError(f"weight_field must be 'forest' or 'land', got {weight_field!r}")
    if np.any(w < 0):
        raise ValueError("pooling weights must be nonnegative")
    if w.sum() <= 0:
        raise ValueError("total pooling weight is zero")
    return w / w.sum()


def weighted_pool(series: np.ndarray, weights: Sequence[float]) -> np.ndarray:
    """Weight-normalized average of the rows of ``series``."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("pooling weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("total pooling weight is zero")
    return (w / total) @ np.asarray(series, dtype=float)


def pool_treated(panel: PanelDataset, weight_field: str = "forest") -> np.ndarray:
    """Outcome series of the weight-averaged treated pseudo-unit."""
    w = pool_weights(panel, weight_field)
    rows = panel.index_of(w.index)
    return weighted_pool(panel.outcome[rows], w.to_numpy())


def _read_csv(path, what: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype={"unit_id": str}, keep_default_na=True, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise PanelValidationError(f"cannot read {what} file {path}: {exc}") from exc


def load_panel(panel_file, covariate_file, config: StudyConfig) -> PanelDataset:
    """Read and validate the panel and covariate CSV files.

    When the panel has no ``outcome_pp`` column the rates are derived from
    ``forest_ha`` and the first year drops out of the outcome range.
    """
    df = _read_csv(panel_file, "panel")
    cov = _read_csv(covariate_file, "covariate")

    missing = [c for c in PANEL_COLUMNS if c not in df.columns]
    if missing:
        raise PanelValidationError(f"panel file is missing columns {missing}")
    missing = [c for c in ("unit_id", "exposure") + COVARIATE_COLUMNS if c not in cov.columns]
    if missing:
        raise PanelValidationError(f"covariate file is missing columns {missing}")

    has_outcome = "outcome_pp" in df.columns
    value_cols = ["forest_ha"] + (["outcome_pp"] if has_outcome else [])
    for col in ["unit_id", "year"] + value_cols:
        bad = df[col].isna()
        if bad.any():
            row = df.loc[bad].iloc[0]
            raise PanelValidationError(
                f"panel row {int(bad.idxmax()) + 2}: missing {col} (unit {row['unit_id']}, year {row['year']})"
            )
    df["year"] = df["year"].astype(int)
    neg = df["forest_ha"] < 0
    if neg.any():
        row = df.loc[neg].iloc[0]
        raise PanelValidationError(
            f"panel row {int(neg.idxmax()) + 2}: negative forest area for unit {row['unit_id']} year {row['year']}"
        )
    dup = df.duplicated(["unit_id", "year"])
    if dup.any():
        row = df.loc[dup].iloc[0]
        raise PanelValidationError(f"duplicate row for unit {row['unit_id']} year {row['year']}")

    cov_bad = cov[["unit_id", "exposure", *COVARIATE_COLUMNS]].isna()
    if cov_bad.any().any():
        r, c = np.argwhere(cov_bad.to_numpy())[0]
        raise PanelValidationError(
            f"covariate row {r + 2}: missing {cov_bad.columns[c]} for unit {cov.iloc[r]['unit_id']}"
        )
    if cov["unit_id"].duplicated().any():
        raise PanelValidationError(f"duplicate covariate unit {cov.loc[cov['unit_id'].duplicated(), 'unit_id'].iloc[0]}")

    units = tuple(cov["unit_id"])
    panel_units = list(dict.fromkeys(df["unit_id"]))
    unknown = [u for u in panel_units if u not in set(units)]
    if unknown:
        raise PanelValidationError(f"panel unit {unknown[0]} has no covariate row")
    absent = [u for u in units if u not in set(panel_units)]
    if absent:
        raise PanelValidationError(f"covariate unit {absent[0]} has no panel rows")

    t0, t1 = int(df["year"].min()), int(df["year"].max())
    years = np.arange(t0, t1 + 1)
    have = set(zip(df["unit_id"], df["year"]))
    for u in units:
        for y in years:
            if (u, int(y)) not in have:
                raise PanelValidationError(f"unit {u} is missing year {int(y)} (years must be contiguous)")

    wide_f = df.pivot(index="unit_id", columns="year", values="forest_ha").loc[list(units), years]
    forest = wide_f.to_numpy(dtype=float)
    if has_outcome:
        outcome = df.pivot(index="unit_id", columns="year", values="outcome_pp").loc[list(units), years].to_numpy(float)
    else:
        if np.any(forest[:, :-1] == 0):
            i, j = np.argwhere(forest[:, :-1] == 0)[0]
            raise PanelValidationError(f"forest area is zero for unit {units[i]} year {years[j]}; rate undefined")
        outcome = rates_from_forest(forest)
        forest = forest[:, 1:]
        years = years[1:]

    exposure = cov["exposure"].astype(int).to_numpy()
    covariates = cov.set_index("unit_id")[list(COVARIATE_COLUMNS)].astype(float)
    covariates.index.name = "unit_id"
    return PanelDataset(
        units=units,
        years=years,
        outcome=outcome,
        covariates=covariates,
        exposure=exposure,
        shock_year=config.shock_year,
        forest_area=forest,
    )


def panel_frame(panel: PanelDataset) -> pd.DataFrame:
    """Long-format table ``unit_id,year,outcome_pp[,forest_ha]``."""
    n, t = panel.outcome.shape
    data = {
        "unit_id": np.repeat(np.array(panel.units, dtype=object), t),
        "year": np.tile(panel.years, n),
    }
    if panel.forest_area is not None:
        data["forest_ha"] = panel.forest_area.ravel()
    data["outcome_pp"] = panel.outcome.ravel()
    return pd.DataFrame(data)
