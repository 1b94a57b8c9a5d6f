"""Simulated shock-exposure panels with known treatment effects.

Outcomes follow a structural model with latent income::

    W_it = rho' L_t + delta(X_i) V_i Z_t + nu_it
    Y_it = mu_i + alpha_i' L_t + gamma(X_i) W_it + eps_it

which reduces to an interactive fixed-effects panel with unit loadings
``Phi_i = alpha_i + gamma(X_i) rho`` and effect ``tau(X_i) = gamma * delta``.
The unit level ``mu_i`` is a loading on a constant factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .heterogeneity import orient_dry, pca_fit
from .panel import COVARIATE_COLUMNS, PREC_COLUMNS, PanelDataset, read_key_values

SURFACE_VARS = tuple(COVARIATE_COLUMNS) + ("precPC1", "precPC2", "land_ha")

# long-run monthly precipitation (mm), wet season December to March
CLIMATOLOGY = np.array([300, 280, 250, 120, 60, 40, 45, 40, 45, 70, 150, 260], dtype=float)

DEFAULT_SHIFT = {
    "elevation": -0.3,
    "slope": 0.6,
    "pop": -0.5,
    "road": -1.0,
    "protected": 0.5,
    "forest_pct": 0.6,
    "land": 0.0,
    "wet": 0.5,
    "season": 0.0,
}
LATENT = tuple(DEFAULT_SHIFT)


@dataclass(frozen=True)
class Surface:
    """Real-valued coefficient map over covariates.

    ``const:c``, ``linear:var:slope[:intercept]`` or
    ``threshold:var:cut:below:above`` (values equal to ``cut`` take ``above``).
    """

    kind: str
    params: tuple = ()
    var: str | None = None

    @classmethod
    def parse(cls, text: str) -> "Surface":
        parts = [p.strip() for p in str(text).split(":")]
        kind = parts[0].lower()
        try:
            if kind == "const" and len(parts) == 2:
                return cls("const", (float(parts[1]),))
            if kind == "linear" and len(parts) in (3, 4):
                slope = float(parts[2])
                intercept = float(parts[3]) if len(parts) == 4 else 0.0
                return cls("linear", (slope, intercept), _check_var(parts[1]))
            if kind == "threshold" and len(parts) == 5:
                return cls("threshold", (float(parts[2]), float(parts[3]), float(parts[4])), _check_var(parts[1]))
        except ValueError as exc:
            raise ValueError(f"bad surface {text!r}: {exc}") from None
        raise ValueError(f"bad surface {text!r}; expected const:c, linear:var:slope[:b] or threshold:var:cut:lo:hi")

    def __call__(self, table: pd.DataFrame) -> np.ndarray:
        n = len(table)
        if self.kind == "const":
            return np.full(n, self.params[0])
        x = table[self.var].to_numpy(dtype=float)
        if self.kind == "linear":
            slope, intercept = self.params
            return intercept + slope * x
        cut, below, above = self.params
        return np.where(x < cut, below, above)

    def cells(self, table: pd.DataFrame) -> np.ndarray:
        """Region label per row: the threshold side, or the sign of the surface."""
        if self.kind == "threshold":
            x = table[self.var].to_numpy(dtype=float)
            return np.where(x < self.params[0], "below", "above")
        if self.kind == "const":
            return np.full(len(table), "all")
        v = self(table)
        return np.where(v < 0, "negative", np.where(v > 0, "positive", "zero"))

    def __str__(self) -> str:
        if self.kind == "const":
            return f"const:{self.params[0]:g}"
        return ":".join([self.kind, self.var] + [f"{p:g}" for p in self.params])


def _check_var(name: str) -> str:
    alias = {"prec_pc1": "precPC1", "prec_pc2": "precPC2", "elevation": "elevation_m"}
    name = alias.get(name, name)
    if name not in SURFACE_VARS:
        raise ValueError(f"unknown surface variable {name!r}")
    return name


@dataclass(frozen=True)
class DgpSpec:
    n_treated: int = 20
    n_donors: int = 100
    t0: int = 2004
    t1: int = 2019
    shock_year: int = 2015
    factors: int = 2
    factor_mode: str = "random_walk"
    factor_scale: float = 0.5
    loading_mode: str = "hull"
    loading_scale: float = 0.5
    violation: float = 1.5
    cluster_size: int = 5
    cluster_spread: float = 0.05
    hull_alpha: float = 1.0
    level_low: float = 0.5
    level_high: float = 4.5
    gamma: Surface = Surface("const", (-2.0,))
    delta: Surface = Surface("const", (0.5,))
    rho: tuple[float, ...] = ()
    sigma_eps: float = 0.1
    sigma_nu: float = 0.0
    treated_shift: tuple[tuple[str, float], ...] = tuple(DEFAULT_SHIFT.items())

    def __post_init__(self):
        for name in ("gamma", "delta"):
            if isinstance(getattr(self, name), str):
                object.__setattr__(self, name, Surface.parse(getattr(self, name)))
        if self.factors < 1:
            raise ValueError("need at least one factor (r >= 1)")
        if self.sigma_eps < 0 or self.sigma_nu < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.n_treated < 1 or self.n_donors < 1:
            raise ValueError("need at least one treated and one donor unit")
        if not self.t0 < self.shock_year <= self.t1 or self.shock_year - self.t0 < 2:
            raise ValueError("shock year must leave >= 2 pre-periods inside [t0, t1]")
        if self.factor_mode not in ("random_walk", "white_noise"):
            raise ValueError(f"factor_mode must be random_walk or white_noise, got {self.factor_mode!r}")
        if self.loading_mode not in ("hull", "violation", "free"):
            raise ValueError(f"loading_mode must be hull, violation or free, got {self.loading_mode!r}")
        if self.loading_mode != "free" and self.n_donors < self.cluster_size * self.n_treated:
            raise ValueError(
                f"{self.loading_mode} mode needs n_donors >= cluster_size * n_treated "
                f"({self.cluster_size * self.n_treated}), got {self.n_donors}"
            )
        if self.rho and len(self.rho) != self.factors:
            raise ValueError("rho must have one entry per factor")
        if self.cluster_size < 1 or self.cluster_spread < 0 or self.hull_alpha <= 0:
            raise ValueError("need cluster_size >= 1, cluster_spread >= 0 and hull_alpha > 0")

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.t0, self.t1 + 1)

    @property
    def rho_vector(self) -> np.ndarray:
        return np.asarray(self.rho, dtype=float) if self.rho else np.full(self.factors, 0.3)

    def with_overrides(self, **changes) -> "DgpSpec":
        return replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "DgpSpec":
        ints = ("n_treated", "n_donors", "t0", "t1", "shock_year", "factors", "cluster_size")
        floats = ("factor_scale", "loading_scale", "violation", "cluster_spread", "hull_alpha", "level_low", "level_high",
                  "sigma_eps", "sigma_nu")
        kw: dict = {}
        for key, raw in values.items():
            if key in ints:
                kw[key] = int(raw)
            elif key in floats:
                kw[key] = float(raw)
            elif key in ("factor_mode", "loading_mode"):
                kw[key] = raw.strip().lower()
            elif key in ("gamma", "delta"):
                kw[key] = Surface.parse(raw)
            elif key == "rho":
                kw[key] = tuple(float(v) for v in raw.split(",") if v.strip())
            elif key == "sigma":
                kw["sigma_eps"] = float(raw)
            elif key.startswith("shift_"):
                name = key[len("shift_"):]
                if name not in DEFAULT_SHIFT:
                    raise ValueError(f"unknown covariate shift {key!r}")
                shifts = dict(kw.get("treated_shift", DEFAULT_SHIFT.items()))
                shifts[name] = float(raw)
                kw["treated_shift"] = tuple(shifts.items())
            else:
                raise ValueError(f"unknown spec key {key!r}")
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "DgpSpec":
        return cls.from_mapping(read_key_values(path))


@dataclass
class GroundTruth:
    tau: pd.Series  # per unit, zero for donors
    gamma: pd.Series
    delta: pd.Series
    att: np.ndarray  # per post year
    post_years: np.ndarray
    factors: np.ndarray  # (T, r)
    loadings: np.ndarray  # (N, r), reduced-form Phi
    level: np.ndarray
    alpha: np.ndarray
    rho: np.ndarray
    income: np.ndarray  # (N, T) latent W
    untreated_outcome: np.ndarray  # (N, T) Y(0)
    surface_table: pd.DataFrame = field(repr=False, default=None)
    clusters: dict = field(default_factory=dict)

    def pooled_att(self, weights: pd.Series) -> float:
        """Weighted mean of treated effects, matching a pooled pseudo-unit."""
        w = weights / weights.sum()
        return float((self.tau.loc[w.index] * w).sum())

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"unit_id": self.tau.index, "tau_true": self.tau.to_numpy()})


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _natural(latent: np.ndarray, rng: np.random.Generator) -> pd.DataFrame:
    """Map latent standard-normal draws to covariates in natural units."""
    u = dict(zip(LATENT, latent.T))
    n = latent.shape[0]
    out = {
        "elevation_m": 450.0 * np.exp(0.7 * u["elevation"]),
        "slope_deg": 2.0 + 10.0 * _sigmoid(u["slope"]),
        "pop_density": 90.0 * np.exp(0.6 * u["pop"]),
        "road_density": 0.1 * np.exp(0.5 * u["road"]),
        "protected_share": _sigmoid(u["protected"] - 3.0),
        "forest_pct_base": 100.0 * _sigmoid(u["forest_pct"] - 2.0),
    }
    land = 15000.0 * np.exp(0.5 * u["land"])
    out["forest_ha_base"] = land * out["forest_pct_base"] / 100.0
    months = np.arange(12)
    season = 1.0 + 0.3 * np.tanh(u["season"])[:, None] * np.cos(2 * np.pi * months / 12.0)[None, :]
    jitter = np.exp(0.05 * rng.standard_normal((n, 12)))
    precip = CLIMATOLOGY[None, :] * np.exp(0.35 * u["wet"])[:, None] * season * jitter
    for m, col in enumerate(PREC_COLUMNS):
        out[col] = precip[:, m]
    return pd.DataFrame(out)[list(COVARIATE_COLUMNS)]


def _factors(spec: DgpSpec, rng: np.random.Generator) -> np.ndarray:
    T = spec.t1 - spec.t0 + 1
    steps = rng.standard_normal((T, spec.factors))
    lam = np.cumsum(steps, axis=0) if spec.factor_mode == "random_walk" else steps
    lam = lam - lam.mean(axis=0)
    peak = np.max(np.linalg.norm(lam, axis=1))
    return lam * (spec.factor_scale / peak) if peak > 0 else lam


def surface_table(covariates: pd.DataFrame) -> pd.DataFrame:
    """Covariates plus oriented precipitation PCs and land area, for surfaces."""
    precip = covariates[list(PREC_COLUMNS)]
    pca = orient_dry(pca_fit(precip, scale=True), precip.to_numpy())
    table = covariates.copy()
    table["precPC1"] = pca.scores[:, 0]
    table["precPC2"] = pca.scores[:, 1]
    table["land_ha"] = covariates["forest_ha_base"] * 100.0 / covariates["forest_pct_base"]
    return table


def true_att(spec: DgpSpec, treated_covariates: pd.DataFrame) -> np.ndarray:
    """ATT per post year: the treated mean of ``gamma(x) * delta(x)``.

    ``treated_covariates`` must carry every surface variable (see
    :func:`surface_table`).
    """
    tau = spec.gamma(treated_covariates) * spec.delta(treated_covariates)
    n_post = spec.t1 - spec.shock_year + 1
    return np.full(n_post, float(np.mean(tau)))


def simulate_panel(spec: DgpSpec, seed: int) -> tuple[PanelDataset, GroundTruth]:
    """Draw one panel from ``spec``; identical seeds give identical panels."""
    rng = np.random.default_rng(seed)
    n1, n0 = spec.n_treated, spec.n_donors
    shift = np.array([dict(spec.treated_shift).get(k, 0.0) for k in LATENT])
    d_lat = len(LATENT)
    r = spec.factors

    clusters: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    donor_latent = rng.standard_normal((n0, d_lat))
    if spec.loading_mode == "free":
        treated_latent = shift + rng.standard_normal((n1, d_lat))
        donor_cov = _natural(donor_latent, rng)
        treated_cov = _natural(treated_latent, rng)
    else:
        k = spec.cluster_size
        for i in range(n1):
            center = shift + rng.standard_normal(d_lat)
            members = np.arange(i * k, (i + 1) * k)
            donor_latent[members] = center + spec.cluster_spread * rng.standard_normal((k, d_lat))
            clusters[i] = (members, rng.dirichlet(np.full(k, spec.hull_alpha)))
        donor_cov = _natural(donor_latent, rng)
        treated_cov = pd.DataFrame(
            [clusters[i][1] @ donor_cov.iloc[clusters[i][0]].to_numpy() for i in range(n1)],
            columns=donor_cov.columns,
        )

    treated_ids = [f"T{i + 1:03d}" for i in range(n1)]
    donor_ids = [f"D{j + 1:04d}" for j in range(n0)]
    units = treated_ids + donor_ids
    covariates = pd.concat([treated_cov, donor_cov], ignore_index=True)
    covariates.index = pd.Index(units, name="unit_id")
    exposure = np.r_[np.ones(n1, int), np.zeros(n0, int)]

    table = surface_table(covariates)
    gamma = spec.gamma(table)
    delta = spec.delta(table) * exposure
    if np.any(delta[:n1] < 0):
        raise ValueError("delta(x) must be nonnegative on treated units (monotonicity)")
    if not np.mean(delta[:n1]) > 0:
        raise ValueError("mean delta among treated units must be positive (relevance)")

    lam = _factors(spec, rng)
    donor_load = spec.loading_scale * rng.standard_normal((n0, r))
    donor_level = rng.uniform(spec.level_low, spec.level_high, n0)
    if spec.loading_mode == "free":
        treated_load = 0.5 * spec.loading_scale + spec.loading_scale * rng.standard_normal((n1, r))
        treated_level = rng.uniform(spec.level_low, spec.level_high, n1)
    else:
        treated_load = np.array([clusters[i][1] @ donor_load[clusters[i][0]] for i in range(n1)])
        treated_level = np.array([clusters[i][1] @ donor_level[clusters[i][0]] for i in range(n1)])
        if spec.loading_mode == "violation":
            treated_load[:, 0] += spec.violation
    loadings = np.vstack([treated_load, donor_load])
    level = np.r_[treated_level, donor_level]

    years = spec.years
    T = years.size
    post = (years >= spec.shock_year).astype(float)
    rho = spec.rho_vector
    alpha = loadings - gamma[:, None] * rho[None, :]
    eps = spec.sigma_eps * rng.standard_normal((n1 + n0, T))
    nu = spec.sigma_nu * rng.standard_normal((n1 + n0, T))
    common = lam @ rho  # (T,)
    income = common[None, :] + delta[:, None] * post[None, :] + nu
    outcome = level[:, None] + alpha @ lam.T + gamma[:, None] * income + eps
    untreated = outcome - (gamma * delta)[:, None] * post[None, :]

    forest = np.empty_like(outcome)
    prev = covariates["forest_ha_base"].to_numpy() * 1.1
    for t in range(T):
        prev = prev * (1.0 - outcome[:, t] / 100.0)
        forest[:, t] = prev

    panel = PanelDataset(
        units=tuple(units),
        years=years,
        outcome=outcome,
        covariates=covariates,
        exposure=exposure,
        shock_year=spec.shock_year,
        forest_area=forest,
    )
    tau = pd.Series(gamma * delta, index=units, name="tau_true")
    truth = GroundTruth(
        tau=tau,
        gamma=pd.Series(gamma, index=units),
        delta=pd.Series(delta, index=units),
        att=true_att(spec, table.iloc[:n1]),
        post_years=years[years >= spec.shock_year],
        factors=lam,
        loadings=loadings,
        level=level,
        alpha=alpha,
        rho=rho,
        income=income,
        untreated_outcome=untreated,
        surface_table=table,
        clusters={treated_ids[i]: tuple(donor_ids[j] for j in m) for i, (m, _) in clusters.items()},
    )
    return panel, truth


@dataclass
class CellCheck:
    cell: str
    n: int
    gamma_sign: int
    analytic: str  # "pass", "fail" or "uninformative"
    estimate: float | None
    empirical: bool | None


def sign_identification_check(spec: DgpSpec, truth: GroundTruth, estimates: Mapping[str, float] | None = None
                              ) -> dict[str, CellCheck]:
    """Compare the sign of ``tau = gamma * delta`` with the sign of ``gamma`` per cell.

    Cells are the regions of the ``gamma`` surface over treated units. With
    ``estimates`` (unit -> estimated effect), the cell-mean estimate is also
    checked against ``sign(gamma)``. Cells where ``delta = 0`` are
    uninformative.
    """
    treated = truth.delta.index[: spec.n_treated]
    table = truth.surface_table.loc[treated]
    cells = spec.gamma.cells(table)
    out = {}
    for cell in sorted(set(cells)):
        members = treated[cells == cell]
        g = truth.gamma.loc[members].to_numpy()
        d = truth.delta.loc[members].to_numpy()
        tau = g * d
        signs = set(np.sign(g).astype(int))
        g_sign = signs.pop() if len(signs) == 1 else 0
        if np.any(d == 0):
            analytic = "uninformative"
        else:
            analytic = "pass" if np.all(np.sign(tau) == np.sign(g)) else "fail"
        est, emp = None, None
        if estimates is not None:
            vals = [estimates[u] for u in members if u in estimates]
            if vals:
                est = float(np.mean(vals))
                emp = bool(np.sign(est) == g_sign) if g_sign != 0 else None
        out[cell] = CellCheck(cell, len(members), g_sign, analytic, est, emp)
    return out


def write_simulation(panel: PanelDataset, truth: GroundTruth, out_dir: str | Path) -> dict[str, Path]:
    """Write panel, covariate, ground-truth and latent-income CSV files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n, t = panel.outcome.shape
    long = pd.DataFrame({
        "unit_id": np.repeat(np.array(panel.units, dtype=object), t),
        "year": np.tile(panel.years, n),
        "forest_ha": panel.forest_area.ravel(),
        "outcome_pp": panel.outcome.ravel(),
    })
    cov = panel.covariates.reset_index()
    cov.insert(1, "exposure", panel.exposure)
    income = pd.DataFrame({
        "unit_id": np.repeat(np.array(panel.units, dtype=object), t),
        "year": np.tile(panel.years, n),
        "income": truth.income.ravel(),
    })
    paths = {
        "panel": out / "panel.csv",
        "covariates": out / "covariates.csv",
        "truth": out / "truth.csv",
        "income": out / "income.csv",
    }
    long.to_csv(paths["panel"], index=False, lineterminator="\n")
    cov.to_csv(paths["covariates"], index=False, lineterminator="\n")
    truth.frame().to_csv(paths["truth"], index=False, lineterminator="\n")
    income.to_csv(paths["income"], index=False, lineterminator="\n")
    return paths
