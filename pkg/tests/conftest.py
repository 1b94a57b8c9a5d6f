from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from matchsynth.panel import COVARIATE_COLUMNS, PREC_COLUMNS, PanelDataset

_ACCEPTANCE: list[tuple[int, str]] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)


def random_covariates(rng: np.random.Generator, n: int) -> pd.DataFrame:
    data = {
        "elevation_m": rng.uniform(5, 1500, n),
        "slope_deg": rng.uniform(0, 20, n),
        "pop_density": rng.lognormal(4, 0.6, n),
        "road_density": rng.lognormal(-2.5, 0.5, n),
        "protected_share": rng.uniform(0, 0.4, n),
        "forest_pct_base": rng.uniform(2, 80, n),
        "forest_ha_base": rng.uniform(500, 20000, n),
    }
    base = rng.uniform(0.5, 1.5, n)
    season = rng.uniform(-0.3, 0.3, n)
    for m, col in enumerate(PREC_COLUMNS):
        data[col] = 150 * base * (1 + season * np.cos(2 * np.pi * m / 12)) * rng.lognormal(0, 0.1, n)
    return pd.DataFrame(data)[list(COVARIATE_COLUMNS)]


def random_panel(rng: np.random.Generator, n_treated: int, n_donors: int, t0: int = 2004, t1: int = 2019,
                 shock_year: int = 2015) -> PanelDataset:
    """Unstructured panel with random covariates and outcomes (no forest area)."""
    n = n_treated + n_donors
    units = [f"T{i:03d}" for i in range(n_treated)] + [f"D{j:03d}" for j in range(n_donors)]
    cov = random_covariates(rng, n)
    cov.index = pd.Index(units, name="unit_id")
    years = np.arange(t0, t1 + 1)
    outcome = rng.normal(1.0, 0.5, (n, years.size))
    exposure = np.r_[np.ones(n_treated, int), np.zeros(n_donors, int)]
    return PanelDataset(tuple(units), years, outcome, cov, exposure, shock_year)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
