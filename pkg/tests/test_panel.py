import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from matchsynth.dgp import DgpSpec, simulate_panel, write_simulation
from matchsynth.panel import (
    COVARIATE_COLUMNS,
    PanelDataset,
    PanelValidationError,
    StudyConfig,
    avoided_hectares,
    baseline_average,
    compute_outcome,
    land_area,
    load_panel,
    parse_variants,
    pool_treated,
    pool_weights,
    reconstruct_forest,
    weighted_pool,
)

from conftest import random_covariates


@pytest.mark.parametrize(
    "forest, expected",
    [([100, 99], [1.0]), ([100, 100, 100], [0.0, 0.0]), ([200, 190, 190], [5.0, 0.0])],
)
def test_compute_outcome_examples(forest, expected):
    np.testing.assert_allclose(compute_outcome(forest), expected, rtol=0, atol=1e-12)


def test_compute_outcome_zero_area_names_year():
    with pytest.raises(ZeroDivisionError, match="2007"):
        compute_outcome([10, 5, 0, 3], years=[2005, 2006, 2007, 2008])


@given(st.lists(st.floats(1.0, 1e6), min_size=2, max_size=20))
def test_outcome_reconstruction_roundtrip(forest):
    rates = compute_outcome(forest)
    back = reconstruct_forest(forest[0], rates)
    np.testing.assert_allclose(back, forest, rtol=1e-9)


def test_baseline_average():
    assert baseline_average({2013: 10, 2014: 20}) == 15
    assert baseline_average({2013: 7.5}, years=[2013]) == 7.5
    assert baseline_average({2013: 0, 2014: 0}) == 0
    with pytest.raises(KeyError):
        baseline_average({2013: 1.0})


def test_weighted_pool_examples():
    np.testing.assert_allclose(weighted_pool([[1, 3], [3, 5]], [1, 1]), [2, 4])
    np.testing.assert_allclose(weighted_pool([[1, 3], [3, 5]], [1, 0]), [1, 3])
    # (2*3 + 1*0) / 3
    assert weighted_pool([[3.0], [0.0]], [2, 1])[0] == pytest.approx(2.0, abs=1e-15)
    with pytest.raises(ValueError, match="zero"):
        weighted_pool([[1.0], [2.0]], [0, 0])


def _tiny_panel(weights=(2.0, 1.0)):
    cov = random_covariates(np.random.default_rng(0), 3)
    cov["forest_ha_base"] = [weights[0], weights[1], 5.0]
    cov["forest_pct_base"] = [50.0, 10.0, 20.0]
    cov.index = pd.Index(["a", "b", "c"], name="unit_id")
    outcome = np.array([[3.0, 1.0, 1.0], [0.0, 4.0, 1.0], [9.0, 9.0, 9.0]])
    return PanelDataset(("a", "b", "c"), np.arange(2000, 2003), outcome, cov, np.array([1, 1, 0]), 2002)


def test_pool_treated_forest_and_land_weights():
    panel = _tiny_panel()
    np.testing.assert_allclose(pool_treated(panel, "forest"), [2.0, 2.0, 1.0])
    # land area = forest_ha * 100 / pct -> 4 and 10
    land = land_area(panel.covariates.loc[["a", "b"]])
    np.testing.assert_allclose(land, [4.0, 10.0])
    np.testing.assert_allclose(pool_treated(panel, "land"), (4 * np.array([3, 1, 1]) + 10 * np.array([0, 4, 1])) / 14)
    assert pool_weights(panel).sum() == pytest.approx(1.0)


def test_pool_treated_equal_weights_is_mean():
    panel = _tiny_panel((1.0, 1.0))
    np.testing.assert_allclose(pool_treated(panel), panel.outcome[:2].mean(axis=0), atol=1e-15)


def test_avoided_hectares_reported_magnitudes():
    # 41233 ha of forest at effects of -1.7 pp and -0.7 pp
    assert avoided_hectares(-1.7, 41233) == pytest.approx(700.961, abs=1e-9)
    assert round(avoided_hectares(-0.7, 41233)) == 289
    assert avoided_hectares(0.0, 1234.0) == 0.0
    with pytest.raises(ValueError):
        avoided_hectares(-1.0, -5.0)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0, 1e6), st.floats(-3, 3))
def test_avoided_hectares_linear(e1, e2, ha, c):
    assert avoided_hectares(e1 + e2, ha) == pytest.approx(avoided_hectares(e1, ha) + avoided_hectares(e2, ha),
                                                          rel=1e-9, abs=1e-6)
    assert avoided_hectares(c * e1, ha) == pytest.approx(c * avoided_hectares(e1, ha), rel=1e-9, abs=1e-6)


# ---------------------------------------------------------------- loading

def _write(tmp_path, panel_rows, cov_units=("u1", "u2"), exposure=(1, 0)):
    cov = random_covariates(np.random.default_rng(1), len(cov_units))
    cov.insert(0, "exposure", list(exposure))
    cov.insert(0, "unit_id", list(cov_units))
    p = tmp_path / "panel.csv"
    c = tmp_path / "cov.csv"
    pd.DataFrame(panel_rows).to_csv(p, index=False)
    cov.to_csv(c, index=False)
    return p, c


def _rows(units=("u1", "u2"), years=(2000, 2001, 2002), start=100.0):
    rows = []
    for i, u in enumerate(units):
        f = start + 10 * i
        for y in years:
            rows.append({"unit_id": u, "year": y, "forest_ha": f})
            f *= 0.98
    return rows


def test_load_panel_derives_outcome(tmp_path):
    p, c = _write(tmp_path, _rows(years=(2000, 2001, 2002, 2003)))
    panel = load_panel(p, c, _cfg(2003))
    assert list(panel.years) == [2001, 2002, 2003]
    np.testing.assert_allclose(panel.outcome, 2.0, atol=1e-12)
    assert panel.n_treated == 1 and panel.n_donors == 1


def test_three_year_file_leaves_too_few_pre_periods(tmp_path):
    # first-differencing drops a year: 2001-2002 cannot hold two pre-shock years
    p, c = _write(tmp_path, _rows())
    with pytest.raises(PanelValidationError, match="2 pre-shock"):
        load_panel(p, c, _cfg(2002))


def _cfg(shock):
    return StudyConfig(shock_year=shock)


def test_load_panel_gap_year_names_unit_and_year(tmp_path):
    rows = [r for r in _rows(years=(2000, 2001, 2002, 2003)) if not (r["unit_id"] == "u2" and r["year"] == 2001)]
    p, c = _write(tmp_path, rows)
    with pytest.raises(PanelValidationError, match=r"u2.*2001"):
        load_panel(p, c, _cfg(2003))


def test_load_panel_rejections(tmp_path):
    rows = _rows()
    rows[1]["forest_ha"] = -1
    p, c = _write(tmp_path, rows)
    with pytest.raises(PanelValidationError, match="negative forest area"):
        load_panel(p, c, _cfg(2002))

    rows = _rows()
    rows[2]["forest_ha"] = None
    p, c = _write(tmp_path, rows)
    with pytest.raises(PanelValidationError, match="row 4: missing forest_ha"):
        load_panel(p, c, _cfg(2002))

    p, c = _write(tmp_path, _rows(units=("u1", "u2", "zz")))
    with pytest.raises(PanelValidationError, match="zz"):
        load_panel(p, c, _cfg(2002))


def test_load_panel_with_outcome_column_checks_consistency(tmp_path):
    rows = _rows(years=(2000, 2001, 2002, 2003))
    for r in rows:
        r["outcome_pp"] = 2.0
    p, c = _write(tmp_path, rows)
    panel = load_panel(p, c, _cfg(2002))
    assert list(panel.years) == [2000, 2001, 2002, 2003]
    rows[5]["outcome_pp"] = 2.5
    p, c = _write(tmp_path, rows)
    with pytest.raises(PanelValidationError, match="disagrees"):
        load_panel(p, c, _cfg(2002))


def test_study_shape_round_trip(tmp_path):
    # 73 treated municipalities and 365 donors over 2004-2019
    panel, truth = simulate_panel(DgpSpec(n_treated=73, n_donors=365, t0=2004, t1=2019, shock_year=2015), 1)
    paths = write_simulation(panel, truth, tmp_path)
    loaded = load_panel(paths["panel"], paths["covariates"], _cfg(2015))
    assert loaded.n_treated == 73 and loaded.n_units == 438 and loaded.years.size == 16
    np.testing.assert_allclose(loaded.outcome, panel.outcome, rtol=0, atol=1e-12)


def test_panel_invariants():
    cov = random_covariates(np.random.default_rng(2), 3)
    cov.index = pd.Index(["a", "b", "c"], name="unit_id")
    y = np.zeros((3, 4))
    years = np.arange(2000, 2004)
    with pytest.raises(PanelValidationError, match="2 pre-shock"):
        PanelDataset(("a", "b", "c"), years, y, cov, [1, 0, 0], 2001)
    with pytest.raises(PanelValidationError, match="treated and one donor"):
        PanelDataset(("a", "b", "c"), years, y, cov, [1, 1, 1], 2002)
    with pytest.raises(PanelValidationError, match="contiguous"):
        PanelDataset(("a", "b", "c"), np.array([2000, 2001, 2003, 2004]), y, cov, [1, 0, 0], 2003)
    bad = y.copy()
    bad[1, 2] = np.nan
    with pytest.raises(PanelValidationError, match="unit b year 2002"):
        PanelDataset(("a", "b", "c"), years, bad, cov, [1, 0, 0], 2002)
    panel = PanelDataset(("a", "b", "c"), years, y, cov, [1, 0, 0], 2002)
    with pytest.raises(ValueError):
        panel.outcome[0, 0] = 1.0


def test_config_parsing(tmp_path):
    f = tmp_path / "study.cfg"
    f.write_text("# study\nshock_year=2015\nk=3\nci_levels=95,80\nbalance_tol=0.5\naudit=off\n"
                 "robustness=k=1;audit=off\n", encoding="utf-8")
    cfg = StudyConfig.from_file(f)
    assert (cfg.k, cfg.ci_levels, cfg.balance_tol, cfg.audit) == (3, (80, 95), 0.5, False)
    assert cfg.robustness == ((("k", "1"),), (("audit", "off"),))
    assert parse_variants("k=1,audit=off") == ((("k", "1"), ("audit", "off")),)
    for text in ("shock_year=2015\nk=0\n", "shock_year=2015\nridge_lambda=-1\n", "shock_year=2015\nci_levels=70\n",
                 "k=5\n", "shock_year=2015\nbogus=1\n"):
        f.write_text(text, encoding="utf-8")
        with pytest.raises(ValueError):
            StudyConfig.from_file(f)


def test_covariate_schema_order():
    assert COVARIATE_COLUMNS[:7] == ("elevation_m", "slope_deg", "pop_density", "road_density", "protected_share",
                                     "forest_pct_base", "forest_ha_base")
    assert COVARIATE_COLUMNS[7:] == tuple(f"prec_m{m:02d}" for m in range(1, 13))
