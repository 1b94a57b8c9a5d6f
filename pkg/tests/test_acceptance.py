"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Runtime budgets are asserted alongside the numerical tolerances.
"""

from __future__ import annotations

import filecmp
import math
import time

import numpy as np
import pandas as pd
import pytest

from matchsynth.ascm import estimate_effects, estimate_pooled
from matchsynth.dgp import DgpSpec, Surface, sign_identification_check, simulate_panel
from matchsynth.heterogeneity import TreeParams, pca_fit, tree_fit
from matchsynth.inference import robustness_suite
from matchsynth.matching import AuditRule, match_nearest, matching_covariates
from matchsynth.panel import StudyConfig, avoided_hectares, pool_weights
from matchsynth.pipeline import run_pipeline, simulate_command
from matchsynth.simplex import simplex_ls

from conftest import random_panel
from oracles import brute_force_matches, exhaustive_tree, simplex_exact, simplex_grid_min

pytestmark = pytest.mark.acceptance


def _config(**kw) -> StudyConfig:
    kw.setdefault("shock_year", 2015)
    kw.setdefault("audit", False)
    return StudyConfig(**kw)


def test_c01_hectare_arithmetic(acceptance):
    a = avoided_hectares(-1.7, 41233)
    b = avoided_hectares(-0.7, 41233)
    ok = 700 <= a <= 702 and 288 <= b <= 290
    acceptance(1, "hectare arithmetic", ok, f"{a:.2f} ha and {b:.2f} ha")
    assert ok


def test_c02_exact_fit_recovery(acceptance):
    start = time.perf_counter()
    # four factors plus the unit level give five loading dimensions for five
    # cluster donors, so the convex weights are unique
    spec = DgpSpec(n_treated=10, n_donors=50, factors=4, sigma_eps=0.0, sigma_nu=0.0)
    panel, truth = simulate_panel(spec, 3)
    match = match_nearest(panel, 5, None)
    fits = estimate_effects(panel, match, _config()).fits
    err = max(np.max(np.abs(f.effects - truth.tau[u])) for u, f in fits.items())
    bias = max(np.max(np.abs(f.bias_correction)) for f in fits.values())
    elapsed = time.perf_counter() - start
    ok = len(fits) == 10 and err <= 1e-6 and bias <= 1e-8 and elapsed < 5
    acceptance(2, "exact-fit recovery", ok, f"max |tau error| {err:.2e}, max |bias| {bias:.2e}, {elapsed:.1f}s")
    assert ok


def test_c03_att_recovery(acceptance):
    start = time.perf_counter()
    spec = DgpSpec(n_treated=20, n_donors=100, t0=1990, t1=2024, shock_year=2020, factors=2, sigma_eps=0.1)
    worst = 0.0
    for seed in range(20):
        panel, truth = simulate_panel(spec, seed)
        match = match_nearest(panel, 5, None)
        mean = estimate_effects(panel, match, _config(shock_year=2020)).mean
        worst = max(worst, float(np.max(np.abs(mean.point - truth.att))))
    elapsed = time.perf_counter() - start
    ok = worst < 0.1 and elapsed < 60
    acceptance(3, "ATT recovery", ok, f"max |mean effect - tau_t| {worst:.4f} pp over 20 seeds, {elapsed:.1f}s")
    assert ok


def test_c04_sign_identification(acceptance):
    start = time.perf_counter()
    # gamma = -2 + 4 * 1{precPC1 < 0}: positive on wet cells, negative on dry
    spec = DgpSpec(gamma=Surface.parse("threshold:precPC1:0:2:-2"), delta=Surface.parse("const:0.5"),
                   sigma_eps=0.05)
    hits: dict[str, list[bool]] = {}
    for rep in range(200):
        panel, truth = simulate_panel(spec, 10_000 + rep)
        match = match_nearest(panel, 5, None)
        fits = estimate_effects(panel, match, _config()).fits
        est = {u: float(np.mean(f.effects)) for u, f in fits.items()}
        for cell, check in sign_identification_check(spec, truth, est).items():
            assert check.analytic == "pass"
            hits.setdefault(cell, []).append(bool(check.empirical))
    elapsed = time.perf_counter() - start
    rates = {c: float(np.mean(v)) for c, v in sorted(hits.items())}
    ok = len(rates) == 2 and min(rates.values()) >= 0.95 and elapsed < 300
    acceptance(4, "sign identification", ok, f"per-cell agreement {rates}, {elapsed:.1f}s")
    assert ok


def test_c05_simplex_optimality(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    worse, better, exact_gap = 0.0, 0.0, 0.0
    for _ in range(100):
        A = rng.normal(size=(3, 5))
        y = rng.normal(size=5)
        w, _ = simplex_ls(y, A)
        obj = float(np.sum((y - w @ A) ** 2))
        grid = simplex_grid_min(y, A, 1000)
        worse = max(worse, obj - grid)
        better = max(better, grid - obj)
        exact_gap = max(exact_gap, abs(obj - simplex_exact(y, A)))
    elapsed = time.perf_counter() - start
    ok = worse <= 1e-6 and exact_gap <= 1e-9 and elapsed < 30
    acceptance(5, "simplex-weight optimality", ok,
               f"solver never above grid by more than {max(worse, 0):.1e} (below it by up to {better:.1e}); "
               f"|solver - exact face enumeration| {exact_gap:.1e}, {elapsed:.1f}s")
    assert ok


def test_c06_matching_oracle(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    mismatches = 0
    for rep in range(50):
        n1 = int(rng.integers(1, 30))
        n0 = int(rng.integers(10, 300 - n1))
        panel = random_panel(rng, n1, n0)
        k = int(rng.integers(1, min(8, n0) + 1))
        metric = "euclidean" if rep % 2 == 0 else "mahalanobis"
        audit = AuditRule() if rep % 3 == 0 else None
        table = matching_covariates(panel)
        got = match_nearest(panel, k, audit, metric, table)
        want = brute_force_matches(table, panel.exposure, k, metric, audit)
        mismatches += sum(got.donor_sets[t] != want[t] for t in want)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10
    acceptance(6, "matching oracle equivalence", ok, f"{mismatches} differing donor sets in 50 panels, {elapsed:.1f}s")
    assert ok


def test_c07_jackknife_coverage(acceptance):
    start = time.perf_counter()
    spec = DgpSpec()
    cover = []
    for rep in range(200):
        panel, truth = simulate_panel(spec, 20_000 + rep)
        cfg = _config()
        match = match_nearest(panel, 5, None)
        _, pooled = estimate_pooled(panel, match, cfg)
        target = truth.pooled_att(pool_weights(panel, cfg.pool_weight))
        lo, hi = pooled.intervals[90]
        cover.append((lo <= target) & (target <= hi))
    elapsed = time.perf_counter() - start
    rate = np.mean(cover, axis=0)
    ok = float(rate.min()) >= 0.80 and elapsed < 600
    acceptance(7, "jackknife+ coverage", ok,
               f"90% coverage per post year {np.round(rate, 3).tolist()}, {elapsed:.1f}s")
    assert ok


def test_c08_placebo_sanity(acceptance):
    start = time.perf_counter()
    spec = DgpSpec()
    inside = []
    for rep in range(100):
        panel, _ = simulate_panel(spec, 30_000 + rep)
        match = match_nearest(panel, 5, None)
        pseudo = panel.shock_year - 1
        fits = estimate_effects(panel.with_shock_year(pseudo), match, _config(shock_year=pseudo)).fits
        # pre-shock years covered by the pseudo post window
        eff = np.array([[e for y, e in f.effect_by_year().items() if y < panel.shock_year] for f in fits.values()])
        mean = eff.mean(axis=0)
        se = eff.std(axis=0, ddof=1) / math.sqrt(eff.shape[0])
        inside.append(bool(np.all(np.abs(mean) <= 2 * se)))
    elapsed = time.perf_counter() - start
    rate = float(np.mean(inside))
    ok = rate >= 0.90 and elapsed < 300
    acceptance(8, "placebo sanity", ok, f"{rate:.0%} of 100 pseudo-shock runs within 2 SE of zero, {elapsed:.1f}s")
    assert ok


def test_c09_cart_oracle(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(9)
    params = TreeParams(min_split=5, min_bucket=4, max_depth=2, cp=0.001)
    diffs = 0
    for rep in range(30):
        x = pd.DataFrame({
            "a": rng.normal(size=40),
            "b": rng.integers(0, 6, 40).astype(float),
            "c": rng.uniform(size=40),
        })
        y = np.where(x["a"] < 0, -1.0, 1.0) + 0.5 * x["b"] + rng.normal(0, 0.3, 40)
        model = tree_fit(y, x, params)
        want = exhaustive_tree(y, x, params)
        got = [(nd.depth, nd.split_var, nd.threshold, nd.n) for nd in model.nodes]
        exp = [(d["depth"], d["var"], d["thr"], d["n"]) for d in want]
        same_sse = np.allclose([nd.sse for nd in model.nodes], [d["sse"] for d in want], rtol=1e-12, atol=1e-12)
        diffs += int(sorted(got, key=str) != sorted(exp, key=str) or not same_sse)
    elapsed = time.perf_counter() - start
    ok = diffs == 0 and elapsed < 10
    acceptance(9, "CART oracle equivalence", ok, f"{diffs} of 30 trees differ from exhaustive search, {elapsed:.1f}s")
    assert ok


def test_c10_pca_properties(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(10)
    orth = recon = 0.0
    monotone = True
    for rep in range(50):
        n = int(rng.integers(13, 80))
        data = rng.normal(size=(n, 12)) @ rng.normal(size=(12, 12))
        model = pca_fit(data, scale=rep % 2 == 0)
        orth = max(orth, float(np.max(np.abs(model.loadings @ model.loadings.T - np.eye(12)))))
        recon = max(recon, float(np.max(np.abs(model.reconstruct() - (data - model.center) / model.scale))))
        monotone &= bool(np.all(np.diff(model.explained_variance) <= 1e-12))
    elapsed = time.perf_counter() - start
    ok = orth <= 1e-10 and recon <= 1e-10 and monotone and elapsed < 5
    acceptance(10, "PCA properties", ok,
               f"orthonormality {orth:.1e}, reconstruction {recon:.1e}, nonincreasing={monotone}, {elapsed:.1f}s")
    assert ok


def test_c11_desk_replica(acceptance, tmp_path):
    start = time.perf_counter()
    spec = tmp_path / "desk.spec"
    spec.write_text("n_treated=73\nn_donors=500\nt0=2004\nt1=2019\nshock_year=2015\n"
                    "gamma=const:-3.4\ndelta=const:0.5\n", encoding="utf-8")
    paths = simulate_command(spec, 2015, tmp_path / "data")
    cfg = tmp_path / "study.cfg"
    cfg.write_text("shock_year=2015\nk=5\nseed=2015\nplacebo_years=2014,2016,2017\nrobustness=k=1;audit=off\n",
                   encoding="utf-8")
    runs = []
    for name in ("a", "b"):
        run_pipeline(cfg, paths["panel"], paths["covariates"], tmp_path / name)
        runs.append(tmp_path / name)
    elapsed = time.perf_counter() - start
    cmp = filecmp.dircmp(runs[0], runs[1])
    names = sorted(p.name for p in runs[0].iterdir())
    _, mismatch, errors = filecmp.cmpfiles(runs[0], runs[1], names, shallow=False)
    panel = pd.read_csv(paths["panel"])
    shape_ok = panel["unit_id"].nunique() == 573 and panel["year"].nunique() == 16
    ok = not mismatch and not errors and not cmp.left_only and not cmp.right_only and shape_ok and elapsed < 120
    acceptance(11, "desk-scale replica", ok,
               f"{len(names)} files byte-identical across two runs={not mismatch}, 573 units x 16 years, "
               f"{elapsed:.1f}s")
    assert ok


def test_c12_robustness_direction(acceptance):
    start = time.perf_counter()
    spec = DgpSpec(gamma=Surface.parse("const:-3.4"))
    agree = []
    for rep in range(100):
        panel, _ = simulate_panel(spec, 40_000 + rep)
        report = robustness_suite(panel, _config(k=5), [(("k", "1"),)])
        agree.append(report.directionally_consistent)
    elapsed = time.perf_counter() - start
    rate = float(np.mean(agree))
    ok = rate >= 0.95 and elapsed < 300
    acceptance(12, "robustness directionality", ok, f"K=5 vs K=1 sign agreement {rate:.0%} of 100, {elapsed:.1f}s")
    assert ok
