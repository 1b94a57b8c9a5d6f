"""PNG renderings of the plot-data tables (headless matplotlib)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402
import numpy as np  # noqa: E402


def _pooled(ax, frame, meta):
    for lv, alpha in (("95", 0.15), ("90", 0.25), ("80", 0.35)):
        lo, hi = frame[f"lo{lv}"], frame[f"hi{lv}"]
        if lo.notna().any():
            ax.fill_between(frame["year"], lo, hi, color="tab:blue", alpha=alpha, lw=0, label=f"{lv}%")
    ax.plot(frame["year"], frame["effect"], "o-", color="tab:blue", label="pooled effect")
    ax.axhline(0, color="0.4", lw=0.8)
    ax.set_ylabel("effect (pp)")
    ax.legend(frameon=False)


def _per_unit(ax, frame, meta):
    lo, hi = meta.get("truncate", (None, None))
    for _, grp in frame.groupby("unit_id", sort=True):
        ax.plot(grp["year"], grp["effect_pp"].clip(lo, hi), color="0.6", lw=0.6)
    mean = frame[frame["period"] == "post"].drop_duplicates("year")
    ax.plot(mean["year"], mean["mean_effect_pp"], "o-", color="tab:red", label="cross-unit mean")
    ax.axhline(0, color="0.4", lw=0.8)
    if lo is not None:
        ax.set_ylim(lo, hi)
    ax.set_ylabel("effect (pp)")
    ax.legend(frameon=False)


def _balance(ax, frame, meta):
    y = np.arange(len(frame))
    ax.hlines(y, frame["smd_pre"], frame["smd_post"], color="0.7")
    ax.plot(frame["smd_pre"], y, "o", color="tab:orange", label="before matching")
    ax.plot(frame["smd_post"], y, "o", color="tab:blue", label="after matching")
    ax.set_yticks(y, frame["covariate"])
    ax.axvline(0, color="0.4", lw=0.8)
    ax.set_xlabel("standardized mean difference")
    ax.legend(frameon=False)


def _trends(ax, frame, meta):
    ax.plot(frame["year"], frame["treated_mean_pp"], "o-", label="treated")
    ax.plot(frame["year"], frame["donor_mean_pp"], "s-", label="donors")
    ax.set_ylabel("deforestation (pp)")
    if frame["price_usd_per_kg"].notna().any():
        ax2 = ax.twinx()
        ax2.plot(frame["year"], frame["price_usd_per_kg"], "--", color="tab:green", label="price")
        ax2.set_ylabel("price (USD/kg)")
    ax.legend(frameon=False, loc="upper left")


def _tree(ax, frame, meta):
    leaves = frame[frame["split_var"].fillna("") == ""]
    ax.bar(leaves["node_id"].astype(str), leaves["mean"], color="tab:purple")
    ax.set_xlabel("leaf node")
    ax.set_ylabel("mean effect (pp)")


def _pca(ax, frame, meta):
    for comp in ("PC1", "PC2"):
        sub = frame[frame["component"] == comp]
        ax.plot(range(len(sub)), sub["loading"], "o-", label=comp)
        ax.set_xticks(range(len(sub)), sub["variable"], rotation=90)
    ax.axhline(0, color="0.4", lw=0.8)
    ax.set_ylabel("loading")
    ax.legend(frameon=False)


def _weights(ax, frame, meta):
    for fit, grp in frame.groupby("fit", sort=True):
        w = np.sort(grp["weight"].to_numpy())[::-1]
        ax.plot(np.arange(1, w.size + 1), w, ".-", label=fit)
    ax.set_xlabel("donor rank")
    ax.set_ylabel("weight")
    ax.legend(frameon=False)


def _placebo(ax, frame, meta):
    for year, grp in frame.groupby("pseudo_shock_year", sort=True):
        line, = ax.plot(grp["year"], grp["effect_pp"], "o-", label=str(year))
        ax.fill_between(grp["year"], grp["ci95_lo"], grp["ci95_hi"], color=line.get_color(), alpha=0.15, lw=0)
    if "true_shock" in meta:
        ax.axvline(meta["true_shock"], color="0.3", ls=":")
    ax.axhline(0, color="0.4", lw=0.8)
    ax.set_ylabel("effect (pp)")
    ax.legend(frameon=False, title="pseudo shock")


_DRAW = {
    "pooled": _pooled,
    "per_unit": _per_unit,
    "balance": _balance,
    "trends": _trends,
    "tree": _tree,
    "pca": _pca,
    "weights": _weights,
    "placebo": _placebo,
}


def render(key: str, plot, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    try:
        _DRAW[key](ax, plot.frame, plot.meta)
        if "year" in plot.frame.columns:
            ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_title(key.replace("_", " "))
        fig.tight_layout()
        # fixed metadata keeps repeated renders byte-identical
        fig.savefig(path, dpi=100, metadata={"Software": None})
    finally:
        plt.close(fig)
    return Path(path)
