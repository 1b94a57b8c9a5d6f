"""K:1 nearest-neighbour donor matching and covariate balance."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .heterogeneity import PcaModel, orient_dry, pca_fit
from .panel import PREC_COLUMNS, PanelDataset, StudyConfig

logger = logging.getLogger(__name__)

MATCH_COVARIATES = (
    "forest_pct_base",
    "forest_ha_base",
    "pop_density",
    "elevation_m",
    "slope_deg",
    "prec_pc1",
    "prec_pc2",
    "protected_share",
    "road_density",
)


@dataclass(frozen=True)
class Standardizer:
    mean: pd.Series
    sd: pd.Series

    def apply(self, table: pd.DataFrame) -> pd.DataFrame:
        cols = list(self.mean.index)
        return (table[cols] - self.mean) / self.sd


def standardize(table: pd.DataFrame) -> tuple[pd.DataFrame, Standardizer]:
    """Z-score every column with the sample (n - 1) standard deviation."""
    mean = table.mean(axis=0)
    sd = table.std(axis=0, ddof=1)
    constant = [c for c in table.columns if not sd[c] > 0]
    if constant:
        raise ValueError(f"cannot standardize constant covariate(s): {constant}")
    params = Standardizer(mean, sd)
    return params.apply(table), params


def precipitation_pca(panel: PanelDataset, scale: bool = True) -> PcaModel:
    precip = panel.covariates[list(PREC_COLUMNS)]
    return orient_dry(pca_fit(precip, scale=scale), precip.to_numpy())


def matching_covariates(panel: PanelDataset, scale_pca: bool = True) -> pd.DataFrame:
    """The nine matching covariates, with precipitation reduced to PC1/PC2."""
    pca = precipitation_pca(panel, scale_pca)
    cov = panel.covariates
    table = pd.DataFrame(index=cov.index)
    for name in MATCH_COVARIATES:
        if name == "prec_pc1":
            table[name] = pca.scores[:, 0]
        elif name == "prec_pc2":
            table[name] = pca.scores[:, 1]
        else:
            table[name] = cov[name].astype(float)
    return table


@dataclass(frozen=True)
class AuditRule:
    """Donor exclusion rule applied before matching.

    A donor is excluded as too dry when its precipitation PC1 (higher =
    drier) exceeds the ``1 - quantile`` quantile of the treated units' PC1,
    i.e. its wetness falls below the ``quantile`` quantile of treated
    wetness. ``quantile=None`` disables the dryness screen.
    """

    quantile: float | None = 0.01
    exclude: frozenset[str] = frozenset()

    @classmethod
    def from_config(cls, config: StudyConfig) -> "AuditRule | None":
        if not config.audit and not config.exclude:
            return None
        return cls(config.audit_quantile if config.audit else None, frozenset(config.exclude))

    def excluded(self, table: pd.DataFrame, exposure: np.ndarray) -> list[str]:
        treated = exposure == 1
        out = set()
        if self.quantile is not None:
            pc1 = table["prec_pc1"].to_numpy()
            cutoff = np.quantile(pc1[treated], 1.0 - self.quantile)
            out.update(u for u, t, v in zip(table.index, treated, pc1) if not t and v > cutoff)
        out.update(u for u, t in zip(table.index, treated) if not t and u in self.exclude)
        return sorted(out)

    def describe(self) -> str:
        parts = []
        if self.quantile is not None:
            parts.append(f"dry-screen q={self.quantile}")
        if self.exclude:
            parts.append(f"{len(self.exclude)} explicit exclusions")
        return "; ".join(parts) or "none"


@dataclass(frozen=True)
class MatchResult:
    donor_sets: dict[str, tuple[str, ...]]
    distances: dict[str, tuple[float, ...]]
    balance_pre: dict[str, float]
    balance_post: dict[str, float]
    k: int
    metric: str = "euclidean"
    replacement: bool = True
    excluded: tuple[str, ...] = ()
    audit: str = "none"

    @property
    def retained_donors(self) -> tuple[str, ...]:
        return tuple(sorted({d for ds in self.donor_sets.values() for d in ds}))

    @property
    def multiplicity(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for ds in self.donor_sets.values():
            for d in ds:
                counts[d] = counts.get(d, 0) + 1
        return counts

    def to_frame(self) -> pd.DataFrame:
        rows = [
            (t, d, rank, dist)
            for t, donors in self.donor_sets.items()
            for rank, (d, dist) in enumerate(zip(donors, self.distances[t]), 1)
        ]
        return pd.DataFrame(rows, columns=["treated_id", "donor_id", "rank", "distance"])

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, k: int | None = None) -> "MatchResult":
        """Rebuild donor sets from a match CSV; balance is left empty."""
        frame = frame.sort_values(["treated_id", "rank"], kind="mergesort")
        donor_sets, distances = {}, {}
        for t, grp in frame.groupby("treated_id", sort=False):
            donor_sets[str(t)] = tuple(str(d) for d in grp["donor_id"])
            distances[str(t)] = tuple(float(x) for x in grp["distance"])
        ks = {len(v) for v in donor_sets.values()}
        return cls(donor_sets, distances, {}, {}, k or (ks.pop() if len(ks) == 1 else 0))


def _distance_matrix(zt: np.ndarray, zd: np.ndarray, metric: str, z_all: np.ndarray) -> np.ndarray:
    diff = zt[:, None, :] - zd[None, :, :]
    if metric == "euclidean":
        return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    if metric == "mahalanobis":
        prec = np.linalg.pinv(np.cov(z_all, rowvar=False, ddof=1))
        return np.sqrt(np.clip(np.einsum("ijk,kl,ijl->ij", diff, prec, diff), 0.0, None))
    raise ValueError(f"unknown metric {metric!r}")


def match_nearest(
    panel: PanelDataset,
    k: int = 5,
    audit: AuditRule | None = AuditRule(),
    metric: str = "euclidean",
    table: pd.DataFrame | None = None,
) -> MatchResult:
    """Match each treated unit to its ``k`` nearest audited donors.

    Distances are computed on z-scored matching covariates. Matching is with
    replacement across treated units; equal distances are broken by unit id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if table is None:
        table = matching_covariates(panel)
    z, _ = standardize(table)
    exposure = panel.exposure
    excluded = audit.excluded(table, exposure) if audit is not None else []
    dropped = set(excluded)
    donors = [u for u in panel.donor_units if u not in dropped]
    if len(donors) < k:
        raise ValueError(
            f"only {len(donors)} donors remain after auditing but k={k} are required "
            f"(short by {k - len(donors)})"
        )
    treated = panel.treated_units
    zt = z.loc[treated].to_numpy()
    zd = z.loc[donors].to_numpy()
    dist = _distance_matrix(zt, zd, metric, z.to_numpy())
    donor_ids = np.array(donors, dtype=object)
    donor_rank = np.argsort(np.argsort(donor_ids, kind="mergesort"), kind="mergesort")
    donor_sets, distances = {}, {}
    for i, t in enumerate(treated):
        order = np.lexsort((donor_rank, dist[i]))[:k]
        donor_sets[t] = tuple(donor_ids[order])
        distances[t] = tuple(float(v) for v in dist[i, order])
    if excluded:
        logger.info("audit excluded %d donors", len(excluded))
    result = MatchResult(donor_sets, distances, {}, {}, k, metric, True, tuple(excluded),
                         audit.describe() if audit is not None else "none")
    pre, post = balance(table, exposure, result)
    return MatchResult(donor_sets, distances, pre, post, k, metric, True, tuple(excluded), result.audit)


def smd(values: Sequence[float], treated: Sequence[bool]) -> float:
    """Standardized mean difference, treated minus control.

    The pooling sd is ``sqrt((sd_t^2 + sd_c^2) / 2)`` with sample variances.
    Returns NaN (undefined) when the pooled sd is zero or a group has fewer
    than two members.
    """
    x = np.asarray(values, dtype=float)
    t = np.asarray(treated, dtype=bool)
    xt, xc = x[t], x[~t]
    if xt.size == 0 or xc.size == 0:
        raise ValueError("both groups must be nonempty")
    if xt.size < 2 or xc.size < 2:
        return float("nan")
    pooled = np.sqrt((xt.var(ddof=1) + xc.var(ddof=1)) / 2.0)
    if not pooled > 0:
        return float("nan")
    return float((xt.mean() - xc.mean()) / pooled)


def balance(table: pd.DataFrame, exposure: np.ndarray, match: MatchResult) -> tuple[dict, dict]:
    """Pre- and post-matching SMD per covariate.

    Post-matching controls are the matched donors repeated by multiplicity.
    """
    treated_mask = np.asarray(exposure) == 1
    treated_ids = list(table.index[treated_mask])
    mult = match.multiplicity
    matched = [d for d in sorted(mult) for _ in range(mult[d])]
    pre, post = {}, {}
    for col in table.columns:
        pre[col] = smd(table[col].to_numpy(), treated_mask)
        if matched:
            vals = np.concatenate([table.loc[treated_ids, col].to_numpy(), table.loc[matched, col].to_numpy()])
            flags = np.r_[np.ones(len(treated_ids), bool), np.zeros(len(matched), bool)]
            post[col] = smd(vals, flags)
        else:
            post[col] = float("nan")
    return pre, post


def balance_report(match: MatchResult, covariates: Iterable[str] | None = None) -> pd.DataFrame:
    cols = list(match.balance_pre) if covariates is None else list(covariates)
    return pd.DataFrame(
        {
            "covariate": cols,
            "smd_pre": [match.balance_pre.get(c, float("nan")) for c in cols],
            "smd_post": [match.balance_post.get(c, float("nan")) for c in cols],
        },
        columns=["covariate", "smd_pre", "smd_post"],
    )
