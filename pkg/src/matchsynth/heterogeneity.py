"""Precipitation PCA and regression-tree summaries of unit-level effects.

The tree is descriptive: it reports where effects are large or small, not
why.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd


@dataclass(frozen=True)
class PcaModel:
    loadings: np.ndarray  # (n_components, n_variables), rows orthonormal
    scores: np.ndarray  # (n_units, n_components)
    explained_variance: np.ndarray
    center: np.ndarray
    scale: np.ndarray  # ones when fitted on the covariance matrix
    scaled: bool
    variables: tuple[str, ...] = ()

    @property
    def explained_ratio(self) -> np.ndarray:
        total = self.explained_variance.sum()
        return self.explained_variance / total if total > 0 else np.zeros_like(self.explained_variance)

    def transform(self, data) -> np.ndarray:
        z = (np.asarray(data, dtype=float) - self.center) / self.scale
        return z @ self.loadings.T

    def reconstruct(self, n_components: int | None = None) -> np.ndarray:
        """Centered (and scaled) input rebuilt from the leading components."""
        k = self.loadings.shape[0] if n_components is None else n_components
        return self.scores[:, :k] @ self.loadings[:k]

    def flipped(self, component: int) -> "PcaModel":
        loadings = self.loadings.copy()
        scores = self.scores.copy()
        loadings[component] *= -1
        scores[:, component] *= -1
        return PcaModel(loadings, scores, self.explained_variance, self.center, self.scale,
                        self.scaled, self.variables)


def pca_fit(data, scale: bool = True) -> PcaModel:
    """Principal components of a units-by-variables matrix.

    With ``scale=True`` the eigendecomposition is of the correlation matrix,
    otherwise of the covariance matrix (both with ``n - 1`` denominators).
    Each loading vector is signed so its largest-magnitude entry is positive.
    """
    variables: tuple[str, ...] = ()
    if isinstance(data, pd.DataFrame):
        variables = tuple(str(c) for c in data.columns)
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected a 2-d units-by-variables matrix")
    n, p = x.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 units")
    if not np.all(np.isfinite(x)):
        raise ValueError("PCA input has missing or non-finite cells")
    center = x.mean(axis=0)
    sd = np.ones(p)
    if scale:
        sd = x.std(axis=0, ddof=1)
        if np.any(sd == 0):
            bad = [variables[j] if variables else str(j) for j in np.flatnonzero(sd == 0)]
            raise ValueError(f"cannot scale constant variables: {bad}")
    z = (x - center) / sd
    cov = z.T @ z / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    loadings = evecs[:, order].T
    lead = np.argmax(np.abs(loadings), axis=1)
    signs = np.sign(loadings[np.arange(p), lead])
    signs[signs == 0] = 1.0
    loadings = loadings * signs[:, None]
    scores = z @ loadings.T
    return PcaModel(loadings, scores, evals, center, sd, scale, variables)


def orient_dry(model: PcaModel, precip) -> PcaModel:
    """Flip PC1 if needed so higher scores mean lower annual precipitation."""
    annual = np.asarray(precip, dtype=float).sum(axis=1)
    s = model.scores[:, 0]
    if np.std(s) == 0 or np.std(annual) == 0:
        return model
    if np.corrcoef(s, annual)[0, 1] > 0:
        return model.flipped(0)
    return model


def effect_summary(effects: Mapping[int, float], years: Sequence[int]) -> float:
    """Mean of one unit's yearly effects over ``years``."""
    years = list(years)
    if not years:
        raise ValueError("need at least one year")
    missing = [y for y in years if y not in effects]
    if missing:
        raise KeyError(f"effects missing for years {missing}")
    return float(np.mean([effects[y] for y in years]))


# ---------------------------------------------------------------------------
# Regression tree

@dataclass
class TreeNode:
    node_id: int
    parent: int | None
    depth: int
    n: int
    mean: float
    sse: float
    split_var: str | None = None
    threshold: float | None = None
    left: int | None = None
    right: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.split_var is None


@dataclass(frozen=True)
class TreeParams:
    min_split: int = 5
    min_bucket: int = 4
    max_depth: int = 6
    cp: float = 0.001


@dataclass
class TreeModel:
    nodes: list[TreeNode]
    params: TreeParams
    variables: tuple[str, ...]
    leaf_of_training: np.ndarray = field(repr=False, default=None)

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    @property
    def leaves(self) -> list[TreeNode]:
        return [nd for nd in self.nodes if nd.is_leaf]

    @property
    def training_sse(self) -> float:
        return float(sum(nd.sse for nd in self.leaves))

    @property
    def depth(self) -> int:
        return max(nd.depth for nd in self.nodes)

    def splits(self) -> list[tuple[str, float]]:
        return [(nd.split_var, nd.threshold) for nd in self.nodes if not nd.is_leaf]

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "node_id": nd.node_id,
                "parent": "" if nd.parent is None else nd.parent,
                "split_var": nd.split_var or "",
                "threshold": "" if nd.threshold is None else nd.threshold,
                "n": nd.n,
                "mean": nd.mean,
                "sse": nd.sse,
            }
            for nd in self.nodes
        ]
        return pd.DataFrame(rows, columns=["node_id", "parent", "split_var", "threshold", "n", "mean", "sse"])

    def dump(self) -> str:
        """Indented text rendering, one node per line."""
        lines: list[str] = []

        def walk(idx: int, label: str) -> None:
            nd = self.nodes[idx]
            pad = "  " * nd.depth
            head = f"{pad}{label}n={nd.n} mean={nd.mean:.4g} sse={nd.sse:.4g}"
            lines.append(head + (" *" if nd.is_leaf else ""))
            if not nd.is_leaf:
                walk(nd.left, f"{nd.split_var} < {nd.threshold:.6g}: ")
                walk(nd.right, f"{nd.split_var} >= {nd.threshold:.6g}: ")

        walk(0, "root: ")
        return "\n".join(lines) + "\n"


def _sse(y: np.ndarray) -> float:
    if y.size == 0:
        return 0.0
    return float(np.sum((y - y.mean()) ** 2))


def best_split(x: np.ndarray, y: np.ndarray, min_bucket: int, tie_tol: float = 0.0):
    """Best SSE-reducing split of ``y`` over the columns of ``x``.

    Returns ``(gain, column, threshold)`` or ``None``. Thresholds are
    midpoints between consecutive distinct values; rows with
    ``x < threshold`` go left. Gains within ``tie_tol`` of the best count as
    ties, resolved by lowest column then lowest threshold.
    """
    n = y.size
    parent = _sse(y)
    best = None
    for col in range(x.shape[1]):
        order = np.argsort(x[:, col], kind="mergesort")
        xs, ys = x[order, col], y[order]
        csum = np.cumsum(ys)
        csq = np.cumsum(ys * ys)
        total, total_sq = csum[-1], csq[-1]
        for i in range(min_bucket, n - min_bucket + 1):
            # left = first i sorted rows
            if xs[i - 1] == xs[i]:
                continue
            nl, nr = i, n - i
            sl, sr = csum[i - 1], total - csum[i - 1]
            ql, qr = csq[i - 1], total_sq - csq[i - 1]
            child = (ql - sl * sl / nl) + (qr - sr * sr / nr)
            gain = parent - child
            if best is None or gain > best[0] + tie_tol:
                best = (gain, col, 0.5 * (xs[i - 1] + xs[i]), i, order)
    if best is None:
        return None
    gain, col, thr, i, order = best
    left = x[:, col] < thr
    # exact recomputation guards against cancellation in the running sums
    gain = parent - _sse(y[left]) - _sse(y[~left])
    return gain, col, thr


def tree_fit(targets, covariates: pd.DataFrame, params: TreeParams = TreeParams()) -> TreeModel:
    """Greedy binary regression tree on the ANOVA (SSE) criterion.

    A node is split when it has at least ``min_split`` units, is shallower
    than ``max_depth``, both children keep ``min_bucket`` units, and the SSE
    reduction is positive and at least ``cp`` times the root SSE.
    """
    y = np.asarray(targets, dtype=float)
    x = covariates.to_numpy(dtype=float)
    variables = tuple(str(c) for c in covariates.columns)
    n = y.size
    if x.shape[0] != n:
        raise ValueError("targets and covariates disagree on the number of units")
    if n < params.min_split:
        raise ValueError(f"need at least min_split={params.min_split} units, got {n}")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
        raise ValueError("tree inputs must be finite")

    root_sse = _sse(y)
    threshold_gain = params.cp * root_sse
    tie_tol = 1e-12 * max(root_sse, 1e-300)
    nodes: list[TreeNode] = []
    leaf_of = np.zeros(n, dtype=int)

    def grow(rows: np.ndarray, parent: int | None, depth: int) -> int:
        ys = y[rows]
        node = TreeNode(len(nodes), parent, depth, rows.size, float(ys.mean()), _sse(ys))
        nodes.append(node)
        leaf_of[rows] = node.node_id
        if rows.size < params.min_split or depth >= params.max_depth or node.sse == 0.0:
            return node.node_id
        found = best_split(x[rows], ys, params.min_bucket, tie_tol)
        if found is None:
            return node.node_id
        gain, col, thr = found
        if gain <= 0.0 or gain < threshold_gain:
            return node.node_id
        go_left = x[rows, col] < thr
        node.split_var, node.threshold = variables[col], float(thr)
        node.left = grow(rows[go_left], node.node_id, depth + 1)
        node.right = grow(rows[~go_left], node.node_id, depth + 1)
        return node.node_id

    grow(np.arange(n), None, 0)
    return TreeModel(nodes, params, variables, leaf_of)


def tree_predict(model: TreeModel, x: Mapping[str, float]) -> float:
    """Leaf mean reached by ``x``; values equal to a threshold go right."""
    node = model.root
    while not node.is_leaf:
        if node.split_var not in x:
            raise KeyError(f"covariate record lacks split variable {node.split_var!r}")
        node = model.nodes[node.left if x[node.split_var] < node.threshold else node.right]
    return node.mean
