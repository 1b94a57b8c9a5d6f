"""Least squares over the probability simplex.

The solver runs accelerated projected gradient descent with exact
Euclidean projection onto the simplex, then polishes the result with a
primal active-set pass so exactly representable targets come back to
machine precision.
"""

from __future__ import annotations

import numpy as np

MAX_ITER = 10_000
TOL = 1e-12


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{w >= 0, sum(w) = 1}``."""
    v = np.asarray(v, dtype=float)
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u - css / np.arange(1, n + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    w = np.maximum(v - theta, 0.0)
    s = w.sum()
    return w / s if s > 0 else np.full(n, 1.0 / n)


def _objective(D: np.ndarray, w: np.ndarray) -> float:
    r = D @ w
    return float(r @ r)


def _projected_descent(D: np.ndarray, max_iter: int, tol: float) -> tuple[np.ndarray, int]:
    n = D.shape[1]
    H = D.T @ D
    L = 2.0 * float(np.linalg.eigvalsh(H)[-1])
    w = np.full(n, 1.0 / n)
    if L <= 0:
        return w, 0
    step = 2.0 / L
    z = w
    t = 1.0
    Hw = H @ w
    f = float(w @ Hw)
    it = 0
    for it in range(1, max_iter + 1):
        w_new = project_simplex(z - step * (H @ z))
        Hw_new = H @ w_new
        f_new = float(w_new @ Hw_new)
        if f_new > f:
            # momentum overshoot: restart from a plain projected step
            t = 1.0
            w_new = project_simplex(w - step * Hw)
            Hw_new = H @ w_new
            f_new = float(w_new @ Hw_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = w_new + ((t - 1.0) / t_new) * (w_new - w)
        done = f - f_new < tol
        w, Hw, f, t = w_new, Hw_new, f_new, t_new
        if done:
            break
    return w, it


def _equality_ls(Ds: np.ndarray) -> np.ndarray:
    """argmin ||Ds z|| subject to sum(z) = 1 (minimum-norm if not unique)."""
    m = Ds.shape[1]
    if m == 1:
        return np.ones(1)
    z0 = np.full(m, 1.0 / m)
    u, *_ = np.linalg.lstsq(Ds @ _sum_zero_basis(m), -(Ds @ z0), rcond=None)
    return z0 + _sum_zero_basis(m) @ u


def _sum_zero_basis(m: int) -> np.ndarray:
    # Householder reflection mapping e_1 to ones/sqrt(m); remaining columns
    # are an orthonormal basis of {z : sum(z) = 0}.
    v = np.full(m, 1.0 / np.sqrt(m))
    v[0] -= 1.0
    v /= np.linalg.norm(v)
    H = np.eye(m) - 2.0 * np.outer(v, v)
    return H[:, 1:]


def _active_set(D: np.ndarray, w: np.ndarray, max_rounds: int) -> np.ndarray:
    n = w.size
    w = np.where(w > 1e-14, w, 0.0)
    w = w / w.sum()
    active = w > 0
    for _ in range(max_rounds):
        idx = np.flatnonzero(active)
        z = _equality_ls(D[:, idx])
        if np.any(z < 0):
            cur = w[idx]
            neg = z < 0
            alpha = np.min(cur[neg] / (cur[neg] - z[neg]))
            new = cur + alpha * (z - cur)
            new[new < 1e-15] = 0.0
            w = np.zeros(n)
            w[idx] = new
            w /= w.sum()
            active = w > 0
            continue
        w = np.zeros(n)
        w[idx] = z
        g = 2.0 * (D.T @ (D @ w))
        level = float(np.mean(g[idx]))
        slack = g - level
        slack[idx] = 0.0
        scale = max(1.0, float(np.max(np.abs(g))))
        j = int(np.argmin(slack))
        if slack[j] >= -1e-10 * scale:
            break
        active[j] = True
    return w


def solve_simplex_ls(D: np.ndarray, max_iter: int = MAX_ITER, tol: float = TOL) -> tuple[np.ndarray, int]:
    """Minimize ``||D w||^2`` over the simplex; returns ``(w, iterations)``."""
    D = np.asarray(D, dtype=float)
    n = D.shape[1]
    if n == 1:
        return np.ones(1), 0
    w_pg, iters = _projected_descent(D, max_iter, tol)
    w_as = _active_set(D, w_pg, max_rounds=4 * n)
    if np.all(np.isfinite(w_as)) and _objective(D, w_as) <= _objective(D, w_pg):
        return w_as, iters
    return w_pg, iters


def simplex_ls(y: np.ndarray, A: np.ndarray, **kw) -> tuple[np.ndarray, int]:
    """Minimize ``||y - A.T @ w||^2`` over the simplex, rows of ``A`` = donors.

    The residual is built as ``sum_j w_j (a_j - y)``, which is exact on the
    simplex and makes the solve invariant to a common shift of ``y`` and ``A``.
    """
    D = (np.asarray(A, dtype=float) - np.asarray(y, dtype=float)).T
    return solve_simplex_ls(D, **kw)
