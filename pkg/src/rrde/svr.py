"""Linear epsilon-insensitive support vector regression.

The dual is solved over 2m box-constrained variables (``alpha`` for points
above the tube, ``alpha*`` below) with a single equality constraint, by
sequential minimal optimisation: at every step the maximally violating
pair is optimised analytically.  Once the violation drops under ``tol`` the
free variables are re-solved exactly with the bound set held fixed, which
removes the residual optimisation error on small problems.
"""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import checkpoint

log = logging.getLogger(__name__)

DEFAULT_C_GRID = (0.1, 0.25, 0.5, 1.0, 2.0)
DEFAULT_EPSILON_GRID = (0.05, 0.1, 0.13, 0.2)
TAU = 1e-12


@dataclass(frozen=True)
class SvrConfig:
    C: float = 0.5
    epsilon: float = 0.13
    kernel: str = "linear"

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError(f"C must be > 0, got {self.C}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.kernel != "linear":
            raise ValueError(f"only the linear kernel is supported, got {self.kernel!r}")


@dataclass(eq=False)
class SvrModel:
    weights: np.ndarray
    bias: float
    dual_coeffs: np.ndarray
    config: SvrConfig = field(default_factory=SvrConfig)
    converged: bool = True
    violation: float = 0.0
    iterations: int = 0
    objective: float = 0.0

    def predict(self, X) -> np.ndarray:
        return predict(self, X)

    def save(self, path):
        meta = {"n_samples": int(self.dual_coeffs.shape[0]), "n_features": int(self.weights.shape[0]),
                "C": self.config.C, "epsilon": self.config.epsilon, "kernel": self.config.kernel,
                "converged": self.converged, "violation": self.violation,
                "iterations": self.iterations, "objective": self.objective}
        checkpoint.save(path, {"weights": self.weights, "bias": np.array([self.bias]),
                               "dual_coeffs": self.dual_coeffs}, meta)

    @classmethod
    def load(cls, path) -> "SvrModel":
        arrays, meta = checkpoint.load(path)
        return cls(arrays["weights"], float(arrays["bias"][0]), arrays["dual_coeffs"],
                   SvrConfig(meta["C"], meta["epsilon"], meta["kernel"]), meta["converged"],
                   meta["violation"], meta["iterations"], meta["objective"])


def dual_objective(K, y, coeffs, epsilon) -> float:
    """``0.5 u'Ku + eps * |u|_1 - y'u`` for dual coefficients ``u = alpha - alpha*``.

    Equals the (minimisation-form) dual objective whenever ``alpha * alpha* = 0``,
    which holds at every optimum with ``epsilon > 0``.
    """
    u = np.asarray(coeffs, dtype=np.float64)
    return float(0.5 * u @ K @ u + epsilon * np.abs(u).sum() - y @ u)


def _as_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],) or X.shape[0] < 1:
        raise ValueError(f"need X of shape (m, d) and y of shape (m,), got {X.shape} and {y.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("X and y must be finite")
    return X, y


def fit(X, y, config: SvrConfig = SvrConfig(), tol: float = 1e-3, max_iter: int | None = None) -> SvrModel:
    X, y = _as_xy(X, y)
    m = X.shape[0]
    C, eps = config.C, config.epsilon
    K = X @ X.T
    z = np.concatenate([np.ones(m), -np.ones(m)])
    p = np.concatenate([eps - y, eps + y])
    kdiag = np.diag(K).copy()
    beta = np.zeros(2 * m)
    grad = p.copy()
    max_iter = max_iter or max(10_000, 100 * m)

    def column(t):
        return z * z[t] * np.tile(K[:, t % m], 2)

    it = 0
    violation = np.inf
    while it < max_iter:
        i, j, violation = _select_pair(beta, grad, z, C)
        if violation < tol:
            break
        qi, qj = column(i), column(j)
        old_i, old_j = beta[i], beta[j]
        beta[i], beta[j] = _solve_pair(beta[i], beta[j], z[i], z[j], grad[i], grad[j],
                                       kdiag[i % m], kdiag[j % m], qi[j], C)
        grad += qi * (beta[i] - old_i) + qj * (beta[j] - old_j)
        it += 1
    converged = violation < tol
    if not converged:
        log.warning("SMO stopped after %d iterations with violation %.3g", it, violation)

    beta, grad = _polish(beta, grad, K, z, p, C)
    _, _, violation = _select_pair(beta, grad, z, C)
    coeffs = beta[:m] - beta[m:]
    bias = -_rho(beta, grad, z, C)
    return SvrModel(weights=X.T @ coeffs, bias=bias, dual_coeffs=coeffs, config=config,
                    converged=converged, violation=float(violation), iterations=it,
                    objective=float(0.5 * coeffs @ K @ coeffs + eps * beta.sum() - y @ coeffs))


def _select_pair(beta, grad, z, C):
    """Maximal violating pair over the 2m-variable dual."""
    up = ((z > 0) & (beta < C)) | ((z < 0) & (beta > 0))
    low = ((z > 0) & (beta > 0)) | ((z < 0) & (beta < C))
    score = -z * grad
    if not up.any() or not low.any():
        return 0, 0, 0.0
    i = int(np.flatnonzero(up)[np.argmax(score[up])])
    j = int(np.flatnonzero(low)[np.argmin(score[low])])
    return i, j, float(score[i] - score[j])


def _solve_pair(ai, aj, zi, zj, gi, gj, kii, kjj, qij, C):
    """Analytic minimiser of the dual over (beta_i, beta_j), clipped to the box."""
    if zi != zj:
        quad = max(kii + kjj + 2 * qij, TAU)
        delta = (-gi - gj) / quad
        diff = ai - aj
        ai += delta
        aj += delta
        if diff > 0:
            if aj < 0:
                aj, ai = 0.0, diff
        elif ai < 0:
            ai, aj = 0.0, -diff
        if diff > 0:
            if ai > C:
                ai, aj = C, C - diff
        elif aj > C:
            aj, ai = C, C + diff
    else:
        quad = max(kii + kjj - 2 * qij, TAU)
        delta = (gi - gj) / quad
        total = ai + aj
        ai -= delta
        aj += delta
        if total > C:
            if ai > C:
                ai, aj = C, total - C
        elif aj < 0:
            aj, ai = 0.0, total
        if total > C:
            if aj > C:
                aj, ai = C, total - C
        elif ai < 0:
            ai, aj = 0.0, total
    return min(max(ai, 0.0), C), min(max(aj, 0.0), C)


def _polish(beta, grad, K, z, p, C):
    """Exact re-solve of the free variables with bounded ones fixed."""
    m = K.shape[0]
    free = np.flatnonzero((beta > 0) & (beta < C))
    if free.size == 0:
        return beta, grad
    Kt = np.block([[K, K], [K, K]])
    Q = np.outer(z, z) * Kt
    fixed = np.setdiff1d(np.arange(2 * m), free)
    rhs = -(Q[np.ix_(free, fixed)] @ beta[fixed] + p[free])
    n = free.size
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = Q[np.ix_(free, free)]
    A[:n, n] = z[free]
    A[n, :n] = z[free]
    b = np.concatenate([rhs, [-(z[fixed] @ beta[fixed])]])
    sol = np.linalg.lstsq(A, b, rcond=None)[0]
    cand = beta.copy()
    cand[free] = sol[:n]
    if np.any(cand[free] < 0) or np.any(cand[free] > C) or not np.allclose(A @ sol, b, atol=1e-10):
        return beta, grad

    def obj(v):
        return 0.5 * v @ Q @ v + p @ v

    if obj(cand) > obj(beta):
        return beta, grad
    return cand, Q @ cand + p


def _rho(beta, grad, z, C):
    zg = z * grad
    free = (beta > 0) & (beta < C)
    if free.any():
        return float(zg[free].mean())
    up = ((z > 0) & (beta < C)) | ((z < 0) & (beta > 0))
    low = ((z > 0) & (beta > 0)) | ((z < 0) & (beta < C))
    ub = zg[up].min() if up.any() else np.inf
    lb = zg[low].max() if low.any() else -np.inf
    ub = ub if np.isfinite(ub) else lb
    lb = lb if np.isfinite(lb) else ub
    return float((ub + lb) / 2)


def predict(model: SvrModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None]
    if X.shape[1] != model.weights.shape[0]:
        raise ValueError(f"feature dimension {X.shape[1]} != model dimension {model.weights.shape[0]}")
    return X @ model.weights + model.bias


# --------------------------------------------------------------------------
# model selection

@dataclass(frozen=True)
class GridSearchSpec:
    C_grid: tuple = DEFAULT_C_GRID
    epsilon_grid: tuple = DEFAULT_EPSILON_GRID
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not self.C_grid or not self.epsilon_grid:
            raise ValueError("grids must be non-empty")


@dataclass
class CvResult:
    best: SvrConfig
    best_rmse: float
    rows: list  # (C, epsilon, fold, rmse) with rmse = nan for failed fits
    failed: list

    def cell_means(self) -> dict:
        out: dict = {}
        for C, e, _, r in self.rows:
            out.setdefault((C, e), []).append(r)
        return {k: float(np.mean(v)) for k, v in out.items()}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["C", "epsilon", "fold", "rmse"])
            for C, e, fold, r in self.rows:
                w.writerow([repr(C), repr(e), fold, repr(r)])


def fold_assignment(m: int, folds: int, seed: int) -> np.ndarray:
    perm = np.random.default_rng(seed).permutation(m)
    out = np.empty(m, dtype=int)
    for k, chunk in enumerate(np.array_split(perm, folds)):
        out[chunk] = k
    return out


def grid_search_cv(X, y, spec: GridSearchSpec = GridSearchSpec()) -> CvResult:
    """K-fold CV over the (C, epsilon) grid; ties go to smaller C, then smaller epsilon."""
    X, y = _as_xy(X, y)
    if X.shape[0] < spec.folds:
        raise ValueError(f"{X.shape[0]} samples cannot fill {spec.folds} folds")
    assign = fold_assignment(X.shape[0], spec.folds, spec.seed)
    rows, failed, scores = [], [], {}
    for C, e in itertools.product(spec.C_grid, spec.epsilon_grid):
        errs = []
        try:
            cfg = SvrConfig(C, e)
            for k in range(spec.folds):
                tr, va = assign != k, assign == k
                model = fit(X[tr], y[tr], cfg)
                errs.append(float(np.sqrt(np.mean((predict(model, X[va]) - y[va]) ** 2))))
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.warning("grid cell C=%s epsilon=%s failed: %s", C, e, exc)
            failed.append((C, e))
            rows.extend((C, e, k, float("nan")) for k in range(spec.folds))
            continue
        rows.extend((C, e, k, r) for k, r in enumerate(errs))
        scores[(C, e)] = float(np.mean(errs))
    if not scores:
        raise RuntimeError("every grid cell failed")
    best = min(scores, key=lambda ce: (scores[ce], ce[0], ce[1]))
    return CvResult(SvrConfig(*best), scores[best], rows, failed)
