"""Sparse regression: STRidge, information criteria, agreement, grid search.

The STRidge inner loop alternates ridge solves with hard thresholding of
small coefficients; the outer loop tunes the threshold against the
L0-penalized objective ||y - X beta||_2 + lambda0 * ||beta||_0, increasing
the tolerance while the objective improves and backtracking (tol -= 2*step,
step halved) when it worsens.  Complex libraries are handled through the
conjugate transpose and magnitude-based residuals throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .library import CandidateLibrary


class RegressionError(ValueError):
    """Contract violation or degenerate system in the regression stage."""


@dataclass
class StridgeConfig:
    lam_ridge: float = 1e-3      # ridge strength lambda_STR
    mu: float = 1.0              # dataset-dependent L0 scale: lambda0 = mu*lam*eps
    d_tol: float = 1.0           # initial tolerance step
    max_iter: int = 25
    refit_floor: float | None = None  # optional |coef| floor applied post hoc

    def __post_init__(self):
        if self.lam_ridge < 0 or self.mu <= 0 or self.d_tol <= 0:
            raise RegressionError("require lam_ridge >= 0, mu > 0, d_tol > 0")


@dataclass
class SparseModel:
    """Dense/compact views of one discovered linear model plus its scores."""

    xi_dense: np.ndarray                 # length P, zeros off support
    support: tuple[int, ...]             # ordered effective indices E
    names: tuple[str, ...]               # candidate names on the support
    scores: dict = field(default_factory=dict)
    agreement: bool | None = None
    degenerate_fit: bool = False

    @property
    def selector(self) -> np.ndarray:
        """P x |E| matrix of elementary columns selecting the support."""
        P = self.xi_dense.shape[0]
        E = np.zeros((P, len(self.support)))
        for j, idx in enumerate(self.support):
            E[idx, j] = 1.0
        return E

    @property
    def xi_compact(self) -> np.ndarray:
        return self.xi_dense[list(self.support)]

    @property
    def size(self) -> int:
        return len(self.support)

    def terms(self) -> dict[str, complex]:
        return {n: x for n, x in zip(self.names, self.xi_compact)}


# ---------------------------------------------------------------------------
# solvers and scores
# ---------------------------------------------------------------------------


def ridge_solve(X: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Normal-equations ridge: (X^H X + lam I) beta = X^H y."""
    X = np.asarray(X)
    y = np.asarray(y).reshape(-1)
    if not (np.all(np.isfinite(X.real)) and np.all(np.isfinite(y.real))):
        raise RegressionError("ridge inputs must be finite")
    A = X.conj().T @ X + lam * np.eye(X.shape[1])
    b = X.conj().T @ y
    try:
        beta = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise RegressionError(
            "singular normal equations; use lam > 0") from exc
    if lam == 0.0 and np.linalg.cond(A) > 1e13:
        raise RegressionError("near-singular system at lam = 0; use lam > 0")
    return beta


def rss(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    """Residual sum of squares with complex magnitudes per term."""
    r = np.asarray(y).reshape(-1) - np.asarray(X) @ np.asarray(beta).reshape(-1)
    return float(np.sum(np.abs(r) ** 2))


def log_likelihood(rss_val: float, n: int) -> float:
    return -0.5 * n * (1.0 + math.log(2.0 * math.pi) + math.log(rss_val / n))


def bic(rss_val: float, k: int, n: int) -> float:
    """k ln N - 2 logL; rss = 0 reports the -inf degenerate-fit sentinel."""
    if n < 1:
        raise RegressionError("need n >= 1 samples")
    if rss_val <= 0.0:
        return -math.inf
    return k * math.log(n) - 2.0 * log_likelihood(rss_val, n)


def aic(rss_val: float, k: int, n: int) -> float:
    if n < 1:
        raise RegressionError("need n >= 1 samples")
    if rss_val <= 0.0:
        return -math.inf
    return 2.0 * k - 2.0 * log_likelihood(rss_val, n)


# ---------------------------------------------------------------------------
# STRidge
# ---------------------------------------------------------------------------


def _threshold_iterate(X, y, lam, tol, max_rounds=30):
    """Inner loop: ridge on the active set, zero small coefficients, repeat.

    When thresholding pruned columns the survivors get an unpenalized refit;
    with tol = 0 nothing is pruned and the plain ridge solution is returned.
    """
    P = X.shape[1]
    beta = np.zeros(P, dtype=X.dtype)
    active = np.arange(P)
    sub = ridge_solve(X, y, lam)
    for _ in range(max_rounds):
        keep = np.abs(sub) >= tol
        if np.all(keep):
            break
        active = active[keep]
        if active.size == 0:
            return beta
        sub = ridge_solve(X[:, active], y, lam)
    if active.size < P:
        try:
            sub = ridge_solve(X[:, active], y, 0.0)
        except RegressionError:
            sub = ridge_solve(X[:, active], y, 1e-10)
    beta[active] = sub
    return beta


def _model_from_beta(beta, lib: CandidateLibrary, X_score, y_score) -> SparseModel:
    norms = lib.norms if lib.norms is not None else np.ones(lib.n_candidates)
    support = tuple(int(i) for i in np.nonzero(beta)[0])
    xi = np.zeros_like(beta)
    xi[list(support)] = beta[list(support)] / norms[list(support)]
    n = X_score.shape[0]
    r = rss(X_score, y_score, beta)
    k = len(support)
    model = SparseModel(
        xi_dense=xi,
        support=support,
        names=tuple(lib.names[i] for i in support),
        degenerate_fit=(r <= 0.0),
    )
    model.scores = {"rss": r, "n": n, "k": k, "bic": bic(r, k, n),
                    "aic": aic(r, k, n),
                    "loglik": log_likelihood(r, n) if r > 0 else math.inf}
    return model


def stridge(lib: CandidateLibrary, y: np.ndarray, cfg: StridgeConfig,
            fit_rows=None, score_rows=None) -> SparseModel:
    """Tolerance-refined STRidge on a (normalized) candidate library.

    Ridge solves use `fit_rows` (default: all rows); the penalized objective
    and the reported scores use `score_rows` (default: the fit rows).
    Returned coefficients are un-normalized via the library's stored norms.
    """
    X = lib.columns
    y = np.asarray(y).reshape(-1)
    fit_rows = np.arange(X.shape[0]) if fit_rows is None else np.asarray(fit_rows)
    score_rows = fit_rows if score_rows is None else np.asarray(score_rows)
    Xf, yf = X[fit_rows], y[fit_rows]
    Xs, ys = X[score_rows], y[score_rows]

    eps = _condition_significand_of(X)
    lam0 = cfg.mu * cfg.lam_ridge * eps

    def objective(beta):
        return (math.sqrt(rss(Xs, ys, beta))
                + lam0 * int(np.count_nonzero(beta)))

    tol = cfg.d_tol
    step = cfg.d_tol
    best_beta = _threshold_iterate(Xf, yf, cfg.lam_ridge, 0.0)
    best_obj = objective(best_beta)
    for _ in range(cfg.max_iter):
        beta = _threshold_iterate(Xf, yf, cfg.lam_ridge, max(tol, 0.0))
        obj = objective(beta)
        if obj < best_obj:
            best_obj = obj
            best_beta = beta
            tol = tol + step
        else:
            tol = max(tol - 2.0 * step, 0.0)
            step = step / 2.0
            tol = tol + step
    if cfg.refit_floor is not None:
        best_beta = _apply_refit_floor(Xf, yf, best_beta, lib, cfg.refit_floor)
    return _model_from_beta(best_beta, lib, Xs, ys)


def _apply_refit_floor(X, y, beta, lib, floor):
    """Drop small un-normalized coefficients and re-solve until all pass."""
    norms = lib.norms if lib.norms is not None else np.ones(lib.n_candidates)
    beta = beta.copy()
    while True:
        active = np.nonzero(beta)[0]
        if active.size == 0:
            return beta
        raw = np.abs(beta[active] / norms[active])
        if np.all(raw > floor):
            return beta
        keep = active[raw > floor]
        beta = np.zeros_like(beta)
        if keep.size:
            beta[keep] = ridge_solve(X[:, keep], y, 0.0)


def _condition_significand_of(X) -> float:
    cond = np.linalg.cond(X)
    if not np.isfinite(cond):
        raise RegressionError("rank-deficient candidate library")
    return float(cond / 10.0 ** int(np.floor(np.log10(cond))))


# ---------------------------------------------------------------------------
# agreement and grid search
# ---------------------------------------------------------------------------


def agreement(model: SparseModel, passing, lib: CandidateLibrary) -> bool:
    """True iff every effective term factors into threshold-passing candidates.

    `passing` is a set of basis-candidate names or an object exposing
    `passing_names` (e.g. the trained importance vector).
    """
    names = set(passing.passing_names if hasattr(passing, "passing_names")
                else passing)
    for idx in model.support:
        for f in lib.factors[idx]:
            if f not in _known_factors(lib):
                raise RegressionError(f"unknown factor {f!r} in library")
            if f not in names:
                return False
    return True


def _known_factors(lib: CandidateLibrary) -> set:
    known = set()
    for fs in lib.factors:
        known.update(fs)
    return known


@dataclass
class GridCell:
    lam1: float
    lam_str: float
    model: SparseModel
    lowest_in_row: bool = False
    selected: bool = False


@dataclass
class GridRowInput:
    """Per-lambda1 artifacts consumed by the grid search."""

    library: CandidateLibrary            # normalized polynomial library on M
    u_t: np.ndarray                      # d F/d t on M
    val_rows: np.ndarray                 # 20% validation split of M
    importance: object | None = None     # trained importance (or None in bypass)


def grid_search(rows: dict[float, GridRowInput], lam_str_values,
                base_cfg: StridgeConfig) -> list[GridCell]:
    """Cross table over (lambda1, lambda_STR); BIC scored on the val split."""
    cells = []
    for lam1, row in rows.items():
        row_cells = []
        for lam_str in lam_str_values:
            cfg = StridgeConfig(lam_ridge=lam_str, mu=base_cfg.mu,
                                d_tol=base_cfg.d_tol, max_iter=base_cfg.max_iter,
                                refit_floor=base_cfg.refit_floor)
            model = stridge(row.library, row.u_t, cfg,
                            score_rows=row.val_rows)
            if row.importance is not None:
                model.agreement = agreement(model, row.importance, row.library)
            row_cells.append(GridCell(lam1, lam_str, model))
        finite = [c for c in row_cells if not math.isnan(c.model.scores["bic"])]
        if finite:
            best = min(finite, key=lambda c: c.model.scores["bic"])
            best.lowest_in_row = True
        cells.extend(row_cells)
    return cells


def pareto_select(cells: list[GridCell], knee_ratio: float = 0.1) -> GridCell:
    """Knee-of-the-BIC-curve choice among the agreed models.

    Models are deduplicated per support size (lowest BIC kept) and sorted by
    size; the walk continues to a larger support while the per-term BIC
    reduction stays above `knee_ratio` times the largest observed reduction.
    """
    agreed = [c for c in cells if c.model.agreement in (True, None)]
    if not agreed:
        raise RegressionError(
            "no model agrees with its preselector; review the grid table")
    by_size: dict[int, GridCell] = {}
    for c in agreed:
        s = c.model.size
        if s not in by_size or c.model.scores["bic"] < by_size[s].model.scores["bic"]:
            by_size[s] = c
    ordered = [by_size[s] for s in sorted(by_size)]
    if len(ordered) == 1:
        ordered[0].selected = True
        return ordered[0]
    drops = []
    for a, b in zip(ordered, ordered[1:]):
        num = a.model.scores["bic"] - b.model.scores["bic"]
        den = b.model.size - a.model.size
        drops.append(num / den)
    finite_gains = [d for d in drops if d > 0 and math.isfinite(d)]
    largest = max(finite_gains) if finite_gains else 0.0
    pick = 0
    for i, d in enumerate(drops):
        if math.isnan(d):
            break
        if d == math.inf or (largest > 0 and d >= knee_ratio * largest):
            pick = i + 1
        else:
            break
    ordered[pick].selected = True
    return ordered[pick]
