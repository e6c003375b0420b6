"""Machinery shared by the LMM and GLMM fitters."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.sparse.linalg import splu


class NumericalError(ArithmeticError):
    """Numerical failure during fitting (overflow, loss of definiteness)."""


class ConvergenceError(NumericalError):
    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class RankDeficientError(ValueError):
    def __init__(self, columns: Sequence[str]):
        super().__init__(f"fixed-effect design is rank deficient; collinear column(s): {', '.join(columns)}")
        self.columns = list(columns)


def with_intercept(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.hstack([np.ones((X.shape[0], 1)), X])


def check_full_rank(X1: np.ndarray, names: Sequence[str]) -> None:
    """Raise naming every column that adds nothing to the span of those before it."""
    if np.linalg.matrix_rank(X1) == X1.shape[1]:
        return
    bad = []
    rank = 0
    for j in range(X1.shape[1]):
        r = np.linalg.matrix_rank(X1[:, [k for k in range(j + 1) if names[k] not in bad]])
        if r == rank:
            bad.append(names[j])
        else:
            rank = r
    raise RankDeficientError(bad)


@dataclass
class Grouping:
    """Indicator matrix Z (N x q, csc) for independent random-intercept factors."""

    factors: List[str]
    codes: List[np.ndarray]
    n_levels: List[int]
    Z: sp.csc_matrix
    factor_of_column: np.ndarray
    offsets: np.ndarray

    @classmethod
    def build(cls, group_indices: Mapping[str, Sequence[int]], n_rows: int) -> "Grouping":
        factors = list(group_indices)
        codes, n_levels = [], []
        for f in factors:
            c = np.asarray(group_indices[f], dtype=np.int64)
            if c.shape != (n_rows,):
                raise ValueError(f"group index for {f!r} has length {c.size}, expected {n_rows}")
            if c.size and c.min() < 0:
                raise ValueError(f"group index for {f!r} has negative codes")
            # compact codes so that every column of Z is non-empty
            _, c = np.unique(c, return_inverse=True)
            codes.append(c.astype(np.int64))
            n_levels.append(int(c.max()) + 1 if c.size else 0)
        offsets = np.concatenate([[0], np.cumsum(n_levels)]).astype(np.int64)
        q = int(offsets[-1])
        if factors:
            rows = np.tile(np.arange(n_rows), len(factors))
            cols = np.concatenate([c + offsets[k] for k, c in enumerate(codes)])
            Z = sp.csc_matrix((np.ones(rows.size), (rows, cols)), shape=(n_rows, q))
        else:
            Z = sp.csc_matrix((n_rows, 0))
        factor_of_column = np.repeat(np.arange(len(factors)), n_levels)
        return cls(factors, codes, n_levels, Z, factor_of_column, offsets)

    @property
    def q(self) -> int:
        return int(self.offsets[-1])

    def expand(self, per_factor: np.ndarray) -> np.ndarray:
        """Per-factor values repeated over their levels (length q)."""
        return np.asarray(per_factor, dtype=float)[self.factor_of_column]

    def split(self, vec: np.ndarray) -> Dict[str, np.ndarray]:
        return {f: vec[self.offsets[k] : self.offsets[k + 1]] for k, f in enumerate(self.factors)}


class CrossProduct:
    """Lambda Z' W Z Lambda + I for an indicator Z with a fixed sparsity pattern.

    The pattern and a fill-reducing symmetric ordering are computed once; each new
    weight vector only rescatters the non-zeros, already in permuted layout.
    """

    def __init__(self, grouping: Grouping):
        Z = grouping.Z
        q = grouping.q
        n = Z.shape[0]
        F = len(grouping.factors)
        self.q, self.F = q, F
        pattern = (Z.T @ Z).tocsc()
        pattern.sort_indices()
        nnz = pattern.nnz
        rows = pattern.indices.astype(np.int64)
        cols = np.repeat(np.arange(q), np.diff(pattern.indptr))
        stride = max(q, 1)
        keys = rows * stride + cols
        order = np.argsort(keys)
        sorted_keys = keys[order]
        levels = [c + grouping.offsets[k] for k, c in enumerate(grouping.codes)]
        pos = np.empty((n, F * F), dtype=np.int64)
        for a in range(F):
            for b in range(F):
                pos[:, a * F + b] = order[np.searchsorted(sorted_keys, levels[a] * stride + levels[b])]
        self.pos = pos.ravel()
        self.nnz = nnz
        self.rows, self.cols = rows, cols
        self.diag_pos = order[np.searchsorted(sorted_keys, np.arange(q) * stride + np.arange(q))]
        if q:
            probe = sp.csc_matrix((pattern.data + (rows == cols) * 1.0, pattern.indices, pattern.indptr), shape=(q, q))
            lu = splu(probe, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
            self.perm = np.argsort(lu.perm_c)
            tag = sp.csc_matrix((np.arange(1, nnz + 1, dtype=float), pattern.indices, pattern.indptr), shape=(q, q))
            permuted = tag[self.perm][:, self.perm].tocsc()
            permuted.sort_indices()
            self.src = permuted.data.astype(np.int64) - 1
            self._work = permuted
        else:
            self.perm = np.zeros(0, dtype=np.int64)

    def data(self, w: np.ndarray, lam: np.ndarray) -> np.ndarray:
        d = np.bincount(self.pos, weights=np.repeat(w, self.F * self.F), minlength=self.nnz)
        d *= lam[self.rows] * lam[self.cols]
        d[self.diag_pos] += 1.0
        return d

    def matrix(self, w: np.ndarray, lam: np.ndarray) -> sp.csc_matrix:
        """The matrix in the original (unpermuted) coordinates."""
        d = self.data(w, lam)
        return sp.csc_matrix((d, self.rows, np.searchsorted(self.cols, np.arange(self.q + 1))), shape=(self.q, self.q))

    def factor(self, w: np.ndarray, lam: np.ndarray) -> "SPDFactor":
        if not self.q:
            return SPDFactor(None, self.perm)
        # reuse one matrix object; the factorization copies the values
        self._work.data = self.data(w, lam)[self.src]
        return SPDFactor(self._work, self.perm)


class SPDFactor:
    """Sparse LU (no pivoting) of a symmetric positive definite matrix given as P A P'."""

    def __init__(self, A_perm: Optional[sp.csc_matrix], perm: np.ndarray):
        self.perm = perm
        self.n = 0 if A_perm is None else A_perm.shape[0]
        if self.n == 0:
            self.logdet = 0.0
            return
        try:
            self.lu = splu(A_perm, permc_spec="NATURAL", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise NumericalError(f"sparse factorization failed: {exc}") from None
        d = self.lu.U.diagonal()
        if not np.all(d > 0) or not np.all(np.isfinite(d)):
            raise NumericalError("matrix is not positive definite")
        self.logdet = float(np.sum(np.log(d)))

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.n == 0:
            return np.zeros_like(b)
        x = np.empty_like(b)
        x[self.perm] = self.lu.solve(np.ascontiguousarray(b[self.perm]))
        return x


def dense_chol(S: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NumericalError("fixed-effects information matrix is not positive definite") from None


def chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    z = solve_triangular(L, b, lower=True)
    return solve_triangular(L.T, z, lower=False)


# log-SD below which a component is tried at the lower clamp
SNAP_ABOVE = -3.0


@dataclass
class OuterResult:
    x: np.ndarray
    fun: float
    n_iter: int
    n_fev: int
    converged: bool
    boundary: np.ndarray
    message: str


def minimize_log_sd(
    objective: Callable[[np.ndarray], float],
    x0: np.ndarray,
    lower: float,
    upper: float,
    max_iter: int,
    ftol: float,
    xtol: float,
    restarts: int = 2,
) -> OuterResult:
    """Bounded Nelder-Mead on log standard deviations, restarted from its own optimum.

    Each simplex run has its own budget of ``max_iter`` iterations. A run that
    exhausts it still counts as converged when the objective values of its final
    simplex agree to ``ftol``.

    Components that end near the lower clamp are snapped onto it when doing so does
    not worsen the objective by more than ``ftol``.
    """
    x0 = np.clip(np.asarray(x0, dtype=float), lower, upper)
    d = x0.size
    if d == 0:
        f = objective(x0)
        return OuterResult(x0, f, 0, 1, True, np.zeros(0, bool), "no variance parameters")
    bounds = [(lower, upper)] * d
    n_iter = n_fev = 0
    x, fun = x0, None
    converged = False
    message = ""
    step = 1.0
    for attempt in range(restarts + 1):
        simplex = np.vstack([x] + [x + step * np.eye(d)[i] * (1 if x[i] + step <= upper else -1) for i in range(d)])
        res = minimize(
            objective,
            x,
            method="Nelder-Mead",
            bounds=bounds,
            options={
                "initial_simplex": simplex,
                "maxiter": max_iter,
                "xatol": xtol,
                "fatol": ftol,
                "adaptive": d > 2,
            },
        )
        n_iter += res.nit
        n_fev += res.nfev
        improved = fun is None or res.fun < fun - ftol
        if fun is None or res.fun < fun:
            x, fun = np.asarray(res.x, dtype=float), float(res.fun)
        # a simplex spread over a flat direction can stall above xtol; the
        # criterion tolerance alone then decides
        fs = res.final_simplex[1]
        converged = bool(res.success) or float(np.ptp(fs)) <= ftol
        message = res.message if res.success or not converged else "objective spread within tolerance"
        if not converged:
            break
        if attempt > 0 and not improved:
            break
        step = 0.1
    boundary = np.zeros(d, dtype=bool)
    if converged:
        for i in np.argsort(x):
            if x[i] >= SNAP_ABOVE:
                continue
            trial = x.copy()
            trial[i] = lower
            f_trial = objective(trial)
            n_fev += 1
            if f_trial <= fun + ftol:
                x, fun = trial, min(f_trial, fun)
        boundary = x <= lower + 1e-12
    return OuterResult(x, float(fun), n_iter, n_fev, converged, boundary, str(message))
