"""Linear mixed model with independent random intercepts, fitted by REML.

The model is ``y = alpha + X beta + Z u + eps`` with ``u_f ~ N(0, sigma_f^2 I)`` per
factor and ``eps ~ N(0, sigma_eps^2 I)``. Variance parameters are optimised on the
scale of log relative standard deviations ``log(sigma_f / sigma_eps)``; ``beta`` and
``sigma_eps^2`` are profiled out of the restricted likelihood.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from ._mixed import (
    ConvergenceError,
    CrossProduct,
    Grouping,
    NumericalError,
    SPDFactor,
    check_full_rank,
    chol_solve,
    dense_chol,
    minimize_log_sd,
    with_intercept,
)


@dataclass
class LmmOptions:
    max_iter: int = 500
    tol: float = 1e-9
    xtol: float = 1e-8
    lower_log_sd: float = -15.0
    upper_log_sd: float = 10.0
    restarts: int = 2
    # fixes the log relative SDs instead of optimising them; -inf gives a zero variance
    fixed_log_sd: Optional[Sequence[float]] = None


@dataclass
class LmmFit:
    alpha: float
    beta: np.ndarray
    names: List[str]
    alpha_se: float
    beta_se: np.ndarray
    cov: np.ndarray
    sigma2_eps: float
    variance_components: Dict[str, float]
    boundary: Dict[str, bool]
    log_sd: Dict[str, float]
    conditional_modes: Dict[str, np.ndarray]
    restricted_log_likelihood: float
    converged: bool
    n_iter: int
    n_fev: int
    n_obs: int
    options: LmmOptions = field(default_factory=LmmOptions)
    sigma_eps_boundary: bool = False
    dropped: List[str] = field(default_factory=list)
    model: str = "lmm"

    @property
    def criterion(self) -> float:
        return -2.0 * self.restricted_log_likelihood


class _RemlProblem:
    def __init__(self, y, X, group_indices: Mapping[str, Sequence[int]]):
        self.y = np.asarray(y, dtype=float)
        self.X1 = with_intercept(X)
        self.N, self.p1 = self.X1.shape
        self.grouping = Grouping.build(group_indices, self.N)
        g = self.grouping
        self.cross = CrossProduct(g)
        self.ones = np.ones(self.N)
        self.ZtX = np.asarray(g.Z.T @ self.X1)
        self.Zty = np.asarray(g.Z.T @ self.y)
        self.XtX = self.X1.T @ self.X1
        self.Xty = self.X1.T @ self.y
        if self.N <= self.p1:
            raise ValueError(f"need more observations ({self.N}) than fixed effects ({self.p1})")

    def solve(self, log_sd: np.ndarray):
        """Penalised least squares at relative SDs exp(log_sd)."""
        log_sd = np.asarray(log_sd, dtype=float)
        if np.any(np.isnan(log_sd)):
            raise NumericalError(f"non-finite variance parameters: {log_sd}")
        with np.errstate(over="raise"):
            try:
                lam = self.grouping.expand(np.exp(log_sd)) if log_sd.size else np.zeros(0)
            except FloatingPointError:
                raise NumericalError(f"overflow at log-SD parameters {log_sd}") from None
        factor = self.cross.factor(self.ones, lam)
        LZtX = lam[:, None] * self.ZtX
        LZty = lam * self.Zty
        CX = factor.solve(LZtX)
        cy = factor.solve(LZty)
        S = self.XtX - LZtX.T @ CX
        RX = dense_chol(S)
        beta = chol_solve(RX, self.Xty - LZtX.T @ cy)
        u = cy - CX @ beta
        b = lam * u
        resid = self.y - self.X1 @ beta - self.grouping.Z @ b
        r2 = float(resid @ resid + u @ u)
        return dict(lam=lam, factor=factor, RX=RX, beta=beta, u=u, b=b, resid=resid, r2=r2)

    def criterion(self, log_sd: np.ndarray) -> float:
        s = self.solve(log_sd)
        return self._crit(s)

    def _crit(self, s) -> float:
        dof = self.N - self.p1
        if not s["r2"] > 0:
            raise NumericalError("penalised residual sum of squares is zero; REML criterion undefined")
        logdet_rx = 2.0 * float(np.sum(np.log(np.diag(s["RX"]))))
        val = s["factor"].logdet + logdet_rx + dof * (1.0 + math.log(2.0 * math.pi * s["r2"] / dof))
        if not np.isfinite(val):
            raise NumericalError("REML criterion is not finite")
        return val


def reml_criterion(theta, y, X, group_indices) -> float:
    """-2 x restricted log-likelihood with beta and sigma_eps^2 profiled out.

    ``theta`` holds log relative standard deviations, one per factor.
    """
    theta = np.asarray(theta, dtype=float)
    try:
        return _RemlProblem(y, X, group_indices).criterion(theta)
    except NumericalError as exc:
        raise NumericalError(f"{exc} (theta = {theta.tolist()})") from None


def _exact_fit(prob: _RemlProblem, names, options, dropped) -> Optional[LmmFit]:
    """Degenerate case: y lies in the span of [1, X] so every variance is zero."""
    coef, *_ = np.linalg.lstsq(prob.X1, prob.y, rcond=None)
    resid = prob.y - prob.X1 @ coef
    scale = max(1.0, float(np.max(np.abs(prob.y))))
    if np.max(np.abs(resid)) > 1e-12 * scale:
        return None
    g = prob.grouping
    zeros = {f: 0.0 for f in g.factors}
    p = prob.p1 - 1
    return LmmFit(
        alpha=float(coef[0]),
        beta=coef[1:].copy(),
        names=list(names),
        alpha_se=0.0,
        beta_se=np.zeros(p),
        cov=np.zeros((prob.p1, prob.p1)),
        sigma2_eps=0.0,
        variance_components=dict(zeros),
        boundary={f: True for f in g.factors},
        log_sd={f: options.lower_log_sd for f in g.factors},
        conditional_modes={f: np.zeros(n) for f, n in zip(g.factors, g.n_levels)},
        restricted_log_likelihood=math.inf,
        converged=True,
        n_iter=0,
        n_fev=0,
        n_obs=prob.N,
        options=options,
        sigma_eps_boundary=True,
        dropped=list(dropped),
    )


def _newton_polish(fun, x, fx, free, tol, h=1e-4, max_steps=4):
    """Newton steps on central-difference derivatives over the ``free`` coordinates.

    The simplex leaves log SDs about 1e-7 from the optimum, where the criterion is flat
    to rounding; the derivative-based steps pin the optimum to about 1e-10.
    Returns (x, fx, evaluations); the simplex point is kept if the result is worse by
    more than ``tol``.
    """
    idx = np.flatnonzero(free)
    if idx.size == 0:
        return x, fx, 0
    n_ev = 0

    def f(z):
        nonlocal n_ev
        n_ev += 1
        return fun(z)

    x0, f0 = x.copy(), fx
    cur = x.copy()
    for _ in range(max_steps):
        E = np.eye(x.size)[idx] * h
        fc = f(cur)
        fp = np.array([f(cur + e) for e in E])
        fm = np.array([f(cur - e) for e in E])
        g = (fp - fm) / (2 * h)
        H = np.diag((fp - 2 * fc + fm) / h**2)
        for a in range(idx.size):
            for b in range(a + 1, idx.size):
                ea, eb = E[a], E[b]
                H[a, b] = H[b, a] = (f(cur + ea + eb) - f(cur + ea - eb) - f(cur - ea + eb) + f(cur - ea - eb)) / (4 * h**2)
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            break
        step = np.linalg.solve(H, g)
        if np.max(np.abs(step)) > 0.01:
            break
        cur[idx] -= step
        if np.max(np.abs(step)) < 1e-11:
            break
    fcur = f(cur)
    if np.isfinite(fcur) and fcur <= f0 + tol:
        return cur, fcur, n_ev
    return x0, f0, n_ev


def fit_lmm(
    y,
    X,
    group_indices: Mapping[str, Sequence[int]],
    options: Optional[LmmOptions] = None,
    names: Optional[Sequence[str]] = None,
    dropped: Sequence[str] = (),
) -> LmmFit:
    """Fit the LMM by REML.

    Parameters
    ----------
    y : (N,) array
        Continuous outcome.
    X : (N, p) array
        Fixed-effect covariates without the intercept column.
    group_indices : mapping of factor name to (N,) integer codes
        One entry per independent random-intercept factor.
    options : LmmOptions, optional
    names : sequence of str, optional
        Column names of ``X``; used in rank-deficiency errors and in the fit.

    Returns
    -------
    LmmFit
        GLS estimates of ``alpha`` and ``beta`` at the REML optimum with Wald standard
        errors from ``sigma_eps^2 (X' V^-1 X)^-1``.
    """
    options = options or LmmOptions()
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    prob = _RemlProblem(y, X, group_indices)
    check_full_rank(prob.X1, ["(intercept)"] + names)
    g = prob.grouping
    exact = _exact_fit(prob, names, options, dropped)
    if exact is not None:
        return exact

    if options.fixed_log_sd is not None:
        x = np.asarray(options.fixed_log_sd, dtype=float)
        if x.shape != (len(g.factors),):
            raise ValueError(f"fixed_log_sd needs {len(g.factors)} values")
        fun = prob.criterion(x)
        outer_x, n_iter, n_fev, converged, boundary = x, 0, 1, True, ~np.isfinite(x) | (x <= options.lower_log_sd)
    else:
        res = minimize_log_sd(
            prob.criterion,
            np.zeros(len(g.factors)),
            options.lower_log_sd,
            options.upper_log_sd,
            options.max_iter,
            options.tol,
            options.xtol,
            options.restarts,
        )
        if not res.converged:
            raise ConvergenceError(
                f"REML optimisation did not converge: {res.message}",
                {"n_iter": res.n_iter, "n_fev": res.n_fev, "log_sd": res.x.tolist(), "criterion": res.fun},
            )
        outer_x, fun, n_iter, n_fev, converged, boundary = res.x, res.fun, res.n_iter, res.n_fev, True, res.boundary
        outer_x, fun, extra = _newton_polish(prob.criterion, outer_x, fun, ~boundary, options.tol)
        n_fev += extra

    s = prob.solve(outer_x)
    dof = prob.N - prob.p1
    sigma2 = s["r2"] / dof
    rel = np.exp(outer_x)
    rel[boundary] = 0.0
    RXinv = chol_solve(s["RX"], np.eye(prob.p1))
    cov = sigma2 * RXinv
    se = np.sqrt(np.diag(cov))
    b = s["b"].copy()
    lam_zero = g.expand(boundary.astype(float)) > 0 if g.factors else np.zeros(0, bool)
    b[lam_zero] = 0.0
    return LmmFit(
        alpha=float(s["beta"][0]),
        beta=s["beta"][1:].copy(),
        names=list(names),
        alpha_se=float(se[0]),
        beta_se=se[1:].copy(),
        cov=cov,
        sigma2_eps=float(sigma2),
        variance_components={f: float(sigma2 * rel[k] ** 2) for k, f in enumerate(g.factors)},
        boundary={f: bool(boundary[k]) for k, f in enumerate(g.factors)},
        log_sd={f: float(outer_x[k]) for k, f in enumerate(g.factors)},
        conditional_modes=g.split(b),
        restricted_log_likelihood=-0.5 * float(fun),
        converged=converged,
        n_iter=int(n_iter),
        n_fev=int(n_fev),
        n_obs=prob.N,
        options=options,
        dropped=list(dropped),
    )


def residuals(fit: LmmFit, y, X, group_indices: Mapping[str, Sequence[int]]) -> np.ndarray:
    """y - alpha - X beta - Z u at the fitted conditional modes."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(y.size, -1)
    out = y - fit.alpha - X @ fit.beta
    for f, codes in group_indices.items():
        _, c = np.unique(np.asarray(codes), return_inverse=True)
        out = out - fit.conditional_modes[f][c]
    return out


def options_dict(options) -> dict:
    d = asdict(options)
    if d.get("fixed_log_sd") is not None:
        d["fixed_log_sd"] = [float(v) for v in d["fixed_log_sd"]]
    return d
