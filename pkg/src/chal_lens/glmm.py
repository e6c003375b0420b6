"""Binomial GLMM with logit link, fitted by the Laplace approximation.

For fixed random-effect standard deviations ``sigma_f`` the conditional modes of the
spherical random effects and the fixed effects are found jointly by penalised IRLS;
the Laplace deviance at that mode is minimised over ``log sigma_f`` by a bounded
simplex search. Plain logistic regression (:func:`fit_glm_logistic`) is the model
without random effects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit, gammaln, log_expit

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


class SeparationError(ValueError):
    def __init__(self, column: str):
        super().__init__(f"perfect separation: coefficient of {column!r} diverges")
        self.column = column


class InnerConvergenceError(ConvergenceError):
    pass


@dataclass
class GlmmOptions:
    max_iter: int = 500
    tol: float = 1e-9
    xtol: float = 1e-4
    inner_tol: float = 1e-8
    inner_max_iter: int = 200
    lower_log_sd: float = -15.0
    upper_log_sd: float = 5.0
    restarts: int = 1
    separation_threshold: float = 15.0
    # fixes log SDs instead of optimising them; -inf gives a zero variance
    fixed_log_sd: Optional[Sequence[float]] = None


@dataclass
class GlmmFit:
    alpha: float
    beta: np.ndarray
    names: List[str]
    alpha_se: float
    beta_se: np.ndarray
    cov: np.ndarray
    variance_components: Dict[str, float]
    boundary: Dict[str, bool]
    log_sd: Dict[str, float]
    conditional_modes: Dict[str, np.ndarray]
    laplace_deviance: float
    converged: bool
    n_iter_outer: int
    n_iter_inner_total: int
    n_obs: int
    warnings: List[str] = field(default_factory=list)
    options: GlmmOptions = field(default_factory=GlmmOptions)
    dropped: List[str] = field(default_factory=list)
    separated: List[str] = field(default_factory=list)
    model: str = "glmm"
    link: str = "logit"
    family: str = "binomial"

    def fitted(self, X, group_indices) -> np.ndarray:
        """Fitted success probabilities, expit(alpha + X beta + Z u)."""
        eta = self.alpha + np.asarray(X, dtype=float) @ self.beta
        for f, codes in group_indices.items():
            _, c = np.unique(np.asarray(codes), return_inverse=True)
            eta = eta + self.conditional_modes[f][c]
        return expit(eta)


def _check_counts(successes, trials):
    s = np.asarray(successes, dtype=float)
    t = np.asarray(trials, dtype=float)
    if s.shape != t.shape or s.ndim != 1:
        raise ValueError("successes and trials must be 1-D arrays of equal length")
    if np.any(t < 1) or np.any(s < 0) or np.any(s > t):
        raise ValueError("need trials >= 1 and 0 <= successes <= trials")
    return s, t


def _kernel(s, t, eta) -> float:
    """Binomial log-likelihood without the combinatorial constant."""
    return float(np.sum(s * log_expit(eta) + (t - s) * log_expit(-eta)))


def _saturated(s, t) -> np.ndarray:
    """Per-observation kernel log-likelihood of the saturated model."""
    f = t - s
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(s > 0, s * np.log(s / t), 0.0) + np.where(f > 0, f * np.log(f / t), 0.0)


def _unit_deviance(s, t, eta, sat) -> float:
    """Binomial deviance; summing small non-negative terms keeps rounding at O(N eps)."""
    return float(np.sum(-2.0 * (s * log_expit(eta) + (t - s) * log_expit(-eta) - sat)))


def _log_binom(s, t) -> float:
    return float(np.sum(gammaln(t + 1) - gammaln(s + 1) - gammaln(t - s + 1)))


class _LaplaceProblem:
    def __init__(self, successes, trials, X, group_indices, options: GlmmOptions):
        self.s, self.t = _check_counts(successes, trials)
        self.X1 = with_intercept(np.asarray(X, dtype=float).reshape(self.s.size, -1))
        self.N, self.p1 = self.X1.shape
        self.grouping = Grouping.build(group_indices, self.N)
        self.cross = CrossProduct(self.grouping)
        self.options = options
        self.sat = _saturated(self.s, self.t)
        # -2 log-likelihood = deviance - 2 const
        self.const = _log_binom(self.s, self.t) + float(np.sum(self.sat))
        rate = np.clip(self.s.sum() / self.t.sum(), 1e-6, 1 - 1e-6)
        self.start_beta = np.zeros(self.p1)
        self.start_beta[0] = math.log(rate / (1 - rate))
        self.beta = self.start_beta.copy()
        self.u = np.zeros(self.grouping.q)
        self.n_inner = 0

    def _system(self, lam, u, beta):
        g = self.grouping
        eta = self.X1 @ beta + g.Z @ (lam * u)
        mu = expit(eta)
        w = self.t * mu * (1 - mu)
        resid = self.s - self.t * mu
        factor = self.cross.factor(w, lam)
        WX = w[:, None] * self.X1
        B = lam[:, None] * np.asarray(g.Z.T @ WX)
        grad_u = lam * np.asarray(g.Z.T @ resid) - u
        sol = factor.solve(np.column_stack([B, grad_u]))
        AB, ag = sol[:, :-1], sol[:, -1]
        S = self.X1.T @ WX - B.T @ AB
        grad_b = self.X1.T @ resid
        return eta, factor, B, AB, S, ag, grad_b

    def _pdev(self, lam, u, beta) -> float:
        eta = self.X1 @ beta + self.grouping.Z @ (lam * u)
        return _unit_deviance(self.s, self.t, eta, self.sat) + float(u @ u)

    def pirls(self, log_sd, warm: bool = True):
        """Joint conditional mode of (u, beta) for the given log SDs."""
        opts = self.options
        log_sd = np.asarray(log_sd, dtype=float)
        if np.any(np.isnan(log_sd)) or np.any(log_sd > 700):
            raise NumericalError(f"invalid variance parameters (theta = {log_sd.tolist()})")
        lam = self.grouping.expand(np.exp(log_sd)) if log_sd.size else np.zeros(0)
        u = self.u.copy() if warm else np.zeros(self.grouping.q)
        beta = self.beta.copy() if warm else self.start_beta.copy()
        pdev = self._pdev(lam, u, beta)
        trace = [pdev]
        converged = False
        for it in range(1, opts.inner_max_iter + 1):
            eta, factor, B, AB, S, ag, grad_b = self._system(lam, u, beta)
            L = dense_chol(S)
            d_beta = chol_solve(L, grad_b - B.T @ ag)
            d_u = ag - AB @ d_beta
            # the Newton step at the current point is the convergence measure; the last
            # step is applied so the mode error is second order, since the log-determinant
            # is not stationary there and would carry the error into the objective
            if max(np.max(np.abs(d_u), initial=0.0), np.max(np.abs(d_beta))) < opts.inner_tol:
                u, beta = u + d_u, beta + d_beta
                pdev = self._pdev(lam, u, beta)
                eta, factor, _, _, S, _, _ = self._system(lam, u, beta)
                converged = True
                break
            step = 1.0
            for _ in range(30):
                nu, nb = u + step * d_u, beta + step * d_beta
                new = self._pdev(lam, nu, nb)
                if new <= pdev + 1e-12 * abs(pdev):
                    break
                step *= 0.5
            else:
                # no decrease possible: at the mode up to rounding
                converged = np.max(np.abs(d_beta)) < 1e-6
                break
            u, beta, pdev = nu, nb, new
            trace.append(pdev)
            if not np.isfinite(pdev):
                raise NumericalError(f"penalised deviance overflow (theta = {log_sd.tolist()})")
        self.n_inner += it
        if not converged:
            raise InnerConvergenceError(
                f"penalised IRLS did not converge in {opts.inner_max_iter} iterations (theta = {log_sd.tolist()})",
                {"trace": trace},
            )
        self.u, self.beta = u, beta
        return dict(lam=lam, u=u, beta=beta, eta=eta, factor=factor, S=S, pdev=pdev)

    def objective(self, log_sd) -> float:
        m = self.pirls(log_sd)
        return m["pdev"] + m["factor"].logdet

    def deviance(self, m) -> float:
        return m["pdev"] + m["factor"].logdet - 2.0 * self.const


def laplace_deviance(theta, successes, trials, X, group_indices, options: Optional[GlmmOptions] = None) -> float:
    """-2 x Laplace-approximated marginal log-likelihood at log SDs ``theta``.

    The fixed effects sit at their joint conditional mode with the random effects.
    """
    prob = _LaplaceProblem(successes, trials, X, group_indices, options or GlmmOptions())
    return prob.deviance(prob.pirls(np.asarray(theta, dtype=float), warm=False))


def fit_glmm_binomial(
    successes,
    trials,
    X,
    group_indices: Mapping[str, Sequence[int]],
    options: Optional[GlmmOptions] = None,
    names: Optional[Sequence[str]] = None,
    dropped: Sequence[str] = (),
) -> GlmmFit:
    """Fit the binomial-logit GLMM by the Laplace approximation.

    Parameters
    ----------
    successes, trials : (N,) integer arrays
        Binomial outcome per row, ``0 <= successes <= trials`` and ``trials >= 1``.
    X : (N, p) array
        Fixed-effect covariates without intercept.
    group_indices : mapping of factor name to (N,) integer codes
    options : GlmmOptions, optional
    names : column names of ``X``

    Returns
    -------
    GlmmFit
        Log-odds coefficients with standard errors from the fixed-effects block of
        the inverse penalised information at the optimum.
    """
    options = options or GlmmOptions()
    names = list(names) if names is not None else [f"x{j}" for j in range(np.asarray(X).reshape(len(trials), -1).shape[1])]
    prob = _LaplaceProblem(successes, trials, X, group_indices, options)
    check_full_rank(prob.X1, ["(intercept)"] + names)
    g = prob.grouping
    F = len(g.factors)
    start_obj = None
    if options.fixed_log_sd is not None:
        x = np.asarray(options.fixed_log_sd, dtype=float)
        if x.shape != (F,):
            raise ValueError(f"fixed_log_sd needs {F} values")
        n_iter, converged = 0, True
        boundary = ~np.isfinite(x) | (x <= options.lower_log_sd)
    else:
        x0 = np.zeros(F)
        start_obj = prob.objective(x0)
        res = minimize_log_sd(
            prob.objective,
            x0,
            options.lower_log_sd,
            options.upper_log_sd,
            options.max_iter,
            options.tol,
            options.xtol,
            options.restarts,
        )
        if not res.converged:
            raise ConvergenceError(
                f"Laplace optimisation did not converge: {res.message}",
                {"n_iter": res.n_iter, "n_fev": res.n_fev, "log_sd": res.x.tolist(), "deviance": res.fun},
            )
        x, n_iter, converged, boundary = res.x, res.n_iter, True, res.boundary
    m = prob.pirls(x, warm=True)
    if start_obj is not None and m["pdev"] + m["factor"].logdet > start_obj + options.tol:
        m = prob.pirls(np.zeros(F), warm=False)
        x = np.zeros(F)
        boundary = np.zeros(F, bool)
    cov = np.linalg.inv(m["S"])
    cov = 0.5 * (cov + cov.T)
    se = np.sqrt(np.diag(cov))
    beta = m["beta"]
    sd = np.exp(x)
    sd[boundary] = 0.0
    b = m["lam"] * m["u"]
    if F:
        b[g.expand(boundary.astype(float)) > 0] = 0.0
    all_names = ["(intercept)"] + names
    separated = [n for n, v in zip(all_names, beta) if abs(v) > options.separation_threshold]
    warns = [f"quasi-separation: |estimate| > {options.separation_threshold:g} for {n}" for n in separated]
    warns += [f"variance of {f} estimated on the boundary (0)" for f, bd in zip(g.factors, boundary) if bd]
    return GlmmFit(
        alpha=float(beta[0]),
        beta=beta[1:].copy(),
        names=names,
        alpha_se=float(se[0]),
        beta_se=se[1:].copy(),
        cov=cov,
        variance_components={f: float(sd[k] ** 2) for k, f in enumerate(g.factors)},
        boundary={f: bool(boundary[k]) for k, f in enumerate(g.factors)},
        log_sd={f: float(x[k]) for k, f in enumerate(g.factors)},
        conditional_modes=g.split(b),
        laplace_deviance=prob.deviance(m),
        converged=converged,
        n_iter_outer=int(n_iter),
        n_iter_inner_total=int(prob.n_inner),
        n_obs=prob.N,
        warnings=warns,
        options=options,
        dropped=list(dropped),
        separated=separated,
    )


@dataclass
class GlmResult:
    coef: np.ndarray  # intercept first
    se: np.ndarray
    cov: np.ndarray
    deviance: float  # -2 log-likelihood
    n_iter: int
    names: List[str]


def fit_glm_logistic(successes, trials, X, names: Optional[Sequence[str]] = None,
                     tol: float = 1e-10, max_iter: int = 100) -> GlmResult:
    """Maximum-likelihood logistic regression (with intercept) by IRLS.

    Raises :class:`SeparationError` naming the column whose coefficient diverges.
    """
    s, t = _check_counts(successes, trials)
    X1 = with_intercept(np.asarray(X, dtype=float).reshape(s.size, -1))
    names = ["(intercept)"] + (list(names) if names is not None else [f"x{j}" for j in range(X1.shape[1] - 1)])
    check_full_rank(X1, names)
    _separation_precheck(s, t, X1, names)
    rate = np.clip(s.sum() / t.sum(), 1e-6, 1 - 1e-6)
    beta = np.zeros(X1.shape[1])
    beta[0] = math.log(rate / (1 - rate))
    for it in range(1, max_iter + 1):
        eta = X1 @ beta
        mu = expit(eta)
        w = t * mu * (1 - mu)
        z = eta + (s - t * mu) / np.maximum(w, 1e-300)
        H = X1.T @ (w[:, None] * X1)
        new = np.linalg.solve(H, X1.T @ (w * z))
        delta = np.max(np.abs(new - beta))
        beta = new
        if np.max(np.abs(beta)) > 50:
            raise SeparationError(names[int(np.argmax(np.abs(beta)))])
        if delta < tol:
            break
    else:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations")
    eta = X1 @ beta
    mu = expit(eta)
    w = t * mu * (1 - mu)
    cov = np.linalg.inv(X1.T @ (w[:, None] * X1))
    dev = -2.0 * (_kernel(s, t, eta) + _log_binom(s, t))
    return GlmResult(beta, np.sqrt(np.diag(cov)), cov, dev, it, names)


def _separation_precheck(s, t, X1, names) -> None:
    if np.all(s == t) or np.all(s == 0):
        raise SeparationError(names[0])
    binary = [j for j in range(1, X1.shape[1]) if np.all((X1[:, j] == 0) | (X1[:, j] == 1))]
    for j in binary:
        for level in (0.0, 1.0):
            sel = X1[:, j] == level
            if sel.any() and (np.all(s[sel] == t[sel]) or np.all(s[sel] == 0)):
                raise SeparationError(names[j])
