import math

import numpy as np
import pytest

from chal_lens._mixed import RankDeficientError
from chal_lens.lmm import LmmOptions, fit_lmm, reml_criterion, residuals


def balanced(seed, a=4, n=5, sigma_u=1.0, sigma_e=1.0):
    rng = np.random.default_rng(seed)
    g = np.repeat(np.arange(a), n)
    y = 2.0 + sigma_u * rng.standard_normal(a)[g] + sigma_e * rng.standard_normal(a * n)
    return y, g


def anova_reml(y, g, a, n):
    """Closed-form balanced one-way REML, with the boundary branch."""
    means = np.array([y[g == k].mean() for k in range(a)])
    ssb = n * np.sum((means - y.mean()) ** 2)
    ssw = sum(np.sum((y[g == k] - means[k]) ** 2) for k in range(a))
    msb, msw = ssb / (a - 1), ssw / (a * (n - 1))
    if msb > msw:
        return (msb - msw) / n, msw
    return 0.0, (ssb + ssw) / (a * n - 1)


def dense_reml(theta, y, X, groups):
    """-2 restricted log-likelihood with sigma profiled, by dense matrix algebra."""
    N = len(y)
    X1 = np.column_stack([np.ones(N), X]) if X.size else np.ones((N, 1))
    H = np.eye(N)
    for t, codes in zip(theta, groups.values()):
        Z = np.eye(codes.max() + 1)[codes]
        H += math.exp(2 * t) * Z @ Z.T
    Hi = np.linalg.inv(H)
    A = X1.T @ Hi @ X1
    beta = np.linalg.solve(A, X1.T @ Hi @ y)
    r = y - X1 @ beta
    rss = r @ Hi @ r
    dof = N - X1.shape[1]
    return np.linalg.slogdet(H)[1] + np.linalg.slogdet(A)[1] + dof * (1 + math.log(2 * math.pi * rss / dof))


def crossed(seed, N=60):
    rng = np.random.default_rng(seed)
    groups = {"a": rng.integers(0, 4, N), "b": rng.integers(0, 7, N)}
    groups = {k: np.unique(v, return_inverse=True)[1] for k, v in groups.items()}
    X = (rng.random((N, 2)) < 0.4).astype(float)
    u = {k: rng.standard_normal(v.max() + 1) * s for (k, v), s in zip(groups.items(), (0.8, 0.5))}
    y = 1.0 + X @ [0.5, -0.3] + u["a"][groups["a"]] + u["b"][groups["b"]] + 0.7 * rng.standard_normal(N)
    return y, X, groups


@pytest.mark.parametrize("seed", range(10))
def test_balanced_closed_form(seed):
    y, g = balanced(seed)
    fit = fit_lmm(y, np.zeros((20, 0)), {"group": g})
    su2, se2 = anova_reml(y, g, 4, 5)
    assert fit.variance_components["group"] == pytest.approx(su2, abs=1e-6)
    assert fit.sigma2_eps == pytest.approx(se2, abs=1e-6)
    assert fit.alpha == pytest.approx(y.mean(), abs=1e-9)


def test_balanced_boundary_branch():
    for seed in range(200):
        y, g = balanced(seed, sigma_u=0.0)
        su2, se2 = anova_reml(y, g, 4, 5)
        if su2 == 0.0:
            break
    fit = fit_lmm(y, np.zeros((20, 0)), {"group": g})
    assert fit.boundary["group"] and fit.variance_components["group"] == 0.0
    assert fit.sigma2_eps == pytest.approx(se2, abs=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_criterion_matches_dense_oracle(seed):
    y, X, groups = crossed(seed)
    rng = np.random.default_rng(100 + seed)
    for _ in range(5):
        theta = rng.uniform(-2, 1.5, 2)
        assert reml_criterion(theta, y, X, groups) == pytest.approx(dense_reml(theta, y, X, groups), abs=1e-8)


def test_zero_variance_limit_is_ols():
    y, X, groups = crossed(4)
    X1 = np.column_stack([np.ones(len(y)), X])
    coef, *_ = np.linalg.lstsq(X1, y, rcond=None)
    fit = fit_lmm(y, X, groups, LmmOptions(fixed_log_sd=[-np.inf, -np.inf]))
    np.testing.assert_allclose(np.r_[fit.alpha, fit.beta], coef, atol=1e-8)
    rss = float(np.sum((y - X1 @ coef) ** 2))
    dof = len(y) - 3
    ols = np.linalg.slogdet(X1.T @ X1)[1] + dof * (1 + math.log(2 * math.pi * rss / dof))
    assert reml_criterion([-15, -15], y, X, groups) == pytest.approx(ols, abs=1e-6)
    assert fit.criterion == pytest.approx(ols, abs=1e-10)


@pytest.fixture(scope="module")
def crossed_fit():
    y, X, groups = crossed(7, N=120)
    return y, X, groups, fit_lmm(y, X, groups, names=["x1", "x2"])


def test_grid_around_optimum(crossed_fit):
    y, X, groups, fit = crossed_fit
    opt = np.array([fit.log_sd["a"], fit.log_sd["b"]])
    best = reml_criterion(opt, y, X, groups)
    assert best == pytest.approx(fit.criterion, abs=1e-10)
    for d in ([0.1, 0], [-0.1, 0], [0, 0.1], [0, -0.1], [0.1, 0.1], [-0.1, -0.1]):
        assert best <= reml_criterion(opt + d, y, X, groups)


def test_location_scale_equivariance(crossed_fit):
    y, X, groups, fit = crossed_fit
    shifted = fit_lmm(y + 3.5, X, groups)
    assert shifted.alpha == pytest.approx(fit.alpha + 3.5, abs=1e-8)
    np.testing.assert_allclose(shifted.beta, fit.beta, atol=1e-8)
    for f in groups:
        assert shifted.variance_components[f] == pytest.approx(fit.variance_components[f], abs=1e-8)
    c = -2.5
    scaled = fit_lmm(c * y, X, groups)
    assert scaled.alpha == pytest.approx(c * fit.alpha, rel=1e-6)
    np.testing.assert_allclose(scaled.beta, c * fit.beta, rtol=1e-6)
    assert scaled.sigma2_eps == pytest.approx(c**2 * fit.sigma2_eps, rel=1e-6)
    for f in groups:
        assert scaled.variance_components[f] == pytest.approx(c**2 * fit.variance_components[f], rel=1e-6)


def test_row_permutation(crossed_fit):
    y, X, groups, fit = crossed_fit
    perm = np.random.default_rng(0).permutation(len(y))
    g2 = {k: v[perm] for k, v in groups.items()}
    theta = [0.3, -0.4]
    assert reml_criterion(theta, y[perm], X[perm], g2) == pytest.approx(reml_criterion(theta, y, X, groups), abs=1e-9)


def test_residuals_oracle(crossed_fit):
    y, X, groups, fit = crossed_fit
    r = residuals(fit, y, X, groups)
    expect = np.array([y[i] - fit.alpha - X[i] @ fit.beta
                       - sum(fit.conditional_modes[f][groups[f][i]] for f in groups) for i in range(len(y))])
    np.testing.assert_allclose(r, expect, atol=1e-12)
    assert abs(r.mean()) < 1e-8


def test_perfect_fit_and_constant_y():
    y, X, groups = crossed(1)
    X1 = np.column_stack([np.ones(len(y)), X])
    exact = X1 @ [1.0, 2.0, -1.0]
    fit = fit_lmm(exact, X, groups)
    np.testing.assert_allclose(residuals(fit, exact, X, groups), 0, atol=1e-10)
    const = fit_lmm(np.full(len(y), 4.2), X, groups)
    assert const.alpha == pytest.approx(4.2) and np.allclose(const.beta, 0)
    assert const.sigma_eps_boundary and const.sigma2_eps == 0.0


def test_wald_se_matches_dense_gls(crossed_fit):
    y, X, groups, fit = crossed_fit
    N = len(y)
    V = np.eye(N) * fit.sigma2_eps
    for f, codes in groups.items():
        Z = np.eye(codes.max() + 1)[codes]
        V += fit.variance_components[f] * Z @ Z.T
    X1 = np.column_stack([np.ones(N), X])
    cov = np.linalg.inv(X1.T @ np.linalg.solve(V, X1))
    np.testing.assert_allclose(np.r_[fit.alpha_se, fit.beta_se], np.sqrt(np.diag(cov)), rtol=1e-8)


def test_rank_deficient():
    y, X, groups = crossed(2)
    with pytest.raises(RankDeficientError, match="x3"):
        fit_lmm(y, np.column_stack([X, X[:, 0]]), groups, names=["x1", "x2", "x3"])
