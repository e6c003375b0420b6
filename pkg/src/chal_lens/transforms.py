"""Metric transforms, residual normality diagnostics and the model-path recommendation."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit
from scipy.stats import norm

DEFAULT_EPS = 1e-6
SW_MAX_N = 5000

SUPPORTS = {
    "unbounded": "unbounded",
    "unit": "unit",
    "[0,1]": "unit",
    "positive": "positive",
    "[0,inf)": "positive",
    "binary-counts": "binary-counts",
}


class DomainError(ValueError):
    pass


class ClampWarning(UserWarning):
    pass


def _clamp(v: np.ndarray, lo: float, hi: float, what: str) -> Tuple[np.ndarray, int]:
    n = int(np.count_nonzero((v < lo) | (v > hi)))
    if n:
        warnings.warn(f"{what}: clamped {n} value(s) into [{lo:g}, {hi:g}]", ClampWarning, stacklevel=3)
        v = np.clip(v, lo, hi)
    return v, n


def _logit(v, eps: float) -> Tuple[np.ndarray, int]:
    v = np.asarray(v, dtype=float)
    if np.any(~((v >= 0) & (v <= 1))):
        raise DomainError("logit requires values in [0, 1]")
    v, n = _clamp(v, eps, 1 - eps, "logit")
    return np.log(v) - np.log1p(-v), n


def _log(v, eps: float) -> Tuple[np.ndarray, int]:
    v = np.asarray(v, dtype=float)
    if np.any(~(v >= 0)):
        raise DomainError("log transform requires non-negative values")
    v, n = _clamp(v, eps, np.inf, "log")
    return np.log(v), n


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def logit(v, eps: float = DEFAULT_EPS):
    """ln(v / (1 - v)); 0 and 1 are clamped to [eps, 1 - eps] with a warning."""
    return _scalar(_logit(v, eps)[0])


def logit_inverse(z):
    return _scalar(expit(np.asarray(z, dtype=float)))


def log_transform(v, eps: float = DEFAULT_EPS):
    """Natural log; 0 is clamped to eps with a warning."""
    return _scalar(_log(v, eps)[0])


def apply_transform(values, name: Optional[str], eps: float = DEFAULT_EPS) -> Tuple[np.ndarray, int]:
    """Transform ``values`` by name (``None``/``"none"``, ``"logit"``, ``"log"``).

    Returns the transformed array and the number of clamped entries.
    """
    values = np.asarray(values, dtype=float)
    if name in (None, "none"):
        return values, 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        if name == "logit":
            return _logit(values, eps)
        if name == "log":
            return _log(values, eps)
    raise ValueError(f"unknown transform {name!r}")


# ---------------------------------------------------------------------------
# Shapiro-Wilk W with Royston's (1995) coefficient and p-value approximations

_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_G = (-2.273, 0.459)
_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)


def _poly(coef, x):
    # coefficients in ascending powers
    return sum(c * x**i for i, c in enumerate(coef))


def shapiro_wilk_coefficients(n: int) -> np.ndarray:
    if n < 3:
        raise ValueError("Shapiro-Wilk requires n >= 3")
    if n == 3:
        return np.array([-math.sqrt(0.5), 0.0, math.sqrt(0.5)])
    m = norm.ppf((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    ssq = float(np.sum(m**2))
    u = 1.0 / math.sqrt(n)
    a = m / math.sqrt(ssq)
    an = _poly(_C1, u) + m[-1] / math.sqrt(ssq)
    if n > 5:
        an1 = _poly(_C2, u) + m[-2] / math.sqrt(ssq)
        phi = (ssq - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * an**2 - 2 * an1**2)
        a = m / math.sqrt(phi)
        a[-1], a[-2], a[0], a[1] = an, an1, -an, -an1
    else:
        phi = (ssq - 2 * m[-1] ** 2) / (1 - 2 * an**2)
        a = m / math.sqrt(phi)
        a[-1], a[0] = an, -an
    return a


def shapiro_wilk(x) -> Tuple[float, float]:
    """Shapiro-Wilk statistic W and its p-value for a sample of size 3..5000."""
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    if n < 3:
        raise ValueError("Shapiro-Wilk requires n >= 3")
    if n > SW_MAX_N:
        raise ValueError(f"Royston's approximation is valid for n <= {SW_MAX_N}")
    xc = x - x.mean()
    ss = float(xc @ xc)
    if not ss > 0 or (x[-1] - x[0]) <= 1e-19 * max(1.0, abs(x[0])):
        raise ValueError("degenerate sample: zero variance")
    a = shapiro_wilk_coefficients(n)
    w = min(float(a @ xc) ** 2 / ss, 1.0)
    if n == 3:
        p = 6 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return w, float(min(max(p, 0.0), 1.0))
    w1 = math.log1p(-w) if w < 1 else -np.inf
    if n <= 11:
        gamma = _poly(_G, n)
        if w1 >= gamma:
            return w, 1e-19
        y = -math.log(gamma - w1)
        mu = _poly(_C3, n)
        sigma = math.exp(_poly(_C4, n))
    else:
        ln = math.log(n)
        y = w1
        mu = _poly(_C5, ln)
        sigma = math.exp(_poly(_C6, ln))
    if not np.isfinite(y):
        return w, 1.0
    return w, float(norm.sf((y - mu) / sigma))


@dataclass
class NormalityReport:
    statistic: float
    p_value: float
    qq_points: np.ndarray  # (n, 2): theoretical, sample
    passed: bool
    alpha: float
    n: int
    n_tested: int

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "verdict": self.verdict,
            "alpha": self.alpha,
            "n": self.n,
            "n_tested": self.n_tested,
        }


def qq_points(values) -> np.ndarray:
    """Standardized sorted sample against standard-normal plotting positions."""
    x = np.sort(np.asarray(values, dtype=float))
    n = x.size
    sd = x.std(ddof=1)
    theo = norm.ppf((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    return np.column_stack([theo, (x - x.mean()) / sd])


def normality_check(residuals, alpha: float = 0.05, seed: int = 0) -> NormalityReport:
    """Shapiro-Wilk test plus Q-Q points; samples above 5000 are subsampled (seeded)."""
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size < 3:
        raise ValueError(f"normality check requires at least 3 residuals, got {r.size}")
    if not np.all(np.isfinite(r)):
        raise ValueError("residuals contain non-finite values")
    if np.ptp(r) == 0:
        raise ValueError("degenerate sample: zero variance")
    test = r
    if r.size > SW_MAX_N:
        rng = np.random.Generator(np.random.Philox(seed))
        test = rng.choice(r, size=SW_MAX_N, replace=False)
    w, p = shapiro_wilk(test)
    return NormalityReport(w, p, qq_points(r), p > alpha, alpha, r.size, test.size)


def write_qq_csv(report: NormalityReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theoretical", "sample"])
        for t, s in report.qq_points:
            w.writerow([format(t, ".17g"), format(s, ".17g")])


# ---------------------------------------------------------------------------


@dataclass
class Recommendation:
    path: str  # "LMM" | "LMM-with-transform" | "GLMM-binary"
    transform: Optional[str] = None
    raw_report: Optional[NormalityReport] = None
    transformed_report: Optional[NormalityReport] = None
    fallback: Optional[str] = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "transform": self.transform,
            "raw_normality": self.raw_report.to_dict() if self.raw_report else None,
            "transformed_normality": self.transformed_report.to_dict() if self.transformed_report else None,
            "fallback": self.fallback,
            "notes": list(self.notes),
        }


def recommend_model_path(outcome_values, support: str, alpha: float = 0.05, seed: int = 0,
                         eps: float = DEFAULT_EPS) -> Recommendation:
    """Choose between LMM, transformed LMM and binomial GLMM.

    ``support`` is one of ``unbounded``, ``unit`` (``[0,1]``), ``positive``
    (``[0,inf)``) or ``binary-counts``; for the latter ``outcome_values`` holds
    (successes, trials) pairs and the answer is always the GLMM.
    """
    if support not in SUPPORTS:
        raise ValueError(f"unknown support {support!r}; expected one of {sorted(set(SUPPORTS))}")
    kind = SUPPORTS[support]
    if kind == "binary-counts":
        st = np.asarray(outcome_values)
        if st.size == 0:
            raise ValueError("empty outcome sample")
        if st.ndim != 2 or st.shape[1] != 2 or np.any(st[:, 0] > st[:, 1]) or np.any(st < 0):
            raise ValueError("binary-counts support expects (successes, trials) pairs with successes <= trials")
        return Recommendation("GLMM-binary", notes=["binomial outcome"])
    values = np.asarray(outcome_values, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("empty outcome sample")
    raw = normality_check(values, alpha, seed)
    if kind == "unbounded":
        notes = [] if raw.passed else ["unbounded outcome fails normality; no transform family applies"]
        return Recommendation("LMM", None, raw, notes=notes)
    if raw.passed:
        return Recommendation("LMM", None, raw, notes=["bounded outcome appears normal; no transform needed"])
    name = "logit" if kind == "unit" else "log"
    transformed, n_clamped = apply_transform(values, name, eps)
    rec = Recommendation("LMM-with-transform", name, raw)
    if n_clamped:
        rec.notes.append(f"{n_clamped} value(s) clamped before {name}")
    try:
        rec.transformed_report = normality_check(transformed, alpha, seed)
    except ValueError as exc:
        rec.notes.append(f"transformed sample not testable: {exc}")
    if rec.transformed_report is None or not rec.transformed_report.passed:
        if kind == "unit":
            rec.fallback = "GLMM-binary"
            rec.notes.append("transformed outcome still non-normal; fall back to binomial GLMM on pixel counts")
        else:
            rec.notes.append("transformed outcome still non-normal")
    return rec
