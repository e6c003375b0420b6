"""Wald inference, odds-ratio tables, effect buckets and fit serialization."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from .data import CHARACTERISTICS, COVERED_FLAG

Z95 = 1.959963984540054
SIGNIFICANCE = 0.05
# (threshold, stars), checked in order
STAR_LEVELS = ((0.001, "***"), (0.01, "**"), (0.05, "*"))
BUCKETS = ("+", "++", "+++", "-", "--", "---", "", "x")


def stars(p: float) -> str:
    """Significance marks: * p<=0.05, ** p<=0.01, *** p<=0.001."""
    for level, mark in STAR_LEVELS:
        if p <= level:
            return mark
    return ""


def wald_z_p(beta: float, se: float) -> Tuple[float, float]:
    """z = beta / se and its two-sided standard-normal p-value."""
    if not se > 0:
        # zero SE only occurs on exact fits
        if beta == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, beta), 0.0
    z = beta / se
    return float(z), float(min(1.0, 2.0 * norm.sf(abs(z))))


@dataclass
class WaldResult:
    name: str
    estimate: float
    se: float
    z: float
    p_value: float
    stars: str
    caveats: List[str] = field(default_factory=list)


def _caveats(fit, name: str) -> List[str]:
    out = []
    if name in (getattr(fit, "separated", None) or []):
        out.append("separation")
    boundary = getattr(fit, "boundary", None) or {}
    if any(boundary.values()):
        out.append("variance-boundary")
    return out


def wald_tests(fit, include_intercept: bool = False) -> List[WaldResult]:
    """Per-coefficient Wald z tests with star marks and caveat flags.

    A coefficient the fit flags for quasi-separation carries ``"separation"``; every
    coefficient of a fit with a variance component on the boundary carries
    ``"variance-boundary"``.
    """
    if not getattr(fit, "converged", True):
        raise ValueError("Wald tests need a converged fit")
    rows = []
    pairs = [("(intercept)", fit.alpha, fit.alpha_se)] if include_intercept else []
    pairs += list(zip(fit.names, np.asarray(fit.beta, dtype=float), np.asarray(fit.beta_se, dtype=float)))
    for name, b, se in pairs:
        z, p = wald_z_p(float(b), float(se))
        rows.append(WaldResult(name, float(b), float(se), z, p, stars(p), _caveats(fit, name)))
    return rows


def bucket(odds_ratio: float, p_value: float, dropped: bool = False) -> str:
    """Effect-size symbol for one characteristic.

    Significant (p <= 0.05) positive effects: (1, 1.25] "+", (1.25, 1.5] "++",
    above 1.5 "+++". Significant negative effects: [0.75, 1) "-", [0.5, 0.75) "--",
    below 0.5 "---". Non-significant effects are blank and characteristics that could
    not be assessed are "x".
    """
    if dropped:
        return "x"
    if not (p_value <= SIGNIFICANCE) or math.isnan(odds_ratio):
        return ""
    if odds_ratio > 1.5:
        return "+++"
    if odds_ratio > 1.25:
        return "++"
    if odds_ratio > 1.0:
        return "+"
    if odds_ratio == 1.0:
        return ""
    if odds_ratio >= 0.75:
        return "-"
    if odds_ratio >= 0.5:
        return "--"
    return "---"


@dataclass
class EffectRow:
    name: str
    beta: float
    se: float
    odds_ratio: float
    ci_low: float
    ci_high: float
    or_ci_low: float
    or_ci_high: float
    z: float
    p_value: float
    stars: str = ""
    bucket: str = ""
    dropped: bool = False
    caveats: List[str] = field(default_factory=list)

    @classmethod
    def unassessable(cls, name: str) -> "EffectRow":
        nan = math.nan
        return cls(name, nan, nan, nan, nan, nan, nan, nan, nan, nan, "", "x", True, ["dropped"])


@dataclass
class EffectTable:
    """One row per characteristic (log-odds scale for the GLMM, outcome scale for the LMM)."""

    rows: List[EffectRow]
    model: str = "glmm"
    perspective: str = ""
    subset: str = "all"
    single_instrument_context: bool = False
    notes: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, name: str) -> EffectRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def names(self) -> List[str]:
        return [r.name for r in self.rows]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "perspective": self.perspective,
            "subset": self.subset,
            "single_instrument_context": self.single_instrument_context,
            "notes": list(self.notes),
            "effects": [_encode(asdict(r)) for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EffectTable":
        rows = [EffectRow(**_decode(r)) for r in d["effects"]]
        return cls(rows, d.get("model", "glmm"), d.get("perspective", ""), d.get("subset", "all"),
                   bool(d.get("single_instrument_context", False)), list(d.get("notes", [])))


CSV_COLUMNS = ("name", "beta", "se", "odds_ratio", "ci_low", "ci_high", "or_ci_low", "or_ci_high",
               "z", "p_value", "stars", "bucket", "dropped", "caveats")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return format(v, ".17g")
    if isinstance(v, list):
        return ";".join(v)
    return str(v)


def write_effects_csv(table: EffectTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in table.rows:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])


def read_effects_csv(path) -> List[EffectRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            kw: Dict[str, Any] = {}
            for c in CSV_COLUMNS:
                v = rec[c]
                if c in ("name", "stars", "bucket"):
                    kw[c] = v
                elif c == "dropped":
                    kw[c] = v == "true"
                elif c == "caveats":
                    kw[c] = [s for s in v.split(";") if s]
                else:
                    kw[c] = float(v) if v != "" else math.nan
            rows.append(EffectRow(**kw))
    return rows


def write_effects_json(table: EffectTable, path) -> None:
    Path(path).write_text(dumps(table.to_dict()), encoding="utf-8")


def read_effects_json(path) -> EffectTable:
    return EffectTable.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _ordered_names(kept: Sequence[str], dropped: Sequence[str]) -> List[str]:
    rank = {n: i for i, n in enumerate(CHARACTERISTICS)}
    chars = sorted([n for n in list(kept) + list(dropped) if n in rank], key=rank.__getitem__)
    return chars + [n for n in kept if n not in rank]


def odds_ratio_table(fit, perspective: str = "", subset: str = "all", log_odds_scale: Optional[bool] = None) -> EffectTable:
    """Odds ratios with 95% Wald intervals, exponentiated from the log-odds scale.

    Every column of the design appears once; columns removed by the drop policy
    are marked unassessable. ``log_odds_scale`` defaults to true for the GLMM; when
    false (an LMM on an untransformed outcome) the odds-ratio columns are NaN and
    only stars, not buckets, are assigned.
    """
    if log_odds_scale is None:
        log_odds_scale = getattr(fit, "model", "glmm") == "glmm"
    tests = {w.name: w for w in wald_tests(fit)}
    dropped = list(getattr(fit, "dropped", []) or [])
    rows = []
    for name in _ordered_names(fit.names, dropped):
        if name not in tests:
            rows.append(EffectRow.unassessable(name))
            continue
        w = tests[name]
        lo, hi = w.estimate - Z95 * w.se, w.estimate + Z95 * w.se
        with np.errstate(over="ignore"):
            ors = np.exp([w.estimate, lo, hi]) if log_odds_scale else np.full(3, math.nan)
        rows.append(EffectRow(name, w.estimate, w.se, float(ors[0]), lo, hi, float(ors[1]), float(ors[2]),
                              w.z, w.p_value, w.stars, "", False, list(w.caveats)))
    notes = [f"variance of {f} on the boundary (0)" for f, b in (getattr(fit, "boundary", None) or {}).items() if b]
    notes += list(getattr(fit, "warnings", []) or [])
    if not log_odds_scale:
        notes.append("estimates are on the outcome scale; odds ratios and buckets need a log-odds scale")
    table = EffectTable(rows, getattr(fit, "model", "glmm"), perspective, subset, False, sorted(set(notes), key=notes.index))
    return classify_effects(table, subset == "single")


def classify_effects(table: EffectTable, single_instrument_context: bool = False) -> EffectTable:
    """Fill the bucket column.

    In a single-instrument context the covered-by-instrument flag cannot vary, so it
    is reported as unassessable even if it somehow survived the drop policy.
    """
    rows = []
    for r in table.rows:
        dropped = r.dropped or (single_instrument_context and r.name == COVERED_FLAG)
        if dropped and not r.dropped:
            r = EffectRow.unassessable(r.name)
        rows.append(replace(r, bucket=bucket(r.odds_ratio, r.p_value, dropped)))
    return replace(table, rows=rows, single_instrument_context=bool(single_instrument_context))


def format_table(table: EffectTable) -> str:
    """Human-readable table rounded to 3 decimals."""
    or_scale = any(not r.dropped and not math.isnan(r.odds_ratio) for r in table.rows)
    label, ci_label = ("log OR", "OR") if or_scale else ("estimate", "estimate")
    head = f"{'characteristic':<26} {label:>8} {'SE':>7} {ci_label:>8} {'95% CI':>17} {'p':>9}  sig  bucket"
    lines = [head, "-" * len(head)]
    for r in table.rows:
        if r.dropped:
            lines.append(f"{r.name:<26} {'':>8} {'':>7} {'':>8} {'':>17} {'':>9}       x")
            continue
        point, lo, hi = (r.odds_ratio, r.or_ci_low, r.or_ci_high) if or_scale else (r.beta, r.ci_low, r.ci_high)
        ci = f"({lo:.3f}, {hi:.3f})"
        lines.append(f"{r.name:<26} {r.beta:8.3f} {r.se:7.3f} {point:8.3f} {ci:>17} {r.p_value:9.3g}  "
                     f"{r.stars:<3}  {r.bucket}")
    lines += [f"note: {n}" for n in table.notes]
    return "\n".join(lines)


# ---------------------------------------------------------------- serialization

def _encode(obj):
    """Replace non-finite floats by strings so the JSON stays standard."""
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return _encode(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    return obj


_SPECIAL = {"nan": math.nan, "inf": math.inf, "-inf": -math.inf}


def _decode(obj, numeric_keys=("beta", "se", "odds_ratio", "ci_low", "ci_high", "or_ci_low", "or_ci_high", "z", "p_value")):
    out = dict(obj)
    for k in numeric_keys:
        if k in out and isinstance(out[k], str):
            out[k] = _SPECIAL[out[k]]
    return out


def _num(v):
    if isinstance(v, str) and v in _SPECIAL:
        return _SPECIAL[v]
    if isinstance(v, list):
        return [_num(x) for x in v]
    if isinstance(v, dict):
        return {k: _num(x) for k, x in v.items()}
    return v


def dumps(obj) -> str:
    """JSON with shortest round-trip float repr and sorted keys; byte-stable."""
    return json.dumps(_encode(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


@dataclass
class FitRecord:
    """A fit as read back from JSON; carries what reporting needs."""

    model: str
    alpha: float
    alpha_se: float
    beta: np.ndarray
    beta_se: np.ndarray
    names: List[str]
    dropped: List[str]
    variance_components: Dict[str, float]
    boundary: Dict[str, bool]
    log_sd: Dict[str, float]
    converged: bool
    cov: np.ndarray
    separated: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)
    raw: Dict[str, Any] = field(default_factory=dict)


def fit_to_dict(fit, meta: Optional[dict] = None) -> dict:
    """Serializable dict of an LmmFit or GlmmFit (options echoed)."""
    from .lmm import options_dict

    d = {
        "model": fit.model,
        "alpha": fit.alpha,
        "alpha_se": fit.alpha_se,
        "names": list(fit.names),
        "beta": np.asarray(fit.beta, dtype=float),
        "beta_se": np.asarray(fit.beta_se, dtype=float),
        "cov": np.asarray(fit.cov, dtype=float),
        "dropped": list(fit.dropped),
        "variance_components": dict(fit.variance_components),
        "boundary": dict(fit.boundary),
        "log_sd": dict(fit.log_sd),
        "conditional_modes": {k: np.asarray(v, dtype=float) for k, v in fit.conditional_modes.items()},
        "converged": bool(fit.converged),
        "n_obs": int(fit.n_obs),
        "options": options_dict(fit.options),
    }
    if fit.model == "lmm":
        d.update(
            sigma2_eps=fit.sigma2_eps,
            sigma_eps_boundary=bool(fit.sigma_eps_boundary),
            restricted_log_likelihood=fit.restricted_log_likelihood,
            n_iter=fit.n_iter,
            n_fev=fit.n_fev,
        )
    else:
        d.update(
            family=fit.family,
            link=fit.link,
            laplace_deviance=fit.laplace_deviance,
            n_iter_outer=fit.n_iter_outer,
            n_iter_inner_total=fit.n_iter_inner_total,
            separated=list(fit.separated),
            warnings=list(fit.warnings),
        )
    d["meta"] = dict(meta or {})
    return d


def write_fit(fit, path, meta: Optional[dict] = None) -> None:
    Path(path).write_text(dumps(fit_to_dict(fit, meta)), encoding="utf-8")


def fit_from_dict(d: dict) -> FitRecord:
    d = _num(d)
    for key in ("model", "alpha", "alpha_se", "beta", "beta_se", "names"):
        if key not in d:
            raise ValueError(f"fit JSON lacks field {key!r}")
    return FitRecord(
        model=d["model"],
        alpha=float(d["alpha"]),
        alpha_se=float(d["alpha_se"]),
        beta=np.asarray(d["beta"], dtype=float),
        beta_se=np.asarray(d["beta_se"], dtype=float),
        names=list(d["names"]),
        dropped=list(d.get("dropped", [])),
        variance_components={k: float(v) for k, v in d.get("variance_components", {}).items()},
        boundary={k: bool(v) for k, v in d.get("boundary", {}).items()},
        log_sd={k: float(v) for k, v in d.get("log_sd", {}).items()},
        converged=bool(d.get("converged", True)),
        cov=np.asarray(d.get("cov", []), dtype=float),
        separated=list(d.get("separated", [])),
        warnings=list(d.get("warnings", [])),
        meta=dict(d.get("meta", {})),
        raw=d,
    )


def read_fit(path) -> FitRecord:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from None
    return fit_from_dict(d)
