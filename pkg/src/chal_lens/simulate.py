"""Seeded synthetic challenges drawn from the mixed-model forward equations.

Every entity (algorithm, patient, image, instance, outcome row) draws from its own
Philox stream keyed by ``(seed, stream, *entity index)``, so enlarging a config never
changes the draws of entities that already existed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import (
    BACKGROUND_FLAGS,
    CHARACTERISTICS,
    COVERED_FLAG,
    GLOBAL_FLAGS,
    INSTRUMENT_FLAGS,
    ChallengeDataset,
    ImageRecord,
    InstanceOutcome,
    InstanceRecord,
    PatientRecord,
    save_dataset,
)
from .design import RANDOM_FACTORS, EffectSpec, build_design, drop_column_policy, select_subset

_ALGORITHM, _PATIENT, _IMAGE, _INSTANCE, _OUTCOME = 1, 2, 3, 4, 5
_PRECISION = 100  # offset for the precision-perspective random effects

DEFAULT_BETA = {
    "in_blood": -0.2,
    "in_smoke": -0.3,
    "in_tissue": 0.0,
    "in_motion": -0.4,
    "in_reflections": 0.2,
    "in_covered_by_instrument": -0.7,
    "in_other_object": -0.3,
    "in_too_bright": 0.1,
    "in_too_dark": -0.5,
    "bg_blood": 0.0,
    "bg_smoke": -0.3,
    "bg_motion": 0.0,
    "bg_reflections": 0.1,
    "bg_other_object": -0.2,
    "img_too_bright": 0.0,
    "img_too_dark": -0.3,
    "img_dirty_lens": 0.0,
}
DEFAULT_SD = {"algorithm": 0.5, "patient": 0.3, "image": 0.5, "instance": 0.4}


def _default_prevalence() -> Dict[str, float]:
    p = {name: 0.25 for name in CHARACTERISTICS}
    p[COVERED_FLAG] = 0.3
    return p


@dataclass
class SimConfig:
    seed: int = 0
    n_algorithms: int = 5
    n_patients: int = 10
    images_per_patient: int = 20
    # probability of 0, 1, 2, ... instruments per image
    instance_count_probs: Dict[int, float] = field(default_factory=lambda: {1: 0.4, 2: 0.4, 3: 0.2})
    alpha: float = 1.0
    beta: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_BETA))
    sd: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SD))
    prevalence: Dict[str, float] = field(default_factory=_default_prevalence)
    trials_range: Tuple[int, int] = (500, 20000)
    family: str = "binomial"
    sigma_eps: float = 1.0
    precision_alpha: Optional[float] = None
    precision_beta: Optional[Dict[str, float]] = None

    def __post_init__(self):
        self.instance_count_probs = {int(k): float(v) for k, v in self.instance_count_probs.items()}
        self.trials_range = tuple(int(v) for v in self.trials_range)
        self.beta = {**{n: 0.0 for n in CHARACTERISTICS}, **self.beta}
        self.sd = {**{f: 0.0 for f in RANDOM_FACTORS}, **self.sd}
        self.prevalence = {**{n: 0.0 for n in CHARACTERISTICS}, **self.prevalence}
        self.validate()

    def validate(self) -> None:
        for what, n in (("n_algorithms", self.n_algorithms), ("n_patients", self.n_patients),
                        ("images_per_patient", self.images_per_patient)):
            if n < 1:
                raise ValueError(f"{what} must be >= 1")
        probs = self.instance_count_probs
        if not probs or any(k < 0 for k in probs) or any(not 0 <= v <= 1 for v in probs.values()):
            raise ValueError("instance_count_probs must map counts >= 0 to probabilities")
        if not math.isclose(sum(probs.values()), 1.0, abs_tol=1e-9):
            raise ValueError("instance_count_probs must sum to 1")
        for d in (self.beta, self.sd, self.prevalence):
            extra = set(d) - set(CHARACTERISTICS) - set(RANDOM_FACTORS)
            if extra:
                raise ValueError(f"unknown keys {sorted(extra)}")
        if any(not 0 <= v <= 1 for v in self.prevalence.values()):
            raise ValueError("prevalences must lie in [0, 1]")
        if any(v < 0 for v in self.sd.values()) or self.sigma_eps < 0:
            raise ValueError("standard deviations must be >= 0")
        lo, hi = self.trials_range
        if not 1 <= lo <= hi:
            raise ValueError("trials_range must satisfy 1 <= low <= high")
        if self.family not in ("binomial", "gaussian"):
            raise ValueError(f"unknown family {self.family!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["instance_count_probs"] = {str(k): v for k, v in self.instance_count_probs.items()}
        d["trials_range"] = list(self.trials_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "instance_count_probs" in d:
            d["instance_count_probs"] = {int(k): v for k, v in d["instance_count_probs"].items()}
        return cls(**d)


@dataclass
class GroundTruth:
    config: SimConfig
    effects: Dict[str, Dict[str, float]]
    precision_effects: Dict[str, Dict[str, float]]

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "effects": self.effects, "precision_effects": self.precision_effects}


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *key])))


def _expit(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def simulate_dataset(config: SimConfig) -> Tuple[ChallengeDataset, GroundTruth]:
    """Draw a dataset and its ground truth from ``config``.

    Recall counts follow ``tp ~ Binomial(tp + fn, pi)`` with ``logit(pi)`` the linear
    predictor; false positives follow a negative binomial given ``tp`` so that the
    precision perspective is binomial-logit in its own predictor. For the gaussian
    family the outcome row also carries ``score = predictor + N(0, sigma_eps^2)``.
    """
    cfg = config
    seed = cfg.seed
    counts = sorted(cfg.instance_count_probs)
    cprobs = np.array([cfg.instance_count_probs[k] for k in counts])
    cum = np.cumsum(cprobs)
    p_alpha = cfg.alpha if cfg.precision_alpha is None else cfg.precision_alpha
    p_beta = cfg.beta if cfg.precision_beta is None else {**cfg.beta, **cfg.precision_beta}
    effects: Dict[str, Dict[str, float]] = {f: {} for f in RANDOM_FACTORS}
    peffects: Dict[str, Dict[str, float]] = {f: {} for f in RANDOM_FACTORS}

    algorithms = [f"alg{a + 1}" for a in range(cfg.n_algorithms)]
    for a, alg in enumerate(algorithms):
        z = _rng(seed, _ALGORITHM, a).standard_normal(2)
        effects["algorithm"][alg] = cfg.sd["algorithm"] * z[0]
        peffects["algorithm"][alg] = cfg.sd["algorithm"] * z[1]

    patients, images, outcomes = [], [], []
    lo, hi = cfg.trials_range
    for p in range(cfg.n_patients):
        pid = f"p{p:03d}"
        patients.append(PatientRecord(pid))
        z = _rng(seed, _PATIENT, p).standard_normal(2)
        effects["patient"][pid] = cfg.sd["patient"] * z[0]
        peffects["patient"][pid] = cfg.sd["patient"] * z[1]
        for k in range(cfg.images_per_patient):
            iid = f"{pid}_i{k:03d}"
            r = _rng(seed, _IMAGE, p, k)
            n_inst = counts[min(int(np.searchsorted(cum, r.random() * cum[-1], side="right")), len(counts) - 1)]
            uf = r.random(len(GLOBAL_FLAGS) + len(BACKGROUND_FLAGS))
            z = r.standard_normal(2)
            gflags = tuple(bool(uf[i] < cfg.prevalence[n]) for i, n in enumerate(GLOBAL_FLAGS))
            bflags = tuple(bool(uf[len(GLOBAL_FLAGS) + i] < cfg.prevalence[n]) for i, n in enumerate(BACKGROUND_FLAGS))
            effects["image"][iid] = cfg.sd["image"] * z[0]
            peffects["image"][iid] = cfg.sd["image"] * z[1]
            img_flags = dict(zip(GLOBAL_FLAGS + BACKGROUND_FLAGS, gflags + bflags))
            insts = []
            for j in range(n_inst):
                inst_id = str(j + 1)
                ri = _rng(seed, _INSTANCE, p, k, j)
                ui = ri.random(len(INSTRUMENT_FLAGS))
                zi = ri.standard_normal(2)
                trials = int(ri.integers(lo, hi, endpoint=True))
                iflags = [bool(ui[m] < cfg.prevalence[n]) for m, n in enumerate(INSTRUMENT_FLAGS)]
                if n_inst < 2:
                    iflags[INSTRUMENT_FLAGS.index(COVERED_FLAG)] = False
                insts.append(InstanceRecord(inst_id, tuple(iflags)))
                ikey = f"{iid}/{inst_id}"
                effects["instance"][ikey] = cfg.sd["instance"] * zi[0]
                peffects["instance"][ikey] = cfg.sd["instance"] * zi[1]
                flags = {**img_flags, **dict(zip(INSTRUMENT_FLAGS, iflags))}
                xb = sum(cfg.beta[n] for n in CHARACTERISTICS if flags[n])
                pxb = sum(p_beta[n] for n in CHARACTERISTICS if flags[n])
                base = cfg.alpha + xb + effects["patient"][pid] + effects["image"][iid] + effects["instance"][ikey]
                pbase = (p_alpha + pxb + peffects["patient"][pid] + peffects["image"][iid]
                         + peffects["instance"][ikey])
                for a, alg in enumerate(algorithms):
                    ro = _rng(seed, _OUTCOME, p, k, j, a)
                    eta = base + effects["algorithm"][alg]
                    peta = pbase + peffects["algorithm"][alg]
                    tp = int(ro.binomial(trials, _expit(eta)))
                    fp = int(ro.negative_binomial(tp, _expit(peta))) if tp > 0 else 0
                    noise = ro.standard_normal()
                    score = eta + cfg.sigma_eps * noise if cfg.family == "gaussian" else None
                    outcomes.append(InstanceOutcome(iid, inst_id, alg, tp, fp, trials - tp, score=score))
            images.append(ImageRecord(iid, pid, gflags, bflags, tuple(insts)))
    ds = ChallengeDataset(patients, algorithms, images, outcomes)
    to_float = lambda d: {f: {k: float(v) for k, v in m.items()} for f, m in d.items()}  # noqa: E731
    return ds, GroundTruth(cfg, to_float(effects), to_float(peffects))


def write_simulation(dataset: ChallengeDataset, truth: GroundTruth, directory) -> Dict[str, Path]:
    paths = save_dataset(dataset, directory)
    paths["truth"] = Path(directory) / "truth.json"
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        json.dump(truth.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


# ---------------------------------------------------------------------------
# Coverage study


@dataclass
class CoefficientCoverage:
    name: str
    truth: float
    n: int
    coverage: float
    mean_bias: float
    sign_recovery: float  # p <= 0.05 with the true sign; for a zero truth, the rejection rate


@dataclass
class CoverageReport:
    model: str
    n_replications: int
    n_failed: int
    coefficients: Dict[str, CoefficientCoverage]
    variance_truth: Dict[str, float]
    variance_mean: Dict[str, float]
    failures: List[str] = field(default_factory=list)
    level: float = 0.95

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "n_replications": self.n_replications,
            "n_failed": self.n_failed,
            "level": self.level,
            "coefficients": {k: asdict(v) for k, v in self.coefficients.items()},
            "variance_truth": self.variance_truth,
            "variance_mean": self.variance_mean,
            "failures": self.failures,
        }


def replication_seed(seed: int, r: int) -> int:
    return int(np.random.SeedSequence([int(seed), 0xC0FE, int(r)]).generate_state(1)[0])


def _one_replication(config: SimConfig, r: int, model: str, perspective: str, subset: str, spec, options):
    from .glmm import fit_glmm_binomial
    from .lmm import fit_lmm

    cfg = replace(config, seed=replication_seed(config.seed, r))
    try:
        ds, _ = simulate_dataset(cfg)
        design = build_design(select_subset(ds, subset), perspective, spec)
        X, names, dropped = drop_column_policy(design.X, design.names)
        if model == "glmm":
            fit = fit_glmm_binomial(design.successes, design.trials, X, design.group_indices, options, names, dropped)
        else:
            fit = fit_lmm(design.y, X, design.group_indices, options, names, dropped)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        return {"error": f"replication {r}: {type(exc).__name__}: {exc}"}
    est = {"(intercept)": (fit.alpha, fit.alpha_se)}
    est.update({n: (float(b), float(s)) for n, b, s in zip(fit.names, fit.beta, fit.beta_se)})
    var = dict(fit.variance_components)
    if model == "lmm":
        var["residual"] = fit.sigma2_eps
    return {"estimates": est, "variances": var}


def coverage_study(
    config: SimConfig,
    n_replications: int = 100,
    model: str = "glmm",
    perspective: Optional[str] = None,
    subset: str = "all",
    spec: Optional[EffectSpec] = None,
    options=None,
    jobs: int = 1,
    level: float = 0.95,
) -> CoverageReport:
    """Refit ``n_replications`` independently seeded datasets and score the Wald CIs."""
    from scipy.stats import norm

    if n_replications < 10:
        raise ValueError("coverage study needs at least 10 replications")
    if model not in ("glmm", "lmm"):
        raise ValueError(f"unknown model {model!r}")
    perspective = perspective or ("recall" if model == "glmm" else "score")
    if model == "lmm" and config.family != "gaussian" and perspective == "score":
        raise ValueError("LMM coverage on score needs a gaussian config")
    args = (model, perspective, subset, spec, options)
    if jobs and jobs != 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=jobs)(delayed(_one_replication)(config, r, *args) for r in range(n_replications))
    else:
        results = [_one_replication(config, r, *args) for r in range(n_replications)]

    z = norm.ppf(0.5 + level / 2)
    zcrit = norm.ppf(0.975)
    truth = {"(intercept)": config.alpha, **config.beta}
    if perspective == "precision":
        truth["(intercept)"] = config.alpha if config.precision_alpha is None else config.precision_alpha
        truth.update(config.precision_beta or {})
    failures = [res["error"] for res in results if "error" in res]
    ok = [res for res in results if "error" not in res]
    coefs = {}
    for name in ["(intercept)"] + list(CHARACTERISTICS):
        vals = [res["estimates"][name] for res in ok if name in res["estimates"]]
        if not vals:
            continue
        b = np.array([v[0] for v in vals])
        se = np.array([v[1] for v in vals])
        tr = truth[name]
        covered = np.abs(b - tr) <= z * se
        signif = np.abs(b) / se >= zcrit
        if tr == 0:
            recovered = signif
        else:
            recovered = signif & (np.sign(b) == np.sign(tr))
        coefs[name] = CoefficientCoverage(name, float(tr), len(vals), float(covered.mean()),
                                          float(np.mean(b - tr)), float(recovered.mean()))
    var_truth = {f: config.sd[f] ** 2 for f in (spec.random_factors if spec else RANDOM_FACTORS)}
    if model == "lmm":
        var_truth["residual"] = config.sigma_eps**2
    var_mean = {f: float(np.mean([res["variances"][f] for res in ok])) for f in var_truth if ok and f in ok[0]["variances"]}
    return CoverageReport(model, n_replications, len(failures), coefs, var_truth, var_mean, failures, level)
