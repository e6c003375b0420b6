"""Command-line pipeline: ingest, metrics, recommend, fit, report, simulate, coverage.

Exit status is 0 on success, 1 on a user error (bad flags, bad input files,
incompatible options) and 2 on a numerical failure during fitting.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .data import (
    audit_annotation_counts,
    load_dataset,
    save_dataset,
    summarize_characteristics,
    write_outcomes,
)
from .design import PERSPECTIVES, EffectSpec, build_design, drop_column_policy, select_subset
from .forest import forest_plot
from .glmm import GlmmOptions, SeparationError, fit_glmm_binomial
from .inference import (
    dumps,
    format_table,
    odds_ratio_table,
    read_fit,
    write_effects_csv,
    write_effects_json,
    write_fit,
)
from .lmm import LmmOptions, fit_lmm, residuals
from .transforms import ClampWarning, apply_transform, normality_check, recommend_model_path, write_qq_csv

FILES = {
    "fit": "fit.json",
    "effects_csv": "effects.csv",
    "effects_json": "effects.json",
    "forest": "forest.svg",
    "audit": "audit.json",
    "qq": "qq.csv",
    "config": "config.json",
}
SUBSETS = ("single", "multi", "all")
TRANSFORMS = ("none", "logit", "log")
SUPPORT_OF = {"dsc": "unit", "score": "unbounded", "recall": "binary-counts", "precision": "binary-counts"}


class UsageError(Exception):
    """Invalid command line or configuration (exit status 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    """Effective configuration of one fit run."""

    data: Optional[str] = None
    images: Optional[str] = None
    instances: Optional[str] = None
    outcomes: Optional[str] = None
    masks: Optional[str] = None
    model: str = "glmm"
    perspective: str = "recall"
    subset: str = "all"
    transform: str = "none"
    tol: Optional[float] = None
    max_iter: Optional[int] = None
    seed: int = 0
    alpha: float = 0.05
    out: Optional[str] = None
    algorithm_as_fixed: bool = False

    def validate(self) -> None:
        if self.model not in ("lmm", "glmm"):
            raise UsageError(f"--model must be lmm or glmm, got {self.model!r}")
        if self.perspective not in PERSPECTIVES:
            raise UsageError(f"--perspective must be one of {', '.join(PERSPECTIVES)}")
        if self.subset not in SUBSETS:
            raise UsageError(f"--subset must be one of {', '.join(SUBSETS)}")
        if self.transform not in TRANSFORMS:
            raise UsageError(f"--transform must be one of {', '.join(TRANSFORMS)}")
        if self.transform != "none" and self.model != "lmm":
            raise UsageError("--transform is only valid with --model lmm")
        if self.model == "glmm" and self.perspective not in ("recall", "precision"):
            raise UsageError(f"--model glmm needs --perspective recall or precision, not {self.perspective}")
        if self.tol is not None and not self.tol > 0:
            raise UsageError("--tol must be positive")
        if self.max_iter is not None and self.max_iter < 1:
            raise UsageError("--max-iter must be >= 1")
        if self.outcomes and self.masks:
            raise UsageError("--outcomes and --masks are mutually exclusive")


# ---------------------------------------------------------------- helpers

def _merge(kind, args: argparse.Namespace, extra: Sequence[str] = ()) -> Any:
    """dataclass defaults <- JSON config file <- explicit flags."""
    values: Dict[str, Any] = {}
    names = {f.name for f in fields(kind)} | set(extra)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            loaded = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {cfg_path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {cfg_path} must hold a JSON object")
        unknown = sorted(set(loaded) - names)
        if unknown:
            raise UsageError(f"unknown key(s) in config file {cfg_path}: {', '.join(unknown)}")
        values.update(loaded)
    for k, v in vars(args).items():
        if k in names:
            values[k] = v
    known = {k: v for k, v in values.items() if k in {f.name for f in fields(kind)}}
    return kind(**known), {k: v for k, v in values.items() if k not in known}


def _out_dir(path: Optional[str]) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    return p


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _dataset_paths(cfg) -> Dict[str, Optional[str]]:
    base = Path(cfg.data) if cfg.data else None
    images = cfg.images or (str(base / "images.csv") if base else None)
    instances = cfg.instances or (str(base / "instances.csv") if base else None)
    source = cfg.masks or cfg.outcomes
    if source is None and base is not None and (base / "outcomes.csv").exists():
        source = str(base / "outcomes.csv")
    if images is None or instances is None:
        raise UsageError("give --data DIR or both --images and --instances")
    return {"images": images, "instances": instances, "source": source}


def _load(cfg, need_outcomes: bool = True):
    p = _dataset_paths(cfg)
    if need_outcomes and p["source"] is None:
        raise UsageError("no outcomes: give --outcomes FILE, --masks DIR or a --data DIR with outcomes.csv")
    return load_dataset(p["images"], p["instances"], p["source"])


def default_jobs() -> int:
    raw = os.environ.get("CHAL_LENS_JOBS")
    if raw is None or raw == "":
        return 1
    try:
        jobs = int(raw)
    except ValueError:
        raise UsageError(f"CHAL_LENS_JOBS must be an integer, got {raw!r}") from None
    if jobs == 0:
        raise UsageError("CHAL_LENS_JOBS must be non-zero")
    return jobs


# ---------------------------------------------------------------- fit pipeline

def _fit_options(cfg: RunConfig):
    kw = {}
    if cfg.tol is not None:
        kw["tol"] = cfg.tol
    if cfg.max_iter is not None:
        kw["max_iter"] = cfg.max_iter
    return LmmOptions(**kw) if cfg.model == "lmm" else GlmmOptions(**kw)


def run_fit(cfg: RunConfig, log=print) -> Dict[str, Path]:
    """Fit one model and write fit.json, the effect table, forest plot and (LMM) qq.csv."""
    cfg.validate()
    out = _out_dir(cfg.out)
    ds = select_subset(_load(cfg), cfg.subset)
    spec = EffectSpec(algorithm_as_fixed=cfg.algorithm_as_fixed)
    design = build_design(ds, cfg.perspective, spec)
    if design.N == 0:
        raise UsageError(f"subset {cfg.subset!r} has no rows for perspective {cfg.perspective}")
    X, names, dropped = drop_column_policy(design.X, design.names)
    options = _fit_options(cfg)
    meta: Dict[str, Any] = {
        "version": __version__,
        "perspective": cfg.perspective,
        "subset": cfg.subset,
        "transform": cfg.transform,
        "sizes": design.sizes,
        "n_excluded": design.n_excluded,
        "characteristics": design.characteristic_names,
    }
    if cfg.model == "glmm":
        fit = fit_glmm_binomial(design.successes, design.trials, X, design.group_indices, options, names, dropped)
        report = None
    else:
        y = design.y
        n_clamped = 0
        if cfg.transform != "none":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ClampWarning)
                y, n_clamped = apply_transform(y, cfg.transform)
        meta["n_clamped"] = int(n_clamped)
        fit = fit_lmm(y, X, design.group_indices, options, names, dropped)
        res = residuals(fit, y, X, design.group_indices)
        report = normality_check(res, cfg.alpha, cfg.seed) if res.size >= 3 and np.ptp(res) > 0 else None
        if report is not None:
            meta["residual_normality"] = report.to_dict()
    table = odds_ratio_table(fit, cfg.perspective, cfg.subset, cfg.model == "glmm" or cfg.transform == "logit")
    log(format_table(table))
    paths: Dict[str, Path] = {}
    if out is not None:
        paths["fit"] = out / FILES["fit"]
        write_fit(fit, paths["fit"], meta)
        paths.update(_write_report(table, out))
        if report is not None:
            paths["qq"] = out / FILES["qq"]
            write_qq_csv(report, paths["qq"])
        paths["config"] = out / FILES["config"]
        _write_text(paths["config"], dumps(asdict(cfg)))
    return paths


def _write_report(table, out: Path) -> Dict[str, Path]:
    paths = {k: out / FILES[k] for k in ("effects_csv", "effects_json", "forest")}
    write_effects_csv(table, paths["effects_csv"])
    write_effects_json(table, paths["effects_json"])
    forest_plot(table, paths["forest"])
    return paths


# ---------------------------------------------------------------- subcommands

@dataclass
class DataConfig:
    data: Optional[str] = None
    images: Optional[str] = None
    instances: Optional[str] = None
    outcomes: Optional[str] = None
    masks: Optional[str] = None
    out: Optional[str] = None


def cmd_ingest(args) -> int:
    cfg, _ = _merge(DataConfig, args)
    ds = _load(cfg, need_outcomes=False)
    audit = audit_annotation_counts(ds)
    summary = summarize_characteristics(ds)
    print(f"images: {len(ds.images)}  instances: {ds.n_instances}  patients: {len(ds.patients)}  "
          f"algorithms: {len(ds.algorithms)}  outcomes: {len(ds.outcomes)}")
    print(f"annotations: {audit.image_related_count:,} image-related + {audit.instance_count:,} instance = {audit.total:,}")
    for name, v in summary.proportions.items():
        print(f"  {name:<26} {summary.entity[name]:<10} {v:.3f}")
    out = _out_dir(cfg.out)
    if out is not None:
        doc = {"audit": audit.to_dict(), "summary": summary.to_dict(),
               "counts": {"images": len(ds.images), "instances": ds.n_instances, "patients": len(ds.patients),
                          "algorithms": len(ds.algorithms), "outcomes": len(ds.outcomes)}}
        _write_text(out / FILES["audit"], dumps(doc))
        _write_text(out / FILES["config"], dumps(asdict(cfg)))
    return 0


def cmd_metrics(args) -> int:
    cfg, _ = _merge(DataConfig, args)
    if not cfg.masks:
        raise UsageError("metrics needs --masks DIR (ref/ and pred/<algorithm>/ PGM files)")
    if cfg.out is None:
        raise UsageError("metrics needs --out DIR")
    ds = _load(cfg)
    out = _out_dir(cfg.out)
    write_outcomes(ds.outcomes, out / "outcomes.csv")
    _write_text(out / FILES["config"], dumps(asdict(cfg)))
    print(f"wrote {len(ds.outcomes)} outcomes for {len(ds.algorithms)} algorithm(s) to {out / 'outcomes.csv'}")
    return 0


@dataclass
class RecommendConfig(DataConfig):
    perspective: str = "dsc"
    support: Optional[str] = None
    subset: str = "all"
    alpha: float = 0.05
    seed: int = 0


def cmd_recommend(args) -> int:
    cfg, _ = _merge(RecommendConfig, args)
    if cfg.perspective not in PERSPECTIVES:
        raise UsageError(f"--perspective must be one of {', '.join(PERSPECTIVES)}")
    ds = select_subset(_load(cfg), cfg.subset)
    design = build_design(ds, cfg.perspective)
    support = cfg.support or SUPPORT_OF[cfg.perspective]
    if support == "binary-counts":
        if not design.is_binomial:
            raise UsageError(f"--support binary-counts needs --perspective recall or precision")
        values = np.column_stack([design.successes, design.trials])
    else:
        values = design.y
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        rec = recommend_model_path(values, support, cfg.alpha, cfg.seed)
    print(f"recommended path: {rec.path}" + (f" ({rec.transform})" if rec.transform else "")
          + (f"; fallback {rec.fallback}" if rec.fallback else ""))
    for n in rec.notes:
        print(f"  {n}")
    out = _out_dir(cfg.out)
    if out is not None:
        _write_text(out / "recommendation.json", dumps(rec.to_dict()))
        report = rec.transformed_report or rec.raw_report
        if report is not None:
            write_qq_csv(report, out / FILES["qq"])
        _write_text(out / FILES["config"], dumps(asdict(cfg)))
    return 0


def cmd_fit(args) -> int:
    cfg, _ = _merge(RunConfig, args)
    run_fit(cfg)
    return 0


@dataclass
class ReportConfig:
    fit: Optional[str] = None
    out: Optional[str] = None
    title: str = ""


def cmd_report(args) -> int:
    cfg, _ = _merge(ReportConfig, args)
    if not cfg.fit:
        raise UsageError("report needs --fit FILE")
    rec = read_fit(cfg.fit)
    perspective = rec.meta.get("perspective", "")
    subset = rec.meta.get("subset", "all")
    log_odds = rec.model == "glmm" or rec.meta.get("transform") == "logit"
    table = odds_ratio_table(rec, perspective, subset, log_odds)
    print(format_table(table))
    out = _out_dir(cfg.out)
    if out is not None:
        paths = {k: out / FILES[k] for k in ("effects_csv", "effects_json", "forest")}
        write_effects_csv(table, paths["effects_csv"])
        write_effects_json(table, paths["effects_json"])
        forest_plot(table, paths["forest"], cfg.title)
        _write_text(out / FILES["config"], dumps(asdict(cfg)))
    return 0


SIM_FLAGS = ("seed", "n_algorithms", "n_patients", "images_per_patient", "family", "sigma_eps", "alpha")


def _sim_config(args, overrides: Dict[str, Any]):
    from .simulate import SimConfig

    base: Dict[str, Any] = {}
    sim_path = getattr(args, "sim_config", None)
    if sim_path:
        try:
            base = json.loads(Path(sim_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read simulation config {sim_path}: {exc}") from None
    base.update(overrides)
    try:
        return SimConfig.from_dict(base)
    except TypeError as exc:
        raise UsageError(f"invalid simulation config: {exc}") from None


@dataclass
class SimulateConfig:
    out: Optional[str] = None
    sim: Dict[str, Any] = field(default_factory=dict)


def cmd_simulate(args) -> int:
    from .simulate import simulate_dataset, write_simulation

    cfg, extra = _merge(SimulateConfig, args, SIM_FLAGS)
    sim = _sim_config(args, {**cfg.sim, **extra})
    if cfg.out is None:
        raise UsageError("simulate needs --out DIR")
    out = _out_dir(cfg.out)
    ds, truth = simulate_dataset(sim)
    write_simulation(ds, truth, out)
    _write_text(out / FILES["config"], dumps({"out": cfg.out, "sim": sim.to_dict()}))
    print(f"simulated {len(ds.images)} images, {ds.n_instances} instances, {len(ds.outcomes)} outcomes into {out}")
    return 0


@dataclass
class CoverageConfig:
    out: Optional[str] = None
    replications: int = 100
    model: str = "glmm"
    perspective: Optional[str] = None
    subset: str = "all"
    jobs: Optional[int] = None
    sim: Dict[str, Any] = field(default_factory=dict)


def cmd_coverage(args) -> int:
    from .simulate import coverage_study

    cfg, extra = _merge(CoverageConfig, args, SIM_FLAGS)
    sim = _sim_config(args, {**cfg.sim, **extra})
    if cfg.model not in ("lmm", "glmm"):
        raise UsageError("--model must be lmm or glmm")
    if cfg.subset not in SUBSETS:
        raise UsageError(f"--subset must be one of {', '.join(SUBSETS)}")
    if cfg.replications < 10:
        raise UsageError("--replications must be >= 10")
    jobs = cfg.jobs if cfg.jobs is not None else default_jobs()
    rep = coverage_study(sim, cfg.replications, cfg.model, cfg.perspective, cfg.subset, jobs=jobs)
    print(f"{'coefficient':<26} {'truth':>7} {'coverage':>9} {'bias':>8} {'sign/rej':>8}")
    for c in rep.coefficients.values():
        print(f"{c.name:<26} {c.truth:7.3f} {c.coverage:9.3f} {c.mean_bias:8.3f} {c.sign_recovery:8.3f}")
    print(f"failed replications: {rep.n_failed} of {rep.n_replications}")
    out = _out_dir(cfg.out)
    if out is not None:
        _write_text(out / "coverage.json", dumps(rep.to_dict()))
        _write_text(out / FILES["config"], dumps({**asdict(cfg), "jobs": jobs, "sim": sim.to_dict()}))
    return 0


# ---------------------------------------------------------------- parser

def _data_args(p: argparse.ArgumentParser, outcomes: bool = True) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--data", default=S, help="directory with images.csv, instances.csv and outcomes.csv")
    p.add_argument("--images", default=S, help="images.csv")
    p.add_argument("--instances", default=S, help="instances.csv")
    if outcomes:
        p.add_argument("--outcomes", default=S, help="outcomes.csv")
    p.add_argument("--masks", default=S, help="directory with ref/ and pred/<algorithm>/ label masks (PGM)")


def _common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON file of option values; flags override it")
    p.add_argument("--out", default=S, help="output directory")


def _sim_args(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--sim-config", default=S, help="simulation config JSON (as written by simulate)")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--n-algorithms", type=int, default=S)
    p.add_argument("--n-patients", type=int, default=S)
    p.add_argument("--images-per-patient", type=int, default=S)
    p.add_argument("--family", choices=("binomial", "gaussian"), default=S)
    p.add_argument("--sigma-eps", type=float, default=S)
    p.add_argument("--alpha", type=float, default=S, help="true intercept")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(prog="chal-lens", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True

    p = sub.add_parser("ingest", help="validate a dataset, audit annotation counts and summarize characteristics")
    _data_args(p)
    _common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("metrics", help="compute per-instance confusion counts from label masks")
    _data_args(p, outcomes=False)
    _common(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("recommend", help="choose LMM, transformed LMM or GLMM for an outcome")
    _data_args(p)
    _common(p)
    p.add_argument("--perspective", choices=PERSPECTIVES, default=S)
    p.add_argument("--support", choices=("unbounded", "unit", "positive", "binary-counts"), default=S)
    p.add_argument("--subset", choices=SUBSETS, default=S)
    p.add_argument("--alpha", type=float, default=S, help="normality test level")
    p.add_argument("--seed", type=int, default=S)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("fit", help="fit an LMM or binomial GLMM and write the effect table")
    _data_args(p)
    _common(p)
    p.add_argument("--model", choices=("lmm", "glmm"), default=S)
    p.add_argument("--perspective", choices=PERSPECTIVES, default=S)
    p.add_argument("--subset", choices=SUBSETS, default=S)
    p.add_argument("--transform", choices=TRANSFORMS, default=S, help="outcome transform (LMM only)")
    p.add_argument("--tol", type=float, default=S, help="outer convergence tolerance on the criterion")
    p.add_argument("--max-iter", type=int, default=S)
    p.add_argument("--seed", type=int, default=S, help="seed for residual subsampling")
    p.add_argument("--alpha", type=float, default=S, help="normality test level")
    p.add_argument("--algorithm-as-fixed", action="store_true", default=S)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("report", help="effect table, buckets and forest plot from fit.json")
    _common(p)
    p.add_argument("--fit", default=S, help="fit.json written by the fit command")
    p.add_argument("--title", default=S)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("simulate", help="write a seeded synthetic challenge dataset")
    _common(p)
    _sim_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("coverage", help="Monte-Carlo CI coverage of the fitted coefficients")
    _common(p)
    _sim_args(p)
    p.add_argument("--replications", type=int, default=S)
    p.add_argument("--model", choices=("lmm", "glmm"), default=S)
    p.add_argument("--perspective", choices=PERSPECTIVES, default=S)
    p.add_argument("--subset", choices=SUBSETS, default=S)
    p.add_argument("--jobs", type=int, default=S, help="parallel replications (default: $CHAL_LENS_JOBS or 1)")
    p.set_defaults(func=cmd_coverage)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line; returns the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return int(args.func(args))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SeparationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
