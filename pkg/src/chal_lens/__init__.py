"""Mixed-model analysis of which image characteristics make segmentation challenges hard.

Annotated challenge test cases plus per-instance confusion counts go in; log odds
ratios (binomial GLMM) or outcome-scale effects (LMM) per characteristic, their Wald
tests, effect buckets and forest plots come out.
"""

__version__ = "0.1.0"

from .data import ChallengeDataset, load_dataset, save_dataset, audit_annotation_counts, summarize_characteristics
from .design import EffectSpec, build_design, drop_column_policy, select_subset, split_by_instrument_count
from .glmm import GlmmOptions, fit_glm_logistic, fit_glmm_binomial, laplace_deviance
from .inference import EffectTable, classify_effects, odds_ratio_table, wald_tests
from .lmm import LmmOptions, fit_lmm, reml_criterion, residuals
from .simulate import SimConfig, coverage_study, simulate_dataset

__all__ = [
    "ChallengeDataset",
    "EffectSpec",
    "EffectTable",
    "GlmmOptions",
    "LmmOptions",
    "SimConfig",
    "audit_annotation_counts",
    "build_design",
    "classify_effects",
    "coverage_study",
    "drop_column_policy",
    "fit_glm_logistic",
    "fit_glmm_binomial",
    "fit_lmm",
    "laplace_deviance",
    "load_dataset",
    "odds_ratio_table",
    "reml_criterion",
    "residuals",
    "save_dataset",
    "select_subset",
    "simulate_dataset",
    "split_by_instrument_count",
    "summarize_characteristics",
    "wald_tests",
]
