"""Outcome vectors and fixed/random-effect design from a challenge dataset."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import CHARACTERISTICS, COVERED_FLAG, INSTRUMENT_FLAGS, ChallengeDataset, DataError

RANDOM_FACTORS = ("algorithm", "patient", "image", "instance")
PERSPECTIVES = ("recall", "precision", "dsc", "score")


class MissingOutcomeError(DataError):
    pass


@dataclass(frozen=True)
class EffectSpec:
    fixed_effect_names: Tuple[str, ...] = CHARACTERISTICS
    random_factors: Tuple[str, ...] = RANDOM_FACTORS
    algorithm_as_fixed: bool = False

    def __post_init__(self):
        names = tuple(self.fixed_effect_names)
        factors = tuple(self.random_factors)
        if len(set(names)) != len(names):
            raise ValueError("fixed effect names must be unique")
        unknown = [n for n in names if n not in CHARACTERISTICS]
        if unknown:
            raise ValueError(f"unknown characteristic(s): {unknown}")
        bad = [f for f in factors if f not in RANDOM_FACTORS]
        if bad or len(set(factors)) != len(factors):
            raise ValueError(f"random factors must be distinct members of {RANDOM_FACTORS}")
        if self.algorithm_as_fixed:
            factors = tuple(f for f in factors if f != "algorithm")
        object.__setattr__(self, "fixed_effect_names", names)
        object.__setattr__(self, "random_factors", factors)


@dataclass
class DesignMatrices:
    """One row per (instance, algorithm), sorted by patient, image, instance, algorithm.

    ``y`` is the continuous outcome (success proportion for the binomial perspectives);
    ``successes``/``trials`` are set for ``recall`` and ``precision``.
    """

    perspective: str
    y: np.ndarray
    X: np.ndarray
    names: List[str]
    group_indices: Dict[str, np.ndarray]
    group_levels: Dict[str, List[str]]
    rows: List[Tuple[str, str, str]]
    successes: Optional[np.ndarray] = None
    trials: Optional[np.ndarray] = None
    n_excluded: int = 0
    excluded_rows: List[Tuple[str, str, str]] = field(default_factory=list)
    # base characteristic columns that were requested; algorithm dummies excluded
    characteristic_names: List[str] = field(default_factory=list)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return sum(len(v) for v in self.group_levels.values())

    @property
    def sizes(self) -> Dict[str, int]:
        out = {f"n_{f}": len(v) for f, v in self.group_levels.items()}
        out.update(N=self.N, p=self.p, q=self.q)
        return out

    @property
    def is_binomial(self) -> bool:
        return self.successes is not None

    def to_csv(self, path) -> None:
        """Dump rows with outcome, X columns and group labels for external cross-checks."""
        factors = list(self.group_indices)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            head = ["image_id", "instance_id", "algorithm_id", "y"]
            if self.is_binomial:
                head += ["successes", "trials"]
            w.writerow(head + list(self.names) + factors)
            for r, key in enumerate(self.rows):
                row = list(key) + [format(self.y[r], ".17g")]
                if self.is_binomial:
                    row += [int(self.successes[r]), int(self.trials[r])]
                row += [int(v) for v in self.X[r]]
                row += [self.group_levels[f][self.group_indices[f][r]] for f in factors]
                w.writerow(row)


def _codes(labels: Sequence[str]) -> Tuple[np.ndarray, List[str]]:
    levels: Dict[str, int] = {}
    codes = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        codes[i] = levels.setdefault(lab, len(levels))
    return codes, list(levels)


def build_design(dataset: ChallengeDataset, perspective: str = "recall", spec: Optional[EffectSpec] = None) -> DesignMatrices:
    """Assemble outcome, X and per-factor group codes.

    ``recall`` rows carry (tp, tp+fn) and ``precision`` rows (tp, tp+fp); rows whose
    precision trials are zero are excluded and counted. ``dsc`` and ``score`` give a
    continuous outcome only.
    """
    if perspective not in PERSPECTIVES:
        raise ValueError(f"unknown perspective {perspective!r}; expected one of {PERSPECTIVES}")
    spec = spec or EffectSpec()
    index = dataset.outcome_index
    pat_order = {p.patient_id: i for i, p in enumerate(dataset.patients)}
    images = sorted(enumerate(dataset.images), key=lambda t: (pat_order[t[1].patient_id], t[0]))
    col_of = {n: i for i, n in enumerate(spec.fixed_effect_names)}
    rows, xrows, y, s, t, excluded = [], [], [], [], [], []
    labels = {f: [] for f in RANDOM_FACTORS}
    for _, im in images:
        for inst in im.instances:
            x = np.zeros(len(col_of))
            for name, j in col_of.items():
                x[j] = inst.flag(name) if name in INSTRUMENT_FLAGS else im.flag(name)
            for alg in dataset.algorithms:
                key = (im.image_id, inst.instance_id, alg)
                o = index.get(key)
                if o is None:
                    raise MissingOutcomeError(f"missing outcome for (image, instance, algorithm) = {key}")
                if perspective == "recall":
                    succ, trials = o.tp, o.tp + o.fn
                elif perspective == "precision":
                    succ, trials = o.tp, o.tp + o.fp
                    if trials == 0:
                        excluded.append(key)
                        continue
                elif perspective == "dsc":
                    succ, trials = 2 * o.tp, 2 * o.tp + o.fp + o.fn
                else:
                    if o.score is None:
                        raise MissingOutcomeError(f"outcome {key} has no score value")
                    succ, trials = o.score, 1.0
                rows.append(key)
                xrows.append(x)
                y.append(succ / trials)
                s.append(succ)
                t.append(trials)
                labels["algorithm"].append(alg)
                labels["patient"].append(im.patient_id)
                labels["image"].append(im.image_id)
                labels["instance"].append(f"{im.image_id}/{inst.instance_id}")
    X = np.array(xrows, dtype=float).reshape(len(rows), len(col_of))
    names = list(spec.fixed_effect_names)
    if spec.algorithm_as_fixed and len(dataset.algorithms) > 1:
        alg_codes = {a: i for i, a in enumerate(dataset.algorithms)}
        dummies = np.zeros((len(rows), len(dataset.algorithms) - 1))
        for r, a in enumerate(labels["algorithm"]):
            if alg_codes[a]:
                dummies[r, alg_codes[a] - 1] = 1.0
        X = np.hstack([X, dummies])
        names += [f"algorithm[{a}]" for a in dataset.algorithms[1:]]
    group_indices, group_levels = {}, {}
    for f in spec.random_factors:
        group_indices[f], group_levels[f] = _codes(labels[f])
    binomial = perspective in ("recall", "precision")
    return DesignMatrices(
        perspective=perspective,
        y=np.array(y, dtype=float),
        X=X,
        names=names,
        group_indices=group_indices,
        group_levels=group_levels,
        rows=rows,
        successes=np.array(s, dtype=np.int64) if binomial else None,
        trials=np.array(t, dtype=np.int64) if binomial else None,
        n_excluded=len(excluded),
        excluded_rows=excluded,
        characteristic_names=list(spec.fixed_effect_names),
    )


def split_by_instrument_count(dataset: ChallengeDataset) -> Tuple[ChallengeDataset, ChallengeDataset]:
    """(single-instrument images, images with two or more instruments).

    Images without any instrument belong to neither part.
    """
    single = [im for im in dataset.images if len(im.instances) == 1]
    multi = [im for im in dataset.images if len(im.instances) >= 2]
    return dataset.subset(single), dataset.subset(multi)


def select_subset(dataset: ChallengeDataset, subset: str) -> ChallengeDataset:
    if subset == "all":
        return dataset
    single, multi = split_by_instrument_count(dataset)
    if subset == "single":
        return single
    if subset == "multi":
        return multi
    raise ValueError(f"unknown subset {subset!r}; expected single, multi or all")


def drop_column_policy(X: np.ndarray, names: Optional[Sequence[str]] = None) -> Tuple[np.ndarray, List[str], List[str]]:
    """Remove all-0 / all-1 columns; returns (X', kept names, dropped names)."""
    X = np.asarray(X, dtype=float)
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    if X.shape[0] == 0:
        return X[:, :0], [], names
    const = np.all(X == X[:1], axis=0)
    kept = [n for n, c in zip(names, const) if not c]
    dropped = [n for n, c in zip(names, const) if c]
    return X[:, ~const], kept, dropped


def reduce_design(design: DesignMatrices) -> Tuple[np.ndarray, List[str], List[str]]:
    """Apply the drop policy to ``design.X``."""
    return drop_column_policy(design.X, design.names)


__all__ = [
    "COVERED_FLAG",
    "DesignMatrices",
    "EffectSpec",
    "MissingOutcomeError",
    "PERSPECTIVES",
    "RANDOM_FACTORS",
    "build_design",
    "drop_column_policy",
    "reduce_design",
    "select_subset",
    "split_by_instrument_count",
]
