"""Pixel confusion counts, precision/recall/DSC, instance matching and MI_DSC."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import ChallengeDataset, InstanceOutcome, LabelMask, read_pgm

MaskLike = Union[LabelMask, np.ndarray]


class UndefinedMetricError(ArithmeticError):
    """A metric's denominator is zero."""


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int = 0


@dataclass
class InstanceSet:
    """Binary instance masks of equal shape; ``ids`` are the source labels or indices."""

    masks: List[np.ndarray]
    ids: List[int]

    def __len__(self) -> int:
        return len(self.masks)

    @property
    def sizes(self) -> List[int]:
        return [int(m.sum()) for m in self.masks]


def _array(mask: MaskLike) -> np.ndarray:
    return mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)


def confusion_counts(ref_binary: MaskLike, pred_binary: MaskLike) -> ConfusionCounts:
    """Pixelwise counts; any non-zero value is foreground."""
    r = _array(ref_binary) != 0
    p = _array(pred_binary) != 0
    if r.shape != p.shape:
        raise DimensionMismatchError(f"mask shapes differ: {r.shape} vs {p.shape}")
    tp = int(np.count_nonzero(r & p))
    fp = int(np.count_nonzero(p)) - tp
    fn = int(np.count_nonzero(r)) - tp
    return ConfusionCounts(tp, fp, fn, r.size - tp - fp - fn)


def precision(c: ConfusionCounts) -> float:
    if c.tp + c.fp <= 0:
        raise UndefinedMetricError("precision undefined: tp + fp = 0")
    return c.tp / (c.tp + c.fp)


def recall(c: ConfusionCounts) -> float:
    if c.tp + c.fn <= 0:
        raise UndefinedMetricError("recall undefined: tp + fn = 0")
    return c.tp / (c.tp + c.fn)


def dsc(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    if denom <= 0:
        raise UndefinedMetricError("DSC undefined: 2tp + fp + fn = 0")
    return 2 * c.tp / denom


def decompose_instances(mask: MaskLike) -> InstanceSet:
    """One binary mask per distinct non-zero label, in ascending label order."""
    arr = _array(mask)
    labels = [int(v) for v in np.unique(arr) if v != 0]
    return InstanceSet([arr == k for k in labels], labels)


def _pairwise_overlap(ref: InstanceSet, pred: InstanceSet) -> np.ndarray:
    if not len(ref) or not len(pred):
        return np.zeros((len(ref), len(pred)), dtype=np.int64)
    R = np.stack([m.reshape(-1) for m in ref.masks]).astype(np.int64)
    P = np.stack([m.reshape(-1) for m in pred.masks]).astype(np.int64)
    return R @ P.T


def match_instances(
    ref: InstanceSet, pred: InstanceSet
) -> List[Tuple[int, Optional[int], ConfusionCounts]]:
    """Greedy one-to-one matching in descending pairwise DSC.

    Ties are broken by lower reference index, then lower prediction index. Pairs with
    zero overlap are never matched; unmatched references get all-``fn`` counts.
    Returned list is ordered by reference index.
    """
    shapes = {m.shape for m in ref.masks} | {m.shape for m in pred.masks}
    if len(shapes) > 1:
        raise DimensionMismatchError(f"instance masks have differing shapes: {sorted(shapes)}")
    rs = np.array(ref.sizes, dtype=np.int64)
    ps = np.array(pred.sizes, dtype=np.int64)
    overlap = _pairwise_overlap(ref, pred)
    candidates = []
    for i in range(len(ref)):
        for j in range(len(pred)):
            if overlap[i, j] > 0:
                candidates.append((-2.0 * overlap[i, j] / (rs[i] + ps[j]), i, j))
    candidates.sort()
    used_r, used_p = set(), set()
    pairs = {}
    for _, i, j in candidates:
        if i in used_r or j in used_p:
            continue
        used_r.add(i)
        used_p.add(j)
        tp = int(overlap[i, j])
        pairs[i] = (j, ConfusionCounts(tp, int(ps[j]) - tp, int(rs[i]) - tp))
    out = []
    for i in range(len(ref)):
        if i in pairs:
            j, c = pairs[i]
            out.append((i, j, c))
        else:
            out.append((i, None, ConfusionCounts(0, 0, int(rs[i]))))
    return out


def mi_dsc(ref: MaskLike, pred: MaskLike) -> float:
    """Mean per-reference-instance DSC after matching; unmatched references score 0."""
    r, p = _array(ref), _array(pred)
    if r.shape != p.shape:
        raise DimensionMismatchError(f"mask shapes differ: {r.shape} vs {p.shape}")
    rset = decompose_instances(r)
    if not len(rset):
        raise UndefinedMetricError("MI_DSC undefined: reference has no instances")
    matches = match_instances(rset, decompose_instances(p))
    return float(np.mean([dsc(c) for _, _, c in matches]))


def robustness_percentile(scores: Sequence[float], q: float = 5) -> float:
    """Linear-interpolation percentile (the challenge robustness summary at q=5)."""
    x = np.sort(np.asarray(scores, dtype=float))
    if x.size == 0:
        raise ValueError("robustness percentile of an empty list")
    if not 0 <= q <= 100:
        raise ValueError(f"q must lie in [0, 100], got {q}")
    h = (x.size - 1) * q / 100.0
    lo = int(np.floor(h))
    hi = min(lo + 1, x.size - 1)
    return float(x[lo] + (h - lo) * (x[hi] - x[lo]))


def image_outcomes(
    image_id: str,
    instance_ids: Sequence[str],
    algorithm_id: str,
    ref: MaskLike,
    pred: MaskLike,
) -> List[InstanceOutcome]:
    """Per-instance outcomes for one (image, algorithm) mask pair.

    Reference label ``k`` is the instance with id ``str(k)``.
    """
    r, p = _array(ref), _array(pred)
    if r.shape != p.shape:
        raise DimensionMismatchError(
            f"image {image_id!r}, algorithm {algorithm_id!r}: mask shapes differ {r.shape} vs {p.shape}"
        )
    rset = decompose_instances(r)
    label_of = {str(k): idx for idx, k in enumerate(rset.ids)}
    missing = [i for i in instance_ids if i not in label_of]
    if missing:
        raise ValueError(f"image {image_id!r}: instance(s) {missing} absent from reference mask")
    matches = {i: c for i, _, c in match_instances(rset, decompose_instances(p))}
    out = []
    for inst in instance_ids:
        c = matches[label_of[inst]]
        out.append(InstanceOutcome(image_id, inst, algorithm_id, c.tp, c.fp, c.fn, tn=r.size - c.tp - c.fp - c.fn))
    return out


def outcomes_from_masks(ds: ChallengeDataset, mask_dir) -> List[InstanceOutcome]:
    """Outcomes for every (instance, algorithm) from ``ref/`` and ``pred/<alg>/`` PGMs."""
    mask_dir = Path(mask_dir)
    out: List[InstanceOutcome] = []
    for im in ds.images:
        if not im.instances:
            continue
        ref = read_pgm(mask_dir / "ref" / f"{im.image_id}.pgm")
        ids = [inst.instance_id for inst in im.instances]
        for alg in ds.algorithms:
            pred = read_pgm(mask_dir / "pred" / alg / f"{im.image_id}.pgm")
            out.extend(image_outcomes(im.image_id, ids, alg, ref, pred))
    return out
