"""Deterministic mask post-processing: proposal de-duplication and orphan-region reassignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .data import LabelMask
from .metrics import DimensionMismatchError, InstanceSet, MaskLike, _array

# 4-connectivity
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _mask_dsc(a: np.ndarray, b: np.ndarray) -> float:
    denom = int(a.sum()) + int(b.sum())
    return 2.0 * int(np.count_nonzero(a & b)) / denom if denom else 0.0


def filter_overlapping_instances(
    candidates: Sequence[Tuple[np.ndarray, float]], tau: float = 0.0, gamma: float = 0.5
) -> InstanceSet:
    """Drop proposals with score <= ``tau``, then resolve overlaps with DSC >= ``gamma``.

    Whenever two surviving proposals overlap with DSC >= ``gamma`` the one with fewer
    pixels is removed (on equal size, the later-indexed one). Proposals are visited
    largest first, so a proposal is kept iff it overlaps no larger kept proposal.
    The returned ``ids`` are indices into ``candidates``.
    """
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    masks = [np.asarray(m) != 0 for m, _ in candidates]
    if len({m.shape for m in masks}) > 1:
        raise DimensionMismatchError("candidate masks have differing shapes")
    valid = [i for i, (_, s) in enumerate(candidates) if s > tau]
    sizes = {i: int(masks[i].sum()) for i in valid}
    order = sorted(valid, key=lambda i: (-sizes[i], i))
    kept: List[int] = []
    for i in order:
        if all(_mask_dsc(masks[i], masks[k]) < gamma for k in kept):
            kept.append(i)
    kept.sort()
    return InstanceSet([masks[i] for i in kept], kept)


@dataclass
class ReassignResult:
    labels: LabelMask
    # uncovered components left unassigned: larger than delta, or touching no instance
    residual: List[np.ndarray]

    @property
    def residual_mask(self) -> np.ndarray:
        out = np.zeros(self.labels.shape, dtype=bool)
        for r in self.residual:
            out |= r
        return out


def border_counts(component: np.ndarray, labels: np.ndarray) -> dict:
    """Number of 4-adjacent (component pixel, instance pixel) pairs per instance label."""
    counts: dict = {}
    h, w = labels.shape
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        src = component[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
        nbr = labels[max(0, dy) : h - max(0, -dy), max(0, dx) : w - max(0, -dx)]
        vals = nbr[src]
        vals = vals[vals != 0]
        for k, c in zip(*np.unique(vals, return_counts=True)):
            counts[int(k)] = counts.get(int(k), 0) + int(c)
    return counts


def reassign_small_regions(instance_labels: MaskLike, binary_reference: MaskLike, delta: int = 100) -> ReassignResult:
    """Merge small uncovered foreground regions into their neighbouring instance.

    Foreground pixels of ``binary_reference`` that carry no instance label are grouped
    into 4-connected components. A component of at most ``delta`` pixels takes the label
    of the adjacent instance sharing the longest border (ties: lowest label). Larger
    components, and those touching no instance, are returned as residual.
    """
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    lab = _array(instance_labels)
    ref = _array(binary_reference) != 0
    if lab.shape != ref.shape:
        raise DimensionMismatchError(f"mask shapes differ: {lab.shape} vs {ref.shape}")
    out = lab.copy()
    orphan = ref & (lab == 0)
    comp, n = ndimage.label(orphan, structure=_CROSS)
    residual = []
    for c in range(1, n + 1):
        region = comp == c
        size = int(region.sum())
        counts = border_counts(region, lab) if size <= delta else {}
        if not counts:
            residual.append(region)
            continue
        best = min(counts, key=lambda k: (-counts[k], k))
        out[region] = best
    return ReassignResult(LabelMask(out), residual)
