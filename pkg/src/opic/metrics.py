"""Overlap metrics and subject identification.

Dice at top-X% compares the sets of the X% highest-valued vertices of two
maps, so every metric here is invariant to monotone rescaling of either map.
Ties are broken toward the lower flat index, which makes the selection
deterministic; with real-valued fields ties are measure-zero anyway.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

from .errors import DataError
from .nncore import ChannelField

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_THRESHOLDS",
    "DiceCurve",
    "IdentificationMatrix",
    "dice_top_x",
    "dice_curve",
    "dice_auc",
    "identification_matrix",
    "normalize_id_matrix",
    "identification_accuracy",
    "predictable_filter",
    "paired_ttest",
]

DEFAULT_THRESHOLDS = tuple(range(5, 55, 5))


@dataclass
class DiceCurve:
    thresholds: np.ndarray
    dice: np.ndarray

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        self.dice = np.asarray(self.dice, dtype=np.float64)
        if self.thresholds.shape != self.dice.shape or self.thresholds.ndim != 1:
            raise ValueError("thresholds and dice must be matching 1-d arrays")
        if np.any(np.diff(self.thresholds) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        if self.thresholds[0] < 5 or self.thresholds[-1] > 50:
            raise ValueError("thresholds must lie within [5, 50]")
        if np.any((self.dice < 0) | (self.dice > 1)):
            raise ValueError("dice values must lie in [0, 1]")


@dataclass
class IdentificationMatrix:
    """Entry (i, j): Dice AUC between prediction i and observed map j."""

    data: np.ndarray
    normalization: str = "raw"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        n = self.data.shape[0]
        if self.data.ndim != 2 or self.data.shape != (n, n) or n < 2:
            raise ValueError(f"identification matrix must be square with N >= 2, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("identification matrix contains non-finite values")

    @property
    def n(self) -> int:
        return self.data.shape[0]


def _flat_values(field) -> np.ndarray:
    if isinstance(field, ChannelField):
        return field.data.ravel()
    return np.asarray(field).ravel()


def _descending_ranks(values: np.ndarray) -> np.ndarray:
    """rank[i] = position of entry i when sorting by value desc, index asc."""
    order = np.lexsort((np.arange(values.size), -values))
    ranks = np.empty(values.size, dtype=np.int64)
    ranks[order] = np.arange(values.size)
    return ranks


def _top_k(x: float, n: int) -> int:
    if not 0 < x <= 100:
        raise ValueError(f"threshold percentage must be in (0, 100], got {x}")
    k = int(round(x / 100.0 * n))
    if k == 0:
        raise ValueError(f"top-{x}% of {n} entries selects no vertices")
    return k


def dice_top_x(a, b, x: float) -> float:
    """Overlap of the top-x% vertex sets of two maps (channels flattened)."""
    av, bv = _flat_values(a), _flat_values(b)
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch: {av.shape} vs {bv.shape}")
    k = _top_k(x, av.size)
    ra, rb = _descending_ranks(av), _descending_ranks(bv)
    overlap = int(np.count_nonzero((ra < k) & (rb < k)))
    return overlap / k


def dice_curve(a, b, thresholds=DEFAULT_THRESHOLDS) -> DiceCurve:
    ths = np.asarray(sorted(thresholds), dtype=np.float64)
    return DiceCurve(ths, np.array([dice_top_x(a, b, t) for t in ths]))


def dice_auc(curve: DiceCurve) -> float:
    """Trapezoidal area under the curve, normalized to [0, 1] by the X span."""
    if curve.thresholds.size < 2:
        raise ValueError("dice_auc needs at least two curve points")
    span = curve.thresholds[-1] - curve.thresholds[0]
    return float(_trapezoid(curve.dice, curve.thresholds) / span)


def identification_matrix(preds, targets, thresholds=DEFAULT_THRESHOLDS) -> IdentificationMatrix:
    """All-pairs Dice AUC between per-subject predictions and observed maps."""
    preds, targets = list(preds), list(targets)
    if len(preds) != len(targets):
        raise ValueError("predictions and targets must cover the same subjects in order")
    n = len(preds)
    if n < 2:
        raise ValueError("identification needs at least 2 subjects")
    sizes = {_flat_values(f).size for f in preds} | {_flat_values(f).size for f in targets}
    if len(sizes) != 1:
        raise ValueError("all fields must have the same flattened size")
    size = sizes.pop()

    ths = np.asarray(sorted(thresholds), dtype=np.float64)
    rp = np.stack([_descending_ranks(_flat_values(f)) for f in preds])
    rt = np.stack([_descending_ranks(_flat_values(f)) for f in targets])
    dice_per_k = np.empty((ths.size, n, n))
    for i, x in enumerate(ths):
        k = _top_k(x, size)
        in_p = (rp < k).astype(np.float64)
        in_t = (rt < k).astype(np.float64)
        dice_per_k[i] = (in_p @ in_t.T) / k
    span = ths[-1] - ths[0]
    auc = _trapezoid(dice_per_k, ths, axis=0) / span
    return IdentificationMatrix(auc, "raw")


def normalize_id_matrix(m: IdentificationMatrix) -> IdentificationMatrix:
    """Column-standardize (mean 0, population variance 1 per column).

    Removes target-specific baseline similarity so that rows compete on
    subject-specific signal.  Zero-variance columns are left raw with a
    warning.
    """
    data = m.data.copy()
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    dead = std == 0.0
    if np.any(dead):
        log.warning("%d zero-variance columns left unnormalized", int(dead.sum()))
    keep = ~dead
    data[:, keep] = (data[:, keep] - mean[keep]) / std[keep]
    return IdentificationMatrix(data, "column-standardized")


def identification_accuracy(m: IdentificationMatrix) -> tuple[float, float]:
    """(top-1 fraction, mean normalized rank), both in [0, 1], 1 is perfect.

    Top-1 counts rows whose diagonal is the strict row maximum.  Rank is the
    1-based descending position of the diagonal within its row, with ties
    counted against the diagonal, mapped to (N - rank) / (N - 1).
    """
    data, n = m.data, m.n
    diag = np.diag(data)
    others_ge = (data >= diag[:, None]).sum(axis=1) - 1  # excludes the diagonal itself
    strictly_top = (data > diag[:, None]).sum(axis=1) == 0
    top1 = float(np.mean(strictly_top & (others_ge == 0)))
    ranks = 1 + others_ge
    mean_rank = float(np.mean((n - ranks) / (n - 1)))
    return top1, mean_rank


def predictable_filter(test_maps: dict, retest_maps: dict, gavg_maps: dict,
                       subjects, tasks=None) -> list[str]:
    """Tasks whose mean test-retest AUC beats the mean test-group-average AUC.

    `test_maps` and `retest_maps` are keyed by (subject, task); `gavg_maps`
    by task.  A task without retest coverage for every listed subject is a
    data error.
    """
    subjects = list(subjects)
    if tasks is None:
        tasks = sorted(gavg_maps)
    kept = []
    for task in tasks:
        rt_aucs, ga_aucs = [], []
        for sid in subjects:
            if (sid, task) not in retest_maps:
                raise DataError(f"missing retest map for subject {sid!r}, task {task!r}")
            test = test_maps[(sid, task)]
            rt_aucs.append(dice_auc(dice_curve(test, retest_maps[(sid, task)])))
            ga_aucs.append(dice_auc(dice_curve(test, gavg_maps[task])))
        if np.mean(rt_aucs) > np.mean(ga_aucs):
            kept.append(task)
    return kept


def paired_ttest(a, b) -> tuple[float, float, int]:
    """Two-tailed paired t-test; returns (t, p, df).

    Identical samples give (0, 1, n-1) by convention; a constant nonzero
    difference has no defined t statistic and raises.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired_ttest expects two equal-length 1-d samples, n >= 2")
    d = a - b
    df = d.size - 1
    if np.all(d == d[0]):
        if d[0] == 0.0:
            return 0.0, 1.0, df
        raise ValueError("zero-variance nonzero differences: t statistic undefined")
    t = float(d.mean() / (d.std(ddof=1) / np.sqrt(d.size)))
    p = float(2.0 * stats.t.sf(abs(t), df))
    return t, p, df
