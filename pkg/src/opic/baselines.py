"""Group-average and per-parcel linear-regression baselines.

The group-average baseline predicts the same map (the unnormalized vertexwise
mean over train+val subjects) for every subject; it sets the floor any
individualized model must beat.  The linear baseline fits, per parcel and
task, one regression of contrast values on connectome features over that
parcel's vertices, separately for each train+val subject, then averages the
fitted weights across subjects.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .nncore import ChannelField
from .synthdata import Cohort, Subject

log = logging.getLogger(__name__)

__all__ = ["ParcelLinearModel", "group_average_predict", "fit_linear_baseline", "linreg_predict"]

RIDGE_LAMBDA = 1e-6


@dataclass
class ParcelLinearModel:
    """Averaged per-parcel regressors; weights[task] is (n_parcels, D+1),
    the last column being the intercept."""

    parcels: np.ndarray
    n_features: int
    weights: dict[str, np.ndarray]

    @property
    def n_parcels(self) -> int:
        return int(self.parcels.max()) + 1


def group_average_predict(task: str, cohort: Cohort) -> ChannelField:
    """The task's unnormalized mean contrast; identical for every subject."""
    if task not in cohort.task_ids():
        raise KeyError(f"unknown task {task!r}")
    return ChannelField(cohort.level, cohort.group_mean(task).copy())


def _fit_one(x: np.ndarray, y: np.ndarray, d: int) -> tuple[np.ndarray, bool]:
    design = np.column_stack([x, np.ones(len(x))])
    if len(x) >= d + 1:
        w, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
        if rank == d + 1:
            return w, False
    gram = design.T @ design + RIDGE_LAMBDA * np.eye(d + 1)
    return np.linalg.solve(gram, design.T @ y), True


def fit_linear_baseline(cohort: Cohort, parcels: np.ndarray | None = None) -> ParcelLinearModel:
    """Fit per-(subject, parcel, task) regressions and average over subjects.

    Hemispheres share the parcel labels; a parcel's regression pools its
    vertices across hemispheres.  Parcels with fewer than D+1 vertices fall
    back to ridge; empty parcels get zero weights with a warning and predict
    through the intercept alone.
    """
    if parcels is None:
        parcels = cohort.parcels
    parcels = np.asarray(parcels)
    d = cohort.components
    n_parcels = int(parcels.max()) + 1
    fit_pool = cohort.subjects_in("train", "val")
    if not fit_pool:
        raise DataError("no train/val subjects to fit on")
    labels = np.tile(parcels, cohort.hemispheres)

    weights = {t: np.zeros((n_parcels, d + 1)) for t in cohort.task_ids()}
    ridge_hits, empty = 0, set()
    for task in cohort.task_ids():
        acc = np.zeros((n_parcels, d + 1))
        for s in fit_pool:
            feats = np.concatenate([c.data for c in s.connectomes], axis=0)  # (H*V, D)
            target = s.contrasts[task].data.reshape(-1)
            for p in range(n_parcels):
                members = labels == p
                if not np.any(members):
                    empty.add(p)
                    continue
                w, ridged = _fit_one(feats[members], target[members], d)
                ridge_hits += ridged
                acc[p] += w
        weights[task] = acc / len(fit_pool)
    if empty:
        log.warning("parcels %s are empty; they fall back to a constant predictor",
                    sorted(empty))
    if ridge_hits:
        log.warning("%d parcel fits fell back to ridge (rank-deficient)", ridge_hits)
    return ParcelLinearModel(parcels, d, weights)


def linreg_predict(model: ParcelLinearModel, subject: Subject, task: str) -> ChannelField:
    """Apply the averaged parcel regressors to one subject's features."""
    if task not in model.weights:
        raise KeyError(f"model has no weights for task {task!r}")
    w = model.weights[task]
    rows = []
    for conn in subject.connectomes:
        wv = w[model.parcels]  # (V, D+1)
        rows.append(np.einsum("vd,vd->v", wv[:, :-1], conn.data) + wv[:, -1])
    level = next(iter(subject.contrasts.values())).level if subject.contrasts else 0
    return ChannelField(level, np.stack(rows))
