"""Connectome features from timeseries, and group-average contrast maps.

A subject's connectome row at a vertex holds the Pearson correlations between
that vertex's resting timeseries and each component's timeseries.  Group
averages are vertexwise means over the fitting subjects, rescaled so the
absolute maximum is 1 to match the connectome feature magnitude.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCorrelationError
from .nncore import ChannelField

log = logging.getLogger(__name__)

__all__ = [
    "Connectome",
    "GroupAverageMap",
    "pearson",
    "compute_connectome",
    "normalize_group_average",
    "group_average",
]


@dataclass
class Connectome:
    """V x D matrix of vertex-to-component Pearson correlations."""

    level: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"connectome data must be (V, D), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("connectome contains non-finite values")
        if np.any(np.abs(self.data) > 1.0 + 1e-9):
            raise ValueError("connectome entries must lie in [-1, 1]")

    @property
    def n_vertices(self) -> int:
        return self.data.shape[0]

    @property
    def components(self) -> int:
        return self.data.shape[1]


@dataclass
class GroupAverageMap:
    task: str
    field: ChannelField


def _validate_series(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError(f"{name} must be a 1-d series with at least 2 samples")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def pearson(x, y) -> float:
    """Sample Pearson correlation of two equal-length series."""
    x = _validate_series(x, "x")
    y = _validate_series(y, "y")
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    xc = x - x.mean()
    yc = y - y.mean()
    nx, ny = np.linalg.norm(xc), np.linalg.norm(yc)
    if nx == 0.0 or ny == 0.0:
        raise DegenerateCorrelationError("zero-variance series in pearson")
    r = float(xc @ yc / (nx * ny))
    return min(1.0, max(-1.0, r))


def compute_connectome(vertex_ts: np.ndarray, component_ts: np.ndarray,
                       level: int = 0) -> Connectome:
    """Correlate every vertex series against every component series.

    vertex_ts is (V, T), component_ts is (D, T).  Zero-variance vertex series
    (flat medial-wall vertices in real data) become all-zero rows with a
    warning; a zero-variance component is an error because it would poison an
    entire feature column.
    """
    vertex_ts = np.asarray(vertex_ts, dtype=np.float64)
    component_ts = np.asarray(component_ts, dtype=np.float64)
    if vertex_ts.ndim != 2 or component_ts.ndim != 2:
        raise ValueError("expected vertex_ts (V, T) and component_ts (D, T)")
    if vertex_ts.shape[1] != component_ts.shape[1]:
        raise ValueError(
            f"series length mismatch: {vertex_ts.shape[1]} vs {component_ts.shape[1]}"
        )

    vc = vertex_ts - vertex_ts.mean(axis=1, keepdims=True)
    cc = component_ts - component_ts.mean(axis=1, keepdims=True)
    vn = np.linalg.norm(vc, axis=1)
    cn = np.linalg.norm(cc, axis=1)
    if np.any(cn == 0.0):
        bad = int(np.nonzero(cn == 0.0)[0][0])
        raise DegenerateCorrelationError(f"component {bad} has zero variance")
    flat = vn == 0.0
    if np.any(flat):
        log.warning("%d zero-variance vertex series mapped to correlation 0", int(flat.sum()))
        vn = np.where(flat, 1.0, vn)

    data = (vc / vn[:, None]) @ (cc / cn[:, None]).T
    data[flat] = 0.0
    np.clip(data, -1.0, 1.0, out=data)
    return Connectome(level, data)


def normalize_group_average(raw: GroupAverageMap) -> GroupAverageMap:
    """Scale so the absolute maximum is 1; identically-zero maps pass through."""
    peak = float(np.max(np.abs(raw.field.data)))
    if peak == 0.0:
        log.warning("group-average map for task %r is identically zero", raw.task)
        return GroupAverageMap(raw.task, ChannelField(raw.field.level, raw.field.data.copy()))
    return GroupAverageMap(raw.task, ChannelField(raw.field.level, raw.field.data / peak))


def group_average(contrasts, task: str = "") -> GroupAverageMap:
    """Vertexwise mean of the given contrasts, then abs-max-1 scaling."""
    contrasts = list(contrasts)
    if not contrasts:
        raise ValueError("group_average needs at least one contrast")
    shape = contrasts[0].data.shape
    level = contrasts[0].level
    for c in contrasts[1:]:
        if c.data.shape != shape or c.level != level:
            raise ValueError("contrast shape/level mismatch in group_average")
    mean = np.mean([c.data for c in contrasts], axis=0)
    return normalize_group_average(GroupAverageMap(task, ChannelField(level, mean)))
