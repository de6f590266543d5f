"""Synthetic cohorts with known generative structure, plus a linear oracle.

The generator builds, per subject, resting timeseries whose vertex-component
Pearson correlations equal a smooth mixing of a per-subject latent vector
(the component series are orthonormalized in-sample, so the correlations are
exact, not approximate).  Task contrasts are then an exact function of those
realized features:

    contrast = task pattern + weights . features [+ quadratic term] + noise

with the weights decomposed into shared, task-group and task-specific parts.
Because the map from features to contrast is known in closed form, a
least-squares oracle bounds what any learned model can achieve, and the
orderings the evaluation suite checks (model beats group average, in-domain
beats out-of-domain, retest beats group average) hold by construction at the
default noise levels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dataclass_field, replace
from typing import Optional

import numpy as np

from .connectome import Connectome, GroupAverageMap, compute_connectome, group_average
from .mesh import MeshHierarchy, build_hierarchy, unpool_tables
from .metrics import dice_auc, dice_curve
from .nncore import ChannelField

log = logging.getLogger(__name__)

__all__ = ["SynthConfig", "Subject", "TaskInfo", "Cohort", "generate_cohort", "oracle_linear_fit"]


@dataclass(frozen=True)
class SynthConfig:
    level: int = 4
    components: int = 8
    latent_dims: int = 4
    n_train: int = 40
    n_val: int = 8
    n_test: int = 12
    n_groups: int = 4
    tasks_per_group: int = 3
    hemispheres: int = 1
    sigma_obs: float = 0.1
    sigma_retest: float = 0.1
    seed: int = 0
    timeseries_len: int = 64
    smooth_level: Optional[int] = None  # coarse level the random fields live on
    group_pattern_scale: float = 1.0
    task_pattern_scale: float = 0.35
    pattern_peak: Optional[float] = 3.0  # equalize every task pattern's abs-max; None keeps raw
    shared_weight_scale: float = 1.0
    pattern_weight_scale: float = 0.6
    group_weight_scale: float = 0.15
    task_weight_scale: float = 0.05
    nonlinear: bool = True
    nonlinear_scale: float = 2.0
    feature_noise: float = 0.02
    feature_ceiling: float = 0.9
    latent_mix_scale: float = 0.5
    weight_mode: str = "smooth"  # "smooth" | "parcel" (piecewise-constant, exact for per-parcel fits)

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test, self.tasks_per_group) < 1:
            raise ValueError("subject counts and tasks-per-group must be >= 1")
        if self.n_groups < 2:
            raise ValueError("need >= 2 task groups for leave-one-group-out")
        if self.sigma_obs < 0 or self.sigma_retest < 0:
            raise ValueError("noise levels must be >= 0")
        if self.level < 0 or self.components < 1 or self.latent_dims < 1 or self.hemispheres < 1:
            raise ValueError("level/components/latent_dims/hemispheres out of range")
        if self.weight_mode not in ("smooth", "parcel"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")
        if self.timeseries_len < self.components + 2:
            raise ValueError("timeseries too short to orthogonalize the component basis")

    @property
    def n_tasks(self) -> int:
        return self.n_groups * self.tasks_per_group

    @property
    def n_subjects(self) -> int:
        return self.n_train + self.n_val + self.n_test


@dataclass
class TaskInfo:
    id: str
    group: str


@dataclass
class Subject:
    id: str
    split: str
    latent: Optional[np.ndarray]
    connectomes: list[Connectome]                 # one per hemisphere
    contrasts: dict[str, ChannelField]            # task id -> (H, V)
    retests: dict[str, ChannelField]              # test subjects only
    timeseries: Optional[dict] = None             # kept only on request

    def feature_channels(self) -> np.ndarray:
        """Connectome features stacked hemisphere-major as (H*D, V)."""
        return np.concatenate([c.data.T for c in self.connectomes], axis=0)


@dataclass
class Cohort:
    level: int
    hemispheres: int
    components: int
    subjects: list[Subject]
    tasks: list[TaskInfo]
    group_averages: dict[str, GroupAverageMap]
    parcels: np.ndarray
    config: Optional[SynthConfig] = None
    seed: Optional[int] = None
    truth: Optional[dict] = None  # generating fields, kept in memory for oracle tests
    _cache: dict = dataclass_field(default_factory=dict, repr=False)

    @property
    def hierarchy(self) -> MeshHierarchy:
        if "hierarchy" not in self._cache:
            self._cache["hierarchy"] = build_hierarchy(self.level)
        return self._cache["hierarchy"]

    @property
    def n_vertices(self) -> int:
        return self.parcels.size

    def subjects_in(self, *splits: str) -> list[Subject]:
        return [s for s in self.subjects if s.split in splits]

    def subject(self, sid: str) -> Subject:
        for s in self.subjects:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def task_ids(self) -> list[str]:
        return [t.id for t in self.tasks]

    def groups(self) -> list[str]:
        seen: dict[str, None] = {}
        for t in self.tasks:
            seen.setdefault(t.group, None)
        return list(seen)

    def tasks_in_group(self, group: str) -> list[str]:
        return [t.id for t in self.tasks if t.group == group]

    def group_of(self, task: str) -> str:
        for t in self.tasks:
            if t.id == task:
                return t.group
        raise KeyError(task)

    def group_mean(self, task: str) -> np.ndarray:
        """Unnormalized vertexwise mean contrast over train+val subjects."""
        key = ("gmean", task)
        if key not in self._cache:
            pool = self.subjects_in("train", "val")
            self._cache[key] = np.mean([s.contrasts[task].data for s in pool], axis=0)
        return self._cache[key]


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def _smooth_fields(h: MeshHierarchy, n: int, base_level: int, rng: np.random.Generator) -> np.ndarray:
    """n random fields sampled coarse and lifted to the finest level, unit std."""
    v0 = h.mesh_at(base_level).n_vertices
    x = rng.standard_normal((1, v0, n))
    for lvl in range(base_level, h.max_level):
        t = unpool_tables(h, lvl)
        x = (x[:, t.idx[:, 0], :] * t.weight[:, 0][None, :, None]
             + x[:, t.idx[:, 1], :] * t.weight[:, 1][None, :, None])
    fields = x[0].T  # (n, V)
    fields -= fields.mean(axis=1, keepdims=True)  # no DC: keeps parcel argmax balanced
    return fields / fields.std(axis=1, keepdims=True)


def _parcel_project(field: np.ndarray, parcels: np.ndarray, n_parcels: int) -> np.ndarray:
    """Replace each vertex value by its parcel mean (trailing axis = vertices)."""
    flat = field.reshape(-1, field.shape[-1])
    out = np.empty_like(flat)
    for p in range(n_parcels):
        members = parcels == p
        if np.any(members):
            out[:, members] = flat[:, members].mean(axis=1, keepdims=True)
    return out.reshape(field.shape)


def _component_basis(t_len: int, d: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(components (D, T), residual projector) with exact in-sample orthonormality.

    Columns of q are orthonormal and orthogonal to the constant, so any
    weighted sum of the returned rows has in-sample correlation with row d
    equal exactly to its weight (after unit-variance scaling).
    """
    raw = np.column_stack([np.ones(t_len), rng.standard_normal((t_len, d))])
    q, _ = np.linalg.qr(raw)
    basis = q[:, 1:].T * np.sqrt(t_len - 1.0)  # rows: zero mean, unit sample std
    return basis, q


def _vertex_series(targets: np.ndarray, basis: np.ndarray, q: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """Per-vertex series whose correlation with basis row d equals targets[v, d]."""
    v, d = targets.shape
    t_len = basis.shape[1]
    resid = rng.standard_normal((v, t_len))
    resid -= (resid @ q) @ q.T  # orthogonal to constant and all components
    norms = np.linalg.norm(resid, axis=1, keepdims=True)
    resid *= np.sqrt(t_len - 1.0) / norms
    lam = np.sqrt(np.maximum(0.0, 1.0 - np.sum(targets**2, axis=1)))
    return targets @ basis + lam[:, None] * resid


def generate_cohort(cfg: SynthConfig, keep_timeseries: bool = False) -> Cohort:
    """Deterministic synthetic cohort; see the module docstring for the model."""
    h = build_hierarchy(cfg.level)
    n_v = h.finest.n_vertices
    d, k = cfg.components, cfg.latent_dims
    base_level = cfg.smooth_level if cfg.smooth_level is not None else max(0, cfg.level - 2)
    if not 0 <= base_level <= cfg.level:
        raise ValueError(f"smooth_level {base_level} outside [0, {cfg.level}]")

    tasks = [
        TaskInfo(f"G{g}_t{j}", f"G{g}")
        for g in range(cfg.n_groups)
        for j in range(cfg.tasks_per_group)
    ]
    n_tasks = len(tasks)

    # Hemisphere-indexed generative fields.
    component_patterns = []   # (D, V): subject-independent feature means; define parcels
    latent_mixes = []         # (D, K, V)
    task_patterns = []        # (n_tasks, V)
    weights = []              # (n_tasks, D, V)
    quad_weights = []         # (D, V)
    for hem in range(cfg.hemispheres):
        rng = _rng(cfg.seed, 0, hem)
        component_patterns.append(_smooth_fields(h, d, base_level, rng))
        latent_mixes.append(
            _smooth_fields(h, d * k, base_level, rng).reshape(d, k, n_v) * cfg.latent_mix_scale
        )
        g_pat = _smooth_fields(h, cfg.n_groups, base_level, rng) * cfg.group_pattern_scale
        t_pat = _smooth_fields(h, n_tasks, base_level, rng) * cfg.task_pattern_scale
        shared_w = _smooth_fields(h, d, base_level, rng) * cfg.shared_weight_scale
        mod_w = _smooth_fields(h, d, base_level, rng)
        group_w = (_smooth_fields(h, cfg.n_groups * d, base_level, rng)
                   .reshape(cfg.n_groups, d, n_v) * cfg.group_weight_scale)
        task_w = (_smooth_fields(h, n_tasks * d, base_level, rng)
                  .reshape(n_tasks, d, n_v) * cfg.task_weight_scale)
        quad_weights.append(_smooth_fields(h, d, base_level, rng) * cfg.nonlinear_scale)

        patterns = np.stack([
            g_pat[t // cfg.tasks_per_group] + t_pat[t] for t in range(n_tasks)
        ])
        if cfg.pattern_peak is not None:
            # Matched amplitudes keep the conditioning channel informative about
            # shape, not per-task scale, so a shared output gain transfers to
            # held-out groups.
            patterns *= cfg.pattern_peak / np.max(np.abs(patterns), axis=1, keepdims=True)
        task_patterns.append(patterns)
        # The dominant weight components are observable at prediction time:
        # `shared_w` is task-independent, and the pattern-modulated term is a
        # function of the task pattern that the conditioning channel carries.
        # This is what makes held-out groups predictable without retraining.
        weights.append(np.stack([
            shared_w
            + cfg.pattern_weight_scale * patterns[t][None, :] * mod_w
            + group_w[t // cfg.tasks_per_group]
            + task_w[t]
            for t in range(n_tasks)
        ]))

    parcels = np.argmax(component_patterns[0], axis=0).astype(np.int64)
    if cfg.weight_mode == "parcel":
        task_patterns = [_parcel_project(tp, parcels, d) for tp in task_patterns]
        weights = [_parcel_project(w, parcels, d) for w in weights]

    split_of = (["train"] * cfg.n_train + ["val"] * cfg.n_val + ["test"] * cfg.n_test)

    # Pass 1: latent draws and raw feature fields; the feature scale is global.
    latents, raw_feats = [], []
    for i in range(cfg.n_subjects):
        rng = _rng(cfg.seed, 1, i)
        s = rng.standard_normal(k)
        latents.append(s)
        per_hem = []
        for hem in range(cfg.hemispheres):
            z = component_patterns[hem].T + np.einsum("dkv,k->vd", latent_mixes[hem], s)
            z += cfg.feature_noise * rng.standard_normal((n_v, d))
            per_hem.append(z)
        raw_feats.append(per_hem)
    peak = max(
        float(np.max(np.linalg.norm(z, axis=1))) for per_hem in raw_feats for z in per_hem
    )
    feat_scale = cfg.feature_ceiling / peak

    subjects = []
    for i in range(cfg.n_subjects):
        sid = f"S{i:03d}"
        split = split_of[i]
        ts_rng = _rng(cfg.seed, 2, i)
        noise_rng = _rng(cfg.seed, 3, i)

        conns, ts_bundle = [], {}
        for hem in range(cfg.hemispheres):
            target = raw_feats[i][hem] * feat_scale
            basis, q = _component_basis(cfg.timeseries_len, d, ts_rng)
            vseries = _vertex_series(target, basis, q, ts_rng)
            conns.append(compute_connectome(vseries, basis, level=cfg.level))
            if keep_timeseries:
                ts_bundle[hem] = {"vertex": vseries, "component": basis}

        contrasts, retests = {}, {}
        for t, task in enumerate(tasks):
            rows_core = []
            for hem in range(cfg.hemispheres):
                feats = conns[hem].data  # realized features; the contrast is exact in them
                core = task_patterns[hem][t] + np.einsum("dv,vd->v", weights[hem][t], feats)
                if cfg.nonlinear:
                    core = core + np.einsum("dv,vd->v", quad_weights[hem], feats**2)
                rows_core.append(core)
            core = np.stack(rows_core)
            contrasts[task.id] = ChannelField(
                cfg.level, core + cfg.sigma_obs * noise_rng.standard_normal(core.shape)
            )
            if split == "test":
                retests[task.id] = ChannelField(
                    cfg.level, core + cfg.sigma_retest * noise_rng.standard_normal(core.shape)
                )

        subjects.append(Subject(sid, split, latents[i], conns, contrasts, retests,
                                ts_bundle if keep_timeseries else None))

    fit_pool = [s for s in subjects if s.split in ("train", "val")]
    group_averages = {
        task.id: group_average([s.contrasts[task.id] for s in fit_pool], task.id)
        for task in tasks
    }

    truth = {"patterns": task_patterns, "weights": weights, "quad_weights": quad_weights,
             "task_ids": [t.id for t in tasks]}
    return Cohort(cfg.level, cfg.hemispheres, d, subjects, tasks, group_averages,
                  parcels, config=cfg, seed=cfg.seed, truth=truth)


def oracle_linear_fit(cohort: Cohort, task: str) -> tuple[np.ndarray, float, float]:
    """Vertexwise least squares of the contrast on the connectome features.

    Fits on the train split and reports held-out (test split) mean l2 and mean
    Dice AUC -- the bar any learned model is measured against on linear data.
    Returns (weights (H, V, D+1), heldout_l2, heldout_auc); the last weight
    column is the intercept.
    """
    if task not in cohort.task_ids():
        raise KeyError(f"unknown task {task!r}")
    train = cohort.subjects_in("train")
    test = cohort.subjects_in("test")
    if not train:
        raise ValueError("train split is empty")
    n_hem, n_v, d = cohort.hemispheres, cohort.n_vertices, cohort.components

    weights = np.empty((n_hem, n_v, d + 1))
    ridge_hits = 0
    for hem in range(n_hem):
        feats = np.stack([s.connectomes[hem].data for s in train])        # (S, V, D)
        targets = np.stack([s.contrasts[task].data[hem] for s in train])  # (S, V)
        design = np.concatenate([feats, np.ones((len(train), n_v, 1))], axis=2)
        for v in range(n_v):
            x, y = design[:, v, :], targets[:, v]
            w, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
            if rank < d + 1:
                ridge_hits += 1
                gram = x.T @ x + 1e-6 * np.eye(d + 1)
                w = np.linalg.solve(gram, x.T @ y)
            weights[hem, v] = w
    if ridge_hits:
        log.warning("oracle fit fell back to ridge at %d vertices", ridge_hits)

    l2s, aucs = [], []
    for s in test:
        pred = np.stack([
            np.einsum("vd,vd->v", np.concatenate(
                [s.connectomes[hem].data, np.ones((n_v, 1))], axis=1), weights[hem])
            for hem in range(n_hem)
        ])
        target = s.contrasts[task].data
        l2s.append(float(np.mean((pred - target) ** 2)))
        aucs.append(dice_auc(dice_curve(pred, target)))
    return weights, float(np.mean(l2s)), float(np.mean(aucs))
