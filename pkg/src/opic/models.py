"""Prediction networks and their training protocols.

Two networks share one U-Net backbone on the icosphere hierarchy:

* `OpicModel` reads H*D connectome channels plus H group-average channels and
  writes H output channels shared by every task, so its parameter count does
  not depend on how many tasks exist and it can be conditioned onto a task it
  never trained on by swapping the group-average input.
* `BscModel` reads only the connectome channels and writes one H-channel
  block per training task; block t is bound to task t for the model's life.

Training is plain mini-batch Adam on the l2 loss (optionally the
reconstruct-and-contrast loss for `BscModel`), with the checkpoint taken at
the epoch of lowest validation loss.  Everything is deterministic under the
configured seed: shuffling, initialization, and batch reduction order are
all fixed.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field as dataclass_field
from typing import Optional, Sequence

import numpy as np

from .connectome import Connectome, GroupAverageMap
from .errors import DataError, NumericError
from .mesh import MeshHierarchy
from .nncore import (
    AdamState,
    ChannelField,
    ConvParams,
    Tensor,
    adam_step,
    backward,
    channel_scale,
    concat_channels,
    conv_op,
    glorot_conv_params,
    l2_loss,
    pool_op,
    rc_loss,
    relu,
    slice_batch,
    slice_channels,
    unpool_op,
)
from .synthdata import Cohort

log = logging.getLogger(__name__)

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "TrainResult",
    "OpicModel",
    "BscModel",
    "FoldPredictions",
    "build_opic",
    "build_bsc",
    "opic_forward",
    "bsc_forward",
    "train",
    "logo_run",
    "average_indomain_predictions",
]


@dataclass(frozen=True)
class ModelConfig:
    """Backbone hyperparameters.

    `feature_gain` rescales the connectome input channels: raw correlation
    features are an order of magnitude smaller than the unit-peak
    group-average channel, and balancing the two pathways makes the subject
    signal learnable within the short default training budget.  The
    conditioned model adds its group-average input to the output through a
    learned per-channel gain (`gavg_residual`), so training starts from the
    group-average baseline and only has to learn the individual correction.
    """

    levels: int = 3
    widths: tuple[int, ...] = (16, 32, 64)
    hemispheres: int = 1
    components: int = 8
    dtype: str = "float32"
    feature_gain: float = 4.0
    gavg_residual: bool = True
    condition_mode: str = "input"  # "input": gavg feeds the encoder; "residual": bypass only

    def __post_init__(self):
        if self.levels != len(self.widths):
            raise ValueError("widths must list one channel count per level")
        if self.levels < 1:
            raise ValueError("need at least one level")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        if self.feature_gain <= 0:
            raise ValueError("feature_gain must be positive")
        if self.condition_mode not in ("input", "residual"):
            raise ValueError(f"unknown condition_mode {self.condition_mode!r}")
        if self.condition_mode == "residual" and not self.gavg_residual:
            raise ValueError("condition_mode='residual' requires gavg_residual")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 10
    lr: float = 3e-3
    seed: int = 0
    holdout_group: Optional[str] = None
    holdout_tasks: tuple[str, ...] = ()
    loss: str = "l2"
    rc_alpha: float = 0.5
    rc_margin: float = 1.0
    zero_gavg: bool = False
    gavg_dropout: float = 0.0  # fraction of samples trained with a zeroed conditioning map

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.loss not in ("l2", "rc"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0.0 <= self.gavg_dropout < 1.0:
            raise ValueError("gavg_dropout must lie in [0, 1)")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


class _MeshUNet:
    """Shared encoder/decoder over the top `levels` meshes of a hierarchy."""

    kind = "unet"

    def __init__(self, hierarchy: MeshHierarchy, config: ModelConfig,
                 in_channels: int, out_channels: int, seed: int,
                 zero_head: bool = False):
        if hierarchy.max_level - hierarchy.levels[0].level + 1 < config.levels:
            raise ValueError("hierarchy has fewer levels than the model wants")
        self.hierarchy = hierarchy
        self.config = config
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.seed = seed
        rng = _rng(seed, 7)
        w = config.widths
        dt = config.np_dtype
        self.layers: dict[str, ConvParams] = {}
        self.extra_params: dict[str, Tensor] = {}
        prev = in_channels
        for i in range(config.levels):
            self.layers[f"enc{i}a"] = glorot_conv_params(prev, w[i], rng, dt)
            self.layers[f"enc{i}b"] = glorot_conv_params(w[i], w[i], rng, dt)
            prev = w[i]
        for i in range(config.levels - 2, -1, -1):
            self.layers[f"dec{i}a"] = glorot_conv_params(w[i + 1] + w[i], w[i], rng, dt)
            self.layers[f"dec{i}b"] = glorot_conv_params(w[i], w[i], rng, dt)
        self.layers["head"] = glorot_conv_params(w[0], out_channels, rng, dt)
        if zero_head:
            self.layers["head"].taps.data[:] = 0.0
            self.layers["head"].bias.data[:] = 0.0

    def parameters(self) -> list[Tensor]:
        out = []
        for name in sorted(self.layers):
            out.extend(self.layers[name].tensors)
        for name in sorted(self.extra_params):
            out.append(self.extra_params[name])
        return out

    def param_arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.parameters()]

    def set_param_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError("parameter count mismatch")
        for t, a in zip(params, arrays):
            if t.data.shape != a.shape:
                raise ValueError(f"shape mismatch {t.data.shape} vs {a.shape}")
            t.data = a.astype(t.data.dtype, copy=True)

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def forward_batch(self, x: Tensor) -> Tensor:
        h = self.hierarchy
        top = h.max_level
        n_levels = self.config.levels
        skips = []
        t = x
        for i in range(n_levels):
            mesh = h.mesh_at(top - i)
            t = relu(conv_op(t, self.layers[f"enc{i}a"], mesh))
            t = relu(conv_op(t, self.layers[f"enc{i}b"], mesh))
            if i < n_levels - 1:
                skips.append(t)
                t = pool_op(t, h, top - i)
        for i in range(n_levels - 2, -1, -1):
            mesh = h.mesh_at(top - i)
            t = unpool_op(t, h, top - i - 1)
            t = concat_channels(t, skips[i])
            t = relu(conv_op(t, self.layers[f"dec{i}a"], mesh))
            t = relu(conv_op(t, self.layers[f"dec{i}b"], mesh))
        return conv_op(t, self.layers["head"], h.mesh_at(top))

    def predict_batch(self, x: np.ndarray, chunk: int = 32) -> np.ndarray:
        """Forward a (N, V, C) design array without keeping gradients."""
        outs = []
        for i in range(0, len(x), chunk):
            outs.append(self.forward_batch(Tensor(x[i : i + chunk])).data)
        return np.concatenate(outs, axis=0)


class OpicModel(_MeshUNet):
    """Task-conditioned network: connectome channels + group-average channels in,
    H channels out regardless of task count.

    With `gavg_residual` the output is the group-average input (through a
    learned per-channel gain, initialized at 1) plus the U-Net correction;
    the head starts at zero so the untrained model predicts exactly the
    group average it is conditioned on.
    """

    kind = "opic"

    def __init__(self, hierarchy: MeshHierarchy, config: ModelConfig, seed: int = 0):
        h, d = config.hemispheres, config.components
        backbone_in = h * d if config.condition_mode == "residual" else h * d + h
        self.model_in_channels = h * d + h
        super().__init__(hierarchy, config, in_channels=backbone_in, out_channels=h,
                         seed=seed, zero_head=config.gavg_residual)
        if config.gavg_residual:
            self.extra_params["gavg_gain"] = Tensor(
                np.ones(h, dtype=config.np_dtype), requires_grad=True)

    def forward_batch(self, x: Tensor) -> Tensor:
        h = self.config.hemispheres
        if x.data.shape[-1] != self.model_in_channels:
            raise ValueError(
                f"expected {self.model_in_channels} input channels, got {x.data.shape[-1]}")
        backbone_x = x
        if self.config.condition_mode == "residual":
            backbone_x = slice_channels(x, 0, self.in_channels)
        out = super().forward_batch(backbone_x)
        if self.config.gavg_residual:
            gavg = slice_channels(x, self.model_in_channels - h, self.model_in_channels)
            out = out + channel_scale(gavg, self.extra_params["gavg_gain"])
        return out


class BscModel(_MeshUNet):
    """Per-task-channel network; the head width grows with the task list."""

    kind = "bsc"

    def __init__(self, hierarchy: MeshHierarchy, config: ModelConfig,
                 tasks: Sequence[str], seed: int = 0):
        self.tasks = list(tasks)
        if not self.tasks:
            raise ValueError("BscModel needs a nonempty task list")
        h, d = config.hemispheres, config.components
        super().__init__(hierarchy, config,
                         in_channels=h * d, out_channels=h * len(self.tasks), seed=seed)

    def task_block(self, out: ChannelField, task: str) -> ChannelField:
        h = self.config.hemispheres
        t = self.tasks.index(task)
        return ChannelField(out.level, out.data[t * h : (t + 1) * h])


def build_opic(hierarchy: MeshHierarchy, config: ModelConfig, seed: int = 0) -> OpicModel:
    return OpicModel(hierarchy, config, seed)


def build_bsc(hierarchy: MeshHierarchy, config: ModelConfig,
              tasks: Sequence[str], seed: int = 0) -> BscModel:
    return BscModel(hierarchy, config, tasks, seed)


def _gavg_channels(gavg: GroupAverageMap | np.ndarray, hemispheres: int,
                   n_vertices: int) -> np.ndarray:
    data = gavg.field.data if isinstance(gavg, GroupAverageMap) else np.asarray(gavg)
    if data.shape != (hemispheres, n_vertices):
        raise ValueError(f"group-average shape {data.shape} != ({hemispheres}, {n_vertices})")
    peak = float(np.max(np.abs(data)))
    if peak != 0.0 and abs(peak - 1.0) > 1e-6:
        raise ValueError(f"group-average input must be abs-max-normalized (peak {peak})")
    return data


def _opic_input(connectomes: Sequence[Connectome], gavg_data: np.ndarray,
                gain: float) -> np.ndarray:
    feats = np.concatenate([c.data.T for c in connectomes], axis=0) * gain
    return np.concatenate([feats, gavg_data], axis=0).T  # (V, H*D + H)


def opic_forward(model: OpicModel, connectome, gavg: GroupAverageMap) -> ChannelField:
    """Predict one subject's contrast for the task identified by `gavg`."""
    conns = connectome if isinstance(connectome, (list, tuple)) else [connectome]
    if len(conns) != model.config.hemispheres:
        raise ValueError(f"expected {model.config.hemispheres} hemisphere connectomes, got {len(conns)}")
    n_v = model.hierarchy.finest.n_vertices
    for c in conns:
        if c.n_vertices != n_v or c.components != model.config.components:
            raise ValueError("connectome shape does not match the model")
    gd = _gavg_channels(gavg, model.config.hemispheres, n_v)
    x = _opic_input(conns, gd, model.config.feature_gain).astype(model.config.np_dtype)[None]
    out = model.forward_batch(Tensor(x)).data[0]
    return ChannelField(model.hierarchy.max_level, np.ascontiguousarray(out.T, dtype=np.float64))


def bsc_forward(model: BscModel, connectome) -> ChannelField:
    """Predict all of the model's tasks at once; block t belongs to task t."""
    conns = connectome if isinstance(connectome, (list, tuple)) else [connectome]
    if len(conns) != model.config.hemispheres:
        raise ValueError(f"expected {model.config.hemispheres} hemisphere connectomes, got {len(conns)}")
    feats = np.concatenate([c.data.T for c in conns], axis=0).T * model.config.feature_gain
    x = feats.astype(model.config.np_dtype)[None]
    out = model.forward_batch(Tensor(x)).data[0]
    return ChannelField(model.hierarchy.max_level, np.ascontiguousarray(out.T, dtype=np.float64))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: _MeshUNet
    history: list[dict]
    log_lines: list[str]
    best_epoch: int
    train_tasks: list[str]


def _training_tasks(cohort: Cohort, cfg: TrainConfig) -> list[str]:
    tasks = cohort.task_ids()
    if cfg.holdout_group is not None:
        if cfg.holdout_group not in cohort.groups():
            raise DataError(f"holdout group {cfg.holdout_group!r} not in cohort")
        tasks = [t for t in tasks if cohort.group_of(t) != cfg.holdout_group]
    unknown = set(cfg.holdout_tasks) - set(cohort.task_ids())
    if unknown:
        raise DataError(f"holdout tasks not in cohort: {sorted(unknown)}")
    tasks = [t for t in tasks if t not in cfg.holdout_tasks]
    if not tasks:
        raise DataError("no tasks left to train on")
    return tasks


def _opic_design(cohort: Cohort, subjects, tasks, cfg: TrainConfig, dtype, gain: float):
    n_v = cohort.n_vertices
    samples = [(s, t) for s in subjects for t in tasks]
    x = np.empty((len(samples), n_v, cohort.hemispheres * cohort.components + cohort.hemispheres), dtype=dtype)
    y = np.empty((len(samples), n_v, cohort.hemispheres), dtype=dtype)
    for i, (s, t) in enumerate(samples):
        if cfg.zero_gavg:
            gd = np.zeros((cohort.hemispheres, n_v))
        else:
            gd = cohort.group_averages[t].field.data
        x[i] = _opic_input(s.connectomes, gd, gain)
        y[i] = s.contrasts[t].data.T
    return samples, x, y


def _bsc_design(cohort: Cohort, subjects, tasks, dtype, gain: float):
    n_v = cohort.n_vertices
    x = np.empty((len(subjects), n_v, cohort.hemispheres * cohort.components), dtype=dtype)
    y = np.empty((len(subjects), n_v, cohort.hemispheres * len(tasks)), dtype=dtype)
    for i, s in enumerate(subjects):
        x[i] = s.feature_channels().T * gain
        y[i] = np.concatenate([s.contrasts[t].data for t in tasks], axis=0).T
    samples = [(s, None) for s in subjects]
    return samples, x, y


def _epoch_loss(model: _MeshUNet, x: np.ndarray, y: np.ndarray, batch: int) -> float:
    total, count = 0.0, 0
    for i in range(0, len(x), batch):
        xb, yb = x[i : i + batch], y[i : i + batch]
        pred = model.forward_batch(Tensor(xb))
        total += float(l2_loss(pred, yb).data) * len(xb)
        count += len(xb)
    return total / count


def train(model: _MeshUNet, cohort: Cohort, cfg: TrainConfig) -> TrainResult:
    """Mini-batch Adam training with best-validation-epoch checkpointing.

    Validation error is always the plain l2 loss on the validation subjects
    over the training task set, regardless of the training objective.
    """
    if isinstance(model, BscModel):
        tasks = model.tasks
        missing = set(tasks) - set(cohort.task_ids())
        if missing:
            raise DataError(f"cohort lacks tasks the model was built for: {sorted(missing)}")
    else:
        tasks = _training_tasks(cohort, cfg)
    if cfg.loss == "rc" and cfg.batch_size < 2:
        raise DataError("rc loss contrasts against other in-batch subjects; need batch_size >= 2")

    train_subjects = cohort.subjects_in("train")
    val_subjects = cohort.subjects_in("val")
    if not train_subjects:
        raise DataError("empty training split")
    dtype = model.config.np_dtype

    gain = model.config.feature_gain
    if isinstance(model, BscModel):
        samples, x, y = _bsc_design(cohort, train_subjects, tasks, dtype, gain)
        _, xv, yv = _bsc_design(cohort, val_subjects, tasks, dtype, gain) if val_subjects else (None, None, None)
    else:
        samples, x, y = _opic_design(cohort, train_subjects, tasks, cfg, dtype, gain)
        _, xv, yv = _opic_design(cohort, val_subjects, tasks, cfg, dtype, gain) if val_subjects else (None, None, None)

    lines = [
        f"event=start model={model.kind} loss={cfg.loss} epochs={cfg.epochs} "
        f"batch={cfg.batch_size} lr={cfg.lr} seed={cfg.seed} "
        f"holdout_group={cfg.holdout_group} holdout_tasks={','.join(cfg.holdout_tasks) or 'none'}",
        f"event=tasks train_tasks={','.join(tasks)}",
    ]
    lines += [f"event=sample subject={s.id} task={t if t else 'all'}" for s, t in samples]

    params = model.parameters()
    state = AdamState.for_params([p.data for p in params], lr=cfg.lr)
    shuffle_rng = _rng(cfg.seed, 11)
    dropout_rng = _rng(cfg.seed, 12)
    drop_gavg = cfg.gavg_dropout > 0 and isinstance(model, OpicModel)
    n_gavg = cohort.hemispheres
    history: list[dict] = []
    best = (np.inf, -1, None)

    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(len(x))
        total, seen = 0.0, 0
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            if drop_gavg:
                dropped = dropout_rng.random(len(idx)) < cfg.gavg_dropout
                if np.any(dropped):
                    xb[dropped, :, -n_gavg:] = 0.0
            pred = model.forward_batch(Tensor(xb))
            if cfg.loss == "rc" and len(idx) >= 2:
                parts = []
                for j in range(len(idx)):
                    own = yb[j : j + 1]
                    others = [yb[o : o + 1] for o in range(len(idx)) if o != j]
                    parts.append(rc_loss(slice_batch(pred, j), own, others,
                                         cfg.rc_alpha, cfg.rc_margin))
                loss = parts[0] * (1.0 / len(parts))
                for part in parts[1:]:
                    loss = loss + part * (1.0 / len(parts))
            else:
                loss = l2_loss(pred, yb)
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise NumericError(
                    f"{model.kind} training diverged at epoch {epoch}, batch {i // cfg.batch_size}: loss={lv}"
                )
            for p in params:
                p.grad = None
            backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            adam_step([p.data for p in params], grads, state)
            total += lv * len(idx)
            seen += len(idx)

        train_loss = total / seen
        val_loss = _epoch_loss(model, xv, yv, cfg.batch_size) if xv is not None else train_loss
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        lines.append(f"event=epoch epoch={epoch} split=train loss={train_loss:.8e} t={time.time():.3f}")
        lines.append(f"event=epoch epoch={epoch} split=val loss={val_loss:.8e} t={time.time():.3f}")
        if val_loss < best[0]:
            best = (val_loss, epoch, [p.data.copy() for p in params])

    if best[2] is not None:
        model.set_param_arrays(best[2])
    lines.append(f"event=done best_epoch={best[1]} best_val_loss={best[0]:.8e}")
    return TrainResult(model, history, lines, best[1], list(tasks))


# ---------------------------------------------------------------------------
# Leave-one-group-out protocol
# ---------------------------------------------------------------------------


@dataclass
class FoldPredictions:
    """Per-fold test-subject predictions with in/out-of-domain flags.

    `predictions` is keyed by (held-out group, subject id, task id);
    `in_domain[(fold_group, task)]` is False exactly when the task belongs to
    the fold's held-out group.
    """

    groups: list[str]
    subjects: list[str]
    tasks: list[str]
    predictions: dict = dataclass_field(default_factory=dict)
    in_domain: dict = dataclass_field(default_factory=dict)
    fold_results: dict = dataclass_field(default_factory=dict)

    def ood_prediction(self, sid: str, task: str, group: str) -> ChannelField:
        return self.predictions[(group, sid, task)]


def _fold_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence(entropy=master, spawn_key=(100, index)).generate_state(1)[0])


def predict_cohort(model: OpicModel, cohort: Cohort, subjects, tasks,
                   zero_gavg: bool = False) -> dict[tuple[str, str], ChannelField]:
    """Batched opic predictions for (subject, task) pairs."""
    n_v = cohort.n_vertices
    pairs = [(s, t) for s in subjects for t in tasks]
    x = np.empty((len(pairs), n_v, cohort.hemispheres * cohort.components + cohort.hemispheres),
                 dtype=model.config.np_dtype)
    for i, (s, t) in enumerate(pairs):
        gd = (np.zeros((cohort.hemispheres, n_v)) if zero_gavg
              else cohort.group_averages[t].field.data)
        x[i] = _opic_input(s.connectomes, gd, model.config.feature_gain)
    out = model.predict_batch(x)
    level = cohort.level
    return {
        (s.id, t): ChannelField(level, np.ascontiguousarray(out[i].T, dtype=np.float64))
        for i, (s, t) in enumerate(pairs)
    }


def logo_run(cohort: Cohort, cfg: TrainConfig, model_config: Optional[ModelConfig] = None
             ) -> FoldPredictions:
    """Train one fold per task group, each excluding that group, and predict
    every task for every test subject in every fold."""
    groups = cohort.groups()
    if len(groups) < 2:
        raise DataError("leave-one-group-out needs at least two task groups")
    if model_config is None:
        model_config = ModelConfig(hemispheres=cohort.hemispheres, components=cohort.components)
    test_subjects = cohort.subjects_in("test")
    fp = FoldPredictions(groups, [s.id for s in test_subjects], cohort.task_ids())

    for gi, group in enumerate(groups):
        fold_cfg = TrainConfig(
            epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
            seed=_fold_seed(cfg.seed, gi), holdout_group=group,
            holdout_tasks=cfg.holdout_tasks, loss=cfg.loss,
            rc_alpha=cfg.rc_alpha, rc_margin=cfg.rc_margin, zero_gavg=cfg.zero_gavg,
        )
        model = OpicModel(cohort.hierarchy, model_config, seed=fold_cfg.seed)
        result = train(model, cohort, fold_cfg)
        fp.fold_results[group] = result
        preds = predict_cohort(model, cohort, test_subjects, cohort.task_ids())
        for (sid, task), field in preds.items():
            fp.predictions[(group, sid, task)] = field
        for task in cohort.task_ids():
            fp.in_domain[(group, task)] = cohort.group_of(task) != group
        log.info("fold %s done: best epoch %d", group, result.best_epoch)
    return fp


def average_indomain_predictions(fp: FoldPredictions, subject: str, task: str) -> ChannelField:
    """Vertexwise mean of the predictions from folds where `task` was trained."""
    fields = [
        fp.predictions[(g, subject, task)]
        for g in fp.groups
        if fp.in_domain[(g, task)]
    ]
    if not fields:
        raise DataError(f"no in-domain folds for task {task!r}")
    return ChannelField(fields[0].level, np.mean([f.data for f in fields], axis=0))
