"""Fields on meshes, mesh convolution with exact gradients, losses, Adam.

Everything differentiable runs through a small reverse-mode tape (`Tensor`):
each operation records its parents and a closure that pushes the incoming
gradient back to them.  The op set is deliberately tiny -- exactly what the
prediction networks need -- and every op's adjoint is exact, which is what
lets `grad_check` hold the whole stack to finite-difference agreement.

Internally tensors are batched channels-last, shape (B, V, C): gathers along
the vertex axis then move contiguous channel rows, which is what makes the
convolution a single GEMM per layer.  The public `ChannelField` type keeps
the (C, V) channel-major convention used everywhere else in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .mesh import Mesh, MeshHierarchy, TransferTables, conv_tables, pool_tables, unpool_tables

__all__ = [
    "ChannelField",
    "ConvParams",
    "Tensor",
    "AdamState",
    "mesh_conv",
    "mesh_pool",
    "mesh_unpool",
    "l2_loss",
    "rc_loss",
    "backward",
    "adam_step",
    "grad_check",
    "glorot_conv_params",
    "relu",
    "concat_channels",
    "slice_batch",
    "slice_channels",
    "channel_scale",
    "conv_op",
    "pool_op",
    "unpool_op",
]


@dataclass
class ChannelField:
    """A C x V real field on one mesh level, channel-major."""

    level: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data))
        if self.data.ndim != 2:
            raise ValueError(f"ChannelField data must be (C, V), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("ChannelField contains non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------


class Tensor:
    """Array node in the reverse-mode graph.

    A scalar loss Tensor carries, through its graph, the gradient hook to
    every parameter that contributed to it; `backward` fills their ``.grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, parents=(), bwd=None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(parents)
        self._bwd: Callable[[np.ndarray], None] | None = bwd
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)

    @property
    def value(self) -> float:
        return float(self.data)

    def __add__(self, other: "Tensor") -> "Tensor":
        out_data = self.data + other.data

        def bwd(g):
            _accum(self, g)
            _accum(other, g)

        return Tensor(out_data, parents=(self, other), bwd=bwd)

    def __mul__(self, c: float) -> "Tensor":
        c = float(c)

        def bwd(g):
            _accum(self, g * c)

        return Tensor(self.data * c, parents=(self,), bwd=bwd)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` on every tensor the scalar loss depends on."""
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not np.isfinite(loss.data):
        raise NumericError("non-finite loss; refusing to backpropagate")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._bwd is not None and node.grad is not None and node.requires_grad:
            node._bwd(node.grad)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out_data = np.where(mask, x.data, x.data.dtype.type(0))

    def bwd(g):
        _accum(x, g * mask)

    return Tensor(out_data, parents=(x,), bwd=bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the trailing (channel) axis."""
    na = a.data.shape[-1]
    out_data = np.concatenate([a.data, b.data], axis=-1)

    def bwd(g):
        _accum(a, g[..., :na])
        _accum(b, g[..., na:])

    return Tensor(out_data, parents=(a, b), bwd=bwd)


def slice_batch(t: Tensor, j: int) -> Tensor:
    """Select sample j of a batched tensor, keeping the batch axis."""
    out_data = t.data[j : j + 1]

    def bwd(g):
        full = np.zeros_like(t.data)
        full[j : j + 1] = g
        _accum(t, full)

    return Tensor(out_data, parents=(t,), bwd=bwd)


def slice_channels(t: Tensor, start: int, stop: int) -> Tensor:
    """Select a trailing-axis channel block."""
    out_data = t.data[..., start:stop]

    def bwd(g):
        full = np.zeros_like(t.data)
        full[..., start:stop] = g
        _accum(t, full)

    return Tensor(out_data, parents=(t,), bwd=bwd)


def channel_scale(t: Tensor, gain: Tensor) -> Tensor:
    """Multiply each trailing-axis channel by a learned scalar."""
    out_data = t.data * gain.data.astype(t.data.dtype, copy=False)

    def bwd(g):
        _accum(gain, np.sum(g * t.data, axis=tuple(range(g.ndim - 1))).astype(gain.data.dtype, copy=False))
        _accum(t, g * gain.data.astype(g.dtype, copy=False))

    return Tensor(out_data, parents=(t, gain), bwd=bwd)


# ---------------------------------------------------------------------------
# Mesh convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    """7-tap ring convolution weights: taps (out, in, 7) and bias (out,).

    Tap 0 multiplies the center vertex, taps 1..6 the ordered ring;
    pentagonal vertices re-read the center value for the missing 7th tap.
    """

    taps: Tensor
    bias: Tensor

    def __post_init__(self):
        if not isinstance(self.taps, Tensor):
            self.taps = Tensor(np.asarray(self.taps), requires_grad=True)
        if not isinstance(self.bias, Tensor):
            self.bias = Tensor(np.asarray(self.bias), requires_grad=True)
        t, b = self.taps.data, self.bias.data
        if t.ndim != 3 or t.shape[2] != 7:
            raise ValueError(f"taps must be (out, in, 7), got {t.shape}")
        if b.shape != (t.shape[0],):
            raise ValueError(f"bias must be ({t.shape[0]},), got {b.shape}")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(b))):
            raise ValueError("non-finite convolution parameters")

    @property
    def in_channels(self) -> int:
        return self.taps.data.shape[1]

    @property
    def out_channels(self) -> int:
        return self.taps.data.shape[0]

    @property
    def tensors(self) -> tuple[Tensor, Tensor]:
        return (self.taps, self.bias)


def glorot_conv_params(in_channels: int, out_channels: int, rng: np.random.Generator,
                       dtype=np.float32) -> ConvParams:
    # uniform +-sqrt(6 / (fan_in + fan_out)) with fan counted over all 7 taps
    bound = np.sqrt(6.0 / (7 * in_channels + 7 * out_channels))
    taps = rng.uniform(-bound, bound, size=(out_channels, in_channels, 7)).astype(dtype)
    bias = np.zeros(out_channels, dtype=dtype)
    return ConvParams(Tensor(taps, requires_grad=True), Tensor(bias, requires_grad=True))


def conv_op(x: Tensor, params: ConvParams, mesh: Mesh) -> Tensor:
    """Batched ring convolution: x (B, V, Cin) -> (B, V, Cout).

    Implemented tap by tap so no intermediate ever exceeds (B, V, C); the
    7-fold-gathered layout would fall out of cache on desk-scale meshes.
    """
    tables = conv_tables(mesh)
    xd = x.data
    b, v, ci = xd.shape
    if v != mesh.n_vertices:
        raise ValueError(f"field has {v} vertices, mesh has {mesh.n_vertices}")
    if ci != params.in_channels:
        raise ValueError(f"field has {ci} channels, kernel expects {params.in_channels}")
    taps, bias = params.taps, params.bias
    co = params.out_channels

    w = np.ascontiguousarray(taps.data.transpose(2, 1, 0), dtype=xd.dtype)  # (7, ci, co)
    x2 = xd.reshape(b * v, ci)
    out_data = (x2 @ w[0]).reshape(b, v, co)
    for k in range(1, 7):
        xk = xd[:, tables.tap[:, k], :].reshape(b * v, ci)
        out_data += (xk @ w[k]).reshape(b, v, co)
    out_data += bias.data.astype(xd.dtype, copy=False)

    def bwd(g):
        g2 = np.ascontiguousarray(g).reshape(b * v, co)
        dw = np.empty_like(w)
        dw[0] = x2.T @ g2
        for k in range(1, 7):
            xk = xd[:, tables.tap[:, k], :].reshape(b * v, ci)
            dw[k] = xk.T @ g2
        _accum(taps, dw.transpose(2, 1, 0).astype(taps.data.dtype, copy=False))
        _accum(bias, g2.sum(axis=0).astype(bias.data.dtype, copy=False))
        if x.requires_grad:
            y = np.empty((b, 7 * v, ci), dtype=g2.dtype)
            for k in range(7):
                y[:, k * v : (k + 1) * v, :] = (g2 @ w[k].T).reshape(b, v, ci)
            dx = y[:, tables.inv_src[:, 0], :].copy()
            for j in range(1, 7):
                dx += y[:, tables.inv_src[:, j], :]
            _accum(x, dx)

    return Tensor(out_data, parents=(x, taps, bias), bwd=bwd)


def _transfer_op(x: Tensor, tables: TransferTables) -> Tensor:
    """Weighted vertex gather shared by pool and unpool; exact adjoint."""
    xd = x.data
    fwd_w = tables.weight.astype(xd.dtype, copy=False)
    out_data = xd[:, tables.idx[:, 0], :] * fwd_w[:, 0][None, :, None]
    for k in range(1, tables.idx.shape[1]):
        if not np.any(fwd_w[:, k]):
            continue
        out_data += xd[:, tables.idx[:, k], :] * fwd_w[:, k][None, :, None]

    def bwd(g):
        inv_w = tables.inv_weight.astype(g.dtype, copy=False)
        dx = g[:, tables.inv_idx[:, 0], :] * inv_w[:, 0][None, :, None]
        for k in range(1, tables.inv_idx.shape[1]):
            dx += g[:, tables.inv_idx[:, k], :] * inv_w[:, k][None, :, None]
        _accum(x, dx)

    return Tensor(out_data, parents=(x,), bwd=bwd)


def pool_op(x: Tensor, h: MeshHierarchy, fine_level: int) -> Tensor:
    return _transfer_op(x, pool_tables(h, fine_level))


def unpool_op(x: Tensor, h: MeshHierarchy, coarse_level: int) -> Tensor:
    return _transfer_op(x, unpool_tables(h, coarse_level))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, ChannelField):
        return Tensor(x.data)
    return Tensor(np.asarray(x))


def l2_loss(pred, target) -> Tensor:
    """Mean squared difference over all entries; the training objective."""
    pred_t = _as_tensor(pred)
    target_d = target.data if isinstance(target, (Tensor, ChannelField)) else np.asarray(target)
    if pred_t.data.shape != target_d.shape:
        raise ValueError(f"shape mismatch: {pred_t.data.shape} vs {target_d.shape}")
    diff = pred_t.data - target_d
    n = diff.size
    out_data = np.float64(np.mean(diff * diff, dtype=np.float64))

    def bwd(g):
        _accum(pred_t, (float(g) * 2.0 / n) * diff)

    return Tensor(out_data, parents=(pred_t,), bwd=bwd)


def rc_loss(pred, own_target, other_targets: Sequence, alpha: float = 0.5,
            margin: float = 1.0) -> Tensor:
    """Reconstruct-and-contrast objective.

    alpha * l_same + (1 - alpha) * max(0, margin + l_same - l_diff), where
    l_same is the l2 loss to the subject's own map and l_diff the mean l2
    loss to the other subjects' maps.  With alpha = 1 this is exactly the
    plain l2 loss.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    others = list(other_targets)
    if not others:
        raise ValueError("rc_loss needs at least one other-subject target")
    pred_t = _as_tensor(pred)
    l_same = l2_loss(pred_t, own_target)
    l_diff = l2_loss(pred_t, others[0]) * (1.0 / len(others))
    for tgt in others[1:]:
        l_diff = l_diff + l2_loss(pred_t, tgt) * (1.0 / len(others))
    hinge = relu(l_same + l_diff * -1.0 + Tensor(np.float64(margin)))
    return l_same * alpha + hinge * (1.0 - alpha)


# ---------------------------------------------------------------------------
# Public single-field mesh ops (spec surface; pure functions)
# ---------------------------------------------------------------------------


def _batched(x: ChannelField) -> Tensor:
    return Tensor(np.ascontiguousarray(x.data.T)[None, :, :])


def _unbatched(t: Tensor, level: int) -> ChannelField:
    return ChannelField(level, np.ascontiguousarray(t.data[0].T))


def mesh_conv(x: ChannelField, p: ConvParams, mesh: Mesh) -> ChannelField:
    if x.level != mesh.level:
        raise ValueError(f"field level {x.level} != mesh level {mesh.level}")
    return _unbatched(conv_op(_batched(x), p, mesh), x.level)


def mesh_pool(x: ChannelField, h: MeshHierarchy) -> ChannelField:
    if x.level <= h.levels[0].level:
        raise ValueError(f"cannot pool below level {h.levels[0].level}")
    return _unbatched(pool_op(_batched(x), h, x.level), x.level - 1)


def mesh_unpool(x: ChannelField, h: MeshHierarchy) -> ChannelField:
    if x.level >= h.max_level:
        raise ValueError(f"already at finest level {h.max_level}")
    return _unbatched(unpool_op(_batched(x), h, x.level), x.level + 1)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam moments, one pair per parameter array."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: list = dataclass_field(default_factory=list)
    second_moment: list = dataclass_field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float, **kw) -> "AdamState":
        st = cls(lr=lr, **kw)
        st.first_moment = [np.zeros_like(p) for p in params]
        st.second_moment = [np.zeros_like(p) for p in params]
        return st


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[Sequence[np.ndarray], AdamState]:
    """One Adam update.  Mutates params and state in place and returns them."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("params/grads/state length mismatch")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(forward: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Max relative disagreement between analytic and central-difference grads.

    `forward` must rebuild the graph from the current parameter values on
    every call.  Relative error per entry is
    |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    Run in float64: central differences at float32 are meaningless.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")

    loss = forward()
    if not np.isfinite(loss.data):
        raise NumericError("non-finite forward pass in grad_check")
    for p in params:
        p.grad = None
    backward(loss)

    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else np.ascontiguousarray(p.grad)
        for i in range(p.data.size):
            idx = np.unravel_index(i, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + eps
            f_plus = float(forward().data)
            p.data[idx] = orig - eps
            f_minus = float(forward().data)
            p.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
