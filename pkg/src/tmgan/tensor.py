"""Minimal dense-tensor engine with reverse-mode differentiation.

Only the handful of primitives the generator, discriminator and losses need
are provided. Operations record themselves on the active :class:`Tape` when
any input is a trainable leaf or was itself produced on that tape; calling
:func:`backward` replays the tape in reverse.

Shapes are never broadcast implicitly. Every mismatch raises ``ValueError``.
"""

from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_local = threading.local()

PRECISIONS = {"test64": np.float64, "train32": np.float32}


def dtype_for(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None


class Tensor:
    """Dense float array plus the bookkeeping needed for differentiation."""

    __slots__ = ("data", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._tape = None  # weakref to the recording tape; a strong ref would form a cycle

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -other)

    def __rsub__(self, other):
        return add_const(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_const(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _not_scalar(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; operations performed inside the block are
    recorded. A tape belongs to one thread at a time.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def __len__(self):
        return len(self.records)

    def watches(self, t: Tensor) -> bool:
        return t.requires_grad or (t._tape is not None and t._tape() is self)


def active_tape() -> Optional[Tape]:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def custom_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out_data`` as the result of an operation on ``inputs``.

    ``backward(grad_out)`` must return one gradient (or None) per input.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(tape.watches(t) for t in inputs):
        out._tape = weakref.ref(tape)
        tape.records.append(_Record(out, tuple(inputs), backward))
    return out


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each of ``params``.

    Parameters that did not take part in computing ``loss`` receive zeros.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not tape.watches(inp):
                continue
            k = id(inp)
            grads[k] = grads[k] + gi if k in grads else gi
    out = []
    for p in params:
        g = grads.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _require_finite(op: str, x: np.ndarray):
    if not np.isfinite(x).all():
        raise ValueError(f"{op}: non-finite input")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return custom_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,))


def add_const(a: Tensor, c: float) -> Tensor:
    return custom_op(a.data + a.dtype.type(c), (a,), lambda g: (g,))


def mul_const(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return custom_op(a.data * c, (a,), lambda g: (g * c,))


def scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``a`` by the single-element tensor ``s``."""
    if s.size != 1:
        raise ValueError(f"scale: factor must have one element, got shape {s.shape}")
    sv = s.data.reshape(())
    ad = a.data
    return custom_op(ad * sv, (a, s), lambda g: (g * sv, np.sum(g * ad).reshape(s.shape)))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return custom_op(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    x = a.data
    return custom_op(np.log(x), (a,), lambda g: (g / x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return custom_op(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return custom_op(x * x, (a,), lambda g: (2 * g * x,))


def relu(a: Tensor) -> Tensor:
    _require_finite("relu", a.data)
    mask = a.data > 0
    return custom_op(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0 < slope < 1:
        raise ValueError(f"leaky_relu: slope must lie in (0, 1), got {slope}")
    _require_finite("leaky_relu", a.data)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return custom_op(a.data * factor, (a,), lambda g: (g * factor,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # saturated values round to exactly 0 or 1; keep them strictly inside
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg)


def sigmoid(a: Tensor) -> Tensor:
    _require_finite("sigmoid", a.data)
    y = _sigmoid(a.data)
    return custom_op(y, (a,), lambda g: (g * y * (1 - y),))


def activation(a: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- reductions / reshapes


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis)
    if axis is None:
        return custom_op(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return custom_op(out, (a,), bw)


def mean(a: Tensor) -> Tensor:
    return mul_const(sum_(a), 1.0 / a.size)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def global_avg_pool(a: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    if a.data.ndim != 4:
        raise ValueError(f"global_avg_pool expects 4-D input, got shape {a.shape}")
    n, c, h, w = a.shape
    out = a.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy(),)

    return custom_op(out, (a,), bw)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """[N, F] @ [F, O] + [O]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"dense: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    xd, wd = x.data, w.data
    return custom_op(xd @ wd + b.data, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    x: [N, C_in, H, W], w: [C_out, C_in, kH, kW], b: [C_out].
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {ci}")
    if b.shape != (co,):
        raise ValueError(f"conv2d: bias shape {b.shape} does not match {co} output channels")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} or padding={padding}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    # channels-last im2col: one contiguous [N*Ho*Wo, kH*kW*C] matrix, one GEMM
    xh = x.data.transpose(0, 2, 3, 1)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xh = np.ascontiguousarray(xh)
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.concatenate([xh[:, i:i + hs:stride, j:j + ws:stride, :] for i, j in taps], axis=-1)
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wmat = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0)).reshape(kh * kw * c, co)
    out = (cols @ wmat).reshape(n, ho, wo, co) + b.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    tape = active_tape()
    need_x = tape is not None and tape.watches(x)

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
        gw = (cols.T @ gm).reshape(kh, kw, c, co).transpose(3, 2, 0, 1)
        gb = gm.sum(axis=0)
        if not need_x:
            return None, np.ascontiguousarray(gw), gb
        gcols = (gm @ wmat.T).reshape(n, ho, wo, kh * kw, c)
        gxh = np.zeros(xh.shape, dtype=g.dtype)
        for t, (i, j) in enumerate(taps):
            gxh[:, i:i + hs:stride, j:j + ws:stride, :] += gcols[:, :, :, t, :]
        if padding:
            gxh = gxh[:, padding:padding + h, padding:padding + wd, :]
        return np.ascontiguousarray(gxh.transpose(0, 3, 1, 2)), np.ascontiguousarray(gw), gb

    return custom_op(out, (x, w, b), bw)


# ---------------------------------------------------------------- normalization


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, scale_: Tensor, shift: Tensor, mode: str, stats: RunningStats,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of [N, C, H, W] input.

    Train mode normalizes with batch statistics and updates ``stats`` in place;
    eval mode uses ``stats``.
    """
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm expects 4-D input, got shape {x.shape}")
    n, c, h, w = x.shape
    if scale_.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"batch_norm: scale/shift must have shape ({c},)")
    xd = x.data
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError("batch_norm: train mode needs at least two values per channel")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        stats.mean[...] = (1 - stats.momentum) * stats.mean + stats.momentum * mu
        stats.var[...] = (1 - stats.momentum) * stats.var + stats.momentum * var * m / (m - 1)
    elif mode == "eval":
        mu, var = stats.mean, stats.var
    else:
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    gam = scale_.data
    out = xhat * gam[None, :, None, None] + shift.data[None, :, None, None]

    def bw(g):
        gshift = g.sum(axis=(0, 2, 3))
        gscale = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gam[None, :, None, None]
        if mode == "eval":
            gx = gxhat * inv[None, :, None, None]
        else:
            m = n * h * w
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        return gx, gscale, gshift

    return custom_op(out, (x, scale_, shift), bw)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Raises ``ValueError`` (leaving everything untouched) on a non-finite gradient.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("adam_step: params, grads and state have different lengths")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"adam_step: shape mismatch {p.shape} / {g.shape} / {m.shape}")
        if not np.isfinite(g).all():
            raise ValueError("adam_step: non-finite gradient")
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    state.step = t
    return params, state


class Adam:
    """Adam over a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, state: Optional[AdamState] = None):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = state if state is not None else AdamState.zeros_like(self.params)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    probes: int
    worst: Optional[tuple] = None


def finite_diff_check(fn: Callable[[], Tensor], params: Sequence[Tensor], probe_count: int = 50,
                      h: float = 1e-5, tolerance: float = 1e-4, seed: int = 0,
                      abs_floor: float = 1e-7) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` with central differences.

    ``fn`` must be deterministic and read ``params`` through their ``data``
    arrays. Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    params = list(params)
    with Tape() as tape:
        loss = fn()
    analytic = backward(tape, loss, params)

    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params], dtype=float)
    worst, worst_at = 0.0, None
    for _ in range(probe_count):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        idx = int(rng.integers(params[k].size))
        flat = params[k].data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        up = float(fn().data)
        flat[idx] = orig - h
        down = float(fn().data)
        flat[idx] = orig
        numeric = (up - down) / (2 * h)
        a = float(analytic[k].reshape(-1)[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
        if err > worst or worst_at is None:
            worst, worst_at = err, (k, idx, a, numeric)
    return GradCheckReport(worst, bool(worst < tolerance), probe_count, worst_at)
