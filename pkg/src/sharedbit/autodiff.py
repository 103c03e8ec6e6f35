"""Define-by-run reverse-mode autodiff over numpy arrays.

Operations executed inside an active :class:`Tape` are recorded with a
backward rule; outside a tape they simply compute values. Parameters and
activations are float32 by default, reductions accumulate in float64.
Passing float64 arrays keeps the whole computation in float64, which is
what the finite-difference tests use.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Op",
    "ShapeError",
    "NonFiniteError",
    "MissingGradError",
    "backward",
    "record_primitive",
    "no_grad_value",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv2d",
    "relu",
    "maximum",
    "abs_",
    "sqrt",
    "reshape",
    "sum_",
    "mean",
    "channel_mean",
    "channel_var",
    "batchnorm",
    "softmax_cross_entropy",
    "ste_round",
    "round_half_away",
    "detach",
    "SGD",
    "cosine_lr",
]


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a tensor would hold NaN or Inf."""


class MissingGradError(RuntimeError):
    """Raised when the optimizer is asked to step a parameter without a gradient."""


_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _as_float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense array with an optional gradient.

    ``data`` is never mutated in place once the tensor has been used by a
    recorded operation; optimizers swap in a new array instead.
    """

    __slots__ = ("data", "requires_grad", "grad", "_op", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = _as_float_array(data)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} holds non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._op: Optional[Op] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass(eq=False)
class Op:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of operations; use as a context manager.

    Ops are appended in execution order, so every op's inputs were produced
    by earlier entries (or are leaves). Not thread-safe; one tape per worker.
    """

    def __init__(self):
        self.ops: list[Op] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.ops)

    def backward(self, loss: Tensor) -> dict:
        return backward(loss, self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _check_finite(kind: str, value: np.ndarray) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{kind} produced non-finite values")


def _emit(kind: str, value: np.ndarray, inputs: tuple, rule) -> Tensor:
    _check_finite(kind, value)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out._op = None
    out.name = None
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        op = Op(kind, inputs, out, rule)
        out._op = op
        tape.ops.append(op)
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> dict:
    """Backpropagate from a scalar ``loss``.

    Gradients of leaf tensors with ``requires_grad`` are *added* to their
    ``.grad`` so several backward calls accumulate. Returns a dict mapping
    each reached leaf to the gradient contributed by this call.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape is None:
        tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward: no tape recorded this loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss._op is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for op in reversed(tape.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        in_grads = op.backward(g)
        for inp, gi in zip(op.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp._op is None:
                leaves[key] = inp
    out = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.astype(leaf.data.dtype, copy=False).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


def detach(x: Tensor) -> Tensor:
    """A constant copy of ``x`` that blocks gradient flow."""
    t = Tensor.__new__(Tensor)
    t.data = x.data
    t.requires_grad = False
    t.grad = None
    t._op = None
    t.name = x.name
    return t


def no_grad_value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# elementwise arithmetic with broadcasting


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", a.data * b.data, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise NonFiniteError("div: division by zero")

    def rule(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("div", a.data / b.data, (a, b), rule)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def maximum(x: Tensor, s: float) -> Tensor:
    """Elementwise ``max(x, s)`` for a constant scalar ``s``."""
    mask = x.data > s
    value = np.where(mask, x.data, np.asarray(s, dtype=x.dtype))
    return _emit("max_scalar", value, (x,), lambda g: (g * mask,))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _emit("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NonFiniteError("sqrt: negative input")
    r = np.sqrt(x.data)

    def rule(g):
        return (g * 0.5 / r,)

    return _emit("sqrt", r, (x,), rule)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        value = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _emit("reshape", value, (x,), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)


def sum_(x: Tensor, axis=None) -> Tensor:
    value = np.sum(x.data, axis=axis, dtype=np.float64).astype(x.dtype)

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _emit("sum", np.asarray(value), (x,), rule)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    value = np.mean(x.data, axis=axis, dtype=np.float64).astype(x.dtype)

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / n).astype(x.dtype),)

    return _emit("mean", np.asarray(value), (x,), rule)


def _channel_axes(x: Tensor, kind: str) -> tuple:
    if x.ndim < 2:
        raise ShapeError(f"{kind}: need a channel axis, got shape {x.shape}")
    return (0,) + tuple(range(2, x.ndim))


def channel_mean(x: Tensor) -> Tensor:
    """Per-channel mean over batch and spatial axes, kept broadcastable."""
    axes = _channel_axes(x, "channel_mean")
    n = x.size // x.shape[1]
    value = np.mean(x.data, axis=axes, dtype=np.float64, keepdims=True).astype(x.dtype)

    def rule(g):
        return ((np.broadcast_to(g, x.shape) / n).astype(x.dtype),)

    return _emit("channel_mean", value, (x,), rule)


def channel_var(x: Tensor) -> Tensor:
    """Per-channel biased variance over batch and spatial axes."""
    axes = _channel_axes(x, "channel_var")
    n = x.size // x.shape[1]
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=axes, keepdims=True)
    centered = x64 - mu
    value = (centered**2).mean(axis=axes, keepdims=True).astype(x.dtype)

    def rule(g):
        return ((2.0 / n) * centered * g).astype(x.dtype),

    return _emit("channel_var", value, (x,), rule)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", a.data @ b.data, (a, b), rule)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and (out, in, kh, kw) kernel."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh, ow = _conv_out(h, kh, stride, padding), _conv_out(wd, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    out = np.tensordot(cols, w.data, axes=([1, 2, 3], [1, 2, 3]))  # n, oh, ow, o
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def rule(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        gcols = np.tensordot(g, w.data, axes=([1], [0]))  # n, oh, ow, c, kh, kw
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw

    return _emit("conv2d", out, (x, w), rule)


# ---------------------------------------------------------------------------
# normalization and loss


def batchnorm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    eps: float = 1e-5,
    stats: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel batch normalization.

    With ``stats=None`` the batch mean/biased variance are used and
    differentiated through; otherwise the given (mean, var) are constants.
    Returns the output together with the mean and variance that were used.
    """
    axes = _channel_axes(x, "batchnorm")
    c = x.shape[1]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"batchnorm: affine shapes {weight.shape}, {bias.shape} for {c} channels")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    x64 = x.data.astype(np.float64)
    if stats is None:
        mu = x64.mean(axis=axes)
        var = ((x64 - mu.reshape(bshape)) ** 2).mean(axis=axes)
    else:
        mu, var = (np.asarray(s, dtype=np.float64) for s in stats)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu.reshape(bshape)) * inv.reshape(bshape)
    out = (xhat * weight.data.reshape(bshape) + bias.data.reshape(bshape)).astype(x.dtype)
    n = x.size // c
    batch_stats = stats is None

    def rule(g):
        g64 = g.astype(np.float64)
        gb = g64.sum(axis=axes)
        gw = (g64 * xhat).sum(axis=axes)
        gxhat = g64 * weight.data.reshape(bshape)
        if batch_stats:
            gx = (
                inv.reshape(bshape)
                / n
                * (
                    n * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx.astype(x.dtype), gw.astype(weight.dtype), gb.astype(bias.dtype)

    return _emit("batchnorm", out, (x, weight, bias), rule), mu, var


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def rule(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((p * (float(g) / n)).astype(logits.dtype),)

    return _emit("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), rule)


# ---------------------------------------------------------------------------
# rounding


def round_half_away(z: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (numpy rounds to even)."""
    return np.sign(z) * np.floor(np.abs(z) + 0.5)


def ste_round(x: Tensor) -> Tensor:
    """Round-to-nearest forward, identity backward."""
    return _emit("ste_round", round_half_away(x.data).astype(x.dtype), (x,), lambda g: (g,))


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "max_scalar": maximum,
    "abs": abs_,
    "sqrt": sqrt,
    "reshape": reshape,
    "sum": sum_,
    "mean": mean,
    "channel_mean": channel_mean,
    "channel_var": channel_var,
    "batchnorm": batchnorm,
    "softmax_cross_entropy": softmax_cross_entropy,
    "ste_round": ste_round,
}


def record_primitive(kind: str, *inputs, **attrs):
    """Dispatch a primitive by name, e.g. ``record_primitive("conv2d", x, w, padding=1)``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; known: {sorted(_PRIMITIVES)}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# optimization


class SGD:
    """SGD with momentum and coupled L2 weight decay.

    ``v <- m*v + g + wd*mult*p`` and ``p <- p - lr*v`` where ``mult`` is a
    per-parameter decay multiplier (default 1) supplied at each step.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {id(p): np.zeros_like(p.data) for p in self.params}
        self.step_count = 0

    def step(self, params: Optional[Iterable[Tensor]] = None, decay_multipliers: Optional[dict] = None) -> None:
        params = self.params if params is None else list(params)
        decay_multipliers = decay_multipliers or {}
        for p in params:
            if p.grad is None:
                raise MissingGradError(f"parameter {p.name or p!r} has no gradient")
        for p in params:
            buf = self.buffers.get(id(p))
            if buf is None:
                raise KeyError(f"parameter {p.name or p!r} is not managed by this optimizer")
            d = p.grad
            mult = decay_multipliers.get(p, 1.0)
            if self.weight_decay and mult:
                d = d + (self.weight_decay * mult) * p.data
            if self.momentum:
                buf = self.momentum * buf + d
            else:
                buf = d
            self.buffers[id(p)] = buf.astype(p.dtype, copy=False)
            p.data = (p.data - self.lr * buf).astype(p.dtype, copy=False)
        self.step_count += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> list[np.ndarray]:
        return [self.buffers[id(p)] for p in self.params]

    def load_state_arrays(self, arrays: Sequence[np.ndarray], step_count: int) -> None:
        for p, a in zip(self.params, arrays, strict=True):
            self.buffers[id(p)] = np.array(a, dtype=p.dtype).reshape(p.shape)
        self.step_count = step_count


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Linear warm-up to ``base_lr`` then cosine decay to zero at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("cosine_lr: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    warmup_steps = min(warmup_steps, total_steps)
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span == 0:
        return base_lr
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
