"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the vocabulary needed by the level estimator, the auto-encoder and the
two recording-factor losses is provided.  Operations executed while a
:class:`Tape` is active (and that touch at least one tensor requiring a
gradient) are recorded; :func:`backward` replays the tape in reverse.

Example::

    w = Parameter(np.array([1.0, 2.0]), name="w")
    with Tape():
        loss = sum_(square(w))
    backward(loss)
    w.grad  # -> array([2., 4.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "square",
    "sqrt",
    "exp",
    "log",
    "relu",
    "softplus",
    "clip",
    "sum_",
    "mean",
    "dot",
    "dense",
    "conv1d",
    "concat",
    "take",
    "reshape",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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


class Parameter(Tensor):
    """Trainable leaf tensor; ``grad`` accumulates across backward calls."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str = "param"):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so operands always precede
    their consumers.  A fresh tape is meant to be used for every forward pass.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(op, inputs, out, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable :class:`Parameter`."""
    if loss.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss was not produced through an active Tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    # locate the loss node; everything after it cannot contribute
    end = len(tape.nodes)
    while end > 0 and tape.nodes[end - 1].output is not loss:
        end -= 1
    if end == 0:
        raise ValueError("loss is not recorded on its tape")
    for node in reversed(tape.nodes[:end]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                inp.grad = inp.grad + gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a, b)
    return _record(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("sub", a, b)
    return _record(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("mul", a, b)
    return _record(
        "mul", (a, b), a.data * b.data,
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("div", a, b)
    out = a.data / b.data
    return _record(
        "div", (a, b), out,
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record("sqrt", (a,), out, lambda g: (0.5 * g / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _record("relu", (a,), out, lambda g: (g * (out > 0.0),))


def softplus(a) -> Tensor:
    """ln(1 + e^x), evaluated without overflow; derivative is the logistic."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        # logistic via exp(x - softplus(x)) stays finite for any x
        return (g * np.exp(a.data - out),)

    return _record("softplus", (a,), out, vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


# ----------------------------------------------------------------- reductions


def sum_(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), out, vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def dot(a, b) -> Tensor:
    """Scalar product along the last axis (batched over leading axes)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} differ")
    out = np.einsum("...t,...t->...", a.data, b.data)
    return _record(
        "dot", (a, b), out,
        lambda g: (
            g[..., None] * b.data if a.requires_grad else None,
            g[..., None] * a.data if b.requires_grad else None,
        ),
    )


# --------------------------------------------------------------------- layers


def _affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    lead = x.shape[:-1]
    out = x.reshape(-1, x.shape[-1]) @ w
    out += b
    return out.reshape(*lead, w.shape[1])


def dense(x, w, b) -> Tensor:
    """x[..., in] @ w[in, out] + b[out]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(
            f"dense: input {x.shape} incompatible with weights {w.shape} / bias {b.shape}"
        )
    out = _affine(x.data, w.data, b.data)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _record("dense", (x, w, b), out, vjp)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """``[..., T, C] -> [..., T, k*C]`` with edge-replicated neighbours."""
    frames, half = x.shape[-2], k // 2
    cols = np.empty((*x.shape[:-2], frames, k, x.shape[-1]))
    for j in range(k):
        o = j - half
        n = min(abs(o), frames)
        if o < 0:
            cols[..., n:, j, :] = x[..., :frames - n, :]
            cols[..., :n, j, :] = x[..., :1, :]
        elif o > 0:
            cols[..., :frames - n, j, :] = x[..., n:, :]
            cols[..., frames - n:, j, :] = x[..., -1:, :]
        else:
            cols[..., j, :] = x
    return cols.reshape(*x.shape[:-2], frames, k * x.shape[-1])


def conv1d(x, w, b, activation: str | None = None) -> Tensor:
    """Same-length 1-d convolution over frames with edge replication.

    ``x`` is ``[frames, in]`` or ``[batch, frames, in]``; ``w`` is
    ``[k, in, out]`` with odd ``k``.  Output frame ``t`` reads input frames
    ``t - k//2 .. t + k//2`` with indices clamped to the sequence.
    ``activation="relu"`` fuses a relu into the same node, which is
    numerically identical to ``relu(conv1d(...))`` but saves a pass.
    """
    if activation not in (None, "relu"):
        raise ValueError(f"unsupported activation {activation!r}")
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.data.ndim != 3 or x.data.ndim not in (2, 3):
        raise ShapeError(f"conv1d: input {x.shape} / weights {w.shape} have wrong rank")
    k, cin, cout = w.shape
    if k % 2 == 0:
        raise ShapeError(f"conv1d: kernel size must be odd, weights {w.shape}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d: input {x.shape} does not match weights {w.shape}")
    if b.shape != (cout,):
        raise ShapeError(f"conv1d: bias {b.shape} does not match weights {w.shape}")
    frames = x.shape[-2]
    if frames < 1:
        raise ShapeError(f"conv1d: input {x.shape} has no frames")
    half = k // 2

    cols = x.data if k == 1 else _im2col(x.data, k)
    wm = w.data.reshape(k * cin, cout)
    out = _affine(cols, wm, b.data)
    if activation == "relu":
        np.maximum(out, 0.0, out=out)

    def vjp(g):
        if activation == "relu":
            g = g * (out > 0.0).view(np.uint8)
        g2 = g.reshape(-1, cout)
        # (g^T x)^T runs faster than x^T g for the wide im2col matrices
        gw = (g2.T @ cols.reshape(-1, k * cin)).T.reshape(w.shape) if w.requires_grad else None
        gb = np.ones(g2.shape[0]) @ g2 if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wm.T).reshape(*x.shape[:-2], frames, k, cin)
            if k == 1:
                gx = gcols[..., 0, :]
            else:
                gpad = np.zeros((*x.shape[:-2], frames + 2 * half, cin))
                for j in range(k):
                    gpad[..., j:j + frames, :] += gcols[..., j, :]
                gx = gpad[..., half:half + frames, :].copy()
                gx[..., 0, :] += gpad[..., :half, :].sum(axis=-2)
                gx[..., -1, :] += gpad[..., half + frames:, :].sum(axis=-2)
        return gx, gw, gb

    return _record("conv1d" if activation is None else "conv1d_relu", (x, w, b), out, vjp)


# ---------------------------------------------------------------- structural


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not conform") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", ts, out, lambda g: tuple(np.split(g, sizes, axis=axis)))


def take(a, indices) -> Tensor:
    """Gather rows of ``a`` along axis 0; gradient scatter-adds back."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record("take", (a,), a.data[idx], vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))
