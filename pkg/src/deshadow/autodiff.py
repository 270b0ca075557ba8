"""Reverse-mode automatic differentiation over dense float64 arrays.

The recording model is a Wengert list: while a :class:`Tape` is active,
every primitive applied to a *traced* tensor appends one node holding the
per-input vector-Jacobian closures. Execution order is a topological order
of the graph, so the backward pass is a single reverse sweep over the node
list. Gradient contributions are accumulated in tape order, which makes
two backward passes over the same tape bit-identical.

Tensors are immutable value carriers; a tape must stay confined to one
thread (the active-tape stack is thread-local).
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, GradCheckError

_ids = itertools.count(1)

_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense multi-dimensional array of float64 with an identity.

    The identity (``id``) is what gradient maps are keyed by; the payload
    is an ordinary numpy array. Construction coerces to float64 and
    C-order. Tensors written by callers must be finite; operations check
    only what their contracts document.
    """

    __slots__ = ("data", "id")

    def __init__(self, data) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, id={self.id})"

    # Arithmetic sugar; the functional forms live below.
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


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    """One recorded primitive: output id plus per-input (id, vjp) pairs."""

    __slots__ = ("out_id", "vjps")

    def __init__(self, out_id: int, vjps: tuple[tuple[int, Callable], ...]) -> None:
        self.out_id = out_id
        self.vjps = vjps


class Tape:
    """Ordered record of primitive applications plus the traced-id set.

    Use as a context manager. Only tensors registered through
    :meth:`watch` (and anything computed from them) are traced; constants
    flow through primitives without recording.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._traced: set[int] = set()
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted (cross-thread use?)"

    def watch(self, tensor: Tensor) -> Tensor:
        self._traced.add(tensor.id)
        return tensor

    def is_traced(self, tensor: Tensor) -> bool:
        return tensor.id in self._traced

    def _record(self, out: Tensor, vjps: tuple[tuple[int, Callable], ...]) -> None:
        self.nodes.append(_Node(out.id, vjps))
        self._traced.add(out.id)
        self._produced.add(out.id)


def record(out: Tensor, inputs: Sequence[Tensor], vjps: Sequence[Callable]) -> Tensor:
    """Attach ``out`` to the active tape if any input is traced.

    ``vjps[i]`` maps the output cotangent to input ``i``'s cotangent; it is
    consulted only when input ``i`` is itself traced.
    """
    tape = active_tape()
    if tape is None:
        return out
    pairs = tuple(
        (inp.id, vjp)
        for inp, vjp in zip(inputs, vjps)
        if inp.id in tape._traced
    )
    if pairs:
        tape._record(out, pairs)
    return out


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep: gradients of scalar ``root`` w.r.t. every traced leaf.

    Returns a map from tensor id to gradient array. Intermediate
    gradients are dropped as soon as their producing node is processed,
    so the returned map covers exactly the watched leaves (and any traced
    tensor never produced on this tape).
    """
    if root.id not in tape._produced:
        raise ContractViolation("backward root was not produced on this tape")
    if root.size != 1:
        raise ContractViolation("backward root must be a scalar")

    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        for in_id, vjp in node.vjps:
            contrib = vjp(g)
            prev = grads.get(in_id)
            if prev is None:
                grads[in_id] = np.array(contrib, dtype=np.float64, copy=True)
            else:
                prev += contrib
    return grads


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return record(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return record(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(-g, b.data.shape),
        ),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return record(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)
    return record(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return record(out, (a,), (lambda g: -g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    val = np.exp(a.data)
    out = Tensor(val)
    return record(out, (a,), (lambda g: g * val,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    val = np.sqrt(a.data)
    out = Tensor(val)
    return record(out, (a,), (lambda g: g * (0.5 / val),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    sign = np.sign(a.data)
    return record(out, (a,), (lambda g: g * sign,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    val = np.tanh(a.data)
    out = Tensor(val)
    return record(out, (a,), (lambda g: g * (1.0 - val * val),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Evaluate from the side that keeps exp() bounded.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    val = _sigmoid(a.data)
    out = Tensor(val)
    return record(out, (a,), (lambda g: g * val * (1.0 - val),))


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x), with the x > 30 branch rewritten as x + log1p(e^-x)
    # so exp never overflows. Both branches agree to full precision near 30.
    out = np.empty_like(x)
    big = x > 30.0
    out[big] = x[big] + np.log1p(np.exp(-x[big]))
    out[~big] = np.log1p(np.exp(x[~big]))
    return out


def softplus(a) -> Tensor:
    """Elementwise log(1 + exp(x)); positive and overflow-safe.

    Below x ~ -745 the true value is smaller than the tiniest subnormal
    and rounds to +0.0.
    """
    a = as_tensor(a)
    out = Tensor(_softplus(a.data))
    sig = _sigmoid(a.data)
    return record(out, (a,), (lambda g: g * sig,))


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    sig = _sigmoid(a.data)
    out = Tensor(a.data * sig)
    deriv = sig * (1.0 + a.data * (1.0 - sig))
    return record(out, (a,), (lambda g: g * deriv,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient passes wherever lo <= x <= hi."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)
    return record(out, (a,), (lambda g: g * mask,))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape)
        gg = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.data.ndim for ax in axes)
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        return np.broadcast_to(gg, a.data.shape)

    return record(out, (a,), (vjp,))


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return div(tsum(a, axis=axis, keepdims=keepdims), float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    src_shape = a.data.shape
    return record(out, (a,), (lambda g: g.reshape(src_shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.transpose(a.data, axes))
    inv = np.argsort(axes)
    return record(out, (a,), (lambda g: np.transpose(g, inv),))


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.flip(a.data, axis=axis))
    return record(out, (a,), (lambda g: np.flip(g, axis=axis),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return record(out, tensors, tuple(make_vjp(i) for i in range(len(tensors))))


def matmul(a, b) -> Tensor:
    """2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation("matmul expects 2-D operands")
    out = Tensor(a.data @ b.data)
    return record(
        out,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def grad_of(
    f: Callable[[list[Tensor]], Tensor], params: Sequence[np.ndarray]
) -> tuple[float, list[np.ndarray]]:
    """Evaluate scalar ``f`` and its analytic gradients at ``params``.

    A function that never touches its parameters (constant output) gets
    all-zero gradients rather than an error.
    """
    leaves = [Tensor(p) for p in params]
    with Tape() as tape:
        for leaf in leaves:
            tape.watch(leaf)
        out = f(leaves)
    if out.id in tape._produced:
        grads = backward(tape, out)
    else:
        grads = {}
    return out.item(), [
        grads.get(leaf.id, np.zeros_like(leaf.data)) for leaf in leaves
    ]


def finite_diff_check(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error for one parameter entry is
    ``|analytic - central| / max(1, |analytic|)``; the maximum over all
    entries of all parameters is returned. A non-finite evaluation at a
    perturbed point raises :class:`GradCheckError` naming the entry.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ContractViolation(f"finite-difference step {h} outside [1e-7, 1e-3]")
    params = [np.asarray(p, dtype=np.float64) for p in params]
    _, analytic = grad_of(f, params)

    def eval_at(pts: list[np.ndarray]) -> float:
        return f([Tensor(p) for p in pts]).item()

    worst = 0.0
    for pi, base in enumerate(params):
        flat = base.reshape(-1)
        for j in range(flat.size):
            bumped = [p.copy() for p in params]
            bumped[pi].reshape(-1)[j] = flat[j] + h
            hi = eval_at(bumped)
            bumped[pi].reshape(-1)[j] = flat[j] - h
            lo = eval_at(bumped)
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise GradCheckError(
                    f"non-finite evaluation at parameter {pi}, entry {j}"
                )
            numeric = (hi - lo) / (2.0 * h)
            ana = float(analytic[pi].reshape(-1)[j])
            err = abs(ana - numeric) / max(1.0, abs(ana))
            if err > worst:
                worst = err
    return worst
