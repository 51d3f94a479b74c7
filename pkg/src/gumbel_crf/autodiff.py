"""A small tape-based reverse-mode autodiff engine over numpy arrays.

Usage::

    with Tape() as tape:
        w = tape.leaf(np.ones(3))
        loss = ad.sum(ad.tanh(w) * w)
    (gw,) = backprop(tape, loss)

Operations on tensors that hold no tape (constants) are evaluated eagerly
and not recorded. Values are float64 arrays of rank <= 3. Elementwise
binary ops follow numpy broadcasting; their adjoints are summed back to
the operand shapes.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

MAX_RANK = 3

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class Tape:
    """Append-only record of primitive applications.

    Record order is a topological order, so a single reverse sweep visits
    each node once after all of its consumers.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()

    def leaf(self, value, name: str | None = None) -> "Tensor":
        t = Tensor(value, name=name)
        t.tape = self
        t.index = len(self.nodes)
        self.nodes.append(t)
        self.leaves.append(t)
        return t

    def __len__(self):
        return len(self.nodes)


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("value", "grad", "parents", "vjp", "tape", "index", "name")

    def __init__(self, value, name: str | None = None):
        value = np.asarray(value, dtype=float)
        if value.ndim > MAX_RANK:
            raise ValueError(f"tensor rank {value.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.value = value
        self.grad = None
        self.parents: tuple = ()
        self.vjp = None
        self.tape = None
        self.index = -1
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, recorded={self.requires_grad})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def _record(value, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(value)
    tape = None
    for p in parents:
        if p.tape is not None:
            tape = p.tape
            break
    if tape is None:
        return out
    out.parents = tuple(parents)
    out.vjp = vjp
    out.tape = tape
    out.index = len(tape.nodes)
    tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shape(name: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("add", a, b)
    return _record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("sub", a, b)
    return _record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("mul", a, b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scalar_scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.value * c, (a,), lambda g: (g * c,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.value)
    return _record(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    if np.any(av < 0):
        raise ValueError("log: negative input")
    with np.errstate(divide="ignore"):
        y = np.log(av)
    return _record(y, (a,), lambda g: (g / av,))


def straight_through(hard, soft) -> Tensor:
    """Forward value of ``hard``; the adjoint passes unchanged to ``soft``."""
    hard, soft = as_tensor(hard), as_tensor(soft)
    if hard.shape != soft.shape:
        raise ValueError(f"straight_through: shapes {hard.shape} and {soft.shape} differ")
    return _record(hard.value.copy(), (hard, soft), lambda g: (None, g))


# -- linear algebra and shape --------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(av @ bv, (a, b), vjp)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.value.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    if y.ndim > MAX_RANK:
        raise ValueError(f"reshape: rank {y.ndim} exceeds {MAX_RANK}")
    return _record(y, (a,), lambda g: (g.reshape(a.shape),))


def take(a, key) -> Tensor:
    """``a[key]`` for any numpy basic or integer-array index."""
    a = as_tensor(a)
    try:
        y = a.value[key]
    except IndexError as exc:
        raise ValueError(f"take: {exc}") from None

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, key, g)
        return (out,)

    return _record(np.array(y, dtype=float), (a,), vjp)


def gather_row(a, idx) -> Tensor:
    """Rows ``a[idx]`` of a matrix (or leading-axis slices of a rank-3 tensor)."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ValueError(f"gather_row: needs rank >= 2, got shape {a.shape}")
    idx = np.asarray(idx, dtype=int)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ValueError(f"gather_row: index out of range for {a.shape[0]} rows")
    return take(a, idx)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    ax = axis % y.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _record(y, ts, lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ValueError(f"stack: shapes differ {sorted(shapes)}")
    y = np.stack([t.value for t in ts], axis=axis)
    if y.ndim > MAX_RANK:
        raise ValueError(f"stack: rank {y.ndim} exceeds {MAX_RANK}")
    ax = axis % y.ndim
    return _record(y, ts, lambda g: tuple(np.moveaxis(g, ax, 0)))


# -- reductions ----------------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    y = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(y, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scalar_scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp_row(a, keepdims: bool = False) -> Tensor:
    """log-sum-exp over the last axis. The adjoint is the row softmax."""
    a = as_tensor(a)
    av = a.value
    m = np.max(av, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(av - m)
    s = np.sum(e, axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        y = np.log(s) + m
    p = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def vjp(g):
        gk = g if keepdims else g[..., None]
        return (gk * p,)

    return _record(y if keepdims else y[..., 0], (a,), vjp)


def softmax_with_temperature(a, tau: float = 1.0) -> Tensor:
    """``softmax(a / tau)`` over the last axis."""
    a = as_tensor(a)
    tau = float(tau)
    if not tau > 0:
        raise ValueError(f"softmax_with_temperature: temperature must be positive, got {tau}")
    y = a.value / tau
    y = np.exp(y - np.max(y, axis=-1, keepdims=True))
    y = y / np.sum(y, axis=-1, keepdims=True)

    def vjp(g):
        return ((y * (g - np.sum(g * y, axis=-1, keepdims=True))) / tau,)

    return _record(y, (a,), vjp)


def log_softmax(a) -> Tensor:
    return sub(a, logsumexp_row(a, keepdims=True))


def max_row(a) -> Tensor:
    """Max over the last axis; the adjoint goes to the first maximiser."""
    a = as_tensor(a)
    av = a.value
    idx = np.argmax(av, axis=-1)
    y = np.take_along_axis(av, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        out = np.zeros_like(av)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return (out,)

    return _record(y, (a,), vjp)


# -- backprop and checking -----------------------------------------------------


def backprop(tape: Tape, loss: Tensor) -> list[np.ndarray]:
    """Reverse sweep from a scalar ``loss``; fills ``.grad`` on every leaf.

    Leaves that ``loss`` does not depend on receive zeros. Returns the leaf
    gradients in creation order.
    """
    if loss.value.size != 1:
        raise ValueError(f"backprop needs a scalar loss, got shape {loss.shape}")
    for leaf in tape.leaves:
        leaf.grad = np.zeros_like(leaf.value)
    if loss.tape is not tape:
        return [leaf.grad for leaf in tape.leaves]
    adj: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    nodes = tape.nodes
    for i in range(loss.index, -1, -1):
        g = adj.pop(i, None)
        if g is None:
            continue
        node = nodes[i]
        if node.vjp is None:
            node.grad = node.grad + g
            continue
        for parent, gp in zip(node.parents, node.vjp(g)):
            if gp is None or parent.tape is not tape:
                continue
            j = parent.index
            prev = adj.get(j)
            adj[j] = gp if prev is None else prev + gp
    return [leaf.grad for leaf in tape.leaves]


def grad(fn: Callable[..., Tensor], *values) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn`` on fresh leaves and return ``(value, gradients)``."""
    with Tape() as tape:
        leaves = [tape.leaf(v) for v in values]
        out = fn(*leaves)
    grads = backprop(tape, out)
    return float(out.value), grads


def finite_diff(loss_fn: Callable[..., float], params: Sequence[np.ndarray], step: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``loss_fn(*params)``, one coordinate at a time."""
    params = [np.array(p, dtype=float) for p in params]
    out = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn(*params))
            flat[i] = orig - step
            down = float(loss_fn(*params))
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        out.append(g)
    return out


def relative_error(a, b, floor: float = 1e-12) -> float:
    """``|a - b| / max(|a|, |b|, floor)`` in the infinity norm."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)
