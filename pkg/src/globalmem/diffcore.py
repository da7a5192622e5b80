"""Small reverse-mode autodiff kernel over float64 numpy arrays.

Operations record onto the active :class:`Tape` only when some input requires
a gradient; outside a tape (or with constant inputs) they are plain numpy calls.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ContractError(ValueError):
    """A precondition of a numeric operation was violated."""


class NumericError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: list[Tensor]
    output: Tensor
    forward: Callable[..., np.ndarray]
    backward: Callable[..., tuple]
    kwargs: dict = field(default_factory=dict)


class Tape:
    """Ordered record of primitive ops; nodes are appended in execution order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf."""
        if loss.data.size != 1:
            raise ContractError("backward() needs a scalar loss")
        produced = {id(n.output) for n in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g, node.output.data, *[t.data for t in node.inputs], **node.kwargs)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if id(t) in produced:
                    key = id(t)
                    grads[key] = grads[key] + gi if key in grads else gi
                else:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi

    def replay(self) -> bool:
        """Re-run every recorded op from its recorded inputs; True iff all outputs match bit-exactly."""
        for node in self.nodes:
            out = node.forward(*[t.data for t in node.inputs], **node.kwargs)
            if out.shape != node.output.data.shape or not np.array_equal(out, node.output.data):
                return False
        return True


_TAPES: list[Tape] = []


@contextmanager
def recording() -> Iterator[Tape]:
    """Open a tape; ops on grad-requiring tensors inside the block are recorded on it."""
    tape = Tape()
    _TAPES.append(tape)
    try:
        yield tape
    finally:
        _TAPES.pop()


@contextmanager
def no_record() -> Iterator[None]:
    _TAPES.append(None)  # type: ignore[arg-type]
    try:
        yield
    finally:
        _TAPES.pop()


def _active() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _apply(op: str, fwd, bwd, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    out = fwd(*[t.data for t in inputs], **kwargs)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    result = Tensor(out)
    tape = _active()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(Node(op, list(inputs), result, fwd, bwd, kwargs))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return _apply(
        "add",
        lambda x, y: x + y,
        lambda g, o, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        [a, b],
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _apply(
        "sub",
        lambda x, y: x - y,
        lambda g, o, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
        [a, b],
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _apply(
        "mul",
        lambda x, y: x * y,
        lambda g, o, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        [a, b],
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _apply("scale", lambda x, c: x * c, lambda g, o, x, c: (g * c,), [a], c=float(c))


def relu(a: Tensor) -> Tensor:
    return _apply("relu", lambda x: np.maximum(x, 0.0), lambda g, o, x: (g * (x > 0),), [a])


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _gelu_bwd(g, o, x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    return _apply("gelu", _gelu_fwd, _gelu_bwd, [a])


# --- shape / linear algebra ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g, o, x, y):
        gx = g @ np.swapaxes(y, -1, -2)
        gy = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    return _apply("matmul", lambda x, y: x @ y, bwd, [a, b])


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _apply(
        "reshape",
        lambda x, shape: x.reshape(shape),
        lambda g, o, x, shape: (g.reshape(x.shape),),
        [a],
        shape=tuple(shape),
    )


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _apply(
        "transpose",
        lambda x, axes: np.transpose(x, axes),
        lambda g, o, x, axes: (np.transpose(g, inv),),
        [a],
        axes=tuple(axes),
    )


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if len(parts) == 1:
        return parts[0]

    def fwd(*xs, axis):
        return np.concatenate(xs, axis=axis)

    def bwd(g, o, *xs, axis):
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, bounds, axis=axis))

    return _apply("concat", fwd, bwd, list(parts), axis=axis)


def slice_axis(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    def fwd(x, start, stop, axis):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, stop)
        return x[tuple(idx)]

    def bwd(g, o, x, start, stop, axis):
        out = np.zeros_like(x)
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, stop)
        out[tuple(idx)] = g
        return (out,)

    return _apply("slice", fwd, bwd, [a], start=start, stop=stop, axis=axis)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: ``table[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)

    def bwd(g, o, t, ids):
        out = np.zeros_like(t)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, t.shape[-1]))
        return (out,)

    return _apply("embedding", lambda t, ids: t[ids], bwd, [table], ids=ids)


def summed(a: Tensor) -> Tensor:
    return _apply(
        "sum",
        lambda x: np.asarray(x.sum()),
        lambda g, o, x: (np.broadcast_to(g, x.shape).copy(),),
        [a],
    )


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(summed(a), 1.0 / n)


# --- normalization / probability -----------------------------------------

def _softmax_np(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; positions where ``mask`` is False get probability 0."""
    x = _lift(x)
    if x.data.shape[-1] == 0:
        raise ContractError("softmax over an empty row")

    def fwd(z, mask):
        return _softmax_np(z, mask)

    def bwd(g, p, z, mask):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _apply("softmax", fwd, bwd, [x], mask=mask)


def softmax(row) -> np.ndarray:
    """Probability vector for a single finite row."""
    arr = np.asarray(row, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractError("softmax needs a non-empty 1-D row")
    if not np.all(np.isfinite(arr)):
        raise ContractError("softmax input must be finite")
    return _softmax_np(arr)


def log_softmax(x: Tensor) -> Tensor:
    def fwd(z):
        m = np.max(z, axis=-1, keepdims=True)
        s = z - m
        return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))

    def bwd(g, o, z):
        return (g - np.exp(o) * g.sum(axis=-1, keepdims=True),)

    return _apply("log_softmax", fwd, bwd, [x])


def pick(logp: Tensor, targets: np.ndarray) -> Tensor:
    """Gather ``logp[..., targets]`` along the last axis."""
    targets = np.asarray(targets, dtype=np.int64)

    def fwd(z, targets):
        return np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]

    def bwd(g, o, z, targets):
        out = np.zeros_like(z)
        np.put_along_axis(out, targets[..., None], g[..., None], axis=-1)
        return (out,)

    return _apply("pick", fwd, bwd, [logp], targets=targets)


def nll(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean negative log-likelihood of ``targets`` under row-wise softmax of ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ContractError("target index out of range")
    lp = pick(log_softmax(logits), targets)
    if weights is None:
        return scale(summed(lp), -1.0 / max(lp.data.size, 1))
    w = np.asarray(weights, dtype=np.float64)
    total = float(w.sum())
    if total <= 0:
        raise ContractError("nll weights sum to zero")
    return scale(summed(mul(lp, Tensor(w))), -1.0 / total)


def cross_entropy(logits, target: int) -> float:
    """``-log softmax(logits)[target]`` for a single logit vector."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ContractError("cross_entropy needs a non-empty 1-D logit vector")
    if not 0 <= target < z.size:
        raise ContractError(f"target {target} out of range for {z.size} classes")
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    return max(0.0, float(lse - z[target]))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    def fwd(z, g, b, eps):
        mu = z.mean(axis=-1, keepdims=True)
        with np.errstate(over="ignore", invalid="ignore"):
            var = z.var(axis=-1, keepdims=True)
        if not np.all(np.isfinite(var)):
            # an overflowed variance would silently normalize to zero
            raise NumericError("layer_norm: variance overflowed")
        return (z - mu) / np.sqrt(var + eps) * g + b

    def bwd(go, o, z, g, b, eps):
        mu = z.mean(axis=-1, keepdims=True)
        var = z.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (z - mu) * inv
        gx = go * g
        dz = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(z.ndim - 1))
        return dz, (go * xhat).sum(axis=red), go.sum(axis=red)

    return _apply("layer_norm", fwd, bwd, [x, gamma, beta], eps=eps)


# --- gradient checking ---------------------------------------------------

def tape_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
        p.requires_grad = True
    with recording() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``max_entries`` caps the number of checked entries per tensor (random sample);
    by default every entry is checked.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")

    def value() -> float:
        with no_record():
            return float(loss_fn().data)

    v0, v1 = value(), value()
    if v0 != v1:
        raise ContractError(f"loss_fn is not deterministic ({v0!r} != {v1!r})")
    analytic = tape_grads(loss_fn, params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        gflat = g.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            worst = max(worst, rel_error(float(gflat[i]), fd))
    return worst
