"""Dense float64 tensors with reverse-mode automatic differentiation.

Implements exactly the operations needed to express a small transformer and
an LSTM: broadcasting arithmetic, batched matmul, masked softmax, layer
normalization, embedding lookup and cross entropy from logits. Every op
records a backward closure on a thread-local tape; ``backward`` replays the
tape in reverse. Double precision throughout so finite-difference checks
are meaningful.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_OFFSET = 1e9  # additive constant pushed onto blocked logits


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class InvalidMaskError(ValueError):
    """A softmax row has every position blocked."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a non-recorded or already-consumed graph."""


class NondeterministicFunctionError(RuntimeError):
    """Function under finite-difference check changed value between calls."""


_check_finite = False


def set_check_finite(enabled: bool) -> None:
    """Check every op output for NaN/Inf (slow; intended for tests)."""
    global _check_finite
    _check_finite = bool(enabled)


class Tape:
    """Ordered record of executed ops, topological by construction."""

    __slots__ = ("nodes", "enabled", "_consumed")

    def __init__(self, enabled: bool = True):
        self.nodes: list["Tensor"] = []
        self.enabled = enabled
        self._consumed = 0

    def clear(self) -> None:
        self.nodes.clear()
        self._consumed = 0


class _TapeStack(threading.local):
    def __init__(self):
        self.stack = [Tape()]


_tapes = _TapeStack()


def active_tape() -> Tape:
    return _tapes.stack[-1]


class tape_scope:
    """Push a fresh tape for the duration of a with-block."""

    def __init__(self, enabled: bool = True):
        self.tape = Tape(enabled)

    def __enter__(self) -> Tape:
        _tapes.stack.append(self.tape)
        return self.tape

    def __exit__(self, *exc) -> None:
        _tapes.stack.pop()


def no_grad() -> tape_scope:
    """Scope with gradient recording disabled."""
    return tape_scope(enabled=False)


class Tensor:
    """N-dimensional float64 array, optionally participating in the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _record(out: Tensor, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _check_finite and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    tape = active_tape()
    if tape.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape.nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward_fn(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def backward_fn(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out, (a, b), backward_fn)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul dimension mismatch: {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), backward_fn)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    out = Tensor(np.transpose(a.data, axes))
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def backward_fn(g):
        _accum(a, np.transpose(g, inv))

    return _record(out, (a,), backward_fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.data.shape
    out = Tensor(a.data.reshape(shape))

    def backward_fn(g):
        _accum(a, g.reshape(orig))

    return _record(out, (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _record(out, tuple(tensors), backward_fn)


def getitem(a: Tensor, idx) -> Tensor:
    out = Tensor(a.data[idx])

    def backward_fn(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf)

    return _record(out, (a,), backward_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add into the table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    out = Tensor(table.data[ids])

    def backward_fn(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids, g)
            _accum(table, buf)

    return _record(out, (table,), backward_fn)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, shape))

    return _record(out, (a,), backward_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.mean(a.data, axis=axis, keepdims=keepdims))
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / n, shape))

    return _record(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities

def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    out = Tensor(np.where(keep, a.data, 0.0))

    def backward_fn(g):
        _accum(a, g * keep)

    return _record(out, (a,), backward_fn)


def tanh(a: Tensor) -> Tensor:
    val = np.tanh(a.data)
    out = Tensor(val)

    def backward_fn(g):
        _accum(a, g * (1.0 - val * val))

    return _record(out, (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    val = np.empty_like(x)
    pos = x >= 0
    val[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    val[~pos] = ex / (1.0 + ex)
    out = Tensor(val)

    def backward_fn(g):
        _accum(a, g * val * (1.0 - val))

    return _record(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# fused neural-net ops

def masked_softmax(logits, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask``-allowed positions.

    Blocked positions get probability exactly 0 and zero gradient. Rows are
    shifted by their max before exponentiation, so huge logits are safe.
    """
    logits = as_tensor(logits)
    mask_arr = np.broadcast_to(np.asarray(mask, dtype=bool), logits.data.shape)
    if not mask_arr.any(axis=-1).all():
        raise InvalidMaskError("masked_softmax: a row has all positions blocked")
    shifted = logits.data - MASK_OFFSET * (~mask_arr)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    e *= mask_arr  # exact zero on blocked positions
    probs = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(probs)

    def backward_fn(g):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        _accum(logits, probs * (g - inner))

    return _record(out, (logits,), backward_fn)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = centered * istd
    out = Tensor(xhat * gain.data + bias.data)

    def backward_fn(g):
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, istd * (dxhat - m1 - xhat * m2))

    return _record(out, (x, gain, bias), backward_fn)


def cross_entropy_from_logits(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row softmaxes."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross entropy expects [L, V] logits, got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.int64)
    n, v = logits.data.shape
    if tgt.shape != (n,):
        raise ShapeError(f"targets shape {tgt.shape} does not match L={n}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        bad = tgt[(tgt < 0) | (tgt >= v)][0]
        raise IndexError(f"target id {bad} outside vocabulary [0, {v})")
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    lse = m[:, 0] + np.log(e.sum(axis=-1))
    rows = np.arange(n)
    out = Tensor(np.mean(lse - logits.data[rows, tgt]))

    def backward_fn(g):
        p = e / e.sum(axis=-1, keepdims=True)
        p[rows, tgt] -= 1.0
        _accum(logits, p * (g / n))

    return _record(out, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass and optimizer

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from ``loss``.

    ``loss`` must be a scalar produced by ops recorded on the active tape;
    each recorded segment may be traversed once.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        raise TapeError("loss was not produced on the active tape")
    tape = active_tape()
    if tape._consumed >= len(tape.nodes):
        raise TapeError("tape already consumed: one backward per forward pass")
    loss.grad = np.ones_like(loss.data)
    segment = tape.nodes[tape._consumed:]
    tape._consumed = len(tape.nodes)
    for node in reversed(segment):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
    if _check_finite:
        for node in segment:
            for p in node._parents:
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise FloatingPointError("non-finite gradient produced")


class Adam:
    """Adam with bias correction. Gradients are zeroed after each step."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-9):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise TapeError("optimizer step before backward: missing gradient")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for p in params:
            p.grad *= factor
    return total


# ---------------------------------------------------------------------------
# verification harness

def finite_difference_check(f: Callable[[], Tensor], params: Iterable[Tensor],
                            step: float = 1e-5) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    Returns the max over all parameter entries of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. ``f`` must be
    deterministic; it is evaluated twice up front to verify that.
    """
    params = list(params)
    with no_grad():
        v1 = f().item()
        v2 = f().item()
    if v1 != v2:
        raise NondeterministicFunctionError(
            f"f() returned {v1!r} then {v2!r}; disable stochastic layers"
        )
    with tape_scope():
        backward(f())
        analytic = [None if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    worst = 0.0
    for p, ga in zip(params, analytic):
        if ga is None:
            ga = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                fp = f().item()
            flat[i] = orig - step
            with no_grad():
                fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            ana = gflat[i]
            err = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            if err > worst:
                worst = err
    return worst
