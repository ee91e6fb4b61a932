"""Small reverse-mode autodiff core on numpy arrays.

A Tensor wraps a numpy array (float32 by default, float64 for gradient
checking).  Every op returns a fresh Tensor and, when gradients are
enabled, records a closure that scatters the output gradient back to the
op's parents.  ``Tensor.backward()`` materializes the reachable graph as
a Tape (a topological ordering of nodes) and walks it once in reverse.

Also here because the rest of the package leans on them: a portable
counter-based RNG, parameter initialization, the LSTM step, a functional
Adam update, and a central-difference gradient oracle.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, TrainingError

FLOAT32 = np.float32
FLOAT64 = np.float64

_grad_enabled = True
_debug_finite = False


def set_debug_checks(flag: bool) -> None:
    """When on, every op output is checked for NaN/Inf."""
    global _debug_finite
    _debug_finite = bool(flag)


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Immutable n-d float array with an optional gradient slot.

    ``data`` is never written through after construction; optimizers swap
    in a fresh array by rebinding the attribute, which leaves any already
    recorded graph (whose closures captured the old array) intact.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id")
    _ids = itertools.count()

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (FLOAT32, FLOAT64):
            arr = arr.astype(FLOAT32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._id = next(Tensor._ids)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._id = next(Tensor._ids)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        if _debug_finite and not np.all(np.isfinite(data)):
            raise FloatingPointError("op produced a non-finite value")
        return out

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar root through the recorded graph."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.data.shape}")
        tape = Tape(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(tape.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


class Tape:
    """Topological ordering of the graph reachable from ``root``.

    Parents always appear before the nodes that consumed them, and each
    node appears exactly once, so a single reverse sweep suffices.
    """

    def __init__(self, root: Tensor):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def _accum(node: Tensor, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = g.copy()
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape the operand had before broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor._from_op(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return Tensor._from_op(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    a_data, b_data = a.data, b.data
    data = a_data * b_data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b_data, a_data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a_data, b_data.shape))

    return Tensor._from_op(data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    a_data, b_data = a.data, b.data
    data = a_data / b_data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b_data, a_data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a_data / (b_data * b_data), b_data.shape))

    return Tensor._from_op(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    a_data = a.data

    def backward(g):
        if a.requires_grad:
            _accum(a, -g)

    return Tensor._from_op(-a_data, (a,), backward)


# -- matrix products ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """numpy ``matmul``/``dot`` semantics for 1-d, 2-d and stacked operands."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    a_data, b_data = a.data, b.data
    if a_data.ndim == 0 or b_data.ndim == 0:
        raise ShapeError("matmul needs at least 1-d operands")
    try:
        data = np.matmul(a_data, b_data)
    except ValueError as exc:
        raise ShapeError(f"matmul mismatch: {a_data.shape} @ {b_data.shape}") from exc

    def backward(g):
        if a_data.ndim == 1 and b_data.ndim == 1:
            if a.requires_grad:
                _accum(a, g * b_data)
            if b.requires_grad:
                _accum(b, g * a_data)
            return
        if a_data.ndim == 1:
            # (k,) @ (..., k, n) -> (..., n)
            if a.requires_grad:
                ga = np.matmul(b_data, np.expand_dims(g, -1)).squeeze(-1)
                _accum(a, _unbroadcast(ga, a_data.shape))
            if b.requires_grad:
                gb = np.expand_dims(a_data, -1) * np.expand_dims(g, -2)
                _accum(b, _unbroadcast(gb, b_data.shape))
            return
        if b_data.ndim == 1:
            # (..., m, k) @ (k,) -> (..., m)
            if a.requires_grad:
                ga = np.expand_dims(g, -1) * b_data
                _accum(a, _unbroadcast(ga, a_data.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a_data, -1, -2), np.expand_dims(g, -1)).squeeze(-1)
                _accum(b, _unbroadcast(gb, b_data.shape))
            return
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b_data, -1, -2))
            _accum(a, _unbroadcast(ga, a_data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a_data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b_data.shape))

    return Tensor._from_op(data, (a, b), backward)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        if a.data.ndim != 2:
            raise ShapeError(f"default transpose expects 2-d input, got shape {a.data.shape}")
        axes = (1, 0)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(np.transpose(a.data, axes))

    def backward(g):
        if a.requires_grad:
            _accum(a, np.transpose(g, inv))

    return Tensor._from_op(data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old_shape = a.data.shape
    data = np.ascontiguousarray(a.data.reshape(shape))

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(old_shape))

    return Tensor._from_op(data, (a,), backward)


# -- reductions and rearrangement ----------------------------------------


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.data.shape

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g, in_shape).astype(a.data.dtype, copy=True))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, in_shape).astype(a.data.dtype, copy=True))

    return Tensor._from_op(np.asarray(data), (a,), backward)


def mean_pool_rows(m) -> Tensor:
    """Column-wise mean over the second-to-last axis: (..., N, d) -> (..., d)."""
    m = _as_tensor(m)
    if m.data.ndim < 2:
        raise ShapeError(f"mean_pool_rows expects at least 2-d input, got shape {m.data.shape}")
    n = m.data.shape[-2]
    if n == 0:
        raise ValueError("mean_pool_rows over an empty row set")
    return sum_(m, axis=-2) * (1.0 / n)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return Tensor._from_op(data, tuple(tensors), backward)


def slice_axis(a, axis, start, stop) -> Tensor:
    a = _as_tensor(a)
    ndim = a.data.ndim
    ax = axis if axis >= 0 else ndim + axis
    idx = [slice(None)] * ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    data = np.ascontiguousarray(a.data[idx])
    in_shape = a.data.shape

    def backward(g):
        if a.requires_grad:
            full = np.zeros(in_shape, dtype=g.dtype)
            full[idx] = g
            _accum(a, full)

    return Tensor._from_op(data, (a,), backward)


def gather_rows(a, indices) -> Tensor:
    """Select rows of a 2-d tensor: (V, d)[idx (B,)] -> (B, d)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d table, got shape {a.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    data = np.ascontiguousarray(a.data[idx])
    in_shape = a.data.shape

    def backward(g):
        if a.requires_grad:
            full = np.zeros(in_shape, dtype=g.dtype)
            np.add.at(full, idx, g)
            _accum(a, full)

    return Tensor._from_op(data, (a,), backward)


def pick(a, indices) -> Tensor:
    """Per-row column selection: (B, V)[b, idx_b] -> (B,)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"pick expects a 2-d input, got shape {a.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    data = np.ascontiguousarray(a.data[rows, idx])
    in_shape = a.data.shape

    def backward(g):
        if a.requires_grad:
            full = np.zeros(in_shape, dtype=g.dtype)
            np.add.at(full, (rows, idx), g)
            _accum(a, full)

    return Tensor._from_op(data, (a,), backward)


# -- nonlinearities -----------------------------------------------------------


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - data * data))

    return Tensor._from_op(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            _accum(a, g * data * (1.0 - data))

    return Tensor._from_op(data, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    a_data = a.data
    data = np.maximum(a_data, 0.0)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (a_data > 0))

    return Tensor._from_op(data, (a,), backward)


def leaky_relu(a, slope=0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    a = _as_tensor(a)
    a_data = a.data
    data = np.where(a_data >= 0, a_data, slope * a_data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * np.where(a_data >= 0, 1.0, slope).astype(g.dtype))

    return Tensor._from_op(np.ascontiguousarray(data), (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * data)

    return Tensor._from_op(data, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    a_data = a.data
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a_data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g / a_data)

    return Tensor._from_op(data, (a,), backward)


def clamp_min(a, floor) -> Tensor:
    a = _as_tensor(a)
    a_data = a.data
    data = np.maximum(a_data, floor)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (a_data >= floor))

    return Tensor._from_op(data, (a,), backward)


def softmax(a, axis=-1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    a = _as_tensor(a)
    if a.data.size == 0:
        raise ValueError("softmax of an empty tensor")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * data).sum(axis=axis, keepdims=True)
            _accum(a, (g - inner) * data)

    return Tensor._from_op(data, (a,), backward)


# -- LSTM step ------------------------------------------------------------


@dataclass
class LstmParams:
    """Fused-gate LSTM parameters; gate blocks ordered input, forget,
    candidate, output along the last axis of W and b."""

    W: Tensor  # (d_in + d_h, 4*d_h)
    b: Tensor  # (4*d_h,)

    @property
    def hidden_size(self) -> int:
        return self.b.data.shape[0] // 4


def lstm_step(x, h, c, params: LstmParams):
    """One LSTM cell update.  Accepts (d,) vectors or (B, d) batches."""
    x = _as_tensor(x)
    h = _as_tensor(h)
    c = _as_tensor(c)
    single = x.data.ndim == 1
    if single:
        x, h, c = (reshape(t, (1, -1)) for t in (x, h, c))
    dh = params.hidden_size
    din = params.W.data.shape[0] - dh
    if x.data.shape[-1] != din:
        raise ShapeError(f"lstm_step input has width {x.data.shape[-1]}, weights expect {din}")
    z = matmul(concat([x, h], axis=1), params.W) + params.b
    i = sigmoid(slice_axis(z, 1, 0, dh))
    f = sigmoid(slice_axis(z, 1, dh, 2 * dh))
    g = tanh(slice_axis(z, 1, 2 * dh, 3 * dh))
    o = sigmoid(slice_axis(z, 1, 3 * dh, 4 * dh))
    c2 = f * c + i * g
    h2 = o * tanh(c2)
    if single:
        h2 = reshape(h2, (-1,))
        c2 = reshape(c2, (-1,))
    return h2, c2


# -- RNG ------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


class Rng:
    """SplitMix64 stream with Box-Muller gaussians.

    Pure integer arithmetic, so sequences are identical on every platform.
    The state snapshot includes the cached second gaussian draw.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64
        self._gauss_cache: float | None = None

    def u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return _mix64(self._state)

    def uniform(self) -> float:
        """Uniform draw in [0, 1)."""
        return (self.u64() >> 11) * 2.0**-53

    def gauss(self) -> float:
        if self._gauss_cache is not None:
            z = self._gauss_cache
            self._gauss_cache = None
            return z
        u1 = ((self.u64() >> 11) + 1) * 2.0**-53  # (0, 1], keeps log finite
        u2 = (self.u64() >> 11) * 2.0**-53
        r = math.sqrt(-2.0 * math.log(u1))
        self._gauss_cache = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def gumbel(self) -> float:
        u = ((self.u64() >> 11) + 0.5) * 2.0**-53  # strictly inside (0, 1)
        return -math.log(-math.log(u))

    def randint(self, n: int) -> int:
        if n <= 0:
            raise ValueError(f"randint bound must be positive, got {n}")
        return self.u64() % n

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items):
        return items[self.randint(len(items))]

    def multinomial(self, probs: np.ndarray) -> int:
        """Sample an index from a probability vector via the inverse CDF."""
        cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
        u = self.uniform() * cdf[-1]
        return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))

    def normal(self, shape, scale=1.0, dtype=FLOAT32) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        out = np.fromiter((self.gauss() for _ in range(n)), dtype=np.float64, count=n)
        return (scale * out).reshape(shape).astype(dtype)

    def uniform_array(self, shape, low, high, dtype=FLOAT32) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        out = np.fromiter((self.uniform() for _ in range(n)), dtype=np.float64, count=n)
        return (low + (high - low) * out).reshape(shape).astype(dtype)

    def get_state(self):
        return [self._state, self._gauss_cache]

    def set_state(self, state) -> None:
        self._state = int(state[0]) & _MASK64
        self._gauss_cache = None if state[1] is None else float(state[1])

    def derive(self, tag: int) -> "Rng":
        """An independent child stream; deterministic in (state, tag)."""
        return Rng(_mix64((self._state ^ (tag & _MASK64)) + _GOLDEN & _MASK64))


# -- parameter initialization ---------------------------------------------


def xavier_uniform(rng: Rng, shape, fan_in: int, fan_out: int, dtype=FLOAT32) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform_array(shape, -a, a, dtype=dtype), requires_grad=True)


def zeros(shape, dtype=FLOAT32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def make_lstm_params(rng: Rng, d_in: int, d_h: int, dtype=FLOAT32) -> LstmParams:
    W = xavier_uniform(rng, (d_in + d_h, 4 * d_h), d_in + d_h, 4 * d_h, dtype=dtype)
    b = np.zeros(4 * d_h, dtype=dtype)
    b[d_h : 2 * d_h] = 1.0  # forget-gate bias starts open
    return LstmParams(W=W, b=Tensor(b, requires_grad=True))


# -- Adam -----------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int


def adam_init(param: Tensor) -> AdamState:
    return AdamState(
        m=np.zeros_like(param.data), v=np.zeros_like(param.data), t=0
    )


def adam_update(param, grad, state: AdamState, lr, beta1=0.9, beta2=0.999,
                eps=1e-8, name="param"):
    """Bias-corrected Adam step.  Returns (new value, new state); the caller
    decides what to do with them, nothing is written in place."""
    p = param.data if isinstance(param, Tensor) else np.asarray(param)
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad)
    if not np.all(np.isfinite(g)):
        raise TrainingError(f"non-finite gradient for parameter '{name}'")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new.astype(p.dtype), AdamState(m=m, v=v, t=t)


class Adam:
    """Keeps one AdamState per named parameter and applies updates by
    rebinding each Tensor's buffer."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, AdamState] = {}

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        for name in sorted(params):
            p = params[name]
            if p.grad is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = adam_init(p)
            new, st = adam_update(p, p.grad, st, lr, self.beta1, self.beta2,
                                  self.eps, name=name)
            self.state[name] = st
            p.data = np.ascontiguousarray(new)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        if g is not None:
            total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for name in sorted(params):
            g = params[name].grad
            if g is not None:
                params[name].grad = g * g.dtype.type(scale)
    return norm


# -- numerical gradient oracle ---------------------------------------------


def finite_diff_grad(f, x: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function at x (64-bit only)."""
    if x.data.dtype != FLOAT64:
        raise ValueError("finite_diff_grad requires a float64 tensor")
    base = x.data.copy()
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        for sign in (+1.0, -1.0):
            probe = base.copy()
            probe[idx] += sign * eps
            with no_grad():
                val = f(Tensor(probe, dtype=FLOAT64))
            v = val.item() if isinstance(val, Tensor) else float(val)
            grad[idx] += sign * v
        grad[idx] /= 2.0 * eps
        it.iternext()
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a-n| / max(|a|, |n|, 1e-3): relative for healthy magnitudes,
    effectively absolute (scaled by 1e3) for near-zero gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / denom))
