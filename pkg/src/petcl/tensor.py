"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine records a dynamic graph as operations execute: every
differentiable op returns a tensor carrying a closure that routes
incoming gradients to its parents.  ``Tensor.backward()`` walks the
recorded graph once in reverse topological order and accumulates
gradients into every reachable leaf that requires them.

Conventions: float64 everywhere, no implicit mutation of values after
creation (the grad buffer is the only writable slot), masking is done
by filling with a large negative constant so shapes stay static, and
every op raises if finite inputs produce a non-finite output.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

# Fill value used to blank out logits; exp() of it underflows to exactly 0.0.
MASK_FILL_VALUE = -1e30


class AutodiffError(RuntimeError):
    """Raised on tape misuse (double backward, non-scalar loss)."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ArithmeticError(f"non-finite values produced by {what}")


class Tensor:
    """An n-d float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_push", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._push = None
        self._backward_done = False

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

    def detach(self) -> "Tensor":
        """A new leaf sharing this value; gradients never flow through it."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from a scalar, accumulating grads into leaves.

        May be called once per recorded graph; a second call on the same
        value raises instead of silently double-accumulating.
        """
        if self.data.size != 1:
            raise AutodiffError("backward() needs a scalar value")
        if self._backward_done:
            raise AutodiffError(
                "backward() already ran for this value; rebuild the graph "
                "before differentiating again"
            )
        self._backward_done = True
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._push is not None and node.grad is not None:
                node._push(node.grad)

    # Arithmetic sugar; scalars and arrays are wrapped as constant leaves.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], push, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward_done = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._push = push
    else:
        # Constant subgraphs are dropped from the tape entirely.
        out.requires_grad = False
        out._parents = ()
        out._push = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over broadcast axes back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def push(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _from_op(data, (a, b), push, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def push(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _from_op(data, (a, b), push, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def push(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(data, (a, b), push, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def push(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * data / b.data, b.data.shape))

    return _from_op(data, (a, b), push, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def push(g):
        _accum(a, -g)

    return _from_op(-a.data, (a,), push, "neg")


def power(a, exponent: float) -> Tensor:
    """Raise to a constant exponent."""
    a = _as_tensor(a)
    data = a.data ** exponent

    def push(g):
        _accum(a, g * exponent * a.data ** (exponent - 1.0))

    return _from_op(data, (a,), push, "power")


# ---------------------------------------------------------------------------
# shape ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def push(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _from_op(data, (a, b), push, "matmul")


def swap_axes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)

    def push(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    return _from_op(np.swapaxes(a.data, ax1, ax2), (a,), push, "swap_axes")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    return swap_axes(a, -1, -2)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def push(g):
        _accum(a, g.reshape(a.data.shape))

    return _from_op(a.data.reshape(shape), (a,), push, "reshape")


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def push(g):
        _accum(a, _unbroadcast(g, a.data.shape))

    return _from_op(np.broadcast_to(a.data, shape).copy(), (a,), push, "broadcast_to")


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat needs at least one input")
    data = np.concatenate([p.data for p in parts], axis=axis)
    ax = axis if axis >= 0 else data.ndim + axis
    sizes = [p.shape[ax] for p in parts]

    def push(g):
        pos = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(pos, pos + n)
            _accum(p, g[tuple(sl)])
            pos += n

    return _from_op(data, tuple(parts), push, "concat")


def token_at(a, index: int) -> Tensor:
    """Select one row along the second-to-last axis (e.g. one token)."""
    a = _as_tensor(a)
    data = a.data[..., index, :]

    def push(g):
        full = np.zeros_like(a.data)
        full[..., index, :] = g
        _accum(a, full)

    return _from_op(data.copy(), (a,), push, "token_at")


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a if a >= 0 else ndim + a for a in axis))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def push(g):
        if not keepdims:
            for ax in axes:
                g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _from_op(data, (a,), push, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def push(g):
        if not keepdims:
            for ax in axes:
                g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g / count, a.data.shape))

    return _from_op(data, (a,), push, "mean")


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def push(g):
        _accum(a, g * data)

    return _from_op(data, (a,), push, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def push(g):
        _accum(a, g / a.data)

    return _from_op(data, (a,), push, "log")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def push(g):
        _accum(a, g * (1.0 - data * data))

    return _from_op(data, (a,), push, "tanh")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # Branch on sign so neither exp() can overflow.
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def push(g):
        _accum(a, g * data * (1.0 - data))

    return _from_op(data, (a,), push, "sigmoid")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def push(g):
        _accum(a, g * (a.data > 0.0))

    return _from_op(data, (a,), push, "relu")


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """Gaussian error linear unit (tanh approximation)."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    data = 0.5 * x * (1.0 + t)

    def push(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        _accum(a, g * local)

    return _from_op(data, (a,), push, "gelu")


def masked_fill(a, mask, value: float = MASK_FILL_VALUE) -> Tensor:
    """Replace entries where ``mask`` is true with a constant.

    The mask is a boolean array (broadcastable to ``a``); gradients flow
    only through the untouched positions.
    """
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    data = np.where(mask, value, a.data)

    def push(g):
        _accum(a, _unbroadcast(np.where(mask, 0.0, g), a.data.shape))

    return _from_op(data, (a,), push, "masked_fill")


# ---------------------------------------------------------------------------
# composite ops


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along an axis, stabilised by subtracting the row max.

    The shift is treated as a constant, which leaves both the value and
    the Jacobian unchanged.
    """
    x = _as_tensor(x)
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = exp(sub(x, shift))
    return div(e, reduce_sum(e, axis=axis, keepdims=True))


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    total = reduce_sum(exp(sub(x, shift)), axis=axis, keepdims=True)
    out = add(log(total), shift)
    if not keepdims:
        ax = axis if axis >= 0 else x.ndim + axis
        out = reshape(out, out.shape[:ax] + out.shape[ax + 1:])
    return out


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``logits`` is (batch, classes); ``targets`` is a length-batch integer
    vector indexing columns.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects 2-d logits (batch, classes)")
    t = np.asarray(targets)
    if t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ValueError("targets must be a vector matching the batch size")
    n, c = logits.shape
    if t.size and (t.min() < 0 or t.max() >= c):
        raise IndexError("target class index out of range")
    rows = np.arange(n)
    shift = logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits.data - shift).sum(axis=1, keepdims=True)) + shift
    data = np.asarray((lse[:, 0] - logits.data[rows, t]).mean())

    def push(g):
        p = np.exp(logits.data - lse)
        p[rows, t] -= 1.0
        _accum(logits, (g / n) * p)

    return _from_op(data, (logits,), push, "cross_entropy")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    x = _as_tensor(x)
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centred = sub(x, mu)
    var = reduce_mean(mul(centred, centred), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centred, inv), gamma), beta)


def multi_head_attention(q, k, v, num_heads: int) -> Tensor:
    """Scaled dot-product attention with the feature axis split into heads.

    ``q`` is (..., T, d); ``k`` and ``v`` are (..., S, d) and S may differ
    from T (extra key/value rows are simply attended over).  Heads are
    concatenated back into (..., T, d).
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    d = q.shape[-1]
    if d % num_heads != 0:
        raise ValueError(f"model dim {d} not divisible by {num_heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ValueError("key/value shapes do not conform")
    qh = split_heads(q, num_heads)
    kh = split_heads(k, num_heads)
    vh = split_heads(v, num_heads)
    head_dim = d // num_heads
    scores = mul(matmul(qh, transpose(kh)), 1.0 / np.sqrt(head_dim))
    out = matmul(softmax(scores, axis=-1), vh)
    return merge_heads(out)


def split_heads(x, num_heads: int) -> Tensor:
    """(..., T, d) -> (..., heads, T, d // heads)."""
    x = _as_tensor(x)
    *lead, t, d = x.shape
    xh = reshape(x, (*lead, t, num_heads, d // num_heads))
    return swap_axes(xh, -3, -2)


def merge_heads(x) -> Tensor:
    """(..., heads, T, head_dim) -> (..., T, heads * head_dim)."""
    x = _as_tensor(x)
    *lead, h, t, hd = x.shape
    return reshape(swap_axes(x, -3, -2), (*lead, t, h * hd))


# ---------------------------------------------------------------------------
# randomness


def seeded_generator(*entropy) -> np.random.Generator:
    """A PCG64 generator keyed by a tuple of ints/strings.

    Strings are hashed stably so call sites can use readable tags.
    """
    words = []
    for e in entropy:
        if isinstance(e, str):
            words.append(int.from_bytes(e.encode("utf-8"), "little") % (2 ** 63))
        else:
            words.append(int(e))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def truncated_normal(gen: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples redrawn until within two deviations."""
    out = gen.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = gen.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out
