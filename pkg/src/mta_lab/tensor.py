"""Dense tensors with reverse-mode automatic differentiation.

The engine is a recorded (tape-style) reverse mode over numpy arrays: every
operation returns a new Tensor holding its inputs and a closure implementing
the exact reverse rule. `Tensor.backward()` replays the graph in reverse
topological order. Graphs are built per step and discarded after backward.

Default precision is float64; float32 flows through automatically when the
leaf tensors are built as float32.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

DEFAULT_DTYPE = np.float64

# Additive mask value for disallowed softmax entries. exp(x - max - 1e9/T)
# underflows to exactly 0.0 in both float32 and float64, which is what the
# top-k exclusivity contract relies on.
NEG_MASK = -1e9

_grad_enabled = True


class no_grad:
    """Context manager that skips graph recording (evaluation fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    return np.ascontiguousarray(arr, dtype=dtype)


class Tensor:
    """N-dimensional array of reals with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_prev", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._prev = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode accumulation from this scalar into every reachable leaf."""
        if self.data.ndim != 0:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self.dtype), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def slice(self, axis, start, stop):
        return slice_axis(self, axis, start, stop)

    def relu(self):
        return relu(self)


def _wrap(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, inputs, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._prev = tuple(inputs)
        out._backward = backward
    else:
        out.requires_grad = False
        out._prev = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    """Sum a gradient over the axes numpy broadcasting introduced or expanded."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g.reshape(shape)


# -- elementwise -----------------------------------------------------------


def add(a, b):
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def relu(x):
    x = _wrap(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x._accum(g * (x.data > 0))

    return _make(data, (x,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    """Matrix product; stacks of matrices broadcast over leading axes."""
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul requires >=2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul: inner extents differ for shapes {a.data.shape} and {b.data.shape}"
        )
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward)


# -- shape manipulation ------------------------------------------------------


def reshape(x, shape):
    x = _wrap(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.data.shape} as {shape}")

    def backward(g):
        if x.requires_grad:
            x._accum(g.reshape(x.data.shape))

    return _make(np.ascontiguousarray(data), (x,), backward)


def transpose(x, axes=None):
    x = _wrap(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {x.data.shape}")
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(np.transpose(x.data, axes))

    def backward(g):
        if x.requires_grad:
            x._accum(np.transpose(g, inv))

    return _make(data, (x,), backward)


def slice_axis(x, axis, start, stop):
    x = _wrap(x)
    ndim = x.data.ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"slice: axis {axis} invalid for shape {x.data.shape}")
    axis = axis % ndim
    n = x.data.shape[axis]
    if not (0 <= start <= stop <= n):
        raise DimensionError(
            f"slice: range [{start}, {stop}) invalid for extent {n} on axis {axis}"
        )
    key = (slice(None),) * axis + (slice(start, stop),)
    data = np.ascontiguousarray(x.data[key])

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[key] = g
            x._accum(gx)

    return _make(data, (x,), backward)


def concat(tensors, axis):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: need at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.data.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t._accum(part)

    return _make(data, tuple(tensors), backward)


def index_select(x, axis, indices):
    """Gather slices along an axis by integer index (duplicates allowed)."""
    x = _wrap(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError(f"index_select: indices must be 1-d, got shape {idx.shape}")
    n = x.data.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"index_select: index out of range for extent {n} on axis {axis}")
    data = np.take(x.data, idx, axis=axis)

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
            x._accum(gx)

    return _make(np.ascontiguousarray(data), (x,), backward)


def embedding(table, ids):
    """Row lookup into a 2-d table; gradients scatter-add back into the table."""
    table = _wrap(table)
    if table.data.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-d, got {table.data.shape}")
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise DimensionError(
            f"embedding: id out of range for table with {table.data.shape[0]} rows"
        )
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            table._accum(gt)

    return _make(np.ascontiguousarray(data), (table,), backward)


# -- reductions --------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims=False):
    x = _wrap(x)
    axis = _norm_axis(axis, x.data.ndim)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._accum(np.broadcast_to(g, x.data.shape).copy())

    return _make(np.asarray(data), (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    x = _wrap(x)
    axis = _norm_axis(axis, x.data.ndim)
    if axis is None:
        count = x.data.size
    else:
        count = int(np.prod([x.data.shape[a] for a in axis]))
    data = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._accum(np.broadcast_to(g, x.data.shape) / count)

    return _make(np.asarray(data), (x,), backward)


# -- normalization and attention-adjacent ops --------------------------------


def layer_norm(x, gain, shift, eps=1e-6):
    """Layer normalization over the last axis with learned scale and shift."""
    x = _wrap(x)
    gain = _wrap(gain, x.dtype)
    shift = _wrap(shift, x.dtype)
    n = x.data.shape[-1]
    if gain.data.shape != (n,) or shift.data.shape != (n,):
        raise DimensionError(
            f"layer_norm: gain/shift must have shape ({n},), got "
            f"{gain.data.shape} and {shift.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + shift.data

    def backward(g):
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, n).sum(axis=0))
        if shift.requires_grad:
            shift._accum(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
            x._accum(gx)

    return _make(data, (x, gain, shift), backward)


def softmax_last(x, temperature=1.0, additive_mask=None):
    """Temperature softmax over the last axis, computed with max subtraction.

    `additive_mask` (a plain array broadcastable to x) is added to the
    scaled logits; entries at NEG_MASK underflow to exactly zero weight.
    """
    x = _wrap(x)
    t = float(temperature)
    if not t > 0.0:
        raise ParameterError(f"softmax temperature must be positive, got {t}")
    z = x.data / t
    if additive_mask is not None:
        z = z + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dz = s * (g - (g * s).sum(axis=-1, keepdims=True))
            x._accum(dz / t)

    return _make(s, (x,), backward)


def softmax_t(v, temperature):
    """Temperature softmax of a vector; accepts a Tensor or a plain array.

    Plain-array inputs return a plain array (no graph recording).
    """
    if isinstance(v, Tensor):
        return softmax_last(v, temperature)
    t = float(temperature)
    if not t > 0.0:
        raise ParameterError(f"softmax temperature must be positive, got {t}")
    z = np.asarray(v, dtype=np.float64) / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def scaled_dot_attention(q, k, v, causal=False, additive_mask=None):
    """softmax(q k^T / sqrt(d)) v over the last two axes, with optional masks.

    q: (..., Lq, d), k: (..., Lk, d), v: (..., Lk, dv). The causal option
    blocks each query from keys at later positions; `additive_mask` is a
    plain array broadcastable to the (..., Lq, Lk) score matrix.
    """
    q = _wrap(q)
    k = _wrap(k, q.dtype)
    v = _wrap(v, q.dtype)
    if q.data.shape[-1] != k.data.shape[-1]:
        raise DimensionError(
            f"attention: query/key widths differ: {q.data.shape} vs {k.data.shape}"
        )
    if k.data.shape[-2] != v.data.shape[-2]:
        raise DimensionError(
            f"attention: key/value lengths differ: {k.data.shape} vs {v.data.shape}"
        )
    scale = 1.0 / np.sqrt(q.data.shape[-1])
    scores = matmul(q, transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)))
    scores = mul(scores, scale)
    mask = None
    lq, lk = q.data.shape[-2], k.data.shape[-2]
    if causal:
        mask = np.where(np.arange(lk)[None, :] > np.arange(lq)[:, None], NEG_MASK, 0.0)
    if additive_mask is not None:
        mask = additive_mask if mask is None else mask + additive_mask
    weights = softmax_last(scores, 1.0, mask)
    return matmul(weights, v)


# -- loss --------------------------------------------------------------------


def cross_entropy(logits, targets, pad_id):
    """Mean token cross-entropy of logits against integer targets.

    Positions whose target equals pad_id are excluded from the mean. The
    log-sum-exp is computed with max subtraction.
    """
    logits = _wrap(logits)
    targets = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim < 2:
        raise DimensionError(f"cross_entropy: logits must be >=2-d, got {logits.data.shape}")
    if targets.shape != logits.data.shape[:-1]:
        raise DimensionError(
            f"cross_entropy: target shape {targets.shape} does not match "
            f"logit positions {logits.data.shape[:-1]}"
        )
    mask = targets != pad_id
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise DimensionError("cross_entropy: no non-pad target positions")
    safe = np.where(mask, targets, 0)
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    se = e.sum(axis=-1)
    lse = np.log(se) + m[..., 0]
    picked = np.take_along_axis(logits.data, safe[..., None], axis=-1)[..., 0]
    nll = (lse - picked) * mask
    data = np.asarray(nll.sum() / n_valid, dtype=logits.dtype)

    def backward(g):
        if logits.requires_grad:
            p = e / se[..., None]
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
            gl = (p - onehot) * mask[..., None] * (float(g) / n_valid)
            logits._accum(gl)

    return _make(data, (logits,), backward)
