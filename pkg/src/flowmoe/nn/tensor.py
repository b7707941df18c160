"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays. Differentiable operations append a
node to the active :class:`Tape`; append order is a topological order of
the computation, so :meth:`Tape.backward` replays the node list in
reverse and visits every node exactly once. Gradients accumulate into
``.grad`` arrays, which lets :class:`Parameter` gradients survive across
multiple backward calls until explicitly zeroed.

Forward evaluation outside a ``record()`` block builds no graph, which is
the inference path.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible; message reports both shapes."""


class NotScalar(ValueError):
    """backward() was called on a tensor that is not a single scalar."""


class LabelOutOfRange(ValueError):
    """A class id lies outside [0, num_classes)."""


class Tensor:
    """Dense numeric array plus gradient slot.

    ``data`` is always a fresh ndarray; no op exposes a view of another
    tensor's buffer, so tensors behave as immutable values unless the
    caller mutates ``data`` in place (parameter updates do, deliberately).
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


class Parameter(Tensor):
    """Trainable tensor with a unique name and a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


# --------------------------------------------------------------------------
# tape machinery
# --------------------------------------------------------------------------

class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _append(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(x) into .grad for every tensor reachable from loss."""
        if loss.data.size != 1:
            raise NotScalar(f"backward needs a scalar loss, got shape {loss.data.shape}")
        _accumulate(loss, np.ones_like(loss.data))
        for out, backward_fn in reversed(self._nodes):
            if out.grad is not None:
                backward_fn(out.grad)


_ACTIVE_TAPE: Tape | None = None


@contextlib.contextmanager
def record() -> Iterator[Tape]:
    """Activate a fresh tape for the enclosed forward computation."""
    global _ACTIVE_TAPE
    prev, _ACTIVE_TAPE = _ACTIVE_TAPE, Tape()
    try:
        yield _ACTIVE_TAPE
    finally:
        _ACTIVE_TAPE = prev


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _register(out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE._append(out, backward_fn)
    return out


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient over broadcast axes back to the operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, dtype=getattr(b, "dtype", None))
    b = _as_tensor(b, dtype=a.dtype)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: {a.data.shape} vs {b.data.shape}") from None
    out = Tensor(data, requires_grad=a.requires_grad or b.requires_grad)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _register(out, backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, dtype=getattr(b, "dtype", None))
    b = _as_tensor(b, dtype=a.dtype)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: {a.data.shape} vs {b.data.shape}") from None
    out = Tensor(data, requires_grad=a.requires_grad or b.requires_grad)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _register(out, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a, None)
    b = _as_tensor(b, None)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.data.shape} vs {b.data.shape}")
    data = np.matmul(a.data, b.data)
    out = Tensor(data, requires_grad=a.requires_grad or b.requires_grad)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _register(out, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, y * (g - dot))

    return _register(out, backward)


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data), requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g / x.data)

    return _register(out, backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y, requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * y)

    return _register(out, backward)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y, requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * y * (1.0 - y))

    return _register(out, backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)
    out = Tensor(y, requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        dy = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * d_inner
        _accumulate(x, g * dy)

    return _register(out, backward)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if scale.data.shape != (d,) or shift.data.shape != (d,):
        raise ShapeMismatch(f"layer_norm: feature dim {d} vs scale {scale.data.shape}, shift {shift.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * scale.data + shift.data,
                 requires_grad=x.requires_grad or scale.requires_grad or shift.requires_grad)

    def backward(g: np.ndarray) -> None:
        if scale.requires_grad:
            _accumulate(scale, (g * xhat).reshape(-1, d).sum(axis=0))
        if shift.requires_grad:
            _accumulate(shift, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * scale.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, gx)

    return _register(out, backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (V, D) for an integer id array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeMismatch(f"embedding_lookup: ids must be integers, got {ids.dtype}")
    out = Tensor(table.data[ids], requires_grad=table.requires_grad)

    def backward(g: np.ndarray) -> None:
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        _accumulate(table, gt)

    return _register(out, backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = list(tensors)
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: {[t.data.shape for t in ts]}") from None
    out = Tensor(data, requires_grad=any(t.requires_grad for t in ts))
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> None:
        for t, start, stop in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                _accumulate(t, g[tuple(idx)])

    return _register(out, backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(x.data[idx].copy(), requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        gx[idx] = g
        _accumulate(x, gx)

    return _register(out, backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    out = Tensor(data, requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _register(out, backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    data = x.data.mean(axis=axis, keepdims=keepdims)
    out = Tensor(data, requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape) / n)

    return _register(out, backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    out = Tensor(np.transpose(x.data, axes).copy(), requires_grad=x.requires_grad)
    inv = None if axes is None else np.argsort(axes)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.transpose(g, inv))

    return _register(out, backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape).copy(), requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(x.data.shape))

    return _register(out, backward)


def gather_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor by integer index; rows may repeat."""
    rows = np.asarray(rows)
    out = Tensor(x.data[rows].copy(), requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        np.add.at(gx, rows, g)
        _accumulate(x, gx)

    return _register(out, backward)


def gather_along_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """np.take_along_axis over the last axis, differentiable in x."""
    idx = np.asarray(idx)
    out = Tensor(np.take_along_axis(x.data, idx, axis=-1).copy(), requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        flat_g = g.reshape(-1, idx.shape[-1])
        flat_i = idx.reshape(-1, idx.shape[-1])
        np.add.at(gx.reshape(-1, x.data.shape[-1]), (np.arange(flat_i.shape[0])[:, None], flat_i), flat_g)
        _accumulate(x, gx)

    return _register(out, backward)


def gather_pairs(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick x[rows[i], cols[i]] from a 2-D tensor; returns a vector."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = Tensor(x.data[rows, cols].copy(), requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        _accumulate(x, gx)

    return _register(out, backward)


def scatter_rows(shape: tuple[int, ...], rows: np.ndarray, values: Tensor) -> Tensor:
    """Zeros of ``shape`` with ``values`` added at the given row indices.

    Adjoint of :func:`gather_rows`; the combine step of sparse dispatch.
    """
    rows = np.asarray(rows)
    data = np.zeros(shape, dtype=values.data.dtype)
    np.add.at(data, rows, values.data)
    out = Tensor(data, requires_grad=values.requires_grad)

    def backward(g: np.ndarray) -> None:
        _accumulate(values, g[rows])

    return _register(out, backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row negative log-likelihood of integer targets under softmax(logits)."""
    targets = np.asarray(targets)
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ShapeMismatch(f"cross_entropy: logits {logits.data.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise LabelOutOfRange(f"target ids must lie in [0, {v})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + logits.data.max(axis=-1)
    nll = lse - logits.data[np.arange(n), targets]
    out = Tensor(nll, requires_grad=logits.requires_grad)

    def backward(g: np.ndarray) -> None:
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        _accumulate(logits, p * g[:, None])

    return _register(out, backward)


def top_k(values: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k over the last axis; ties resolve to the lowest index.

    Pure selection, not differentiable. Returns (values, indices), both
    ordered by descending value.
    """
    values = np.asarray(values)
    if not 1 <= k <= values.shape[-1]:
        raise ValueError(f"top_k: k={k} outside [1, {values.shape[-1]}]")
    order = np.argsort(-values, axis=-1, kind="stable")
    idx = order[..., :k]
    return np.take_along_axis(values, idx, axis=-1), idx
