"""Dense numpy-backed tensors with an explicit reverse-mode tape.

Differentiable ops record themselves only while a :class:`Tape` is active;
outside a tape every op is a plain array computation, which is how inference
runs.  ``Tape.backward`` replays the records in reverse, so gradients are
accumulated exactly once per recorded use of a tensor.

Storage is row-major and contiguous.  Slicing copies.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_local = threading.local()
_FLOAT_TYPES = (np.float32, np.float64)
_debug = False


def _stack(name):
    stack = getattr(_local, name, None)
    if stack is None:
        stack = []
        setattr(_local, name, stack)
    return stack


def default_dtype():
    stack = _stack("dtypes")
    return stack[-1] if stack else np.float32


@contextlib.contextmanager
def precision(dtype):
    """Make ``dtype`` (float32 or float64) the default for new tensors."""
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_TYPES:
        raise ValueError(f"unsupported precision {dtype}")
    stack = _stack("dtypes")
    stack.append(dtype)
    try:
        yield
    finally:
        stack.pop()


def set_debug(flag: bool) -> None:
    """When on, every op asserts its output is finite."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, data, requires_grad=False):
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(data)
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

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
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Tape:
    """Ordered record of differentiable ops for one forward/backward pass.

    A tape can be replayed once; a second ``backward`` raises
    :class:`ContractError`.
    """

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        if self._consumed:
            raise ContractError("tape already replayed; start a new Tape")
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc):
        _stack("tapes").remove(self)
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable):
        self._records.append((out, tuple(parents), backward))

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise ContractError("backward already ran on this tape")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._records:
            raise ContractError("tape is empty; nothing to differentiate")
        self._consumed = True

        grads = {id(loss): np.ones_like(loss.data)}
        owners = {id(loss): loss}
        touched = {}
        for out, parents, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            pgrads = fn(g)
            for p, pg in zip(parents, pgrads):
                if not p.requires_grad:
                    continue
                touched[id(p)] = p
                if pg is None:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    owners[key] = p
        # whatever is left belongs to leaves: accumulate, so gradients of
        # several shards can be summed before an optimizer step
        for key, g in grads.items():
            t = owners[key]
            g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g
        for t in touched.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        self._records = []


def active_tape():
    stack = _stack("tapes")
    return stack[-1] if stack else None


def apply(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the result of a differentiable op.

    ``backward(grad_out)`` must return one gradient (or None) per parent.
    Nothing is recorded unless a tape is active and a parent needs grad.
    """
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a tensor op")
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, requires_grad=needs)
    if needs:
        tape.record(out, parents, backward)
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _pair(a, b):
    if isinstance(a, Tensor):
        b = as_tensor(b, a)
    else:
        a = as_tensor(a, b)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return apply(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return apply(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    return apply(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return apply(out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return apply(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return apply(x.data * c, (x,), lambda g: (g * c,))


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    out = x.data ** p
    return apply(out, (x,), lambda g: (g * p * x.data ** (p - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return apply(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return apply(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return apply(out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return apply(out, (x,), lambda g: (g * (1 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)
    return apply(out, (x,), lambda g: (g * out * (1 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    c = d.dtype.type(_GELU_C)
    u = c * (d + 0.044715 * d ** 3)
    th = np.tanh(u)
    out = 0.5 * d * (1 + th)

    def backward(g):
        du = c * (1 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1 + th) + 0.5 * d * (1 - th * th) * du),)

    return apply(out, (x,), backward)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data > lo
    out = np.where(mask, x.data, x.dtype.type(lo))
    return apply(out, (x,), lambda g: (g * mask,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data > lo) & (x.data < hi)
    out = np.clip(x.data, lo, hi)
    return apply(out, (x,), lambda g: (g * mask,))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where the constant mask ``cond`` holds, else ``b``."""
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return apply(out, (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0), a.shape),
                            _unbroadcast(np.where(cond, 0, g), b.shape)))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return apply(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------- reductions

def _axis(x, axis):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise DimensionError(f"axis {ax} out of range for shape {x.shape}")
    return tuple(ax % x.ndim for ax in axes)


def _expand(g, x, axes, keepdims):
    if axes is not None and not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, x.shape).copy()


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis(x, axis)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    return apply(np.asarray(out), (x,), lambda g: (_expand(g, x, axes, keepdims),))


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis(x, axis)
    n = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    out = np.mean(x.data, axis=axes, keepdims=keepdims)
    return apply(np.asarray(out), (x,), lambda g: (_expand(g, x, axes, keepdims) / n,))


def variance_along(x: Tensor, axis, keepdims=False) -> Tensor:
    """Population (biased) variance along ``axis``."""
    axes = _axis(x, axis)
    n = int(np.prod([x.shape[a] for a in axes]))
    centred = x.data - x.data.mean(axis=axes, keepdims=True)
    out = np.mean(centred * centred, axis=axes, keepdims=keepdims)
    return apply(np.asarray(out), (x,),
                 lambda g: (_expand(g, x, axes, keepdims) * centred * (2.0 / n),))


def max_along(x: Tensor, axis: int, keepdims=False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first argmax."""
    (ax,) = _axis(x, axis)
    idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, ax)

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(gx, idx, gk, axis=ax)
        return (gx,)

    return apply(out, (x,), backward)


def softmax(x: Tensor, axis=-1) -> Tensor:
    (ax,) = _axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)
    return apply(out, (x,),
                 lambda g: (out * (g - (g * out).sum(axis=ax, keepdims=True)),))


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    (ax,) = _axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    return apply(out, (x,),
                 lambda g: (g - np.exp(out) * g.sum(axis=ax, keepdims=True),))


# ---------------------------------------------------------------- shape ops

def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty list")
    (ax,) = _axis(tensors[0], axis)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(
                f"concat along axis {ax}: shapes {[u.shape for u in tensors]} disagree")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=ax))

    return apply(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def slice_(x: Tensor, key) -> Tensor:
    """Basic indexing (ints, slices, Ellipsis, None); always copies."""
    out = np.array(x.data[key])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return apply(out, (x,), backward)


def pad_end(x: Tensor, left: int, right: int, value=0.0, axis=-1) -> Tensor:
    """Pad both ends of one axis with a constant; gradient of the pad is dropped."""
    (ax,) = _axis(x, axis)
    if left < 0 or right < 0:
        raise ContractError("pad widths must be non-negative")
    widths = [(0, 0)] * x.ndim
    widths[ax] = (left, right)
    out = np.pad(x.data, widths, constant_values=value)
    n = x.shape[ax]

    def backward(g):
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(left, left + n)
        return (np.ascontiguousarray(g[tuple(idx)]),)

    return apply(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return apply(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return apply(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def stack(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = list(tensors)
    ax = axis % (tensors[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors], axis=ax)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad)


def parameters_of(tensors: Iterable[Tensor]):
    return [t for t in tensors if t.requires_grad]
