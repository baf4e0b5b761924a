"""Dense N-d tensors with tape-based reverse-mode differentiation.

Design notes:

* Gradients are recorded only while a ``Tape`` is active, so inference
  code pays no bookkeeping cost and is plain numpy underneath.
* Training runs in float64 so finite-difference gradient checks can be
  tight; the coding path casts parameters to float32 and relies on
  numpy's fixed reduction order for bit-stable, repeatable results.
* Broadcasting is kept to leading-dim and scalar broadcast in practice;
  the generic ``_unbroadcast`` reduction makes every VJP auditable.
* ``backward`` accumulates into leaf ``.grad`` buffers; calling it twice
  without zeroing doubles the gradients (optimizers own the zeroing).
"""

from __future__ import annotations

import threading

import numpy as np
from scipy import special as _special

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "square",
    "tanh",
    "sigmoid",
    "erf",
    "relu",
    "reciprocal",
    "round_ste",
    "clamp",
    "softmax",
    "matmul",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "pad2d",
    "crop2d",
    "roll",
    "take",
    "scatter_add",
    "linear_solve",
    "detach",
    "zero_grads",
]

_tls = threading.local()


class Tape:
    """Ordered record of primitive ops for one reverse sweep.

    Entries are appended in execution order, which is already a
    topological order, so replaying them in reverse accumulates each
    use of a value exactly once.  A tape is single-threaded; separate
    threads may each run their own tape (thread-local "current").
    """

    def __init__(self):
        self._entries = []  # (out, inputs, vjp)
        self._produced = set()  # id(out) for every recorded output
        self._outer = None

    # -- context management -------------------------------------------------

    def __enter__(self):
        self._outer = getattr(_tls, "tape", None)
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = self._outer
        return False

    @staticmethod
    def current():
        return getattr(_tls, "tape", None)

    # -- recording / replay --------------------------------------------------

    def record(self, out, inputs, vjp):
        out.requires_grad = True
        self._entries.append((out, inputs, vjp))
        self._produced.add(id(out))

    def backward(self, loss):
        """Reverse sweep from a scalar loss; accumulates leaf ``.grad``."""
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                if id(t) in self._produced:
                    acc = grads.get(id(t))
                    grads[id(t)] = gi if acc is None else acc + gi
                else:  # leaf
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gi


class Tensor:
    """Dense array plus autodiff metadata.

    Data is immutable by convention once the tensor participates in a
    tape; only ``.grad`` accumulates.
    """

    __slots__ = ("data", "requires_grad", "grad")

    # defer mixed ndarray/Tensor arithmetic to the reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    # -- introspection -------------------------------------------------------

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

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def astype(self, dtype):
        """Detached dtype cast (used when moving params to the f32 coding path)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------------

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
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dt = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dt))


def _record(out, inputs, vjp):
    t = Tape.current()
    if t is not None and any(i.requires_grad for i in inputs):
        t.record(out, inputs, vjp)
    return out


def backward(loss):
    """Run the reverse sweep on the currently active tape."""
    t = Tape.current()
    if t is None:
        raise RuntimeError("backward() called with no active Tape")
    t.backward(loss)


def zero_grads(params):
    for p in params:
        p.grad = None


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to ``shape`` by summing."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise primitives ----------------------------------------------------


def add(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data + b.data)
    sa, sb = a.data.shape, b.data.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data - b.data)
    sa, sb = a.data.shape, b.data.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
    )


def neg(a):
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def exp(a):
    a = _as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y,))


def log(a):
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))
    ad = a.data
    return _record(out, (a,), lambda g: (g / ad,))


def sqrt(a):
    a = _as_tensor(a)
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (0.5 / y),))


def square(a):
    a = _as_tensor(a)
    out = Tensor(a.data * a.data)
    ad = a.data
    return _record(out, (a,), lambda g: (g * (2.0 * ad),))


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    a = _as_tensor(a)
    y = _special.expit(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def erf(a):
    a = _as_tensor(a)
    out = Tensor(_special.erf(a.data))
    ad = a.data
    c = 2.0 / np.sqrt(np.pi)
    return _record(out, (a,), lambda g: (g * (c * np.exp(-ad * ad)),))


def relu(a):
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0
    return _record(out, (a,), lambda g: (g * mask,))


def reciprocal(a):
    a = _as_tensor(a)
    y = 1.0 / a.data
    out = Tensor(y)
    return _record(out, (a,), lambda g: (-g * y * y,))


def round_ste(a):
    """round(x) forward, identity backward (straight-through estimator)."""
    a = _as_tensor(a)
    out = Tensor(np.round(a.data))
    return _record(out, (a,), lambda g: (g,))


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient passes only where the input was inside."""
    a = _as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _record(out, (a,), lambda g: (g * inside,))


def softmax(a, axis=-1):
    """Numerically stabilized softmax along ``axis``; rejects NaN input."""
    a = _as_tensor(a)
    if np.isnan(a.data).any():
        raise ValueError("softmax: NaN input")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (a,), vjp)


def detach(a):
    a = _as_tensor(a)
    return Tensor(a.data)


# -- contractions and reshapes -------------------------------------------------


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects tensors with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims mismatch: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(out, (a, b), vjp)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape
    return _record(out, (a,), lambda g: (g.reshape(orig),))


def transpose(a, perm):
    a = _as_tensor(a)
    out = Tensor(np.transpose(a.data, perm))
    inv = tuple(np.argsort(perm))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=0):
    tensors = tuple(_as_tensor(t) for t in tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tensors, vjp)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along ``axis``."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx])
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _record(out, (a,), vjp)


def pad2d(a, top, bottom, left, right):
    """Zero-pad the last two axes."""
    a = _as_tensor(a)
    width = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    out = Tensor(np.pad(a.data, width))
    h, w = a.data.shape[-2:]

    def vjp(g):
        sl = (Ellipsis, slice(top, top + h), slice(left, left + w))
        return (g[sl],)

    return _record(out, (a,), vjp)


def crop2d(a, top, bottom, left, right):
    """Inverse of pad2d: drop ``top``/``bottom`` rows and ``left``/``right`` cols."""
    a = _as_tensor(a)
    h, w = a.data.shape[-2:]
    sl = (Ellipsis, slice(top, h - bottom), slice(left, w - right))
    out = Tensor(a.data[sl])

    def vjp(g):
        width = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
        return (np.pad(g, width),)

    return _record(out, (a,), vjp)


def roll(a, shifts, axes):
    a = _as_tensor(a)
    out = Tensor(np.roll(a.data, shifts, axis=axes))
    inv = tuple(-s for s in shifts) if isinstance(shifts, tuple) else -shifts
    return _record(out, (a,), lambda g: (np.roll(g, inv, axis=axes),))


def take(a, idx, out_shape=None):
    """Gather by flat index; dual of scatter_add.

    ``idx`` indexes ``a.data.ravel()``; the result has ``idx.shape``
    (or ``out_shape`` when given).  Backward scatter-adds, so repeated
    indices accumulate.
    """
    a = _as_tensor(a)
    flat = a.data.reshape(-1)[idx.reshape(-1)]
    out = Tensor(flat.reshape(out_shape if out_shape is not None else idx.shape))
    numel, shape = a.data.size, a.data.shape

    def vjp(g):
        acc = np.zeros(numel, dtype=g.dtype)
        np.add.at(acc, idx.reshape(-1), g.reshape(-1))
        return (acc.reshape(shape),)

    return _record(out, (a,), vjp)


def scatter_add(a, idx, out_shape):
    """Scatter-add ``a`` into a zero tensor of ``out_shape``; dual of take."""
    a = _as_tensor(a)
    numel = int(np.prod(out_shape))
    acc = np.zeros(numel, dtype=a.data.dtype)
    np.add.at(acc, idx.reshape(-1), a.data.reshape(-1))
    out = Tensor(acc.reshape(out_shape))
    shape = a.data.shape

    def vjp(g):
        return (g.reshape(-1)[idx.reshape(-1)].reshape(shape),)

    return _record(out, (a,), vjp)


def linear_solve(a, b):
    """Batched solve of A x = b with A (..., C, C), b (..., C).

    VJP: with u = A^-T g,  db = u  and  dA = -u x^T.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    x = np.linalg.solve(a.data, b.data[..., None])[..., 0]
    out = Tensor(x)
    ad = a.data

    def vjp(g):
        u = np.linalg.solve(np.swapaxes(ad, -1, -2), g[..., None])[..., 0]
        da = -u[..., :, None] * x[..., None, :]
        return da, u

    return _record(out, (a, b), vjp)
