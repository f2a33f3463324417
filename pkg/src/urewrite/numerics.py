"""A small define-by-run reverse-mode autodiff engine on top of numpy.

Operations executed inside an active :class:`Tape` are recorded together
with a backward rule; :func:`backward` replays them in reverse.  Outside a
tape the same functions just compute values, which is how inference runs.

All data is float64.
"""
import os

import numpy as np

from . import _kernels
from .errors import NumericError, ShapeError

MASK_FILL = -1e9
LN_EPS = 1e-5

_CHECK_EVERY_OP = os.environ.get("UREWRITE_CHECK_FINITE", "") == "1"
_tape_stack = []
_relu_log = None  # list of ReLU input arrays while kink recording is on


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")

    def __init__(self, data, requires_grad=False, name=None, _leaf=True):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._leaf = _leaf
        self.grad = np.zeros_like(self.data) if (requires_grad and _leaf) else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations on grad-requiring tensors executed
    while the tape is active are appended to it.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss):
        backward(loss, self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr, what):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


def _make(data, inputs, backward_fn, opname):
    if _CHECK_EVERY_OP:
        _finite(data, f"output of {opname}")
    needs = _tape_stack and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = bool(needs)
    out.name = None
    out._leaf = False
    out.grad = None
    if needs:
        _tape_stack[-1].records.append((out, inputs, backward_fn))
    return out


def backward(loss, tape):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf.

    Intermediate gradients are kept local to the call, so calling this twice
    on the same tape adds the gradients twice.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    _finite(loss.data, "loss")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for t, tg in zip(inputs, in_grads):
            if tg is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + tg
            else:
                grads[key] = tg
            if t._leaf:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        _finite(g, f"gradient of {t.name or 'tensor'}")
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g
    if id(loss) in grads and loss._leaf and loss.requires_grad:
        loss.grad += grads[id(loss)]


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _make(ad * bd, (a, b), bw, "mul")


def relu(x):
    if _relu_log is not None:
        _relu_log.append(x.data.copy())
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,), "relu")


def sigmoid(x):
    # pre-activation clipped to +-30 so the output stays strictly inside (0, 1)
    z = np.clip(x.data, -30.0, 30.0)
    y = 1.0 / (1.0 + np.exp(-z))
    live = (x.data > -30.0) & (x.data < 30.0)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y) * live,), "sigmoid")


def log(x, floor=1e-12):
    """Natural log with the input clamped from below at ``floor``."""
    xd = x.data
    clamped = xd < floor
    y = np.log(np.maximum(xd, floor))
    return _make(y, (x,), lambda g: (np.where(clamped, 0.0, g / np.where(clamped, 1.0, xd)),), "log")


def dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# --------------------------------------------------------------------------
# reductions and shape ops
# --------------------------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(np.asarray(out, dtype=np.float64), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=()):
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x, idx):
    shape = x.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def bw(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)
    return _make(x.data[idx], (x,), bw, "getitem")


def concat(tensors, axis=-1):
    """Concatenate along the last axis (or ``axis``)."""
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb
    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x, w, b=None):
    """``x @ w + b`` with ``w`` of shape ``[d_in, d_out]``."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# --------------------------------------------------------------------------
# normalizers
# --------------------------------------------------------------------------

def softmax_masked(x, mask=None):
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Masked entries come out exactly 0.  A row with no unmasked entry is an
    error.
    """
    xd = x.data
    if mask is None:
        z = xd - xd.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(mask, xd.shape).any(axis=-1).all():
            raise ValueError("invalid mask: a softmax row has every entry masked")
        z = xd + np.where(mask, 0.0, MASK_FILL)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z) * mask
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return _make(y, (x,), bw, "softmax_masked")


def layer_norm(x, gain, bias, eps=LN_EPS):
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        dx = (inv / d) * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                          - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _make(y, (x, gain, bias), bw, "layer_norm")


# --------------------------------------------------------------------------
# indexing ops
# --------------------------------------------------------------------------

def embedding(table, ids, name="embedding"):
    """Row lookup ``table[ids]``; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = int(ids.max() if ids.max() >= n else ids.min())
        raise IndexError(f"index {bad} out of range for {name} table with {n} rows")
    tshape = table.shape

    def bw(g):
        full = np.zeros(tshape)
        _kernels.scatter_add_rows(full, ids.reshape(-1), g.reshape(-1, tshape[-1]))
        return (full,)
    return _make(table.data[ids], (table,), bw, "embedding")


def copy_scatter(weights, ids, size):
    """Group position weights ``[B, T, m]`` by token id into ``[B, T, size]``."""
    ids = np.asarray(ids, dtype=np.int64)
    out = _kernels.copy_scatter(weights.data, ids, size)
    idx = np.broadcast_to(ids[:, None, :], weights.shape)

    def bw(g):
        return (np.take_along_axis(g, idx, axis=-1),)
    return _make(out, (weights,), bw, "copy_scatter")


def gather_last(x, idx):
    """``x[..., idx]`` elementwise: picks one entry of the last axis per row."""
    idx = np.asarray(idx, dtype=np.int64)[..., None]
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)
    return _make(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), bw, "gather_last")


# --------------------------------------------------------------------------
# testing helpers
# --------------------------------------------------------------------------

class record_relu_inputs:
    """Collect the input of every ReLU evaluated inside the block."""

    def __enter__(self):
        global _relu_log
        self._prev = _relu_log
        _relu_log = self.inputs = []
        return self

    def __exit__(self, *exc):
        global _relu_log
        _relu_log = self._prev
        return False


def relu_margin(f):
    """Smallest |ReLU input| seen while evaluating ``f()``."""
    with record_relu_inputs() as rec:
        f()
    return min((float(np.abs(a).min()) for a in rec.inputs if a.size), default=np.inf)


def numerical_grad(f, tensor, h=1e-3, kink_check=False):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``tensor.data``.

    With ``kink_check`` also returns the number of perturbations that flipped
    the sign of some ReLU input relative to the unperturbed point (where the
    difference quotient is not a derivative estimate).
    """
    if kink_check:
        with record_relu_inputs() as rec:
            f()
        base = [a > 0 for a in rec.inputs]
        flips = 0
        flat = tensor.data.reshape(-1)
        out = np.zeros_like(flat)
        for i in range(flat.size):
            old = flat[i]
            vals = []
            for x in (old + h, old - h):
                flat[i] = x
                with record_relu_inputs() as rec:
                    vals.append(float(f()))
                if any(((a > 0) != b).any() for a, b in zip(rec.inputs, base)):
                    flips += 1
            flat[i] = old
            out[i] = (vals[0] - vals[1]) / (2 * h)
        return out.reshape(tensor.shape), flips
    return _numerical_grad(f, tensor, h)


def _numerical_grad(f, tensor, h):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``tensor.data``."""
    flat = tensor.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f())
        flat[i] = old - h
        fm = float(f())
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(tensor.shape)


def relative_error(analytic, numeric, floor=1e-6):
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)`` over a whole tensor.

    The floor turns the measure absolute for gradients that vanish
    identically (e.g. attention key biases).
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
