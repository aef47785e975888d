"""Minimal reverse-mode automatic differentiation on numpy arrays.

Operations executed on :class:`Tensor` objects that belong to a :class:`Tape`
are recorded in execution order; :meth:`Tape.gradient` replays them backwards.
Constants (``requires_grad=False``) are never recorded.

Example
-------
>>> tape = Tape()
>>> x = tape.leaf(np.array([1.0, 2.0]))
>>> y = ops.sum(ops.mul(x, x))
>>> tape.gradient(y, [x])[0]
array([2., 4.])
"""
from __future__ import annotations

import math

import numpy as np

from .errors import NonFiniteError, TapeError
from .kernels import scatter_add_rows


class Tensor:
    __slots__ = ("data", "tape", "requires_grad", "name")

    def __init__(self, data, tape=None, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return index(self, key)


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self, check_finite=False):
        self.records = []
        self.check_finite = check_finite

    def leaf(self, data, name=None):
        return Tensor(data, self, True, name)

    def constant(self, data):
        return Tensor(data)

    def gradient(self, output: Tensor, wrt, seed=None):
        """Gradients of ``output`` (scalar unless ``seed`` is given) w.r.t. ``wrt``."""
        if output.tape is not self or not output.requires_grad:
            raise TapeError("output was not computed on this tape")
        for w in wrt:
            if not (isinstance(w, Tensor) and w.tape is self and w.requires_grad):
                raise TapeError(f"leaf {getattr(w, 'name', None)!r} is not on this tape")
        if seed is None:
            if output.data.size != 1:
                raise ValueError("gradient of a non-scalar output needs an explicit seed")
            seed = np.ones_like(output.data)
        grads = {id(output): np.asarray(seed, dtype=np.float64)}
        for out, inputs, backward in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
        return [grads.get(id(w), np.zeros_like(w.data)) for w in wrt]


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Tensor) and x.requires_grad:
            return x.tape
    return None


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, inputs, backward, name=None):
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    if tape.check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite activation in {name or 'op'}")
    out = Tensor(data, tape, True, name)
    tape.records.append((out, inputs, backward))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)), "div")


def relu(x):
    x = _wrap(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x):
    x = _wrap(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = _wrap(x)
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x):
    x = _wrap(x)
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sqrt(x):
    x = _wrap(x)
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def rownorm(x, eps=1e-24):
    """Euclidean norm of each row, ``sqrt(sum(x^2) + eps)``; gradient 0 at x = 0."""
    x = _wrap(x)
    xd = x.data
    out = np.sqrt(np.einsum("ij,ij->i", xd, xd) + eps)
    return _record(out[:, None], (x,), lambda g: (g * xd / out[:, None],), "rownorm")


# --------------------------------------------------------------------------
# reductions and shape ops

def sum(x, axis=None, keepdims=False):
    x = _wrap(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _record(out, (x,), back, "sum")


def mean(x, axis=None, keepdims=False):
    x = _wrap(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    x = _wrap(x)
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def index(x, key):
    """Basic/advanced indexing; backward scatters with ``np.add.at``."""
    x = _wrap(x)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)
    return _record(x.data[key], (x,), back, "index")


def transpose(x):
    x = _wrap(x)
    return _record(x.data.T, (x,), lambda g: (g.T,), "transpose")


def concat(xs, axis=-1):
    xs = [_wrap(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                   lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# --------------------------------------------------------------------------
# linear algebra and graph ops

def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb
    return _record(ad @ bd, (a, b), back, "matmul")


def linear(x, w, b, relu_out=False):
    """``x @ w + b`` (optionally followed by ReLU) recorded as one operation."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    xd, wd = x.data, w.data
    y = xd @ wd
    y += b.data
    mask = None
    if relu_out:
        mask = y > 0
        y *= mask

    def back(g):
        if mask is not None:
            g = g * mask
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb
    return _record(y, (x, w, b), back, "linear")


def gather_rows(x, idx):
    """``x[idx]`` for an integer index vector; backward is a fixed-order scatter-add."""
    x = _wrap(x)
    n = x.shape[0]
    idx = np.asarray(idx, dtype=np.int64)
    return _record(x.data[idx], (x,), lambda g: (scatter_add_rows(g, idx, n),), "gather")


def scatter_add(x, idx, n_out):
    """Row-wise segment sum, accumulated in ascending row order."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)
    return _record(scatter_add_rows(x.data, idx, n_out), (x,), lambda g: (g[idx],), "scatter_add")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise each row to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        gg = (g * xhat).sum(axis=0) if gamma.requires_grad else None
        gb = g.sum(axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return gx, gg, gb
    return _record(xhat * gd + beta.data, (x, gamma, beta), back, "layer_norm")


def logsumexp(x):
    """``log(sum(exp(x)))`` over all entries, computed stably."""
    x = _wrap(x)
    xd = x.data
    m = xd.max()
    e = np.exp(xd - m)
    s = e.sum()
    return _record(np.array(m + math.log(s)), (x,), lambda g: (g * e / s,), "logsumexp")


def mse(pred, target):
    """Mean of squared differences over all entries."""
    return mean(square(sub(pred, target)))


# --------------------------------------------------------------------------
# rotation helpers

_SKEW_BASIS = np.zeros((3, 9))
for _i, (_r, _c, _s) in enumerate([(2, 1, 1), (0, 2, 1), (1, 0, 1)]):
    _SKEW_BASIS[_i, _r * 3 + _c] = _s
    _SKEW_BASIS[_i, _c * 3 + _r] = -_s


def _rodrigues_coeffs(s):
    """``a = sin(t)/t``, ``b = (1-cos t)/t^2`` at ``t^2 = s`` and their s-derivatives."""
    if s < 1e-4:
        a = 1 - s / 6 + s * s / 120
        b = 0.5 - s / 24 + s * s / 720
        da = -1 / 6 + s / 60
        db = -1 / 24 + s / 360
    else:
        t = math.sqrt(s)
        sn, cs = math.sin(t), math.cos(t)
        a, b = sn / t, (1 - cs) / s
        da = (t * cs - sn) / (2 * t ** 3)
        db = (t * sn - 2 * (1 - cs)) / (2 * s * s)
    return a, b, da, db


def _coeff_op(s, which):
    s = _wrap(s)
    sv = float(s.data.reshape(-1)[0])
    a, b, da, db = _rodrigues_coeffs(sv)
    val, d = (a, da) if which == 0 else (b, db)
    return _record(np.full(s.shape, val), (s,), lambda g: (g * d,), "rodrigues")


def so3_exp(omega):
    """Rotation matrix ``exp([omega]x)`` of a 3-vector tensor."""
    omega = _wrap(omega)
    K = reshape(matmul(reshape(omega, (1, 3)), _SKEW_BASIS), (3, 3))
    s = sum(square(omega))
    a = _coeff_op(reshape(s, (1, 1)), 0)
    b = _coeff_op(reshape(s, (1, 1)), 1)
    return add(add(np.eye(3), mul(a, K)), mul(b, matmul(K, K)))


class _Ops:
    """Namespace so callers can write ``ops.sum`` without shadowing builtins."""

    add = staticmethod(add)
    sub = staticmethod(sub)
    mul = staticmethod(mul)
    div = staticmethod(div)
    relu = staticmethod(relu)
    exp = staticmethod(exp)
    log = staticmethod(log)
    square = staticmethod(square)
    sqrt = staticmethod(sqrt)
    rownorm = staticmethod(rownorm)
    sum = staticmethod(sum)
    mean = staticmethod(mean)
    reshape = staticmethod(reshape)
    index = staticmethod(index)
    transpose = staticmethod(transpose)
    concat = staticmethod(concat)
    matmul = staticmethod(matmul)
    linear = staticmethod(linear)
    gather_rows = staticmethod(gather_rows)
    scatter_add = staticmethod(scatter_add)
    layer_norm = staticmethod(layer_norm)
    logsumexp = staticmethod(logsumexp)
    mse = staticmethod(mse)
    so3_exp = staticmethod(so3_exp)


ops = _Ops()
