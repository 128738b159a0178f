"""Minimal reverse-mode autodiff over numpy arrays.

Covers exactly the ops the denoiser and the grid prior need: 3x3 conv,
linear, silu, elementwise arithmetic with broadcasting, 2x pooling and
upsampling, channel concat, spatial mean, and mean-squared-error. Gradients
are verified against central finite differences in the test suite.
"""

import numpy as np

from . import kernels


class Var:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = data
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def backward(self):
        order = []
        seen = set()

        def visit(v):
            if id(v) in seen:
                return
            seen.add(id(v))
            for p in v._parents:
                visit(p)
            order.append(v)

        visit(self)
        self.grad = np.ones_like(self.data)
        for v in reversed(order):
            if v._backward is not None and v.grad is not None:
                v._backward(v.grad)


def _accum(v, g):
    if v.grad is None:
        v.grad = g.copy()
    else:
        v.grad += g


def _unbroadcast(g, shape):
    # reduce gradient g back to `shape` after numpy broadcasting
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def const(data):
    return Var(np.asarray(data))


def add(a, b):
    out = Var(a.data + b.data, (a, b))

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._backward = bw
    return out


def sub(a, b):
    out = Var(a.data - b.data, (a, b))

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out._backward = bw
    return out


def mul(a, b):
    out = Var(a.data * b.data, (a, b))

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = bw
    return out


def silu(a):
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Var(a.data * sig, (a,))

    def bw(g):
        _accum(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    out._backward = bw
    return out


def conv3x3(x, w, b):
    out = Var(kernels.conv3x3_forward(x.data, w.data, b.data), (x, w, b))

    def bw(g):
        gx, gw, gb = kernels.conv3x3_backward(x.data, w.data, g)
        _accum(x, gx)
        _accum(w, gw)
        _accum(b, gb)

    out._backward = bw
    return out


def linear(x, w, b):
    # x: (N, F), w: (O, F), b: (O,)
    out = Var(x.data @ w.data.T + b.data, (x, w, b))

    def bw(g):
        _accum(x, g @ w.data)
        _accum(w, g.T @ x.data)
        _accum(b, g.sum(axis=0))

    out._backward = bw
    return out


def avgpool2(x):
    n, c, h, w = x.data.shape
    pooled = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    out = Var(pooled, (x,))

    def bw(g):
        gi = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        _accum(x, gi.astype(x.data.dtype))

    out._backward = bw
    return out


def upsample2(x):
    out = Var(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), (x,))

    def bw(g):
        n, c, h, w = x.data.shape
        _accum(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    out._backward = bw
    return out


def reshape(x, shape):
    out = Var(x.data.reshape(shape), (x,))

    def bw(g):
        _accum(x, g.reshape(x.data.shape))

    out._backward = bw
    return out


def concat_channels(parts):
    data = np.concatenate([p.data for p in parts], axis=1)
    out = Var(data, tuple(parts))

    def bw(g):
        ofs = 0
        for p in parts:
            c = p.data.shape[1]
            _accum(p, g[:, ofs:ofs + c])
            ofs += c

    out._backward = bw
    return out


def spatial_mean(x):
    # (N, C, H, W) -> (N, C)
    n, c, h, w = x.data.shape
    out = Var(x.data.mean(axis=(2, 3)), (x,))

    def bw(g):
        _accum(x, np.broadcast_to(
            g[:, :, None, None] / (h * w), x.data.shape).astype(x.data.dtype))

    out._backward = bw
    return out


def mse(a, b):
    diff = a.data - b.data
    out = Var(np.asarray(np.mean(diff * diff)), (a, b))

    def bw(g):
        scale = 2.0 * g / diff.size
        _accum(a, (scale * diff).astype(a.data.dtype))
        _accum(b, (-scale * diff).astype(b.data.dtype))

    out._backward = bw
    return out
