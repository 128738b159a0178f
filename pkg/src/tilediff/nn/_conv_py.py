"""Pure-numpy 3x3 convolution kernels (fallback backend).

Layout is NCHW with same padding. The im2col buffers are float32 for
forward passes and keep the caller's dtype for gradient checks in float64.
"""

import numpy as np


def _im2col3(x):
    # x: (N, C, H, W) -> (N, C*9, H*W) patches of the 3x3 neighborhood
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, w), dtype=x.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, :, k] = xp[:, :, dy:dy + h, dx:dx + w]
            k += 1
    return cols.reshape(n, c * 9, h * w)


def conv3x3_forward(x, weight, bias):
    """out[n,co] = bias[co] + sum_ci,dy,dx weight[co,ci,dy,dx] * x[n,ci,y+dy-1,x+dx-1]"""
    n, c, h, w = x.shape
    co = weight.shape[0]
    cols = _im2col3(x)
    wmat = weight.reshape(co, c * 9)
    out = wmat @ cols
    out += bias[None, :, None]
    return out.reshape(n, co, h, w)


def conv3x3_backward(x, weight, grad_out):
    """Returns (grad_x, grad_weight, grad_bias)."""
    n, c, h, w = x.shape
    co = weight.shape[0]
    go = grad_out.reshape(n, co, h * w)

    cols = _im2col3(x)
    go_flat = go.transpose(1, 0, 2).reshape(co, n * h * w)
    cols_flat = cols.transpose(1, 0, 2).reshape(c * 9, n * h * w)
    grad_w = (go_flat @ cols_flat.T).reshape(weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))

    # grad wrt input: correlate grad_out with the flipped kernel
    wmat = weight.reshape(co, c * 9)
    gcols = (wmat.T @ go_flat).reshape(c, 9, n, h, w).transpose(2, 0, 1, 3, 4)
    grad_x = np.zeros((n, c, h + 2, w + 2), dtype=grad_out.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            grad_x[:, :, dy:dy + h, dx:dx + w] += gcols[:, :, k]
            k += 1
    return grad_x[:, :, 1:1 + h, 1:1 + w], grad_w, grad_b
