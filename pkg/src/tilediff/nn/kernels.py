"""Kernel backend selection.

Two implementations of the 3x3 conv hot kernels exist: a compiled Cython
extension and a numpy/im2col path that leans on BLAS. On hosts with an
optimized BLAS the numpy path wins (see benchmarks/bench_kernels.py), so
`auto` prefers it; set TILEDIFF_KERNELS=cy to force the compiled kernels
(e.g. when numpy is built against a reference BLAS).
"""

import os

import numpy as np

from . import _conv_py

_requested = os.environ.get("TILEDIFF_KERNELS", "auto")
if _requested not in ("auto", "py", "cy"):
    raise ValueError(f"TILEDIFF_KERNELS must be auto, py, or cy, not {_requested!r}")

_cy = None
if _requested == "cy":
    from . import _conv_cy as _cy  # ImportError here means the ext is not built

BACKEND = "cython" if _cy is not None else "python"


def compiled_available():
    try:
        from . import _conv_cy  # noqa: F401
    except ImportError:
        return False
    return True


def conv3x3_forward(x, weight, bias):
    if _cy is not None and x.dtype == np.float32:
        return _cy.conv3x3_forward(
            np.ascontiguousarray(x),
            np.ascontiguousarray(weight),
            np.ascontiguousarray(bias),
        )
    return _conv_py.conv3x3_forward(x, weight, bias)


def conv3x3_backward(x, weight, grad_out):
    if _cy is not None and x.dtype == np.float32 and grad_out.dtype == np.float32:
        return _cy.conv3x3_backward(
            np.ascontiguousarray(x),
            np.ascontiguousarray(weight),
            np.ascontiguousarray(grad_out),
        )
    return _conv_py.conv3x3_backward(x, weight, grad_out)
