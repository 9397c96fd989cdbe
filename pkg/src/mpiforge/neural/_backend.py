"""Convolution backend selection.

The compiled extension is used when importable; otherwise the numpy
im2col route takes over.  MPIFORGE_KERNELS overrides the choice:
"cy" demands the extension (ImportError if missing), "py" forces the
fallback, "auto" (default) prefers the extension.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

from . import _conv_numpy

_cy = None
_choice = os.environ.get("MPIFORGE_KERNELS", "auto").strip().lower()
if _choice not in ("auto", "cy", "py"):
    warnings.warn("unknown MPIFORGE_KERNELS value %r; using auto" % _choice,
                  stacklevel=1)
    _choice = "auto"
if _choice in ("auto", "cy"):
    try:
        from . import _conv_cy as _cy
    except ImportError:
        _cy = None
        if _choice == "cy":
            raise ImportError(
                "MPIFORGE_KERNELS=cy but the compiled kernel extension is "
                "not built; reinstall the package or set MPIFORGE_KERNELS=py")


def backend_name() -> str:
    """Active kernel backend: "cy" (compiled) or "py" (numpy)."""
    return "py" if _cy is None else "cy"


def _as_c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a)


def conv3d_raw_forward(inp, kernel, bias, stride, threads: int) -> np.ndarray:
    if _cy is None:
        return _conv_numpy.conv3d_forward(inp, kernel, bias, stride)
    dims = _conv_numpy.out_shape(inp.shape[1:], stride)
    out = np.empty((kernel.shape[0],) + dims, dtype=inp.dtype)
    _cy.conv3d_forward(_as_c(inp), _as_c(kernel), _as_c(bias),
                       stride[0], stride[1], stride[2], out, threads)
    return out


def conv3d_raw_backward(inp, kernel, stride, grad_out, threads: int):
    if _cy is None:
        return _conv_numpy.conv3d_backward(inp, kernel, stride, grad_out)
    inp = _as_c(inp)
    grad_out = _as_c(grad_out)
    kernel = _as_c(kernel)
    grad_in = np.empty_like(inp)
    grad_kernel = np.empty_like(kernel)
    _cy.conv3d_grad_input(grad_out, kernel, stride[0], stride[1], stride[2],
                          grad_in, threads)
    _cy.conv3d_grad_kernel(inp, grad_kernel, stride[0], stride[1], stride[2],
                           grad_out, threads)
    grad_bias = grad_out.sum(axis=(1, 2, 3))
    return grad_in, grad_kernel, grad_bias
