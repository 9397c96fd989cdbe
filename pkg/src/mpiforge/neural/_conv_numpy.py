"""Pure-numpy 3D convolution kernels (im2col + GEMM).

Fallback backend used when the compiled extension is unavailable.  The
patch tensor is materialized as 27 strided slices of the zero-padded
input, so the only O(N) work outside BLAS is slicing; accumulation
order is fixed, making results run-to-run deterministic.

Layout: activations (C, X, Y, Z), kernels (C_out, C_in, 3, 3, 3),
zero same-padding of one voxel on every side.
"""

from __future__ import annotations

import numpy as np


def out_shape(in_shape, stride):
    """Spatial output dims for a padded 3x3x3 convolution."""
    return tuple((n - 1) // s + 1 for n, s in zip(in_shape, stride))


def _im2col(inp: np.ndarray, stride, out_dims):
    cin = inp.shape[0]
    xo, yo, zo = out_dims
    sx, sy, sz = stride
    pad = np.zeros((cin,) + tuple(n + 2 for n in inp.shape[1:]), dtype=inp.dtype)
    pad[:, 1:-1, 1:-1, 1:-1] = inp
    col = np.empty((cin, 3, 3, 3, xo, yo, zo), dtype=inp.dtype)
    for kx in range(3):
        for ky in range(3):
            for kz in range(3):
                col[:, kx, ky, kz] = pad[:,
                                         kx:kx + sx * (xo - 1) + 1:sx,
                                         ky:ky + sy * (yo - 1) + 1:sy,
                                         kz:kz + sz * (zo - 1) + 1:sz]
    return col


def conv3d_forward(inp: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
                   stride, threads: int = 1) -> np.ndarray:
    """Convolve (C_in, X, Y, Z) with (C_out, C_in, 3, 3, 3) kernels."""
    del threads  # BLAS threading is managed globally
    cout, cin = kernel.shape[:2]
    dims = out_shape(inp.shape[1:], stride)
    col = _im2col(inp, stride, dims)
    out = kernel.reshape(cout, cin * 27) @ col.reshape(cin * 27, -1)
    out += bias[:, None]
    return out.reshape((cout,) + dims)


def conv3d_backward(inp: np.ndarray, kernel: np.ndarray, stride,
                    grad_out: np.ndarray, threads: int = 1):
    """Adjoint of :func:`conv3d_forward`.

    Returns (grad_input, grad_kernel, grad_bias).  The patch tensor is
    recomputed from the saved input rather than kept on the tape.
    """
    del threads
    cout, cin = kernel.shape[:2]
    dims = grad_out.shape[1:]
    sx, sy, sz = stride
    xo, yo, zo = dims

    grad_bias = grad_out.sum(axis=(1, 2, 3))
    gmat = grad_out.reshape(cout, -1)

    col = _im2col(inp, stride, dims)
    grad_kernel = (gmat @ col.reshape(cin * 27, -1).T).reshape(kernel.shape)

    gcol = (kernel.reshape(cout, cin * 27).T @ gmat)
    gcol = gcol.reshape((cin, 3, 3, 3) + dims)
    gpad = np.zeros((cin,) + tuple(n + 2 for n in inp.shape[1:]), dtype=inp.dtype)
    for kx in range(3):
        for ky in range(3):
            for kz in range(3):
                gpad[:,
                     kx:kx + sx * (xo - 1) + 1:sx,
                     ky:ky + sy * (yo - 1) + 1:sy,
                     kz:kz + sz * (zo - 1) + 1:sz] += gcol[:, kx, ky, kz]
    grad_input = gpad[:, 1:-1, 1:-1, 1:-1]
    return grad_input, grad_kernel, grad_bias
