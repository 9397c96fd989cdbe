# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled direct 3D convolution kernels.

Parallel loops split work over disjoint output slices (output channels
for the forward and weight gradients, input channels for the input
gradient) and every per-thread accumulation runs in a fixed order, so
results are bit-identical for any thread count.

Layout: activations (C, X, Y, Z) C-contiguous, kernels
(C_out, C_in, 3, 3, 3), zero same-padding of one voxel per side.
"""

import numpy as np

cimport cython
from cython.parallel cimport prange

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t k, Py_ssize_t s) nogil:
    # smallest o with o*s + k - 1 >= 0
    if k >= 1:
        return 0
    return 1


cdef inline Py_ssize_t _hi(Py_ssize_t k, Py_ssize_t s, Py_ssize_t n_in,
                           Py_ssize_t n_out) nogil:
    # largest o with o*s + k - 1 <= n_in - 1, capped at n_out - 1
    cdef Py_ssize_t h = (n_in - k) // s
    if h > n_out - 1:
        h = n_out - 1
    return h


def conv3d_forward(real[:, :, :, ::1] inp, real[:, :, :, :, ::1] kern,
                   real[::1] bias, Py_ssize_t sx, Py_ssize_t sy, Py_ssize_t sz,
                   real[:, :, :, ::1] out, int threads):
    cdef Py_ssize_t cout = out.shape[0], xo = out.shape[1]
    cdef Py_ssize_t yo = out.shape[2], zo = out.shape[3]
    cdef Py_ssize_t cin = inp.shape[0], xi = inp.shape[1]
    cdef Py_ssize_t yi = inp.shape[2], zi = inp.shape[3]
    cdef Py_ssize_t co, ci, kx, ky, kz, ox, oy, oz
    cdef Py_ssize_t xlo, xhi, ylo, yhi, zlo, zhi, ix, iy
    cdef real w, b

    with nogil:
        for co in prange(cout, num_threads=threads, schedule='static'):
            b = bias[co]
            for ox in range(xo):
                for oy in range(yo):
                    for oz in range(zo):
                        out[co, ox, oy, oz] = b
            for ci in range(cin):
                for kx in range(3):
                    xlo = _lo(kx, sx)
                    xhi = _hi(kx, sx, xi, xo)
                    for ky in range(3):
                        ylo = _lo(ky, sy)
                        yhi = _hi(ky, sy, yi, yo)
                        for kz in range(3):
                            zlo = _lo(kz, sz)
                            zhi = _hi(kz, sz, zi, zo)
                            w = kern[co, ci, kx, ky, kz]
                            if w == 0:
                                continue
                            for ox in range(xlo, xhi + 1):
                                ix = ox * sx + kx - 1
                                for oy in range(ylo, yhi + 1):
                                    iy = oy * sy + ky - 1
                                    for oz in range(zlo, zhi + 1):
                                        out[co, ox, oy, oz] = (
                                            out[co, ox, oy, oz]
                                            + w * inp[ci, ix, iy, oz * sz + kz - 1])


def conv3d_grad_input(real[:, :, :, ::1] grad_out,
                      real[:, :, :, :, ::1] kern,
                      Py_ssize_t sx, Py_ssize_t sy, Py_ssize_t sz,
                      real[:, :, :, ::1] grad_in, int threads):
    cdef Py_ssize_t cout = grad_out.shape[0], xo = grad_out.shape[1]
    cdef Py_ssize_t yo = grad_out.shape[2], zo = grad_out.shape[3]
    cdef Py_ssize_t cin = grad_in.shape[0], xi = grad_in.shape[1]
    cdef Py_ssize_t yi = grad_in.shape[2], zi = grad_in.shape[3]
    cdef Py_ssize_t co, ci, kx, ky, kz, ox, oy, oz
    cdef Py_ssize_t xlo, xhi, ylo, yhi, zlo, zhi, ix, iy
    cdef real w

    with nogil:
        for ci in prange(cin, num_threads=threads, schedule='static'):
            for ox in range(xi):
                for oy in range(yi):
                    for oz in range(zi):
                        grad_in[ci, ox, oy, oz] = 0
            for co in range(cout):
                for kx in range(3):
                    xlo = _lo(kx, sx)
                    xhi = _hi(kx, sx, xi, xo)
                    for ky in range(3):
                        ylo = _lo(ky, sy)
                        yhi = _hi(ky, sy, yi, yo)
                        for kz in range(3):
                            zlo = _lo(kz, sz)
                            zhi = _hi(kz, sz, zi, zo)
                            w = kern[co, ci, kx, ky, kz]
                            if w == 0:
                                continue
                            for ox in range(xlo, xhi + 1):
                                ix = ox * sx + kx - 1
                                for oy in range(ylo, yhi + 1):
                                    iy = oy * sy + ky - 1
                                    for oz in range(zlo, zhi + 1):
                                        grad_in[ci, ix, iy, oz * sz + kz - 1] = (
                                            grad_in[ci, ix, iy, oz * sz + kz - 1]
                                            + w * grad_out[co, ox, oy, oz])


def conv3d_grad_kernel(real[:, :, :, ::1] inp, real[:, :, :, :, ::1] grad_kern,
                       Py_ssize_t sx, Py_ssize_t sy, Py_ssize_t sz,
                       real[:, :, :, ::1] grad_out, int threads):
    cdef Py_ssize_t cout = grad_out.shape[0], xo = grad_out.shape[1]
    cdef Py_ssize_t yo = grad_out.shape[2], zo = grad_out.shape[3]
    cdef Py_ssize_t cin = inp.shape[0], xi = inp.shape[1]
    cdef Py_ssize_t yi = inp.shape[2], zi = inp.shape[3]
    cdef Py_ssize_t co, ci, kx, ky, kz, ox, oy, oz
    cdef Py_ssize_t xlo, xhi, ylo, yhi, zlo, zhi, ix, iy
    cdef real acc

    with nogil:
        for co in prange(cout, num_threads=threads, schedule='static'):
            for ci in range(cin):
                for kx in range(3):
                    xlo = _lo(kx, sx)
                    xhi = _hi(kx, sx, xi, xo)
                    for ky in range(3):
                        ylo = _lo(ky, sy)
                        yhi = _hi(ky, sy, yi, yo)
                        for kz in range(3):
                            zlo = _lo(kz, sz)
                            zhi = _hi(kz, sz, zi, zo)
                            acc = 0
                            for ox in range(xlo, xhi + 1):
                                ix = ox * sx + kx - 1
                                for oy in range(ylo, yhi + 1):
                                    iy = oy * sy + ky - 1
                                    for oz in range(zlo, zhi + 1):
                                        acc = acc + (grad_out[co, ox, oy, oz]
                                                     * inp[ci, ix, iy, oz * sz + kz - 1])
                            grad_kern[co, ci, kx, ky, kz] = acc
