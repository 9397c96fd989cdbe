"""Dense layer primitives with hand-written adjoints.

All activations are channel-first (C, X, Y, Z).  Forward functions
return the output together with whatever the matching backward needs;
nothing else is retained, there is no general tape or graph here.

Double precision is used by the gradient tests; training runs in
single precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .._threads import get_threads
from . import _backend
from ._conv_numpy import out_shape

__all__ = [
    "FeatureVolume",
    "Conv3dLayer",
    "backend_name",
    "conv3d_forward",
    "conv3d_backward",
    "instance_norm_forward",
    "instance_norm_backward",
    "relu_forward",
    "relu_backward",
    "sigmoid_forward",
    "sigmoid_backward",
    "trilinear_upsample2x",
    "trilinear_upsample2x_adjoint",
    "concat_channels",
    "split_channels",
]

backend_name = _backend.backend_name

NORM_EPS = 1e-5


@dataclass
class FeatureVolume:
    """Channel-first activation block with its dims spelled out."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError("feature volume must be (C, W, H, D)")
        if min(self.data.shape) < 1:
            raise ValueError("feature volume dims must be positive")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple:
        return self.data.shape[1:]


@dataclass
class Conv3dLayer:
    """One 3x3x3 convolution with optional normalization and ReLU."""

    kernel: np.ndarray            # (C_out, C_in, 3, 3, 3)
    bias: np.ndarray              # (C_out,)
    stride: tuple = (1, 1, 1)
    has_activation: bool = True
    has_norm: bool = True
    norm_scale: np.ndarray = None
    norm_shift: np.ndarray = None

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel)
        self.bias = np.asarray(self.bias)
        if self.kernel.ndim != 5 or self.kernel.shape[2:] != (3, 3, 3):
            raise ValueError("kernel must be (C_out, C_in, 3, 3, 3)")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ValueError("bias must have one entry per output channel")
        if isinstance(self.stride, int):
            self.stride = (self.stride,) * 3
        self.stride = tuple(int(s) for s in self.stride)
        if any(s not in (1, 2) for s in self.stride) or len(self.stride) != 3:
            raise ValueError("stride must be 1 or 2 per axis")
        if self.has_norm:
            if self.norm_scale is None or self.norm_shift is None:
                raise ValueError("normalized layer needs scale and shift")
            self.norm_scale = np.asarray(self.norm_scale)
            self.norm_shift = np.asarray(self.norm_shift)

    @property
    def c_out(self) -> int:
        return self.kernel.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernel.shape[1]

    @property
    def param_count(self) -> int:
        n = self.kernel.size + self.bias.size
        if self.has_norm:
            n += self.norm_scale.size + self.norm_shift.size
        return n


# ---------------------------------------------------------------------------
# Convolution


def conv3d_forward(inp: np.ndarray, layer: Conv3dLayer,
                   threads: int = None) -> np.ndarray:
    """Zero-padded 3x3x3 convolution; output dims = input dims / stride."""
    inp = np.asarray(inp)
    if inp.ndim != 4 or inp.shape[0] != layer.c_in:
        raise ValueError("input channels %s do not match layer C_in %d"
                         % (inp.shape, layer.c_in))
    for n, s in zip(inp.shape[1:], layer.stride):
        if s == 2 and n % 2:
            raise ValueError("stride-2 convolution needs even spatial dims, "
                             "got %s" % (inp.shape[1:],))
    if threads is None:
        threads = get_threads()
    return _backend.conv3d_raw_forward(inp, layer.kernel, layer.bias,
                                       layer.stride, threads)


def conv3d_backward(inp: np.ndarray, layer: Conv3dLayer,
                    grad_out: np.ndarray, threads: int = None):
    """Adjoint of conv3d_forward: (grad_input, grad_kernel, grad_bias)."""
    inp = np.asarray(inp)
    grad_out = np.asarray(grad_out)
    want = (layer.c_out,) + out_shape(inp.shape[1:], layer.stride)
    if grad_out.shape != want:
        raise ValueError("grad_out shape %s does not match forward output %s"
                         % (grad_out.shape, want))
    if threads is None:
        threads = get_threads()
    return _backend.conv3d_raw_backward(inp, layer.kernel, layer.stride,
                                        grad_out, threads)


# ---------------------------------------------------------------------------
# Instance normalization (per channel over all voxels)


def instance_norm_forward(x: np.ndarray, scale: np.ndarray, shift: np.ndarray,
                          eps: float = NORM_EPS):
    """Normalize each channel to zero mean / unit variance, then affine."""
    if x[0].size < 2:
        raise ValueError("instance norm needs at least 2 voxels per channel")
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    var = x.var(axis=(1, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    out = scale[:, None, None, None] * xhat + shift[:, None, None, None]
    return out, (xhat, inv, scale)


def instance_norm_backward(ctx, grad_out: np.ndarray):
    """Returns (grad_x, grad_scale, grad_shift)."""
    xhat, inv, scale = ctx
    grad_scale = (grad_out * xhat).sum(axis=(1, 2, 3))
    grad_shift = grad_out.sum(axis=(1, 2, 3))
    gh = grad_out * scale[:, None, None, None]
    gh_mean = gh.mean(axis=(1, 2, 3), keepdims=True)
    ghx_mean = (gh * xhat).mean(axis=(1, 2, 3), keepdims=True)
    grad_x = inv * (gh - gh_mean - xhat * ghx_mean)
    return grad_x, grad_scale, grad_shift


# ---------------------------------------------------------------------------
# Pointwise


def relu_forward(x: np.ndarray):
    out = np.maximum(x, 0.0)
    return out, x > 0


def relu_backward(positive_mask: np.ndarray, grad_out: np.ndarray):
    return grad_out * positive_mask


def sigmoid_forward(x: np.ndarray):
    out = expit(x)
    return out, out


def sigmoid_backward(out: np.ndarray, grad_out: np.ndarray):
    return grad_out * out * (1.0 - out)


# ---------------------------------------------------------------------------
# Trilinear 2x upsampling via per-axis interpolation matrices


_upsample_cache = {}


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """(2n, n) matrix; output centers at (o+0.5)/2 - 0.5, border-clamped."""
    key = (n, np.dtype(dtype))
    hit = _upsample_cache.get(key)
    if hit is not None:
        return hit
    m = np.zeros((2 * n, n), dtype=np.float64)
    for o in range(2 * n):
        s = (o + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(s))
        f = s - i0
        m[o, min(max(i0, 0), n - 1)] += 1.0 - f
        m[o, min(max(i0 + 1, 0), n - 1)] += f
    m = m.astype(dtype)
    _upsample_cache[key] = m
    return m


def _matvec_axis(x: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(x, axis, -1)
    return np.moveaxis(moved @ m.T, -1, axis)


def trilinear_upsample2x(x: np.ndarray) -> np.ndarray:
    """Double every spatial dim of (C, X, Y, Z) by linear interpolation."""
    for axis in (1, 2, 3):
        x = _matvec_axis(x, _upsample_matrix(x.shape[axis], x.dtype), axis)
    return x


def trilinear_upsample2x_adjoint(grad_out: np.ndarray) -> np.ndarray:
    """Exact adjoint; input dims are half the gradient's spatial dims."""
    for axis in (1, 2, 3):
        n = grad_out.shape[axis] // 2
        m = _upsample_matrix(n, grad_out.dtype)
        grad_out = _matvec_axis(grad_out, m.T, axis)
    return grad_out


# ---------------------------------------------------------------------------
# Channel concatenation


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1:] != b.shape[1:]:
        raise ValueError("spatial dims differ: %s vs %s"
                         % (a.shape[1:], b.shape[1:]))
    return np.concatenate([a, b], axis=0)


def split_channels(grad: np.ndarray, first: int):
    return grad[:first], grad[first:]
