"""Three-level volumetric U-Net over 8-channel feature volumes.

The graph is fixed: two stride-2 encoder stages, four convolutions at
the bottom, two trilinear-upsampled decoder stages with channel-concat
skip links from conv1_2 and conv2_2, and a purely linear single-channel
head (conv1_7, no normalization, no activation).  Every other
convolution is followed by instance normalization and ReLU.

unet_forward returns an activation tape; unet_backward replays it in
reverse and produces exact adjoint gradients for every parameter and
the input features.  Gradients from repeated calls add, which is how
weight sharing across refinement iterations accumulates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    Conv3dLayer,
    concat_channels,
    conv3d_backward,
    conv3d_forward,
    instance_norm_backward,
    instance_norm_forward,
    relu_backward,
    relu_forward,
    split_channels,
    trilinear_upsample2x,
    trilinear_upsample2x_adjoint,
)

__all__ = [
    "LAYER_SPECS",
    "IN_CHANNELS",
    "NetworkParams",
    "init_params",
    "param_count",
    "param_tensors",
    "grad_tensors",
    "zero_grads",
    "add_grads",
    "scale_grads",
    "unet_forward",
    "unet_backward",
]

IN_CHANNELS = 8

# name, C_in, C_out, stride, normalized+activated
LAYER_SPECS = (
    ("conv1_1", 8, 8, 1, True),
    ("conv1_2", 8, 8, 1, True),
    ("conv1_3", 8, 16, 2, True),
    ("conv2_1", 16, 16, 1, True),
    ("conv2_2", 16, 16, 1, True),
    ("conv2_3", 16, 32, 2, True),
    ("conv3_1", 32, 32, 1, True),
    ("conv3_2", 32, 32, 1, True),
    ("conv3_3", 32, 32, 1, True),
    ("conv3_4", 32, 32, 1, True),
    ("conv2_4", 32, 16, 1, True),
    ("conv2_5", 32, 16, 1, True),   # input: concat(conv2_2, upsampled conv2_4)
    ("conv2_6", 16, 16, 1, True),
    ("conv1_4", 16, 8, 1, True),
    ("conv1_5", 16, 8, 1, True),    # input: concat(conv1_2, upsampled conv1_4)
    ("conv1_6", 8, 8, 1, True),
    ("conv1_7", 8, 1, 1, False),    # linear head
)

# Execution segments between the structural ops (strides already encode
# the downsampling; upsample/concat sites are handled explicitly).
_ENCODE_1 = ("conv1_1", "conv1_2")
_ENCODE_2 = ("conv1_3", "conv2_1", "conv2_2")
_BOTTOM = ("conv2_3", "conv3_1", "conv3_2", "conv3_3", "conv3_4", "conv2_4")
_DECODE_2 = ("conv2_5", "conv2_6", "conv1_4")
_DECODE_1 = ("conv1_5", "conv1_6", "conv1_7")


@dataclass
class NetworkParams:
    """All layer parameters keyed by layer name, in topological order."""

    layers: dict

    def __post_init__(self):
        names = tuple(self.layers)
        want = tuple(s[0] for s in LAYER_SPECS)
        if names != want:
            raise ValueError("layer set/order mismatch: %s" % (names,))

    @property
    def param_count(self) -> int:
        return sum(l.param_count for l in self.layers.values())

    @property
    def dtype(self):
        return self.layers["conv1_1"].kernel.dtype

    def astype(self, dtype) -> "NetworkParams":
        out = {}
        for name, l in self.layers.items():
            out[name] = Conv3dLayer(
                kernel=l.kernel.astype(dtype), bias=l.bias.astype(dtype),
                stride=l.stride, has_activation=l.has_activation,
                has_norm=l.has_norm,
                norm_scale=None if not l.has_norm else l.norm_scale.astype(dtype),
                norm_shift=None if not l.has_norm else l.norm_shift.astype(dtype))
        return NetworkParams(out)


def param_count() -> int:
    """Closed-form parameter total over the layer table."""
    total = 0
    for _, cin, cout, _, normed in LAYER_SPECS:
        total += 27 * cin * cout + cout + (2 * cout if normed else 0)
    return total


def init_params(seed: int, dtype=np.float32) -> NetworkParams:
    """Fan-in-scaled normal kernels, zero biases, identity norm affine."""
    rng = np.random.default_rng(seed)
    layers = {}
    for name, cin, cout, stride, normed in LAYER_SPECS:
        fan_in = cin * 27
        kernel = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                            size=(cout, cin, 3, 3, 3)).astype(dtype)
        layers[name] = Conv3dLayer(
            kernel=kernel, bias=np.zeros(cout, dtype=dtype),
            stride=(stride,) * 3, has_activation=normed, has_norm=normed,
            norm_scale=np.ones(cout, dtype=dtype) if normed else None,
            norm_shift=np.zeros(cout, dtype=dtype) if normed else None)
    return NetworkParams(layers)


def param_tensors(params: NetworkParams):
    """(name, array) pairs in the canonical serialization order."""
    for name, layer in params.layers.items():
        yield name + ".kernel", layer.kernel
        yield name + ".bias", layer.bias
        if layer.has_norm:
            yield name + ".scale", layer.norm_scale
            yield name + ".shift", layer.norm_shift


def grad_tensors(grads: dict):
    """Same ordering as param_tensors for a gradient dict."""
    for name, g in grads.items():
        yield name + ".kernel", g["kernel"]
        yield name + ".bias", g["bias"]
        if "scale" in g:
            yield name + ".scale", g["scale"]
            yield name + ".shift", g["shift"]


def zero_grads(params: NetworkParams) -> dict:
    grads = {}
    for name, l in params.layers.items():
        g = {"kernel": np.zeros_like(l.kernel), "bias": np.zeros_like(l.bias)}
        if l.has_norm:
            g["scale"] = np.zeros_like(l.norm_scale)
            g["shift"] = np.zeros_like(l.norm_shift)
        grads[name] = g
    return grads


def add_grads(acc: dict, extra: dict) -> dict:
    """In-place acc += extra over every tensor."""
    for name, g in extra.items():
        slot = acc[name]
        for key, val in g.items():
            slot[key] += val
    return acc


def scale_grads(grads: dict, factor: float) -> dict:
    for g in grads.values():
        for key in g:
            g[key] *= factor
    return grads


# ---------------------------------------------------------------------------
# Forward / backward


def _block_forward(x, layer, threads, debug, name):
    y = conv3d_forward(x, layer, threads=threads)
    nctx = mask = None
    if layer.has_norm:
        y, nctx = instance_norm_forward(y, layer.norm_scale, layer.norm_shift)
    if layer.has_activation:
        y, mask = relu_forward(y)
    if debug and not np.isfinite(y).all():
        raise FloatingPointError("non-finite activation after %s" % name)
    return y, (x, nctx, mask)


def _block_backward(entry, layer, grad, threads):
    x, nctx, mask = entry
    if mask is not None:
        grad = relu_backward(mask, grad)
    pgrads = {}
    if nctx is not None:
        grad, pgrads["scale"], pgrads["shift"] = instance_norm_backward(nctx, grad)
    gx, pgrads["kernel"], pgrads["bias"] = conv3d_backward(x, layer, grad,
                                                           threads=threads)
    # keep serialization order kernel, bias, scale, shift
    ordered = {"kernel": pgrads["kernel"], "bias": pgrads["bias"]}
    if nctx is not None:
        ordered["scale"] = pgrads["scale"]
        ordered["shift"] = pgrads["shift"]
    return gx, ordered


def unet_forward(features: np.ndarray, params: NetworkParams,
                 threads: int = None, debug_checks: bool = False):
    """Run the network; returns (1, W, H, D) output and the tape."""
    x = np.asarray(features)
    if x.ndim != 4 or x.shape[0] != IN_CHANNELS:
        raise ValueError("features must be (%d, W, H, D), got %s"
                         % (IN_CHANNELS, x.shape))
    if any(n % 4 for n in x.shape[1:]):
        raise ValueError(
            "spatial dims %s must each be divisible by 4 (two stride-2 "
            "stages)" % (x.shape[1:],))
    layers = params.layers
    tape = {"entries": {}, "in_shape": x.shape}
    ent = tape["entries"]

    def run(names, h):
        for name in names:
            h, ent[name] = _block_forward(h, layers[name], threads,
                                          debug_checks, name)
        return h

    h = run(_ENCODE_1, x)
    skip1 = h                      # conv1_2 output
    h = run(_ENCODE_2, h)
    skip2 = h                      # conv2_2 output
    h = run(_BOTTOM, h)
    h = concat_channels(skip2, trilinear_upsample2x(h))
    h = run(_DECODE_2, h)
    h = concat_channels(skip1, trilinear_upsample2x(h))
    h = run(_DECODE_1, h)
    return h, tape


def unet_backward(tape: dict, grad_output: np.ndarray, params: NetworkParams,
                  threads: int = None):
    """Adjoint pass over a forward tape: (param grads, grad_features)."""
    ent = tape["entries"]
    missing = [s[0] for s in LAYER_SPECS if s[0] not in ent]
    if missing:
        raise ValueError("tape is missing layers %s" % missing)
    layers = params.layers
    grads = {}

    def run_back(names, g):
        for name in reversed(names):
            g, grads[name] = _block_backward(ent[name], layers[name], g,
                                             threads)
        return g

    g = np.asarray(grad_output)
    if g.shape != (1,) + tape["in_shape"][1:]:
        raise ValueError("grad_output shape %s does not match forward "
                         "output" % (g.shape,))

    g = run_back(_DECODE_1, g)
    g_skip1, g_up = split_channels(g, layers["conv1_2"].c_out)
    g = run_back(_DECODE_2, trilinear_upsample2x_adjoint(g_up))
    g_skip2, g_up = split_channels(g, layers["conv2_2"].c_out)
    g = run_back(_BOTTOM, trilinear_upsample2x_adjoint(g_up))
    g = run_back(_ENCODE_2, g + g_skip2)
    g = run_back(_ENCODE_1, g + g_skip1)

    ordered = {name: grads[name] for name, *_ in LAYER_SPECS}
    return ordered, g
