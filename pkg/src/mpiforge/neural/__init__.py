"""From-scratch dense kernels, the refiner U-Net, Adam and weights IO.

Hot convolution loops live in a compiled extension when available; a
numpy im2col route is the drop-in fallback.  See layers.backend_name.
"""

from .adam import AdamState, adam_step
from .layers import (
    Conv3dLayer,
    FeatureVolume,
    backend_name,
    concat_channels,
    conv3d_backward,
    conv3d_forward,
    instance_norm_backward,
    instance_norm_forward,
    relu_backward,
    relu_forward,
    sigmoid_backward,
    sigmoid_forward,
    split_channels,
    trilinear_upsample2x,
    trilinear_upsample2x_adjoint,
)
from .unet import (
    IN_CHANNELS,
    LAYER_SPECS,
    NetworkParams,
    add_grads,
    grad_tensors,
    init_params,
    param_count,
    param_tensors,
    scale_grads,
    unet_backward,
    unet_forward,
    zero_grads,
)
from .weights_io import load_weights, save_weights

__all__ = [
    "AdamState", "adam_step",
    "Conv3dLayer", "FeatureVolume", "backend_name",
    "concat_channels", "split_channels",
    "conv3d_forward", "conv3d_backward",
    "instance_norm_forward", "instance_norm_backward",
    "relu_forward", "relu_backward",
    "sigmoid_forward", "sigmoid_backward",
    "trilinear_upsample2x", "trilinear_upsample2x_adjoint",
    "IN_CHANNELS", "LAYER_SPECS", "NetworkParams",
    "init_params", "param_count", "param_tensors", "grad_tensors",
    "zero_grads", "add_grads", "scale_grads",
    "unet_forward", "unet_backward",
    "load_weights", "save_weights",
]
