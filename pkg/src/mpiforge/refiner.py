"""Recurrent alpha refinement with a shared-weight network.

The opacity volume starts as empty space over an opaque far plane.
Each iteration assembles an 8-channel feature volume from the current
logits and the visibility-weighted color statistics of the plane-sweep
stack, runs the U-Net once, and adds the single-channel output to the
logits.  Every iteration reads the same parameters, so the iteration
count is a free runtime choice and not baked into the weights.

Inference entry points live here; the training loop reimplements the
same recurrence with tapes kept for the backward pass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .geometry import DepthPlanes, PinholeCamera, average_reference_camera
from .neural.unet import IN_CHANNELS, NetworkParams, unet_forward
from .render import AlphaVolume, Mpi, canonical_view_order, clue_forward, colorize_mpi
from .warp import (
    ImageStack,
    PsvStack,
    build_psv_stack,
    planes_to_volume,
    volume_to_planes,
    warp_table_from_reference,
)

__all__ = [
    "RefinerConfig",
    "init_alpha",
    "assemble_features",
    "refine_step",
    "run_refiner",
]


@dataclass
class RefinerConfig:
    """Iteration count, plane set and the two initialization logits."""

    iterations: int
    planes: DepthPlanes
    init_logit_empty: float = -8.0
    init_logit_background: float = 8.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if expit(self.init_logit_empty) >= 0.01:
            raise ValueError("init_logit_empty must give opacity < 0.01")
        if expit(self.init_logit_background) <= 0.99:
            raise ValueError("init_logit_background must give opacity > 0.99")


def _check_dims(w: int, h: int, d: int) -> None:
    if w % 4 or h % 4 or d % 4:
        raise ValueError(
            "volume dims (%d, %d, %d) must each be divisible by 4" % (w, h, d))


def init_alpha(config: RefinerConfig, reference: PinholeCamera,
               dtype=np.float32) -> AlphaVolume:
    """Empty geometry over an opaque farthest plane (index 0)."""
    w, h, d = reference.width, reference.height, config.planes.count
    _check_dims(w, h, d)
    logits = np.full((w, h, d), config.init_logit_empty, dtype=dtype)
    logits[:, :, 0] = config.init_logit_background
    return AlphaVolume(logits=logits, planes=config.planes, reference=reference)


def assemble_features(alpha: AlphaVolume, psv: PsvStack,
                      deterministic: bool = False,
                      inv_tables=None) -> np.ndarray:
    """8-channel network input, frozen layout.

    [0] opacity logits, [1] total visibility / N, [2..4] mean visible
    color, [5..7] visible color variance.
    """
    logits = np.asarray(alpha.logits)
    lp = volume_to_planes(logits)
    (total_n, mu, sigma2), _ = clue_forward(lp, psv, deterministic=deterministic,
                                            inv_tables=inv_tables)
    w, h = alpha.reference.width, alpha.reference.height
    feats = np.empty((IN_CHANNELS,) + logits.shape, dtype=logits.dtype)
    feats[0] = logits
    feats[1] = planes_to_volume(total_n, w, h)
    feats[2:5] = np.moveaxis(planes_to_volume(mu, w, h), -1, 0)
    feats[5:8] = np.moveaxis(planes_to_volume(sigma2, w, h), -1, 0)
    return feats


def refine_step(alpha: AlphaVolume, psv: PsvStack, params: NetworkParams,
                deterministic: bool = False, inv_tables=None,
                threads: int = None) -> AlphaVolume:
    """One residual update of the logits; same params every call."""
    feats = assemble_features(alpha, psv, deterministic=deterministic,
                              inv_tables=inv_tables)
    net_in = np.ascontiguousarray(feats, dtype=params.dtype)
    residual, _ = unet_forward(net_in, params, threads=threads)
    logits = alpha.logits + residual[0].astype(alpha.logits.dtype, copy=False)
    return AlphaVolume(logits=logits, planes=alpha.planes,
                       reference=alpha.reference)


def run_refiner(images, cameras, config: RefinerConfig, params: NetworkParams,
                deterministic: bool = False, threads: int = None,
                reference: PinholeCamera = None, on_iteration=None) -> Mpi:
    """Full pipeline: PSV, K refinement iterations, colorized MPI.

    ``images`` is (N, W, H, 3) in [0, 1] (or an ImageStack, in which
    case ``cameras`` may be None).  The reference camera defaults to
    the rig average.  ``on_iteration(k, seconds)`` is called after each
    refinement iteration.
    """
    if isinstance(images, ImageStack):
        stack = images
    else:
        stack = ImageStack(data=np.asarray(images), views=list(cameras))
    if deterministic:
        # canonical input order makes permuted view lists bit-identical
        order = canonical_view_order(stack.views)
        stack = ImageStack(data=stack.data[order],
                           views=[stack.views[i] for i in order])
    if reference is None:
        reference = average_reference_camera(stack.views)
    psv = build_psv_stack(stack, reference, config.planes)
    inv_tables = [warp_table_from_reference(reference, cam, config.planes)
                  for cam in stack.views]
    alpha = init_alpha(config, reference, dtype=params.dtype)
    for k in range(config.iterations):
        t0 = time.perf_counter()
        alpha = refine_step(alpha, psv, params, deterministic=deterministic,
                            inv_tables=inv_tables, threads=threads)
        if on_iteration is not None:
            on_iteration(k + 1, time.perf_counter() - t0)
    return colorize_mpi(alpha, psv, deterministic=deterministic,
                        inv_tables=inv_tables)
