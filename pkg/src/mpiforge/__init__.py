"""Sparse calibrated views to multi-plane images.

A small engine that sweeps input views into a plane-sweep volume,
iteratively refines per-plane opacities with a weight-shared 3D U-Net,
colorizes the result into an MPI and renders novel views by homography
warping and back-to-front alpha compositing.  Includes toy-scale
training on synthetic textured-plane scenes.
"""

from ._threads import get_threads, set_threads
from .geometry import (
    DepthPlanes,
    Homography,
    PinholeCamera,
    average_reference_camera,
    homography_at_depth,
    load_camera_rig,
    make_depth_planes,
    save_camera_rig,
)
from .io import load_png, read_mpi, save_png, write_mpi
from .neural import (
    AdamState,
    NetworkParams,
    adam_step,
    init_params,
    load_weights,
    param_count,
    save_weights,
    unet_forward,
)
from .neural._backend import backend_name
from .refiner import RefinerConfig, init_alpha, refine_step, run_refiner
from .render import (
    AlphaVolume,
    Mpi,
    compute_clues,
    image_metrics,
    psnr,
    render_novel_view,
)
from .scenes import SceneSpec, generate_scene, ground_truth_mpi, render_rig
from .training import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    sample_batch,
    save_checkpoint,
    train,
)
from .warp import ImageStack, PsvStack, build_psv_stack

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AlphaVolume",
    "DepthPlanes",
    "Homography",
    "ImageStack",
    "Mpi",
    "NetworkParams",
    "PinholeCamera",
    "PsvStack",
    "RefinerConfig",
    "SceneSpec",
    "TrainConfig",
    "__version__",
    "adam_step",
    "average_reference_camera",
    "backend_name",
    "build_psv_stack",
    "compute_clues",
    "evaluate",
    "generate_scene",
    "get_threads",
    "ground_truth_mpi",
    "homography_at_depth",
    "image_metrics",
    "init_alpha",
    "init_params",
    "load_camera_rig",
    "load_checkpoint",
    "load_png",
    "load_weights",
    "make_depth_planes",
    "param_count",
    "psnr",
    "read_mpi",
    "refine_step",
    "render_novel_view",
    "render_rig",
    "run_refiner",
    "sample_batch",
    "save_camera_rig",
    "save_checkpoint",
    "save_png",
    "save_weights",
    "set_threads",
    "train",
    "unet_forward",
    "write_mpi",
]
