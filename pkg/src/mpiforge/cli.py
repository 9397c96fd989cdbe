"""Command-line surface tying the pipeline to on-disk formats.

Subcommands: ``scene generate`` (synthetic scene directories),
``refine`` (views -> MPI container), ``render`` (MPI -> PNG),
``train`` (toy training loop) and ``eval`` (PSNR/SSIM/MAE).

Exit codes: 0 success, 2 usage or semantic argument error, 1 runtime
failure.  Errors go to standard error only.  PNG values are treated as
linear color (no sRGB conversion).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from ._threads import set_threads
from .geometry import (
    average_reference_camera,
    load_camera_rig,
    make_depth_planes,
    save_camera_rig,
)
from .io import load_png, read_mpi, save_png, write_mpi
from .neural.weights_io import load_weights
from .refiner import RefinerConfig, run_refiner
from .render import image_metrics, render_novel_view
from .scenes import SceneSpec, generate_scene, ground_truth_mpi, render_rig
from .training import PSNR_CAP, RenderedScene, TrainConfig, train
from .warp import ImageStack

__all__ = ["UsageError", "build_parser", "main"]


class UsageError(Exception):
    """Semantically invalid arguments (exit code 2)."""


# ---------------------------------------------------------------------------
# Flag parsing helpers


def _parse_size(text: str) -> tuple:
    parts = text.lower().split("x")
    try:
        w, h = (int(p) for p in parts)
    except ValueError:
        raise UsageError("--size must look like 64x64, got %r" % text)
    if w < 4 or h < 4:
        raise UsageError("--size must be at least 4x4, got %r" % text)
    return w, h


def _parse_color(text: str) -> np.ndarray:
    t = text.lstrip("#")
    if len(t) != 6:
        raise UsageError("--background must look like #rrggbb, got %r" % text)
    try:
        rgb = [int(t[i:i + 2], 16) for i in (0, 2, 4)]
    except ValueError:
        raise UsageError("--background must look like #rrggbb, got %r" % text)
    return np.array(rgb, dtype=np.float64) / 255.0


def _parse_view_list(text: str) -> list:
    names = [s.strip() for s in text.split(",") if s.strip()]
    if not names:
        raise UsageError("--views needs a comma-separated list of view names")
    return names


def _rig_by_name(path) -> dict:
    rig = load_camera_rig(path)
    return {cam.name: cam for cam in rig}


def _pick_views(by_name: dict, names: list) -> list:
    missing = [n for n in names if n not in by_name]
    if missing:
        raise UsageError("unknown views %s; the cameras file defines %s"
                         % (",".join(missing), ",".join(sorted(by_name))))
    return [by_name[n] for n in names]


def _load_view_images(images_dir, cameras) -> np.ndarray:
    stack = []
    for cam in cameras:
        path = os.path.join(images_dir, cam.name + ".png")
        img = load_png(path)
        if img.shape[:2] != (cam.width, cam.height):
            raise UsageError(
                "image %s is %dx%d but camera %s expects %dx%d"
                % (path, img.shape[0], img.shape[1], cam.name,
                   cam.width, cam.height))
        stack.append(img)
    return np.stack(stack)


def _emit(args, payload: dict, human: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    else:
        print(human)


# ---------------------------------------------------------------------------
# scene generate


def _cmd_scene_generate(args) -> None:
    w, h = _parse_size(args.size)
    rows = math.isqrt(args.views)
    if rows * rows != args.views or rows < 2:
        raise UsageError("--views must be a square rig size >= 4, got %d"
                         % args.views)
    if args.layers < 1:
        raise UsageError("--layers must be >= 1")
    if args.planes < 2:
        raise UsageError("--planes must be >= 2")
    if not (args.znear > 0 and math.isfinite(args.znear)):
        raise UsageError("--znear must be a positive finite depth")
    if args.zfar <= args.znear:
        raise UsageError("--zfar must exceed --znear")
    spec = SceneSpec(width=w, height=h, rows=rows, cols=rows,
                     spacing=args.spacing, z_near=args.znear,
                     z_far=args.zfar, d_planes=args.planes,
                     n_layers_range=(args.layers, args.layers))
    try:
        scene = generate_scene(args.seed, spec)
    except ValueError as exc:
        raise UsageError(str(exc))
    os.makedirs(args.out, exist_ok=True)
    images = render_rig(scene)
    for img, cam in zip(images, scene.rig):
        save_png(os.path.join(args.out, cam.name + ".png"), img)
    save_camera_rig(os.path.join(args.out, "cameras.json"), scene.rig)
    reference = average_reference_camera(scene.rig)
    mpi = ground_truth_mpi(scene, reference, spec.planes())
    write_mpi(os.path.join(args.out, "ground_truth.mpiv"), mpi)
    _emit(args,
          {"out": args.out, "views": len(scene.rig),
           "layers": len(scene.layers), "planes": spec.d_planes,
           "seed": args.seed},
          "wrote %d views, cameras.json and ground_truth.mpiv to %s"
          % (len(scene.rig), args.out))


# ---------------------------------------------------------------------------
# refine


def _cmd_refine(args) -> None:
    by_name = _rig_by_name(args.cameras)
    names = _parse_view_list(args.views)
    if len(names) < 2:
        raise UsageError("refinement needs at least two input views")
    if len(set(names)) != len(names):
        raise UsageError("duplicate view names in --views")
    cams = _pick_views(by_name, names)
    d = args.planes
    w, h = cams[0].width, cams[0].height
    if d < 2:
        raise UsageError("--planes must be >= 2, got %d" % d)
    if d % 4 or w % 4 or h % 4:
        raise UsageError(
            "the network needs dims divisible by 4: image %dx%d with %d "
            "planes; snap the plane count to %d and use a matching image "
            "size" % (w, h, d, max(4, d - d % 4)))
    if not (args.znear > 0 and math.isfinite(args.znear)):
        raise UsageError("--znear must be a positive finite depth")
    if args.zfar <= args.znear:
        raise UsageError("--zfar must exceed --znear")
    images = _load_view_images(args.images, cams)
    planes = make_depth_planes(d, args.zfar, args.znear)
    params = load_weights(args.weights)
    try:
        config = RefinerConfig(iterations=args.iters, planes=planes)
    except ValueError as exc:
        raise UsageError(str(exc))

    def on_iteration(k: int, seconds: float) -> None:
        print("iteration %d/%d: %.3f s" % (k, args.iters, seconds),
              file=sys.stderr)

    mpi = run_refiner(ImageStack(data=images, views=cams), None, config,
                      params, deterministic=getattr(args, "deterministic",
                                                    False),
                      on_iteration=on_iteration)
    write_mpi(args.out, mpi)
    _emit(args,
          {"out": args.out, "iterations": args.iters, "planes": d,
           "views": names},
          "wrote %d-plane MPI from %d views to %s"
          % (d, len(names), args.out))


# ---------------------------------------------------------------------------
# render


def _render_over(mpi, camera, background: np.ndarray) -> np.ndarray:
    rgb, acc = render_novel_view(mpi, camera)
    img = rgb + (1.0 - acc)[..., None] * background[None, None, :]
    return np.clip(img, 0.0, 1.0)


def _cmd_render(args) -> None:
    mpi = read_mpi(args.mpi)
    by_name = _rig_by_name(args.camera)
    if args.view is not None:
        camera = _pick_views(by_name, [args.view])[0]
    elif len(by_name) == 1:
        camera = next(iter(by_name.values()))
    else:
        raise UsageError(
            "the camera file defines %d cameras (%s); pick one with --view"
            % (len(by_name), ",".join(sorted(by_name))))
    ref = mpi.reference
    if (camera.width, camera.height) != (ref.width, ref.height):
        raise UsageError(
            "camera resolution %dx%d does not match the MPI reference %dx%d"
            % (camera.width, camera.height, ref.width, ref.height))
    background = _parse_color(args.background)
    img = _render_over(mpi, camera, background)
    save_png(args.out, img)
    _emit(args,
          {"out": args.out, "camera": camera.name,
           "background": args.background},
          "rendered %s to %s" % (camera.name, args.out))


# ---------------------------------------------------------------------------
# train


def _load_scene_pool(root) -> list:
    """Scene directories (cameras.json + per-view PNGs) as a train pool."""
    if not os.path.isdir(root):
        raise UsageError("--scenes %s is not a directory" % root)
    subdirs = sorted(
        name for name in os.listdir(root)
        if os.path.isdir(os.path.join(root, name)))
    roots = [os.path.join(root, name) for name in subdirs]
    if os.path.exists(os.path.join(root, "cameras.json")):
        roots = [root]  # a single scene directory works too
    pool = []
    for i, scene_dir in enumerate(roots):
        rig_path = os.path.join(scene_dir, "cameras.json")
        if not os.path.exists(rig_path):
            continue
        rig = load_camera_rig(rig_path)
        images = _load_view_images(scene_dir, rig)
        pool.append(RenderedScene(images=images, rig=rig, seed=i))
    if not pool:
        raise UsageError("no scene directories with cameras.json under %s"
                         % root)
    return pool


def _cmd_train(args) -> None:
    if bool(args.scenes) == bool(args.procedural):
        raise UsageError("pick exactly one of --scenes DIR or --procedural")
    pool = _load_scene_pool(args.scenes) if args.scenes else None
    kwargs = {
        "total_iterations": args.iters,
        "seed": args.seed,
        "deterministic": getattr(args, "deterministic", False),
        "learning_rate": args.lr,
    }
    if pool is not None:
        cam0 = pool[0].rig[0]
        kwargs["width"], kwargs["height"] = cam0.width, cam0.height
    elif args.size is not None:
        kwargs["width"], kwargs["height"] = _parse_size(args.size)
    if args.pool is not None:
        kwargs["scene_pool_size"] = args.pool
    try:
        config = TrainConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc))
    if args.iters < 1:
        raise UsageError("--iters must be >= 1")

    interval = max(1, args.iters // 20)
    as_json = getattr(args, "json", False)

    def progress(row: dict) -> None:
        if as_json or (row["iter"] + 1) % interval:
            return
        print("iter %d/%d  k=%d  loss %.4f  psnr %.2f  ssim %.4f"
              % (row["iter"] + 1, args.iters, row["k"], row["loss"],
                 row["psnr"], row["ssim"]))

    _, _, history = train(config, args.out, progress=progress, pool=pool)
    final = history[-1] if history else {}
    _emit(args,
          {"checkpoint": args.out, "iterations": args.iters, "final": final},
          "finished %d iterations; checkpoint and metrics.jsonl in %s"
          % (args.iters, args.out))


# ---------------------------------------------------------------------------
# eval


def _cmd_eval(args) -> None:
    png_mode = args.pred is not None or args.target is not None
    mpi_mode = any(v is not None for v in
                   (args.mpi, args.cameras, args.images, args.target_view))
    if png_mode == mpi_mode:
        raise UsageError("eval takes either --pred/--target or "
                         "--mpi/--cameras/--images/--target-view")
    if png_mode:
        if args.pred is None or args.target is None:
            raise UsageError("eval needs both --pred and --target")
        pred = load_png(args.pred)
        target = load_png(args.target)
        if pred.shape != target.shape:
            raise UsageError("size mismatch: prediction %s vs target %s"
                             % (pred.shape[:2], target.shape[:2]))
    else:
        needed = {"--mpi": args.mpi, "--cameras": args.cameras,
                  "--images": args.images, "--target-view": args.target_view}
        absent = [k for k, v in needed.items() if v is None]
        if absent:
            raise UsageError("eval needs %s" % ", ".join(absent))
        mpi = read_mpi(args.mpi)
        by_name = _rig_by_name(args.cameras)
        camera = _pick_views(by_name, [args.target_view])[0]
        ref = mpi.reference
        if (camera.width, camera.height) != (ref.width, ref.height):
            raise UsageError(
                "camera resolution %dx%d does not match the MPI reference "
                "%dx%d" % (camera.width, camera.height, ref.width,
                           ref.height))
        target = load_png(os.path.join(args.images,
                                       args.target_view + ".png"))
        if target.shape[:2] != (camera.width, camera.height):
            raise UsageError("size mismatch: target image %s vs camera %s"
                             % (target.shape[:2],
                                (camera.width, camera.height)))
        pred = _render_over(mpi, camera, _parse_color(args.background))
    if min(pred.shape[:2]) < 11:
        raise UsageError("images must be at least 11x11 for SSIM")
    p, s, m = image_metrics(pred, target, ssim_window=11)
    print(json.dumps({"psnr": min(p, PSNR_CAP), "ssim": s, "mae": m}))


# ---------------------------------------------------------------------------
# Parser


def _add_common(p) -> None:
    p.add_argument("--threads", type=int, metavar="N",
                   default=argparse.SUPPRESS,
                   help="kernel threads (default: MPIFORGE_THREADS or all "
                        "cores)")
    p.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                   help="machine-readable output")
    p.add_argument("--deterministic", action="store_true",
                   default=argparse.SUPPRESS,
                   help="bit-reproducible mode (canonical view ordering)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpiforge",
        description="Sparse calibrated views to multi-plane images: "
                    "synthetic scenes, iterative opacity refinement, "
                    "novel-view rendering, toy training and metrics.")
    _add_common(parser)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    scene = sub.add_parser("scene", help="synthetic scene tools")
    scene_sub = scene.add_subparsers(dest="scene_command",
                                     metavar="SUBCOMMAND")
    gen = scene_sub.add_parser(
        "generate", help="write a random textured-plane scene directory")
    _add_common(gen)
    gen.add_argument("--out", required=True, metavar="DIR")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--size", default="32x32", metavar="WxH")
    gen.add_argument("--views", type=int, default=9,
                     help="rig size, a square count (default 9 for 3x3)")
    gen.add_argument("--layers", type=int, default=2,
                     help="scene layers including the background")
    gen.add_argument("--znear", type=float, default=2.0)
    gen.add_argument("--zfar", type=float, default=math.inf)
    gen.add_argument("--planes", type=int, default=8,
                     help="depth planes of the ground-truth MPI")
    gen.add_argument("--spacing", type=float, default=0.3,
                     help="rig camera spacing in world units")
    gen.set_defaults(func=_cmd_scene_generate)

    ref = sub.add_parser(
        "refine", help="refine input views into an MPI container")
    _add_common(ref)
    ref.add_argument("--cameras", required=True, metavar="FILE",
                     help="camera rig JSON")
    ref.add_argument("--images", required=True, metavar="DIR",
                     help="directory of <view>.png images")
    ref.add_argument("--views", required=True, metavar="LIST",
                     help="comma-separated view names, e.g. c00,c02,c20,c22")
    ref.add_argument("--planes", type=int, required=True, metavar="D")
    ref.add_argument("--znear", type=float, required=True, metavar="Z")
    ref.add_argument("--zfar", type=float, default=math.inf, metavar="Z")
    ref.add_argument("--iters", type=int, required=True, metavar="K")
    ref.add_argument("--weights", required=True, metavar="FILE")
    ref.add_argument("--out", required=True, metavar="FILE")
    ref.set_defaults(func=_cmd_refine)

    ren = sub.add_parser("render", help="render an MPI to a PNG")
    _add_common(ren)
    ren.add_argument("--mpi", required=True, metavar="FILE")
    ren.add_argument("--camera", required=True, metavar="FILE",
                     help="camera rig JSON (single camera, or use --view)")
    ren.add_argument("--view", metavar="NAME",
                     help="camera name when the file defines several")
    ren.add_argument("--out", required=True, metavar="FILE")
    ren.add_argument("--background", default="#000000", metavar="#rrggbb")
    ren.set_defaults(func=_cmd_render)

    tr = sub.add_parser("train", help="run the toy training loop")
    _add_common(tr)
    tr.add_argument("--scenes", metavar="DIR",
                    help="directory of scene directories to train on")
    tr.add_argument("--procedural", action="store_true",
                    help="train on generated scenes instead of --scenes")
    tr.add_argument("--iters", type=int, required=True, metavar="N")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", required=True, metavar="DIR",
                    help="run directory for checkpoint + metrics.jsonl")
    tr.add_argument("--size", metavar="WxH",
                    help="procedural scene image size (default 32x32)")
    tr.add_argument("--pool", type=int, metavar="N",
                    help="procedural scene pool size")
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="print PSNR/SSIM/MAE as JSON")
    _add_common(ev)
    ev.add_argument("--pred", metavar="FILE", help="predicted PNG")
    ev.add_argument("--target", metavar="FILE", help="ground-truth PNG")
    ev.add_argument("--mpi", metavar="FILE",
                    help="MPI container to render and score")
    ev.add_argument("--cameras", metavar="FILE", help="camera rig JSON")
    ev.add_argument("--images", metavar="DIR",
                    help="directory holding <view>.png targets")
    ev.add_argument("--target-view", metavar="NAME")
    ev.add_argument("--background", default="#808080", metavar="#rrggbb",
                    help="backdrop for the rendered prediction")
    ev.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    func = getattr(args, "func", None)
    if func is None:
        parser.print_usage(sys.stderr)
        print("mpiforge: error: missing command", file=sys.stderr)
        return 2
    try:
        threads = getattr(args, "threads", None)
        if threads is not None:
            try:
                set_threads(threads)
            except ValueError as exc:
                raise UsageError(str(exc))
        func(args)
        return 0
    except UsageError as exc:
        print("mpiforge: error: %s" % exc, file=sys.stderr)
        return 2
    except Exception as exc:
        print("mpiforge: %s: %s" % (type(exc).__name__, exc),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
