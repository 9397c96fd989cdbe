"""Toy-scale SSIM-supervised training of the refiner network.

Every step samples one synthetic scene, picks N input views and leaves
the rest as supervision targets, runs the K-iteration refinement
recurrence (K follows a curriculum), renders the targets from the
colorized volume and minimizes 1 - mean SSIM.  The backward pass is
chained by hand through rendering, colorization, the clue statistics
and all K weight-shared network applications, then one Adam step is
taken (online training, batch size 1).

Checkpoints are a weights file plus a JSON sidecar (config, iteration,
RNG state); per-step metrics stream to a JSON-lines file.  The RNG is
numpy's PCG64 so seeds reproduce across platforms.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .geometry import (
    DepthPlanes,
    PinholeCamera,
    average_reference_camera,
    homography_at_depth,
    make_depth_planes,
)
from .neural.adam import AdamState, adam_step
from .neural.unet import (
    NetworkParams,
    add_grads,
    init_params,
    unet_backward,
    unet_forward,
    zero_grads,
)
from .neural.weights_io import load_weights, save_weights
from .refiner import RefinerConfig, init_alpha, refine_step
from .render import (
    clue_backward,
    clue_forward,
    colorize_mpi,
    composite_planes_fwd,
    composite_planes_vjp,
    image_metrics,
    psnr as psnr_db,
)
from .scenes import (
    SceneSpec,
    SyntheticScene,
    center_index,
    corner_indices,
    generate_scene,
    render_rig,
)
from .ssim import ssim_backward, ssim_forward
from .warp import (
    ImageStack,
    build_psv_stack,
    planes_to_volume,
    volume_to_planes,
    warp_table_from_reference,
)

__all__ = [
    "TrainConfig",
    "TrainBatch",
    "RenderedScene",
    "curriculum_k",
    "build_scene_pool",
    "sample_batch",
    "max_interplane_displacement",
    "loss_and_grads",
    "training_step",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "PSNR_CAP",
]

PSNR_CAP = 99.0
BACKGROUND_GRAY = 0.5
_SCENE_SEED_STRIDE = 1_000_003


@dataclass
class TrainConfig:
    """Toy-scale stand-in for the full schedule.

    The reference schedule (512x272 images, 40-50 planes, 200K steps,
    K stepping 2->3->4 at 20K/40K) shrinks to configurable 32-64 px
    images, 8-16 planes and a few thousand steps; the curriculum
    breakpoints keep the same 10% / 20% proportions by default.
    """

    total_iterations: int = 2000
    width: int = 32
    height: int = 32
    # 0.2 keeps the 8-plane sweep under 1 px for every rig subset
    spacing: float = 0.2
    focal: float = None
    z_near: float = 2.0
    z_far: float = math.inf
    n_views_range: tuple = (2, 5)
    d_planes_range: tuple = (8, 16)
    curriculum: dict = None
    seed: int = 0
    learning_rate: float = 1e-4
    scene_pool_size: int = 12
    n_layers_range: tuple = (2, 2)
    texture_cells_range: tuple = (3, 6)
    ssim_window: int = 7
    deterministic: bool = False

    def __post_init__(self):
        self.n_views_range = tuple(int(n) for n in self.n_views_range)
        self.d_planes_range = tuple(int(d) for d in self.d_planes_range)
        lo, hi = self.n_views_range
        if not (2 <= lo <= hi <= 5):
            raise ValueError("n_views_range must lie within [2, 5]")
        if self.d_planes_range[0] < 4:
            raise ValueError("need at least 4 depth planes")
        if self.curriculum is None:
            t = self.total_iterations
            self.curriculum = {0: 2, max(1, t // 10): 3, max(2, t // 5): 4}
        self.curriculum = {int(k): int(v) for k, v in self.curriculum.items()}
        ks = [self.curriculum[i] for i in sorted(self.curriculum)]
        if 0 not in self.curriculum:
            raise ValueError("curriculum must define K at iteration 0")
        if any(b < a for a, b in zip(ks, ks[1:])):
            raise ValueError("curriculum K values must be non-decreasing")

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            width=self.width, height=self.height, spacing=self.spacing,
            focal=self.focal, z_near=self.z_near, z_far=self.z_far,
            d_planes=self.d_planes_range[0] - self.d_planes_range[0] % 4,
            n_layers_range=self.n_layers_range,
            texture_cells_range=self.texture_cells_range)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        kwargs = dict(data)
        for key in ("n_views_range", "d_planes_range", "n_layers_range",
                    "texture_cells_range"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        if kwargs.get("curriculum"):
            kwargs["curriculum"] = {int(k): int(v)
                                    for k, v in kwargs["curriculum"].items()}
        return cls(**kwargs)


def curriculum_k(config: TrainConfig, iteration: int) -> int:
    """K for a given step: the entry at the largest key <= iteration."""
    best = None
    for start in sorted(config.curriculum):
        if start <= iteration:
            best = config.curriculum[start]
    if best is None:
        raise ValueError("curriculum has no entry for iteration %d" % iteration)
    return best


@dataclass
class RenderedScene:
    """Rig views ready for sampling: images (len(rig), W, H, 3) + cameras.

    ``scene`` keeps the analytic layer description when one exists
    (procedural pools); pools loaded from disk leave it None.
    """

    images: np.ndarray
    rig: list
    seed: int
    scene: SyntheticScene = None


@dataclass
class TrainBatch:
    inputs: ImageStack
    targets: ImageStack
    reference: PinholeCamera
    planes: DepthPlanes
    k: int
    scene_seed: int = -1
    iteration: int = 0


def build_scene_pool(config: TrainConfig, size: int = None,
                     seed: int = None) -> list:
    """Deterministic pool of pre-rendered scenes."""
    size = config.scene_pool_size if size is None else size
    seed = config.seed if seed is None else seed
    spec = config.scene_spec()
    pool = []
    for i in range(size):
        scene = generate_scene((seed * _SCENE_SEED_STRIDE + i) % 2**63, spec)
        pool.append(RenderedScene(images=render_rig(scene), rig=scene.rig,
                                  seed=scene.seed, scene=scene))
    return pool


def max_interplane_displacement(reference: PinholeCamera, cameras,
                                planes: DepthPlanes) -> float:
    """Largest pixel shift between successive planes, over view corners.

    Reference-image corners are pushed through the plane homographies
    of every input camera; adjacent plane pairs must land within one
    pixel of each other for the sweep to sample depth densely enough.
    """
    w, h = reference.width, reference.height
    corners = np.array([[0.0, 0.0, 1.0], [w - 1.0, 0.0, 1.0],
                        [0.0, h - 1.0, 1.0], [w - 1.0, h - 1.0, 1.0]]).T
    worst = 0.0
    for cam in cameras:
        uv_prev = None
        for z in planes.z_values:
            hom = homography_at_depth(reference, cam, z).matrix
            p = hom @ corners
            uv = p[:2] / p[2]
            if uv_prev is not None:
                worst = max(worst, float(np.abs(uv - uv_prev).max()))
            uv_prev = uv
    return worst


def _snap_planes(d: int) -> int:
    return d - d % 4


def sample_batch(rng: np.random.Generator, config: TrainConfig, scene_pool,
                 iteration: int = 0) -> TrainBatch:
    """Scene + split into N input views and the remaining targets.

    The reference camera is the average of the chosen input cameras;
    the plane count is drawn from the configured range and snapped down
    to a multiple of 4.  Raises if the inter-plane displacement budget
    of one pixel cannot be met, naming the minimum plane count.
    """
    if not scene_pool:
        raise ValueError("scene pool is empty")
    entry = scene_pool[int(rng.integers(len(scene_pool)))]
    rig = entry.rig
    n_lo, n_hi = config.n_views_range
    n = int(rng.integers(n_lo, min(n_hi, len(rig) - 1) + 1))
    idx = rng.choice(len(rig), size=n, replace=False)
    idx = np.sort(idx)
    rest = np.array([i for i in range(len(rig)) if i not in set(idx.tolist())])

    d_lo, d_hi = config.d_planes_range
    d = _snap_planes(int(rng.integers(d_lo, d_hi + 1)))
    planes = make_depth_planes(d, config.z_far, config.z_near)

    in_cams = [rig[i] for i in idx]
    reference = average_reference_camera(in_cams)
    step = max_interplane_displacement(reference, in_cams, planes)
    if step > 1.0 + 1e-9:
        min_d = _snap_planes(int(math.ceil((d - 1) * step)) + 1 + 3)
        raise ValueError(
            "inter-plane displacement %.2f px exceeds 1 px; need at least "
            "%d planes for this rig" % (step, min_d))

    inputs = ImageStack(data=entry.images[idx], views=in_cams)
    targets = ImageStack(data=entry.images[rest],
                         views=[rig[i] for i in rest])
    return TrainBatch(inputs=inputs, targets=targets, reference=reference,
                      planes=planes, k=curriculum_k(config, iteration),
                      scene_seed=entry.seed, iteration=iteration)


# ---------------------------------------------------------------------------
# One differentiable step


def _features_from_planes(logits_p, total_n, mu, sigma2, w, h, dtype):
    d = logits_p.shape[0]
    feats = np.empty((8, w, h, d), dtype=dtype)
    feats[0] = planes_to_volume(logits_p, w, h)
    feats[1] = planes_to_volume(total_n, w, h)
    feats[2:5] = np.moveaxis(planes_to_volume(mu, w, h), -1, 0)
    feats[5:8] = np.moveaxis(planes_to_volume(sigma2, w, h), -1, 0)
    return feats


def _feature_grads_to_planes(g_feats):
    g_logit = volume_to_planes(g_feats[0])
    g_total = volume_to_planes(g_feats[1])
    g_mu = volume_to_planes(np.moveaxis(g_feats[2:5], 0, -1))
    g_sigma2 = volume_to_planes(np.moveaxis(g_feats[5:8], 0, -1))
    return g_logit, g_total, g_mu, g_sigma2


def loss_and_grads(params: NetworkParams, batch: TrainBatch,
                   ssim_window: int = 7, deterministic: bool = False,
                   threads: int = None, init_logit_empty: float = -8.0,
                   init_logit_background: float = 8.0):
    """Forward + full backward for one batch.

    Returns (loss, grads, metrics, renders).  The loss is
    1 - mean SSIM of the target views rendered over a mid-gray
    background; metrics are their mean PSNR/SSIM/MAE.
    """
    dtype = params.dtype
    ref, planes = batch.reference, batch.planes
    w, h, d = ref.width, ref.height, planes.count
    p = w * h
    det = deterministic

    psv = build_psv_stack(batch.inputs, ref, planes)
    if psv.data.dtype != dtype:
        psv.data = psv.data.astype(dtype)
    inv_tables = [warp_table_from_reference(ref, cam, planes)
                  for cam in batch.inputs.views]

    logits = np.full((d, p), init_logit_empty, dtype=dtype)
    logits[0] = init_logit_background

    # forward recurrence, keeping per-iteration tapes
    clue_ctxs, unet_tapes = [], []
    for _ in range(batch.k):
        (total_n, mu, sigma2), cctx = clue_forward(
            logits, psv, deterministic=det, inv_tables=inv_tables)
        feats = _features_from_planes(logits, total_n, mu, sigma2, w, h, dtype)
        out, tape = unet_forward(feats, params, threads=threads)
        logits = logits + volume_to_planes(out[0])
        clue_ctxs.append(cctx)
        unet_tapes.append(tape)

    # colorize from the final state
    (_, mu_k, _), cctx_k = clue_forward(logits, psv, deterministic=det,
                                        inv_tables=inv_tables)
    rgb_planes = np.clip(mu_k, 0.0, 1.0)
    clip_open = (mu_k > 0.0) & (mu_k < 1.0)
    alpha_k = expit(logits)

    # render every target and score it
    n_t = len(batch.targets.views)
    per_target = []
    ssims = []
    metr_psnr, metr_mae = [], []
    for t, cam in enumerate(batch.targets.views):
        table = warp_table_from_reference(ref, cam, planes)
        w_rgb = table.apply(rgb_planes)              # (d, p_t, 3)
        w_a = table.apply(alpha_k)                   # (d, p_t)
        rgb_out, acc, cctx = composite_planes_fwd(
            np.ascontiguousarray(w_a.T), np.ascontiguousarray(w_rgb.transpose(1, 0, 2)))
        img = rgb_out + (1.0 - acc)[:, None] * BACKGROUND_GRAY
        img_v = img.reshape(cam.width, cam.height, 3)
        target = batch.targets.data[t].astype(dtype, copy=False)
        s, sctx = ssim_forward(img_v, target, window=ssim_window)
        ssims.append(s)
        metr_psnr.append(psnr_db(np.clip(img_v, 0.0, 1.0), target))
        metr_mae.append(float(np.mean(np.abs(img_v - target))))
        per_target.append((table, cctx, sctx, img_v))
    loss = 1.0 - float(np.mean(ssims))

    if not math.isfinite(loss):
        raise RuntimeError(
            "non-finite loss (scene seed %d, iteration %d, K=%d, N=%d, D=%d)"
            % (batch.scene_seed, batch.iteration, batch.k,
               len(batch.inputs.views), d))

    # ---- backward ----
    g_mu = np.zeros_like(mu_k)
    g_alpha_k = np.zeros_like(alpha_k)
    for table, cctx, sctx, _ in per_target:
        g_img = ssim_backward(sctx, -1.0 / n_t).reshape(-1, 3)
        g_acc = -BACKGROUND_GRAY * g_img.sum(axis=-1)
        g_a_t, g_rgb_t = composite_planes_vjp(cctx, g_img, g_acc)
        g_mu += table.vjp(np.ascontiguousarray(g_rgb_t.transpose(1, 0, 2)))
        g_alpha_k += table.vjp(np.ascontiguousarray(g_a_t.T))
    g_mu *= clip_open

    g_logits = g_alpha_k * alpha_k * (1.0 - alpha_k)
    g_logits += clue_backward(cctx_k, np.zeros((d, p), dtype=dtype), g_mu,
                              np.zeros_like(g_mu))

    grads = zero_grads(params)
    for k in range(batch.k - 1, -1, -1):
        g_out = planes_to_volume(g_logits, w, h)[None]
        pgrads, g_feats = unet_backward(unet_tapes[k], g_out, params,
                                        threads=threads)
        add_grads(grads, pgrads)
        g_l, g_total, g_mu_k, g_s2 = _feature_grads_to_planes(g_feats)
        g_logits = g_logits + g_l + clue_backward(clue_ctxs[k], g_total,
                                                  g_mu_k, g_s2)

    metrics = {
        "loss": loss,
        "psnr": float(np.mean([min(v, PSNR_CAP) for v in metr_psnr])),
        "ssim": float(np.mean(ssims)),
        "mae": float(np.mean(metr_mae)),
        "k": batch.k,
    }
    renders = [img for *_, img in per_target]
    return loss, grads, metrics, renders


def training_step(params: NetworkParams, state: AdamState, batch: TrainBatch,
                  config: TrainConfig, threads: int = None):
    """One optimizer update; returns (params, state, metrics dict)."""
    loss, grads, metrics, _ = loss_and_grads(
        params, batch, ssim_window=config.ssim_window,
        deterministic=config.deterministic, threads=threads)
    del loss
    params, state = adam_step(params, grads, state)
    return params, state, metrics


# ---------------------------------------------------------------------------
# Loop, checkpoints, evaluation


def save_checkpoint(run_dir, params: NetworkParams, config: TrainConfig,
                    iteration: int, rng: np.random.Generator) -> None:
    """weights.mpnw + checkpoint.json (config, iteration, RNG state).

    Optimizer moments are not part of the checkpoint; resuming restarts
    Adam from zero moments.
    """
    os.makedirs(run_dir, exist_ok=True)
    save_weights(os.path.join(run_dir, "weights.mpnw"), params)
    sidecar = {
        "config": config.to_dict(),
        "iteration": int(iteration),
        "rng_state": rng.bit_generator.state,
    }
    with open(os.path.join(run_dir, "checkpoint.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_checkpoint(run_dir):
    """Returns (params, config, iteration, rng)."""
    params = load_weights(os.path.join(run_dir, "weights.mpnw"))
    with open(os.path.join(run_dir, "checkpoint.json")) as fh:
        sidecar = json.load(fh)
    config = TrainConfig.from_dict(sidecar["config"])
    rng = np.random.default_rng(0)
    rng.bit_generator.state = sidecar["rng_state"]
    return params, config, int(sidecar["iteration"]), rng


def train(config: TrainConfig, run_dir, params: NetworkParams = None,
          threads: int = None, progress=None, pool=None):
    """Full toy training run.

    Streams one JSON line per step ({iter, loss, psnr, ssim, mae, k})
    to <run_dir>/metrics.jsonl and writes the final checkpoint there.
    ``pool`` overrides the procedural scene pool (e.g. scenes loaded
    from disk).  Returns (params, state, history list).
    """
    os.makedirs(run_dir, exist_ok=True)
    if pool is None:
        pool = build_scene_pool(config)
    if params is None:
        params = init_params(config.seed)
    state = AdamState.for_params(params, learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    history = []
    with open(os.path.join(run_dir, "metrics.jsonl"), "w") as fh:
        for it in range(config.total_iterations):
            batch = sample_batch(rng, config, pool, iteration=it)
            params, state, metrics = training_step(params, state, batch,
                                                   config, threads=threads)
            row = {"iter": it, **metrics}
            fh.write(json.dumps(row) + "\n")
            history.append(row)
            if progress is not None:
                progress(row)
    save_checkpoint(run_dir, params, config, config.total_iterations, rng)
    return params, state, history


def evaluate(params: NetworkParams, rendered_scenes, k_values,
             config: TrainConfig, d_planes: int = None,
             ssim_window: int = 11, threads: int = None) -> list:
    """Corner-views-in, center-view-out protocol over a scene pool.

    For each K the refinement recurrence is simply read out at that
    iteration (shared weights make prefixes of a long run identical to
    shorter runs).  Returns one row per K with mean PSNR/SSIM/MAE; PSNR
    is capped at 99 dB so identical images stay finite.
    """
    k_values = sorted(set(int(k) for k in k_values))
    if not k_values or k_values[0] < 1:
        raise ValueError("k_values must be positive")
    d = _snap_planes(d_planes if d_planes is not None
                     else config.d_planes_range[0])
    planes = make_depth_planes(d, config.z_far, config.z_near)
    per_k = {k: {"psnr": [], "ssim": [], "mae": []} for k in k_values}
    for entry in rendered_scenes:
        rig = entry.rig
        rows = int(round(math.sqrt(len(rig))))
        c_idx = corner_indices(rows, rows)
        t_idx = center_index(rows, rows)
        in_cams = [rig[i] for i in c_idx]
        reference = average_reference_camera(in_cams)
        stack = ImageStack(data=entry.images[c_idx], views=in_cams)
        psv = build_psv_stack(stack, reference, planes)
        if psv.data.dtype != params.dtype:
            psv.data = psv.data.astype(params.dtype)
        inv_tables = [warp_table_from_reference(reference, cam, planes)
                      for cam in in_cams]
        target_cam = rig[t_idx]
        target = entry.images[t_idx].astype(np.float64)
        render_table = warp_table_from_reference(reference, target_cam, planes)

        rcfg = RefinerConfig(iterations=max(k_values), planes=planes)
        alpha = init_alpha(rcfg, reference, dtype=params.dtype)
        for k in range(1, max(k_values) + 1):
            alpha = refine_step(alpha, psv, params,
                                deterministic=config.deterministic,
                                inv_tables=inv_tables, threads=threads)
            if k not in per_k:
                continue
            mpi = colorize_mpi(alpha, psv, deterministic=config.deterministic,
                               inv_tables=inv_tables)
            w_rgb = render_table.apply(
                volume_to_planes(mpi.data)[..., :3].astype(np.float64))
            w_a = render_table.apply(
                volume_to_planes(mpi.data)[..., 3].astype(np.float64))
            rgb_out, acc, _ = composite_planes_fwd(
                np.ascontiguousarray(w_a.T),
                np.ascontiguousarray(w_rgb.transpose(1, 0, 2)))
            img = rgb_out + (1.0 - acc)[:, None] * BACKGROUND_GRAY
            img = np.clip(img.reshape(target_cam.width, target_cam.height, 3),
                          0.0, 1.0)
            pv, sv, mv = image_metrics(img, target, ssim_window=ssim_window)
            per_k[k]["psnr"].append(min(pv, PSNR_CAP))
            per_k[k]["ssim"].append(sv)
            per_k[k]["mae"].append(mv)
    return [{"k": k,
             "psnr": float(np.mean(per_k[k]["psnr"])),
             "ssim": float(np.mean(per_k[k]["ssim"])),
             "mae": float(np.mean(per_k[k]["mae"]))}
            for k in k_values]
