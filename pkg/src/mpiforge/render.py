"""Alpha compositing, voxel visibility, visual clues and view rendering.

The central objects are an alpha volume (pre-sigmoid logits over the
reference frustum) and the MPI built from it.  Rendering composites the
planes back to front with the over operator; the per-view visibility of
each reference voxel is obtained by warping the opacities into a view,
taking the product of transmittances in front of every plane there, and
warping the result back.

The visibility-weighted first and second color moments of the PSV stack
("mean visible color" and "visible color variance"), together with the
total visibility, form the clue set consumed by the refiner network.
All three are reductions over the view axis, hence invariant to the
order of input views; in deterministic mode the reduction runs in a
canonical camera order so permutations are bit-exact.

Every forward routine here has a matching hand-written vjp used by the
training loop; the *_fwd variants return a context tape for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .geometry import DepthPlanes, PinholeCamera
from .ssim import ssim_forward
from .warp import (
    PlaneWarp,
    PsvStack,
    ViewVolumeStack,
    broadcast_views,
    planes_to_volume,
    volume_to_planes,
    warp_from_reference,
    warp_table_from_reference,
    warp_table_to_reference,
)

__all__ = [
    "AlphaVolume",
    "Mpi",
    "VisibilityStack",
    "VisualClues",
    "VIS_EPS",
    "composite_over",
    "composite_planes_fwd",
    "composite_planes_vjp",
    "visibility_along_depth",
    "mpi_referenced_visibility",
    "mean_visible_color",
    "visible_color_variance",
    "compute_clues",
    "colorize_mpi",
    "render_novel_view",
    "image_metrics",
    "psnr",
    "canonical_view_order",
]

VIS_EPS = 1e-8


# ---------------------------------------------------------------------------
# Data containers


@dataclass
class AlphaVolume:
    """Pre-sigmoid opacity logits over the reference frustum (W, H, D)."""

    logits: np.ndarray
    planes: DepthPlanes
    reference: PinholeCamera

    def __post_init__(self):
        self.logits = np.asarray(self.logits)
        w, h, d = self.logits.shape
        if (w, h) != (self.reference.width, self.reference.height):
            raise ValueError("logit grid does not match the reference camera")
        if d != self.planes.count:
            raise ValueError("logit depth does not match the plane count")

    @property
    def alphas(self) -> np.ndarray:
        """Opacities sigmoid(logits), computed on demand."""
        return expit(self.logits)

    @classmethod
    def from_alphas(cls, alphas, planes, reference, clip=1e-6):
        """Build from opacities; values are clipped into (0, 1) for the logit."""
        a = np.clip(np.asarray(alphas, dtype=np.float64), clip, 1.0 - clip)
        return cls(np.log(a / (1.0 - a)), planes, reference)


@dataclass
class Mpi:
    """Multi-plane image: (W, H, D, 4) RGBA, back-to-front planes."""

    data: np.ndarray
    planes: DepthPlanes
    reference: PinholeCamera

    @property
    def alpha(self) -> np.ndarray:
        return self.data[..., 3]

    @property
    def rgb(self) -> np.ndarray:
        return self.data[..., :3]


@dataclass
class VisibilityStack:
    """Per-view and total voxel visibilities.

    per_view          -- V*, reference-frame visibility per view (N,W,H,D)
    per_view_frustum  -- visibilities inside each view frustum (N,W,H,D)
    total             -- mask-gated sum over views (W,H,D), in [0, N]
    """

    per_view: np.ndarray
    per_view_frustum: np.ndarray
    total: np.ndarray


@dataclass
class VisualClues:
    """Refiner inputs: normalized total visibility, color mean/variance."""

    total_visibility: np.ndarray   # (W, H, D), stored as V_bar / N
    mean_color: np.ndarray         # (W, H, D, 3)
    color_variance: np.ndarray     # (W, H, D, 3)


def canonical_view_order(cameras) -> list:
    """Order views by their calibration bytes; permutation-independent."""
    keys = []
    for i, cam in enumerate(cameras):
        blob = np.round(np.concatenate(
            [cam.K.ravel(), cam.R.ravel(), cam.T.ravel(),
             [cam.width, cam.height]]), 12)
        keys.append((blob.tobytes(), i))
    return [i for _, i in sorted(keys, key=lambda t: t[0])]


# ---------------------------------------------------------------------------
# Compositing


def composite_planes_fwd(alpha: np.ndarray, rgb: np.ndarray):
    """Back-to-front over-compositing along the plane axis.

    alpha: (..., D), rgb: (..., D, C).  Returns premultiplied color
    (..., C), accumulated alpha (...,) and a tape of intermediate
    accumulators for the vjp.
    """
    d = alpha.shape[-1]
    batch = alpha.shape[:-1]
    c = rgb.shape[-1]
    acc_rgb = np.zeros(batch + (c,), dtype=rgb.dtype)
    acc_a = np.zeros(batch, dtype=alpha.dtype)
    saved_rgb = np.empty((d,) + batch + (c,), dtype=rgb.dtype)
    saved_a = np.empty((d,) + batch, dtype=alpha.dtype)
    for i in range(d):
        saved_rgb[i] = acc_rgb
        saved_a[i] = acc_a
        a = alpha[..., i]
        acc_rgb = a[..., None] * rgb[..., i, :] + (1.0 - a[..., None]) * acc_rgb
        acc_a = a + (1.0 - a) * acc_a
    ctx = (alpha, rgb, saved_rgb, saved_a)
    return acc_rgb, acc_a, ctx


def composite_planes_vjp(ctx, grad_rgb: np.ndarray, grad_acc: np.ndarray):
    """Adjoint of :func:`composite_planes_fwd` w.r.t. alpha and rgb planes."""
    alpha, rgb, saved_rgb, saved_a = ctx
    d = alpha.shape[-1]
    g_rgb_acc = np.array(grad_rgb, copy=True)
    g_a_acc = np.array(grad_acc, copy=True)
    grad_alpha = np.empty_like(alpha)
    grad_planes = np.empty_like(rgb)
    for i in range(d - 1, -1, -1):
        a = alpha[..., i]
        grad_alpha[..., i] = (np.sum(g_rgb_acc * (rgb[..., i, :] - saved_rgb[i]), axis=-1)
                              + g_a_acc * (1.0 - saved_a[i]))
        grad_planes[..., i, :] = g_rgb_acc * a[..., None]
        g_rgb_acc = g_rgb_acc * (1.0 - a[..., None])
        g_a_acc = g_a_acc * (1.0 - a)
    return grad_alpha, grad_planes


def composite_over(view_volumes: ViewVolumeStack):
    """Composite warped RGBA volumes back to front.

    Returns premultiplied RGB (N, W, H, 3) and accumulated alpha
    (N, W, H); plane index 0 is the farthest plane.
    """
    data = view_volumes.data
    if data[..., 3].min() < 0.0 or data[..., 3].max() > 1.0:
        raise ValueError("alpha channel must lie in [0, 1]")
    rgb, acc, _ = composite_planes_fwd(data[..., 3], data[..., :3])
    return rgb, acc


# ---------------------------------------------------------------------------
# Visibility


def _visibility_fwd(alpha: np.ndarray):
    """V_d = prod_{i>d} (1 - alpha_i) along the leading plane axis.

    alpha: (D, ...).  Returns V (D, ...) and the suffix products
    S (D+1, ...) with S[D] = 1, S[m] = (1-alpha_m) * S[m+1].
    """
    d = alpha.shape[0]
    s = np.empty((d + 1,) + alpha.shape[1:], dtype=alpha.dtype)
    s[d] = 1.0
    for m in range(d - 1, -1, -1):
        s[m] = (1.0 - alpha[m]) * s[m + 1]
    return s[1:].copy(), s


def _visibility_vjp(alpha: np.ndarray, s: np.ndarray, grad_v: np.ndarray):
    """Adjoint of the suffix transmittance product (division-free)."""
    d = alpha.shape[0]
    grad_alpha = np.zeros_like(alpha)
    s_hat = np.zeros(alpha.shape[1:], dtype=alpha.dtype)
    for m in range(1, d):
        s_hat = grad_v[m - 1] + (1.0 - alpha[m - 1]) * s_hat
        grad_alpha[m] = -s_hat * s[m + 1]
    return grad_alpha


def visibility_along_depth(alphas: np.ndarray) -> np.ndarray:
    """Visibility of each plane: product of front transmittances.

    The plane axis is the last one, back-to-front; V for the front plane
    is 1 (empty product).
    """
    alphas = np.asarray(alphas)
    moved = np.moveaxis(alphas, -1, 0)
    v, _ = _visibility_fwd(moved)
    return np.moveaxis(v, 0, -1)


class _VisCtx:
    """Tape for the broadcast -> inverse-warp -> visibility -> warp chain."""

    __slots__ = ("alpha_hat", "suffix", "vstar", "inv_tables", "fwd_tables", "order")

    def __init__(self):
        self.alpha_hat = []
        self.suffix = []
        self.vstar = []


def _visibility_stack_fwd(alpha_planes: np.ndarray, inv_tables, fwd_tables):
    """Per-view V* in plane-major layout (list of (D, P_ref)), with tape."""
    ctx = _VisCtx()
    ctx.inv_tables = inv_tables
    ctx.fwd_tables = fwd_tables
    for inv_t, fwd_t in zip(inv_tables, fwd_tables):
        a_hat = inv_t.apply(alpha_planes)            # (D, P_view)
        v, s = _visibility_fwd(a_hat)
        vstar = fwd_t.apply(v)                       # (D, P_ref)
        ctx.alpha_hat.append(a_hat)
        ctx.suffix.append(s)
        ctx.vstar.append(vstar)
    return ctx


def _visibility_stack_vjp(ctx: _VisCtx, grad_vstar) -> np.ndarray:
    """Accumulate d/d(alpha_planes) from per-view V* gradients."""
    grad_alpha = None
    for n, g in enumerate(grad_vstar):
        g_v = ctx.fwd_tables[n].vjp(g)
        g_ahat = _visibility_vjp(ctx.alpha_hat[n], ctx.suffix[n], g_v)
        g_a = ctx.inv_tables[n].vjp(g_ahat)
        grad_alpha = g_a if grad_alpha is None else grad_alpha + g_a
    return grad_alpha


def mpi_referenced_visibility(alpha: AlphaVolume, views,
                              psv: PsvStack = None) -> VisibilityStack:
    """Visibility of each reference voxel with respect to each view.

    Broadcasts the opacities to every view, warps them into the view
    frustum, takes the visibility there and warps it back.  The total is
    the in-frame-gated sum over views.
    """
    ref, planes = alpha.reference, alpha.planes
    if psv is not None:
        fwd_tables = psv.tables
    else:
        fwd_tables = [warp_table_to_reference(ref, cam, planes) for cam in views]
    inv_tables = [warp_table_from_reference(ref, cam, planes) for cam in views]
    a_planes = volume_to_planes(alpha.alphas)
    ctx = _visibility_stack_fwd(a_planes, inv_tables, fwd_tables)
    w, h = ref.width, ref.height
    per_view = np.stack([planes_to_volume(v, w, h) for v in ctx.vstar])
    # suffix[n][1:] is the visibility inside view n's own frustum; views
    # must share dimensions for the stacked layout.
    frustum = np.stack([planes_to_volume(ctx.suffix[n][1:], views[n].width,
                                         views[n].height)
                        for n in range(len(views))])
    total = np.zeros((w, h, planes.count), dtype=per_view.dtype)
    for n in range(len(views)):
        mask = planes_to_volume(fwd_tables[n].mask.astype(per_view.dtype), w, h)
        total += per_view[n] * mask
    return VisibilityStack(per_view=per_view, per_view_frustum=frustum, total=total)


# ---------------------------------------------------------------------------
# Visual clues


def mean_visible_color(psv: PsvStack, vis: VisibilityStack) -> np.ndarray:
    """Visibility-weighted mean of the PSV colors, (W, H, D, 3).

    Weights are V* gated by the in-frame mask; voxels whose total weight
    falls below 1e-8 are assigned zero.
    """
    w = vis.per_view * psv.masks                       # (N, W, H, D)
    total = w.sum(axis=0)
    num = np.einsum("nwhd,nwhdc->whdc", w, psv.data[..., :3])
    valid = total >= VIS_EPS
    denom = np.maximum(total, VIS_EPS)
    return np.where(valid[..., None], num / denom[..., None], 0.0)


def visible_color_variance(psv: PsvStack, vis: VisibilityStack,
                           mu: np.ndarray) -> np.ndarray:
    """Visibility-weighted variance of the PSV colors about ``mu``."""
    w = vis.per_view * psv.masks
    total = w.sum(axis=0)
    diff = mu[None] - psv.data[..., :3]
    num = np.einsum("nwhd,nwhdc->whdc", w, diff * diff)
    valid = total >= VIS_EPS
    denom = np.maximum(total, VIS_EPS)
    return np.where(valid[..., None], num / denom[..., None], 0.0)


class _ClueCtx:
    """Tape for the clue computation vjp."""

    __slots__ = ("vis_ctx", "weights", "masks", "psv_rgb", "total", "valid",
                 "inv_total", "mu", "sigma2", "n_views", "order", "ref_size",
                 "alpha_planes")


def clue_forward(logit_planes: np.ndarray, psv: PsvStack,
                 deterministic: bool = False, inv_tables=None):
    """Clues in plane-major layout from alpha logits; returns a tape.

    Outputs: total visibility normalized by the view count (D, P), mean
    color (D, P, 3), color variance (D, P, 3).  ``inv_tables`` lets
    callers reuse the reference-to-view warp tables across iterations
    (they do not depend on the opacities).
    """
    ref, planes = psv.reference, psv.planes
    dtype = logit_planes.dtype
    alpha_planes = expit(logit_planes)
    if inv_tables is None:
        inv_tables = [warp_table_from_reference(ref, cam, planes)
                      for cam in psv.views]
    ctx = _ClueCtx()
    ctx.alpha_planes = alpha_planes
    ctx.vis_ctx = _visibility_stack_fwd(alpha_planes, inv_tables, psv.tables)
    ctx.ref_size = (ref.width, ref.height)
    n = len(psv.views)
    ctx.n_views = n
    ctx.order = canonical_view_order(psv.views) if deterministic else list(range(n))

    ctx.masks = [t.mask.astype(dtype, copy=False) for t in psv.tables]
    ctx.psv_rgb = [volume_to_planes(psv.data[i, :, :, :, :3]) for i in range(n)]
    ctx.weights = [ctx.vis_ctx.vstar[i] * ctx.masks[i] for i in range(n)]

    d, p = logit_planes.shape
    total = np.zeros((d, p), dtype=dtype)
    num = np.zeros((d, p, 3), dtype=dtype)
    for i in ctx.order:
        total += ctx.weights[i]
        num += ctx.weights[i][:, :, None] * ctx.psv_rgb[i]
    valid = total >= VIS_EPS
    inv_total = np.where(valid, 1.0 / np.maximum(total, VIS_EPS), 0.0).astype(dtype)
    mu = num * inv_total[:, :, None]

    var_num = np.zeros((d, p, 3), dtype=dtype)
    for i in ctx.order:
        diff = mu - ctx.psv_rgb[i]
        var_num += ctx.weights[i][:, :, None] * (diff * diff)
    sigma2 = var_num * inv_total[:, :, None]

    ctx.total = total
    ctx.valid = valid
    ctx.inv_total = inv_total
    ctx.mu = mu
    ctx.sigma2 = sigma2
    return (total / n, mu, sigma2), ctx


def clue_backward(ctx: _ClueCtx, grad_total_norm, grad_mu,
                  grad_sigma2) -> np.ndarray:
    """Gradient of the clues w.r.t. the alpha logits (plane-major)."""
    alpha_planes = ctx.alpha_planes
    inv_total = ctx.inv_total
    # All paths into mu: the direct gradient plus sigma2's dependence.
    d_mu = grad_mu.copy()
    acc = np.zeros_like(d_mu)
    for i in ctx.order:
        acc += ctx.weights[i][:, :, None] * (ctx.mu - ctx.psv_rgb[i])
    d_mu += grad_sigma2 * 2.0 * acc * inv_total[:, :, None]

    grad_vstar = []
    inv_n = 1.0 / ctx.n_views
    for i in range(ctx.n_views):
        diff = ctx.mu - ctx.psv_rgb[i]
        d_w = (d_mu * (-diff) * inv_total[:, :, None]).sum(axis=-1)
        d_w += ((grad_sigma2 * (diff * diff - ctx.sigma2)).sum(axis=-1) * inv_total)
        d_w += grad_total_norm * inv_n
        grad_vstar.append(d_w * ctx.masks[i])
    grad_alpha = _visibility_stack_vjp(ctx.vis_ctx, grad_vstar)
    return grad_alpha * alpha_planes * (1.0 - alpha_planes)


def compute_clues(alpha: AlphaVolume, psv: PsvStack,
                  deterministic: bool = False) -> VisualClues:
    """Bundle the three refiner clues for an alpha volume.

    Total visibility is stored normalized by the number of views so the
    feature scale does not drift with N.
    """
    if psv.reference is not alpha.reference and not _same_camera(psv.reference, alpha.reference):
        raise ValueError("PSV and alpha volume use different references")
    logits = volume_to_planes(np.asarray(alpha.logits))
    (total_n, mu, sigma2), _ = clue_forward(logits, psv, deterministic=deterministic)
    w, h = alpha.reference.width, alpha.reference.height
    return VisualClues(total_visibility=planes_to_volume(total_n, w, h),
                       mean_color=planes_to_volume(mu, w, h),
                       color_variance=planes_to_volume(sigma2, w, h))


def _same_camera(a: PinholeCamera, b: PinholeCamera) -> bool:
    return (np.array_equal(a.K, b.K) and np.array_equal(a.R, b.R)
            and np.array_equal(a.T, b.T) and a.width == b.width
            and a.height == b.height)


# ---------------------------------------------------------------------------
# Color assignment and rendering


def colorize_mpi(alpha: AlphaVolume, psv: PsvStack,
                 deterministic: bool = False, inv_tables=None) -> Mpi:
    """MPI whose RGB is the mean visible color under the given opacities.

    Colors are clamped to [0, 1]; voxels with no visible observation
    fall back to black.
    """
    logits = volume_to_planes(np.asarray(alpha.logits))
    (_, mu, _), _ = clue_forward(logits, psv, deterministic=deterministic,
                                 inv_tables=inv_tables)
    w, h = alpha.reference.width, alpha.reference.height
    data = np.empty((w, h, psv.planes.count, 4), dtype=mu.dtype)
    data[..., :3] = np.clip(planes_to_volume(mu, w, h), 0.0, 1.0)
    data[..., 3] = alpha.alphas.astype(mu.dtype, copy=False)
    return Mpi(data=data, planes=psv.planes, reference=alpha.reference)


def render_novel_view(mpi: Mpi, target: PinholeCamera, table: PlaneWarp = None):
    """Render the MPI into a target camera.

    Returns premultiplied RGB (W, H, 3) and accumulated alpha (W, H).
    """
    volumes = broadcast_views(mpi.data, 1)
    if table is None:
        table = warp_table_from_reference(mpi.reference, target, mpi.planes)
    warped = warp_from_reference(volumes, mpi.reference, [target], mpi.planes,
                                 tables=[table])
    rgb, acc = composite_over(warped)
    return rgb[0], acc[0]


# ---------------------------------------------------------------------------
# Image metrics


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio for unit dynamic range, in dB."""
    mse = float(np.mean((np.asarray(pred, dtype=np.float64)
                         - np.asarray(target, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def image_metrics(pred: np.ndarray, target: np.ndarray,
                  ssim_window: int = 11):
    """(PSNR dB, SSIM, MAE) of two same-size [0,1] images.

    PSNR of identical images is +inf (callers cap for display).
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError("image shapes differ")
    if pred.min() < -1e-6 or pred.max() > 1.0 + 1e-6:
        raise ValueError("pred values must lie in [0, 1]")
    s, _ = ssim_forward(pred, target, window=ssim_window)
    mae = float(np.mean(np.abs(pred - target)))
    return psnr(pred, target), s, mae
