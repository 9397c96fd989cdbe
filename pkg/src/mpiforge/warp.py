"""Tensor operators moving image data between camera frames and volumes.

Four operators are provided, mirroring the rendering pipeline:

* ``broadcast_depth``   -- tile an image stack along a new depth axis and
  append a constant mask channel (N,W,H,3) -> (N,W,H,D,4).
* ``warp_to_reference`` -- per-plane homography warp of each view onto the
  reference camera, producing a plane-sweep volume stack.
* ``broadcast_views``   -- tile reference-frame MPI content along a new
  view axis (W,H,D,C) -> (N,W,H,D,C).
* ``warp_from_reference`` -- the inverse warp mapping reference-frame
  slices onto each target camera.

Both warps are backward/gather resamplers: destination pixels bilinearly
sample the source with zero padding.  The sampling geometry for a fixed
camera pair and plane set is precomputed once into a :class:`PlaneWarp`
table (4 neighbor indices + weights per destination pixel), which makes
the forward pass a weighted gather and the backward pass a deterministic
scatter-add.  Gradients flow to sampled pixel values only, never to
camera parameters.

Volumes are (W, H, D) with u-major pixel flattening (flat = u*H + v);
plane-major copies (D, P) are used internally by the tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import DepthPlanes, PinholeCamera, homography_at_depth, relative_pose

__all__ = [
    "ImageStack",
    "PsvStack",
    "ViewVolumeStack",
    "PlaneWarp",
    "broadcast_depth",
    "warp_to_reference",
    "warp_to_reference_vjp",
    "broadcast_views",
    "warp_from_reference",
    "warp_from_reference_vjp",
    "build_psv_stack",
    "warp_table_to_reference",
    "warp_table_from_reference",
    "volume_to_planes",
    "planes_to_volume",
]

_W_EPS = 1e-12


# ---------------------------------------------------------------------------
# Data containers


@dataclass
class ImageStack:
    """N input views as an (N, W, H, 3) array of [0,1] colors."""

    data: np.ndarray
    views: list

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise ValueError("image stack must be (N, W, H, 3)")
        n, w, h, _ = self.data.shape
        if n < 1 or n != len(self.views):
            raise ValueError("view count must match the camera list")
        for cam in self.views:
            if cam.width != w or cam.height != h:
                raise ValueError("camera resolution does not match images")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")


@dataclass
class PsvStack:
    """Plane-sweep volumes of every view: (N, W, H, D, 4), RGB + mask."""

    data: np.ndarray
    planes: DepthPlanes
    reference: PinholeCamera
    views: list
    tables: list = field(default=None, repr=False)  # per-view PlaneWarp, ref grid

    @property
    def n_views(self) -> int:
        return self.data.shape[0]

    @property
    def masks(self) -> np.ndarray:
        """(N, W, H, D) binary in-frame masks."""
        return self.data[..., 3]


@dataclass
class ViewVolumeStack:
    """MPI content warped into each view frame: (N, W, H, D, C)."""

    data: np.ndarray
    planes: DepthPlanes
    reference: PinholeCamera
    views: list


# ---------------------------------------------------------------------------
# Layout helpers


def volume_to_planes(vol: np.ndarray) -> np.ndarray:
    """(W, H, D[, C]) -> plane-major (D, W*H[, C])."""
    if vol.ndim == 3:
        w, h, d = vol.shape
        return np.ascontiguousarray(np.moveaxis(vol, 2, 0)).reshape(d, w * h)
    w, h, d, c = vol.shape
    return np.ascontiguousarray(np.moveaxis(vol, 2, 0)).reshape(d, w * h, c)


def planes_to_volume(planes: np.ndarray, w: int, h: int) -> np.ndarray:
    """Inverse of :func:`volume_to_planes`."""
    d = planes.shape[0]
    if planes.ndim == 2:
        return np.moveaxis(planes.reshape(d, w, h), 0, 2)
    return np.moveaxis(planes.reshape(d, w, h, planes.shape[-1]), 0, 2)


def _pixel_grid(width: int, height: int) -> np.ndarray:
    """(3, P) homogeneous pixel centers, u-major flattening."""
    u, v = np.meshgrid(np.arange(width, dtype=np.float64),
                       np.arange(height, dtype=np.float64), indexing="ij")
    ones = np.ones(width * height, dtype=np.float64)
    return np.stack([u.reshape(-1), v.reshape(-1), ones])


# ---------------------------------------------------------------------------
# Precomputed bilinear gather tables


@dataclass
class PlaneWarp:
    """Per-plane bilinear gather: destination pixels sample a source frame.

    idx/wts hold, for each plane and destination pixel, the 4 flattened
    source indices and bilinear weights (zero weight encodes a padded or
    out-of-frame neighbor).  ``mask`` is the binary center in-frame test.
    """

    idx: np.ndarray          # (D, 4, P_dst) int32
    wts: np.ndarray          # (D, 4, P_dst) float64
    mask: np.ndarray         # (D, P_dst) float64, exactly 0 or 1
    src_size: tuple          # (W, H) of the sampled frame
    dst_size: tuple          # (W, H) of the destination grid
    _wts_cache: dict = field(default_factory=dict, repr=False)

    def weights_as(self, dtype) -> np.ndarray:
        key = np.dtype(dtype).str
        if key not in self._wts_cache:
            self._wts_cache[key] = self.wts.astype(dtype, copy=False)
        return self._wts_cache[key]

    def apply(self, src_planes: np.ndarray) -> np.ndarray:
        """Gather (D, P_src[, C]) source planes into (D, P_dst[, C])."""
        wts = self.weights_as(src_planes.dtype)
        if src_planes.ndim == 2:
            out = wts[:, 0, :] * np.take_along_axis(src_planes, self.idx[:, 0, :], axis=1)
            for k in range(1, 4):
                out += wts[:, k, :] * np.take_along_axis(src_planes, self.idx[:, k, :], axis=1)
            return out
        out = None
        for k in range(4):
            g = np.take_along_axis(src_planes, self.idx[:, k, :, None], axis=1)
            g *= wts[:, k, :, None]
            out = g if out is None else out + g
        return out

    def vjp(self, grad_out: np.ndarray) -> np.ndarray:
        """Adjoint scatter: (D, P_dst[, C]) -> (D, P_src[, C]).

        Uses bincount over globally offset indices, so accumulation
        order is fixed and the result is deterministic.
        """
        d = self.idx.shape[0]
        p_src = self.src_size[0] * self.src_size[1]
        offs = (np.arange(d, dtype=np.int64) * p_src)[:, None]
        wts = self.weights_as(grad_out.dtype)
        if grad_out.ndim == 2:
            out = np.zeros(d * p_src, dtype=grad_out.dtype)
            for k in range(4):
                gidx = (self.idx[:, k, :].astype(np.int64) + offs).ravel()
                out += np.bincount(gidx, weights=(wts[:, k, :] * grad_out).ravel(),
                                   minlength=d * p_src).astype(grad_out.dtype, copy=False)
            return out.reshape(d, p_src)
        c = grad_out.shape[-1]
        out = np.zeros((d * p_src, c), dtype=grad_out.dtype)
        for k in range(4):
            gidx = (self.idx[:, k, :].astype(np.int64) + offs).ravel()
            for ch in range(c):
                out[:, ch] += np.bincount(
                    gidx, weights=(wts[:, k, :] * grad_out[..., ch]).ravel(),
                    minlength=d * p_src).astype(grad_out.dtype, copy=False)
        return out.reshape(d, p_src, c)


def _table_from_hom_coords(hom: np.ndarray, src_size, dst_size) -> PlaneWarp:
    """Build a PlaneWarp from homogeneous coordinates (D, 3, P)."""
    sw, sh = src_size
    x, y, w = hom[:, 0, :], hom[:, 1, :], hom[:, 2, :]
    valid = np.isfinite(w) & (w > _W_EPS)
    safe_w = np.where(valid, w, 1.0)
    u = np.where(valid, x / safe_w, -2.0)
    v = np.where(valid, y / safe_w, -2.0)
    finite = np.isfinite(u) & np.isfinite(v)
    u = np.where(finite, u, -2.0)
    v = np.where(finite, v, -2.0)
    mask = (valid & finite
            & (u >= 0.0) & (u <= sw - 1.0)
            & (v >= 0.0) & (v <= sh - 1.0))

    # Clip before floor so wild projections cannot overflow the int cast;
    # clipped samples are out of frame and their weights are zeroed below.
    uc = np.clip(u, -1.0, float(sw))
    vc = np.clip(v, -1.0, float(sh))
    iu = np.floor(uc)
    iv = np.floor(vc)
    fu = uc - iu
    fv = vc - iv

    d, p = u.shape
    idx = np.empty((d, 4, p), dtype=np.int32)
    wts = np.zeros((d, 4, p), dtype=np.float64)
    corners = ((iu, iv, (1.0 - fu) * (1.0 - fv)),
               (iu + 1.0, iv, fu * (1.0 - fv)),
               (iu, iv + 1.0, (1.0 - fu) * fv),
               (iu + 1.0, iv + 1.0, fu * fv))
    for k, (nx, ny, wk) in enumerate(corners):
        inside = (nx >= 0) & (nx <= sw - 1) & (ny >= 0) & (ny <= sh - 1) & valid & finite
        idx[:, k, :] = (np.clip(nx, 0, sw - 1) * sh + np.clip(ny, 0, sh - 1)).astype(np.int32)
        wts[:, k, :] = np.where(inside, wk, 0.0)
    return PlaneWarp(idx=idx, wts=wts, mask=mask.astype(np.float64),
                     src_size=(sw, sh), dst_size=dst_size)


def warp_table_to_reference(reference: PinholeCamera, view: PinholeCamera,
                            planes: DepthPlanes) -> PlaneWarp:
    """Table for the forward warp: reference pixels sample the view frame.

    The homography H_z is evaluated in factored form
    ``K R_rel^T (K_r^-1 p) - disp * K R_rel^T T_rel`` (identical to the
    assembled matrix up to float associativity) so that integer shifts of
    the reference principal point reproduce bit-identical coordinates.
    """
    grid = _pixel_grid(reference.width, reference.height)           # (3, P)
    rays = reference.K_inv_apply(grid.T).T                          # (3, P)
    R_rel, T_rel = relative_pose(reference, view)
    F = view.K @ R_rel.T
    frays = F @ rays                                                # (3, P)
    c = (F @ T_rel)[:, None]                                        # (3, 1)
    disp = planes.disparities[:, None, None]                        # (D, 1, 1)
    hom = frays[None, :, :] - disp * c[None, :, :]
    return _table_from_hom_coords(hom, (view.width, view.height),
                                  (reference.width, reference.height))


def warp_table_from_reference(reference: PinholeCamera, view: PinholeCamera,
                              planes: DepthPlanes) -> PlaneWarp:
    """Table for the inverse warp: view pixels sample the reference frame.

    Implemented as the matrix inverse of the forward plane homography; a
    singular plane homography yields an all-zero table for that plane.
    """
    grid = _pixel_grid(view.width, view.height)
    d = planes.count
    hom = np.empty((d, 3, grid.shape[1]), dtype=np.float64)
    for i, z in enumerate(planes.z_values):
        H = homography_at_depth(reference, view, z).matrix
        try:
            H_inv = np.linalg.inv(H)
        except np.linalg.LinAlgError:
            hom[i] = 0.0  # w=0 rows are masked out downstream
            continue
        hom[i] = H_inv @ grid
    return _table_from_hom_coords(hom, (reference.width, reference.height),
                                  (view.width, view.height))


# ---------------------------------------------------------------------------
# Operators


def broadcast_depth(images: ImageStack, planes: DepthPlanes) -> np.ndarray:
    """Tile images along a new depth axis, appending a unit mask channel."""
    n, w, h, _ = images.data.shape
    out = np.empty((n, w, h, planes.count, 4), dtype=images.data.dtype)
    out[..., :3] = images.data[:, :, :, None, :]
    out[..., 3] = 1.0
    return out


def warp_to_reference(broadcast: np.ndarray, reference: PinholeCamera,
                      views: list, planes: DepthPlanes,
                      tables: list = None) -> PsvStack:
    """Warp every view's tiled image onto the reference through each plane.

    RGB channels are bilinear samples with zero padding, gated by the
    mask; the mask channel is the binary test of the warped center
    against the closed frame [0, W-1] x [0, H-1] (a sample behind the
    camera or with |w| below 1e-12 is out of frame).
    """
    n, w, h, d, c = broadcast.shape
    if n != len(views):
        raise ValueError("view count mismatch")
    if d != planes.count or c != 4:
        raise ValueError("broadcast must be (N, W, H, D, 4)")
    if tables is None:
        tables = [warp_table_to_reference(reference, cam, planes) for cam in views]
    rw, rh = reference.width, reference.height
    out = np.empty((n, rw, rh, d, 4), dtype=broadcast.dtype)
    for i, table in enumerate(tables):
        src = volume_to_planes(broadcast[i, :, :, :, :3])           # (D, P, 3)
        warped = table.apply(src)
        warped *= table.mask[:, :, None].astype(broadcast.dtype, copy=False)
        out[i, :, :, :, :3] = planes_to_volume(warped, rw, rh)
        out[i, :, :, :, 3] = planes_to_volume(
            table.mask.astype(broadcast.dtype, copy=False), rw, rh)
    return PsvStack(data=out, planes=planes, reference=reference,
                    views=list(views), tables=tables)


def warp_to_reference_vjp(psv: PsvStack, grad_data: np.ndarray) -> np.ndarray:
    """Gradient of warp_to_reference w.r.t. the broadcast RGB channels.

    The mask channel is a binary coordinate test and carries no gradient.
    """
    n, w, h, d, _ = grad_data.shape
    out = np.zeros((n,) + (psv.tables[0].src_size) + (d, 4), dtype=grad_data.dtype)
    for i, table in enumerate(psv.tables):
        g = volume_to_planes(grad_data[i, :, :, :, :3])
        g = g * table.mask[:, :, None].astype(grad_data.dtype, copy=False)
        out[i, :, :, :, :3] = planes_to_volume(
            table.vjp(g), table.src_size[0], table.src_size[1])
    return out


def broadcast_views(mpi_content: np.ndarray, n_views: int) -> np.ndarray:
    """Tile reference-frame content along a new leading view axis."""
    if n_views < 1:
        raise ValueError("need at least one view")
    return np.broadcast_to(mpi_content, (n_views,) + mpi_content.shape).copy()


def warp_from_reference(broadcast_mpi: np.ndarray, reference: PinholeCamera,
                        views: list, planes: DepthPlanes,
                        tables: list = None) -> ViewVolumeStack:
    """Warp reference-frame slices onto each target camera (zero padding).

    No mask channel is produced; out-of-frame samples simply fade to the
    zero padding, so a warped alpha channel stays within [0, 1].
    """
    n = broadcast_mpi.shape[0]
    if n != len(views):
        raise ValueError("view count mismatch")
    if tables is None:
        tables = [warp_table_from_reference(reference, cam, planes) for cam in views]
    d = planes.count
    chans = broadcast_mpi.shape[-1]
    out = np.empty((n, views[0].width, views[0].height, d, chans),
                   dtype=broadcast_mpi.dtype)
    for i, table in enumerate(tables):
        src = volume_to_planes(broadcast_mpi[i])
        out[i] = planes_to_volume(table.apply(src), views[i].width, views[i].height)
    return ViewVolumeStack(data=out, planes=planes, reference=reference,
                           views=list(views))


def warp_from_reference_vjp(tables: list, grad_data: np.ndarray,
                            ref_size: tuple) -> np.ndarray:
    """Gradient of warp_from_reference w.r.t. the broadcast MPI content."""
    n = grad_data.shape[0]
    rw, rh = ref_size
    out = np.empty((n, rw, rh) + grad_data.shape[3:], dtype=grad_data.dtype)
    for i, table in enumerate(tables):
        g = volume_to_planes(grad_data[i])
        out[i] = planes_to_volume(table.vjp(g), rw, rh)
    return out


def build_psv_stack(images: ImageStack, reference: PinholeCamera,
                    planes: DepthPlanes) -> PsvStack:
    """Convenience: broadcast along depth, then warp onto the reference."""
    return warp_to_reference(broadcast_depth(images, planes),
                             reference, images.views, planes)
