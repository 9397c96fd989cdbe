"""Synthetic layered scenes with analytic ground truth.

A scene is a small stack of textured fronto-parallel rectangles at
fixed world depths, viewed by a planar camera grid looking down +z.
Textures are continuous functions (bilinear interpolation of a coarse
random control grid), so any camera can be rendered analytically by
intersecting pixel rays with the layer planes and compositing back to
front.  When layer depths coincide with MPI plane depths the exact
opacity volume is also available, which gives the render pipeline an
independent ground truth to be checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .geometry import (
    DepthPlanes,
    PinholeCamera,
    make_depth_planes,
)
from .render import AlphaVolume, Mpi

__all__ = [
    "SceneLayer",
    "SyntheticScene",
    "SceneSpec",
    "make_rig",
    "generate_scene",
    "render_scene",
    "render_rig",
    "ground_truth_mpi",
    "ground_truth_alpha",
    "corner_indices",
    "center_index",
]


@dataclass
class SceneLayer:
    """Textured rectangle in the plane z = depth, axis-aligned."""

    depth: float
    center: tuple           # (x, y) world
    half_extent: tuple      # (hx, hy) world, > 0
    texture: np.ndarray     # (gx, gy, 3) color control grid in [0, 1]

    def sample(self, x: np.ndarray, y: np.ndarray):
        """Continuous texture lookup; returns (rgb, alpha) per point.

        Alpha is 1 inside the rectangle and 0 outside; colors come from
        bilinear interpolation of the control grid stretched over it.
        """
        hx, hy = self.half_extent
        gx, gy = self.texture.shape[:2]
        sx = (x - (self.center[0] - hx)) / (2.0 * hx) * (gx - 1)
        sy = (y - (self.center[1] - hy)) / (2.0 * hy) * (gy - 1)
        inside = ((sx >= 0.0) & (sx <= gx - 1) & (sy >= 0.0) & (sy <= gy - 1))
        coords = np.stack([np.clip(sx, 0, gx - 1), np.clip(sy, 0, gy - 1)])
        rgb = np.stack([map_coordinates(self.texture[..., c], coords,
                                        order=1, mode="nearest")
                        for c in range(3)], axis=-1)
        return rgb, inside.astype(rgb.dtype)


@dataclass
class SyntheticScene:
    """Layer stack (back to front: depths strictly decreasing) + rig."""

    layers: list
    rig: list
    seed: int

    def __post_init__(self):
        depths = [l.depth for l in self.layers]
        if any(b >= a for a, b in zip(depths, depths[1:])):
            raise ValueError("layer depths must be strictly decreasing "
                             "(stored back to front)")
        if any(d <= 0 or not math.isfinite(d) for d in depths):
            raise ValueError("layer depths must be finite and positive")


@dataclass
class SceneSpec:
    """Knobs for the random scene family."""

    width: int = 32
    height: int = 32
    rows: int = 3
    cols: int = 3
    spacing: float = 0.3
    focal: float = None             # defaults to width
    z_near: float = 2.0
    z_far: float = math.inf
    d_planes: int = 8               # layer depths snap onto these planes
    n_layers_range: tuple = (2, 2)  # includes the background layer
    texture_cells_range: tuple = (3, 6)

    def planes(self) -> DepthPlanes:
        return make_depth_planes(self.d_planes, self.z_far, self.z_near)


def make_rig(rows: int = 3, cols: int = 3, spacing: float = 0.3,
             width: int = 32, height: int = 32,
             focal: float = None) -> list:
    """Row-major planar grid of identical cameras looking down +z."""
    if focal is None:
        focal = float(width)
    k = np.array([[focal, 0.0, (width - 1) / 2.0],
                  [0.0, focal, (height - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    rig = []
    for i in range(rows):
        for j in range(cols):
            t = np.array([(j - (cols - 1) / 2.0) * spacing,
                          (i - (rows - 1) / 2.0) * spacing, 0.0])
            rig.append(PinholeCamera(K=k.copy(), R=np.eye(3), T=t,
                                     width=width, height=height,
                                     name="c%d%d" % (i, j)))
    return rig


def corner_indices(rows: int = 3, cols: int = 3) -> list:
    return [0, cols - 1, (rows - 1) * cols, rows * cols - 1]


def center_index(rows: int = 3, cols: int = 3) -> int:
    return (rows // 2) * cols + cols // 2


def _frustum_half_extent(z: float, spec: SceneSpec) -> float:
    """Half-width covering every rig camera's view at depth z."""
    focal = spec.focal or float(spec.width)
    half_img = max(spec.width - 1, spec.height - 1) / 2.0
    half_rig = max(spec.rows - 1, spec.cols - 1) / 2.0 * spec.spacing
    return z * half_img / focal + half_rig


def generate_scene(seed: int, spec: SceneSpec = None) -> SyntheticScene:
    """Deterministic random scene; same seed gives a bit-identical scene.

    The farthest layer is an opaque full-frustum background; the rest
    are smaller rectangles at distinct nearer plane depths.  All depths
    sit exactly on the requested depth planes (the farthest finite one
    for the background), so exact opacity volumes exist for cross-checks.
    """
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    planes = spec.planes()
    z = planes.z_values
    finite = [i for i in range(len(z)) if math.isfinite(z[i])]
    bg_index = finite[0]

    n_layers = int(rng.integers(spec.n_layers_range[0],
                                spec.n_layers_range[1] + 1))
    if n_layers - 1 > len(finite) - 1:
        raise ValueError("not enough distinct plane depths for %d layers"
                         % n_layers)

    def texture():
        g = int(rng.integers(spec.texture_cells_range[0],
                             spec.texture_cells_range[1] + 1))
        return rng.uniform(0.05, 0.95, size=(g, g, 3))

    layers = [SceneLayer(depth=float(z[bg_index]), center=(0.0, 0.0),
                         half_extent=(1.5 * _frustum_half_extent(z[bg_index], spec),) * 2,
                         texture=texture())]
    # foreground layers on distinct planes, nearer than the background
    fg_planes = sorted(rng.choice(np.arange(bg_index + 1, len(z)),
                                  size=n_layers - 1, replace=False).tolist())
    for idx in fg_planes:
        depth = float(z[idx])
        span = depth * max(spec.width - 1, spec.height - 1) / (
            2.0 * (spec.focal or float(spec.width)))
        frac = rng.uniform(0.25, 0.5)
        cx, cy = rng.uniform(-0.4 * span, 0.4 * span, size=2)
        layers.append(SceneLayer(depth=depth, center=(float(cx), float(cy)),
                                 half_extent=(float(frac * span),) * 2,
                                 texture=texture()))
    rig = make_rig(spec.rows, spec.cols, spec.spacing, spec.width,
                   spec.height, spec.focal)
    return SyntheticScene(layers=layers, rig=rig, seed=seed)


def render_scene(scene: SyntheticScene, camera: PinholeCamera,
                 background: float = 0.0) -> np.ndarray:
    """Analytic render, (W, H, 3) in [0, 1], over a constant background."""
    w, h = camera.width, camera.height
    u, v = np.meshgrid(np.arange(w, dtype=np.float64),
                       np.arange(h, dtype=np.float64), indexing="ij")
    pix = np.stack([u.ravel(), v.ravel(), np.ones(w * h)], axis=-1)  # (P, 3)
    dirs = camera.R @ camera.K_inv_apply(pix).T                      # (3, P)
    img = np.full((w * h, 3), background, dtype=np.float64)
    for layer in scene.layers:                      # back to front
        rgb, a = _intersect_layer(layer, camera.T, dirs)
        img = a[:, None] * rgb + (1.0 - a[:, None]) * img
    return img.reshape(w, h, 3)


def _intersect_layer(layer: SceneLayer, origin: np.ndarray, dirs: np.ndarray):
    """Sample a layer where rays origin + t*dirs hit its plane, t > 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (layer.depth - origin[2]) / dirs[2]
    ok = np.isfinite(t) & (t > 0)
    pts = origin[:, None] + np.where(ok, t, 0.0) * dirs
    rgb, a = layer.sample(pts[0], pts[1])
    return rgb, np.where(ok, a, 0.0)


def render_rig(scene: SyntheticScene, dtype=np.float32) -> np.ndarray:
    """All rig views stacked, (len(rig), W, H, 3)."""
    return np.stack([render_scene(scene, cam) for cam in scene.rig]).astype(dtype)


def _layer_plane_index(layer: SceneLayer, planes: DepthPlanes) -> int:
    disp = 1.0 / layer.depth
    diffs = np.abs(planes.disparities - disp)
    idx = int(np.argmin(diffs))
    if diffs[idx] > 1e-9 * max(planes.disparities.max(), 1e-30):
        raise ValueError("layer depth %g does not sit on any plane"
                         % layer.depth)
    return idx


def ground_truth_mpi(scene: SyntheticScene, reference: PinholeCamera,
                     planes: DepthPlanes) -> Mpi:
    """Exact RGBA volume for a scene whose layers sit on the planes."""
    w, h = reference.width, reference.height
    u, v = np.meshgrid(np.arange(w, dtype=np.float64),
                       np.arange(h, dtype=np.float64), indexing="ij")
    pix = np.stack([u.ravel(), v.ravel(), np.ones(w * h)], axis=-1)  # (P, 3)
    dirs = reference.R @ reference.K_inv_apply(pix).T                # (3, P)
    data = np.zeros((w, h, planes.count, 4), dtype=np.float64)
    for layer in scene.layers:
        d = _layer_plane_index(layer, planes)
        rgb, a = _intersect_layer(layer, reference.T, dirs)
        sl = data[:, :, d, :]
        prev_a = sl[..., 3].ravel()
        new_a = a + (1.0 - a) * prev_a
        # over-combine when two layers share a plane
        mixed = (a[:, None] * rgb
                 + ((1.0 - a) * prev_a)[:, None] * sl[..., :3].reshape(-1, 3))
        safe = np.maximum(new_a, 1e-12)
        sl[..., :3] = (mixed / safe[:, None]).reshape(w, h, 3)
        sl[..., 3] = new_a.reshape(w, h)
    return Mpi(data=data, planes=planes, reference=reference)


def ground_truth_alpha(scene: SyntheticScene, reference: PinholeCamera,
                       planes: DepthPlanes, clip: float = 1e-6) -> AlphaVolume:
    """Exact opacities as an AlphaVolume (logits clipped at 0/1)."""
    mpi = ground_truth_mpi(scene, reference, planes)
    return AlphaVolume.from_alphas(mpi.alpha, planes, reference, clip=clip)
