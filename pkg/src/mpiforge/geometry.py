"""Pinhole cameras, depth planes and per-plane homographies.

Conventions used throughout the package:

* Pixel (u, v): u runs along image width, v along height, integer
  coordinates are pixel centers, the frame is [0, W-1] x [0, H-1].
* A camera stores its pose in a shared world/rig frame: ``R`` holds the
  camera axes as columns (camera-to-world rotation) and ``T`` is the
  camera center in world coordinates.  A world point ``p`` maps to camera
  coordinates as ``R.T @ (p - T)``.
* Depth planes are back-to-front: index 0 is the farthest plane (possibly
  at infinity), index D-1 the nearest.  Planes are equally spaced in
  disparity 1/z, so infinity is simply disparity zero.

The plane homography maps a reference pixel to the matching pixel of
another camera through the fronto-parallel plane at depth ``z``:

    H_z = K @ R_rel.T @ K_r^-1 - (1/z) [0 | K @ R_rel.T @ T_rel]

where (R_rel, T_rel) is the pose of the other camera expressed in the
reference frame, and the bracket is a 3x3 matrix whose only nonzero
column is the last one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PinholeCamera",
    "DepthPlanes",
    "Homography",
    "homography_at_depth",
    "project_point",
    "unproject_pixel",
    "relative_pose",
    "make_depth_planes",
    "average_reference_camera",
    "load_camera_rig",
    "save_camera_rig",
]

_ORTHO_TOL = 1e-9


@dataclass
class PinholeCamera:
    """Calibrated pinhole camera with pose in a shared world frame.

    Attributes
    ----------
    K : (3, 3) intrinsic matrix in pixels, upper triangular, K[2,2] = 1.
    R : (3, 3) camera-to-world rotation (orthonormal, det +1).
    T : (3,) camera center in world coordinates, meters.
    width, height : image resolution in pixels.
    name : optional identifier, used by rig files and the CLI.
    """

    K: np.ndarray
    R: np.ndarray
    T: np.ndarray
    width: int
    height: int
    name: str = ""

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        self.validate()

    def validate(self):
        K, R = self.K, self.R
        if not (K[1, 0] == 0 and K[2, 0] == 0 and K[2, 1] == 0):
            raise ValueError("K must be upper triangular")
        if K[2, 2] != 1.0:
            raise ValueError("K[2,2] must be exactly 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal entries of K must be positive")
        if np.linalg.norm(R.T @ R - np.eye(3)) > _ORTHO_TOL:
            raise ValueError("R is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("R must have determinant +1")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("width/height must be positive")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.T

    def K_inv_apply(self, pix: np.ndarray) -> np.ndarray:
        """Apply K^-1 to homogeneous pixel vectors (..., 3) analytically.

        Uses the closed form for an upper-triangular K so that integer
        shifts of the principal point reproduce bit-identical rays.
        """
        fx, s, cx = self.K[0]
        _, fy, cy = self.K[1]
        pix = np.asarray(pix, dtype=np.float64)
        u, v, w = pix[..., 0], pix[..., 1], pix[..., 2]
        y = (v - cy * w) / fy
        x = (u - cx * w - s * y) / fx
        return np.stack([x, y, w], axis=-1)

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.T) @ self.R

    def cam_to_world(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.T


@dataclass
class DepthPlanes:
    """Back-to-front depth planes, equally spaced in disparity.

    ``z_values[0]`` may be +inf, which corresponds to disparity 0.
    """

    disparities: np.ndarray
    z_values: np.ndarray = field(init=False)

    def __post_init__(self):
        disp = np.asarray(self.disparities, dtype=np.float64).reshape(-1)
        if disp.size < 2:
            raise ValueError("need at least 2 depth planes")
        if np.any(np.diff(disp) <= 0):
            raise ValueError("disparities must be strictly increasing")
        if disp[0] < 0:
            raise ValueError("disparities must be non-negative")
        steps = np.diff(disp)
        if np.max(np.abs(steps - steps[0])) > 1e-9 * max(disp[-1], 1e-30):
            raise ValueError("disparities must be equally spaced")
        self.disparities = disp
        with np.errstate(divide="ignore"):
            self.z_values = np.where(disp == 0.0, np.inf, 1.0 / np.where(disp == 0.0, 1.0, disp))

    @property
    def count(self) -> int:
        return int(self.disparities.size)


@dataclass
class Homography:
    """3x3 plane-induced homography for a given depth."""

    matrix: np.ndarray
    plane_depth: float

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        self.plane_depth = float(self.plane_depth)


def relative_pose(ref: PinholeCamera, other: PinholeCamera):
    """Pose of ``other`` expressed in the reference camera frame.

    Returns (R_rel, T_rel) such that a point ``p_ref`` in reference
    coordinates maps to ``R_rel.T @ (p_ref - T_rel)`` in the other
    camera's coordinates; T_rel is the other camera's center seen from
    the reference.
    """
    R_rel = ref.R.T @ other.R
    T_rel = ref.R.T @ (other.T - ref.T)
    return R_rel, T_rel


def homography_at_depth(ref: PinholeCamera, other: PinholeCamera, z: float) -> Homography:
    """Homography mapping reference pixels to ``other`` pixels via plane z.

    ``z`` is the plane depth in the reference frame, in meters; +inf is
    allowed and drops the translation term.
    """
    z = float(z)
    if not (z > 0.0):
        raise ValueError(f"plane depth must be positive (got {z})")
    R_rel, T_rel = relative_pose(ref, other)
    try:
        Kr_inv = np.linalg.inv(ref.K)
    except np.linalg.LinAlgError as exc:
        raise ValueError("reference intrinsics are singular") from exc
    H = other.K @ R_rel.T @ Kr_inv
    if math.isfinite(z):
        H = H.copy()
        H[:, 2] -= (other.K @ (R_rel.T @ T_rel)) / z
    return Homography(H, z)


def project_point(cam: PinholeCamera, point: np.ndarray):
    """Perspective-project a point given in camera coordinates.

    Returns (u, v, depth); the depth is the point's z component and must
    be positive.
    """
    point = np.asarray(point, dtype=np.float64).reshape(3)
    if point[2] <= 0:
        raise ValueError("point is behind the camera (depth <= 0)")
    hom = cam.K @ point
    return hom[0] / hom[2], hom[1] / hom[2], point[2]


def unproject_pixel(cam: PinholeCamera, u: float, v: float, depth: float) -> np.ndarray:
    """Back-project a pixel to the point at ``depth`` in camera coordinates."""
    if depth <= 0:
        raise ValueError("depth must be positive")
    ray = cam.K_inv_apply(np.array([u, v, 1.0]))
    return ray * (depth / ray[2])


def make_depth_planes(d_count: int, z_far: float, z_near: float) -> DepthPlanes:
    """Equally spaced disparities from 1/z_far to 1/z_near, inclusive."""
    d_count = int(d_count)
    if d_count < 2:
        raise ValueError("need at least 2 depth planes")
    if not (z_near > 0):
        raise ValueError("z_near must be positive")
    disp_far = 0.0 if math.isinf(z_far) else 1.0 / float(z_far)
    disp_near = 1.0 / float(z_near)
    if not (disp_near > disp_far):
        raise ValueError("z_far must exceed z_near (or be infinite)")
    return DepthPlanes(np.linspace(disp_far, disp_near, d_count))


def _quat_from_rotation(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a rotation matrix."""
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return q / np.linalg.norm(q)


def _rotation_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def average_reference_camera(cameras: list) -> PinholeCamera:
    """Virtual reference camera: mean position, averaged orientation.

    Orientation averaging takes the principal eigenvector of the
    accumulated outer products sum(q_i q_i^T); each quaternion is first
    sign-aligned with the first one to remove the q/-q ambiguity.
    Intrinsics are averaged elementwise and the shared resolution is
    kept.  Accumulation runs in list order, so the result is
    deterministic; it is also order-invariant up to the symmetric sums
    involved.
    """
    if not cameras:
        raise ValueError("camera list is empty")
    w, h = cameras[0].width, cameras[0].height
    for cam in cameras:
        if cam.width != w or cam.height != h:
            raise ValueError("cameras must share the same resolution")

    T = np.mean([cam.T for cam in cameras], axis=0)
    K = np.mean([cam.K for cam in cameras], axis=0)
    K = np.triu(K)
    K[2, 2] = 1.0

    quats = [_quat_from_rotation(cam.R) for cam in cameras]
    q0 = quats[0]
    acc = np.zeros((4, 4))
    for q in quats:
        if np.dot(q, q0) < 0:
            q = -q
        acc += np.outer(q, q)
    eigvals, eigvecs = np.linalg.eigh(acc)
    q_mean = eigvecs[:, -1]
    if np.dot(q_mean, q0) < 0:
        q_mean = -q_mean
    R = _rotation_from_quat(q_mean)
    # eigh leaves R orthonormal only to machine precision; re-project.
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    if np.linalg.det(R) < 0:
        u[:, -1] = -u[:, -1]
        R = u @ vt
    return PinholeCamera(K=K, R=R, T=T, width=w, height=h, name="reference")


def load_camera_rig(path) -> list:
    """Read a camera rig JSON file (see ``save_camera_rig``)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "cameras" not in doc or not isinstance(doc["cameras"], list):
        raise ValueError(f"{path}: missing 'cameras' list")
    cams = []
    for entry in doc["cameras"]:
        cams.append(PinholeCamera(
            K=np.array(entry["K"], dtype=np.float64),
            R=np.array(entry["R"], dtype=np.float64),
            T=np.array(entry["T"], dtype=np.float64),
            width=entry["width"],
            height=entry["height"],
            name=entry.get("name", ""),
        ))
    if not cams:
        raise ValueError(f"{path}: empty camera list")
    return cams


def save_camera_rig(path, cameras: list):
    """Write cameras as row-major JSON: {"cameras": [{K, R, T, width, height, name}]}."""
    doc = {"cameras": [
        {
            "K": cam.K.tolist(),
            "R": cam.R.tolist(),
            "T": cam.T.tolist(),
            "width": cam.width,
            "height": cam.height,
            "name": cam.name,
        }
        for cam in cameras
    ]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
