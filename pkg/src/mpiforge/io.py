"""MPI container and PNG image I/O.

Container layout (little endian throughout):

    magic "MPIV" | version u32 | W u32 | H u32 | D u32
    | camera blob length u32 | camera JSON (utf-8)
    | D plane depths f64 (IEEE +inf allowed)
    | D planes of W*H*4 f32, back to front

A write->read round trip is bit-exact, including infinite depths.

PNG interchange is 8-bit; pixel values are treated as linear color (no
sRGB transfer), a documented simplification.  Arrays are (W, H, C)
u-major in this package, so PNG rows/columns are transposed on the way
in and out.
"""

from __future__ import annotations

import json
import struct

import numpy as np
from PIL import Image

from .geometry import DepthPlanes, PinholeCamera
from .render import Mpi

__all__ = [
    "MAGIC",
    "VERSION",
    "write_mpi",
    "read_mpi",
    "save_png",
    "load_png",
]

MAGIC = b"MPIV"
VERSION = 1


def _camera_to_blob(cam: PinholeCamera) -> bytes:
    doc = {"K": cam.K.tolist(), "R": cam.R.tolist(), "T": cam.T.tolist(),
           "width": cam.width, "height": cam.height, "name": cam.name}
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def _camera_from_blob(blob: bytes) -> PinholeCamera:
    doc = json.loads(blob.decode("utf-8"))
    return PinholeCamera(K=np.array(doc["K"]), R=np.array(doc["R"]),
                         T=np.array(doc["T"]), width=doc["width"],
                         height=doc["height"], name=doc.get("name", ""))


def write_mpi(path, mpi: Mpi) -> None:
    """Serialize an MPI; the payload is cast to little-endian f32."""
    w, h, d = mpi.data.shape[:3]
    if d != mpi.planes.count:
        raise ValueError("plane count does not match the data depth")
    blob = _camera_to_blob(mpi.reference)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIII", VERSION, w, h, d, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(mpi.planes.z_values,
                                      dtype="<f8").tobytes())
        for i in range(d):
            fh.write(np.ascontiguousarray(mpi.data[:, :, i, :],
                                          dtype="<f4").tobytes())


def read_mpi(path) -> Mpi:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError("%s is not an MPI container (bad magic)" % path)
        version, w, h, d, blob_len = struct.unpack("<IIIII", fh.read(20))
        if version != VERSION:
            raise ValueError("unsupported MPI container version %d" % version)
        reference = _camera_from_blob(fh.read(blob_len))
        depths = np.frombuffer(fh.read(8 * d), dtype="<f8")
        data = np.empty((w, h, d, 4), dtype=np.float32)
        for i in range(d):
            raw = fh.read(4 * w * h * 4)
            data[:, :, i, :] = np.frombuffer(raw, dtype="<f4").reshape(w, h, 4)
    if reference.width != w or reference.height != h:
        raise ValueError("container reference camera does not match W, H")
    with np.errstate(divide="ignore"):
        disparities = np.where(np.isinf(depths), 0.0, 1.0 / depths)
    planes = DepthPlanes(disparities=disparities)
    # keep the stored depth bits verbatim (1/(1/z) can drift one ulp)
    planes.z_values = depths.astype(np.float64).copy()
    return Mpi(data=data, planes=planes, reference=reference)


def save_png(path, image: np.ndarray) -> None:
    """Write a (W, H, 3) [0,1] float image as 8-bit PNG."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError("image must be (W, H, 3)")
    if img.min() < -1e-6 or img.max() > 1.0 + 1e-6:
        raise ValueError("image values must lie in [0, 1]")
    quant = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(np.transpose(quant, (1, 0, 2))).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Read an 8-bit PNG as a (W, H, 3) float32 image in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.transpose(arr, (1, 0, 2))
