"""Binary network-weights container.

Layout: magic "MPNW", version u32 LE, manifest length u32 LE, UTF-8
JSON manifest, then raw little-endian float32 data.  The manifest lists
tensors in write order with their shapes and byte offsets into the data
region.  Stored values are exactly the float32 parameter bits, so a
save/load round trip is bit-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .layers import Conv3dLayer
from .unet import LAYER_SPECS, NetworkParams, param_tensors

__all__ = ["save_weights", "load_weights", "MAGIC", "VERSION"]

MAGIC = b"MPNW"
VERSION = 1


def save_weights(path, params: NetworkParams) -> None:
    """Write parameters as float32; non-f32 params are cast (lossy)."""
    tensors = []
    blobs = []
    offset = 0
    for name, arr in param_tensors(params):
        data = np.ascontiguousarray(arr, dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape),
                        "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    manifest = json.dumps({"tensors": tensors}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_weights(path) -> NetworkParams:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError("%s is not a weights file (bad magic)" % path)
        version, mlen = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError("unsupported weights version %d" % version)
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        data = fh.read()
    by_name = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
        by_name[entry["name"]] = arr.reshape(shape).copy()

    layers = {}
    for name, cin, cout, stride, normed in LAYER_SPECS:
        try:
            kernel = by_name[name + ".kernel"]
            bias = by_name[name + ".bias"]
            scale = by_name[name + ".scale"] if normed else None
            shift = by_name[name + ".shift"] if normed else None
        except KeyError as exc:
            raise ValueError("weights file is missing tensor %s" % exc)
        if kernel.shape != (cout, cin, 3, 3, 3):
            raise ValueError("tensor %s.kernel has shape %s, expected %s"
                             % (name, kernel.shape, (cout, cin, 3, 3, 3)))
        layers[name] = Conv3dLayer(
            kernel=kernel, bias=bias, stride=(stride,) * 3,
            has_activation=normed, has_norm=normed,
            norm_scale=scale, norm_shift=shift)
    return NetworkParams(layers)
