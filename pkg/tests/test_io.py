"""MPI container and PNG round trips."""

from __future__ import annotations

import math
import struct

import numpy as np
import pytest

from conftest import random_camera
from mpiforge.geometry import PinholeCamera, make_depth_planes
from mpiforge.io import MAGIC, VERSION, load_png, read_mpi, save_png, write_mpi
from mpiforge.render import Mpi


def sample_mpi(rng, w=8, h=6, d=4, z_far=math.inf):
    planes = make_depth_planes(d, z_far, 2.0)
    cam = random_camera(rng, width=w, height=h)
    data = rng.uniform(0.0, 1.0, size=(w, h, d, 4)).astype(np.float32)
    return Mpi(data=data, planes=planes, reference=cam)


class TestContainer:
    def test_round_trip_is_bit_exact_with_infinite_far_plane(self, rng,
                                                             tmp_path):
        mpi = sample_mpi(rng)
        assert math.isinf(mpi.planes.z_values[0])
        path = tmp_path / "vol.mpiv"
        write_mpi(path, mpi)
        back = read_mpi(path)
        assert back.data.dtype == np.float32
        assert back.data.tobytes() == mpi.data.tobytes()
        assert back.planes.z_values.tobytes() == mpi.planes.z_values.tobytes()
        assert math.isinf(back.planes.z_values[0])
        assert np.array_equal(back.planes.disparities, mpi.planes.disparities)
        for attr in ("K", "R", "T"):
            assert np.array_equal(getattr(back.reference, attr),
                                  getattr(mpi.reference, attr))
        assert (back.reference.width, back.reference.height) == (8, 6)
        assert back.reference.name == mpi.reference.name

    def test_rewrite_is_byte_identical(self, rng, tmp_path):
        mpi = sample_mpi(rng, z_far=10.0)
        a, b = tmp_path / "a.mpiv", tmp_path / "b.mpiv"
        write_mpi(a, mpi)
        write_mpi(b, read_mpi(a))
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic_rejected(self, rng, tmp_path):
        path = tmp_path / "vol.mpiv"
        write_mpi(path, sample_mpi(rng))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="magic"):
            read_mpi(path)

    def test_unknown_version_rejected(self, rng, tmp_path):
        path = tmp_path / "vol.mpiv"
        write_mpi(path, sample_mpi(rng))
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", VERSION + 9)
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            read_mpi(path)

    def test_plane_count_mismatch_rejected(self, rng, tmp_path):
        mpi = sample_mpi(rng, d=4)
        mpi.planes = make_depth_planes(8, math.inf, 2.0)
        with pytest.raises(ValueError, match="plane count"):
            write_mpi(tmp_path / "vol.mpiv", mpi)

    def test_reference_size_mismatch_rejected(self, rng, tmp_path):
        mpi = sample_mpi(rng)
        mpi.reference = random_camera(rng, width=16, height=16)
        path = tmp_path / "vol.mpiv"
        write_mpi(path, mpi)
        with pytest.raises(ValueError, match="does not match"):
            read_mpi(path)

    def test_header_layout_is_stable(self, rng, tmp_path):
        path = tmp_path / "vol.mpiv"
        write_mpi(path, sample_mpi(rng))
        raw = path.read_bytes()
        assert raw[:4] == MAGIC == b"MPIV"
        version, w, h, d, blob_len = struct.unpack("<IIIII", raw[4:24])
        assert (version, w, h, d) == (VERSION, 8, 6, 4)
        depths_at = 24 + blob_len
        depths = np.frombuffer(raw[depths_at:depths_at + 8 * d], dtype="<f8")
        assert math.isinf(depths[0]) and depths[-1] == 2.0


class TestPng:
    def test_quantized_values_round_trip_exactly(self, rng, tmp_path):
        img = rng.integers(0, 256, size=(16, 12, 3)).astype(np.float32) / 255.0
        path = tmp_path / "img.png"
        save_png(path, img)
        assert np.array_equal(load_png(path), img.astype(np.float32))

    def test_quantization_error_is_half_step(self, rng, tmp_path):
        img = rng.uniform(0.0, 1.0, size=(9, 9, 3))
        path = tmp_path / "img.png"
        save_png(path, img)
        assert np.abs(load_png(path) - img).max() <= 0.5 / 255.0 + 1e-9

    def test_axis_convention_round_trips(self, tmp_path):
        img = np.zeros((8, 4, 3))
        img[5, 1] = [1.0, 0.0, 0.0]          # marker at (u=5, v=1)
        path = tmp_path / "img.png"
        save_png(path, img)
        back = load_png(path)
        assert back.shape == (8, 4, 3)
        assert tuple(back[5, 1]) == (1.0, 0.0, 0.0)
        assert back.sum() == 1.0

    def test_shape_validated(self, tmp_path):
        with pytest.raises(ValueError, match="W, H, 3"):
            save_png(tmp_path / "x.png", np.zeros((4, 4)))

    def test_range_validated(self, tmp_path):
        img = np.zeros((4, 4, 3))
        img[0, 0, 0] = 1.5
        with pytest.raises(ValueError, match="0, 1"):
            save_png(tmp_path / "x.png", img)
        img[0, 0, 0] = -0.5
        with pytest.raises(ValueError, match="0, 1"):
            save_png(tmp_path / "x.png", img)
