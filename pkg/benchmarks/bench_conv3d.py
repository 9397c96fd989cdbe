"""Benchmark the compiled conv3d kernels against the GEMM fallback.

Collects the exact layer shapes of one refinement-network forward pass
at a chosen volume, then times forward and backward convolutions per
shape under both backends and prints a table plus whole-pass totals.

Usage: python3 benchmarks/bench_conv3d.py [--size 32x32x8]
       [--threads N] [--repeat R]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from mpiforge.neural import _backend, init_params
from mpiforge.neural.unet import unet_forward


def collect_shapes(volume) -> list:
    """(c_in, c_out, in_volume, stride) for every conv of one pass."""
    shapes = []
    orig = _backend.conv3d_raw_forward

    def spy(inp, kernel, bias, stride, threads):
        shapes.append((inp.shape[0], kernel.shape[0], inp.shape[1:],
                       stride[0]))
        return orig(inp, kernel, bias, stride, threads)

    params = init_params(0)
    x = np.zeros((8, *volume), dtype=np.float32)
    _backend.conv3d_raw_forward = spy
    try:
        unet_forward(x, params)
    finally:
        _backend.conv3d_raw_forward = orig
    return shapes


def _time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_shape(c_in, c_out, vol, stride, threads, repeat, rng):
    x = rng.standard_normal((c_in, *vol), dtype=np.float32)
    k = rng.standard_normal((c_out, c_in, 3, 3, 3), dtype=np.float32)
    b = rng.standard_normal(c_out, dtype=np.float32)
    s3 = (stride,) * 3
    out_vol = tuple((n - 1) // stride + 1 for n in vol)
    g = rng.standard_normal((c_out, *out_vol), dtype=np.float32)

    rows = {}
    compiled = _backend._cy
    try:
        _backend._cy = None
        rows["py_fwd"] = _time(
            lambda: _backend.conv3d_raw_forward(x, k, b, s3, threads), repeat)
        rows["py_bwd"] = _time(
            lambda: _backend.conv3d_raw_backward(x, k, s3, g, threads),
            repeat)
        if compiled is not None:
            _backend._cy = compiled
            rows["cy_fwd"] = _time(
                lambda: _backend.conv3d_raw_forward(x, k, b, s3, threads),
                repeat)
            rows["cy_bwd"] = _time(
                lambda: _backend.conv3d_raw_backward(x, k, s3, g, threads),
                repeat)
    finally:
        _backend._cy = compiled
    return rows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", default="32x32x8", metavar="WxHxD")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    volume = tuple(int(p) for p in args.size.lower().split("x"))
    if len(volume) != 3 or any(v % 4 for v in volume):
        raise SystemExit("--size must be WxHxD with dims divisible by 4")

    rng = np.random.default_rng(0)
    print("compiled backend available:", _backend._cy is not None)
    print("%-22s %10s %10s %10s %10s" % ("layer shape", "py_fwd", "py_bwd",
                                         "cy_fwd", "cy_bwd"))
    totals = {"py_fwd": 0.0, "py_bwd": 0.0, "cy_fwd": 0.0, "cy_bwd": 0.0}
    for c_in, c_out, vol, stride in collect_shapes(volume):
        rows = bench_shape(c_in, c_out, vol, stride, args.threads,
                           args.repeat, rng)
        label = "%3dx%-3d %s s%d" % (c_in, c_out, "x".join(map(str, vol)),
                                     stride)
        print("%-22s %9.2fms %9.2fms %9.2fms %9.2fms"
              % (label, 1e3 * rows["py_fwd"], 1e3 * rows["py_bwd"],
                 1e3 * rows.get("cy_fwd", float("nan")),
                 1e3 * rows.get("cy_bwd", float("nan"))))
        for key, val in rows.items():
            totals[key] += val
    print("%-22s %9.2fms %9.2fms %9.2fms %9.2fms"
          % ("total (one pass)", 1e3 * totals["py_fwd"],
             1e3 * totals["py_bwd"], 1e3 * totals["cy_fwd"],
             1e3 * totals["cy_bwd"]))


if __name__ == "__main__":
    main()
