"""Shared fixtures and numeric test helpers."""

from __future__ import annotations

import contextlib

import numpy as np
import pytest

from mpiforge.geometry import PinholeCamera
from mpiforge.neural import _backend


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@contextlib.contextmanager
def forced_backend(name: str):
    """Temporarily pin the conv backend to 'py' or 'cy'."""
    saved = _backend._cy
    if name == "py":
        _backend._cy = None
    elif name == "cy":
        if saved is None:
            pytest.skip("compiled kernels not built")
    else:
        raise ValueError(name)
    try:
        yield
    finally:
        _backend._cy = saved


@pytest.fixture
def py_kernels():
    """Run the test on the GEMM route regardless of the build."""
    with forced_backend("py"):
        yield


def rotation_matrix(rng: np.random.Generator, max_angle: float = 0.3):
    """Random small rotation, built from an axis-angle exponential."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def random_camera(rng: np.random.Generator, width: int = 16, height: int = 12,
                  max_angle: float = 0.3, name: str = "cam") -> PinholeCamera:
    fx = width * rng.uniform(0.8, 1.4)
    fy = height * rng.uniform(0.8, 1.4)
    skew = rng.uniform(-0.05, 0.05) * fx
    k = np.array([[fx, skew, (width - 1) / 2 + rng.uniform(-1, 1)],
                  [0.0, fy, (height - 1) / 2 + rng.uniform(-1, 1)],
                  [0.0, 0.0, 1.0]])
    return PinholeCamera(K=k, R=rotation_matrix(rng, max_angle),
                         T=rng.uniform(-0.5, 0.5, size=3),
                         width=width, height=height, name=name)


def fd_gradient(f, x: np.ndarray, indices, eps: float = 1e-6) -> dict:
    """Central finite differences of scalar ``f`` at selected indices."""
    x = np.asarray(x, dtype=np.float64)
    out = {}
    for idx in indices:
        xp = x.copy()
        xp[idx] += eps
        xm = x.copy()
        xm[idx] -= eps
        out[idx] = (f(xp) - f(xm)) / (2.0 * eps)
    return out


def sample_indices(rng: np.random.Generator, shape, count: int) -> list:
    total = int(np.prod(shape))
    chosen = rng.choice(total, size=min(count, total), replace=False)
    return [np.unravel_index(int(c), shape) for c in chosen]


def check_gradient(f, x, analytic, rng, count: int = 12, eps: float = 1e-6,
                   rtol: float = 1e-6) -> float:
    """Compare analytic gradients of scalar f against central differences.

    The error is relative to the gradient's overall scale so near-zero
    components do not blow up the ratio.  Returns the worst error.
    """
    analytic = np.asarray(analytic)
    idx = sample_indices(rng, np.shape(x), count)
    fd = fd_gradient(f, x, idx, eps=eps)
    scale = max(float(np.max(np.abs(analytic))), 1e-8)
    worst = 0.0
    for i, fd_val in fd.items():
        err = abs(fd_val - float(analytic[i])) / max(
            abs(fd_val), abs(float(analytic[i])), scale)
        worst = max(worst, err)
    assert worst < rtol, "finite-difference mismatch: %.3e >= %.3e" % (worst,
                                                                       rtol)
    return worst
