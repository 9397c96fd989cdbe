"""Structural-similarity score: windowed oracle, identities, gradient."""

from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import check_gradient
from mpiforge.ssim import gaussian_window, ssim, ssim_backward, ssim_forward


def oracle_ssim(pred: np.ndarray, target: np.ndarray, window: int,
                sigma: float = 1.5) -> float:
    """Per-window SSIM with explicit loops, independent of the filters."""
    if pred.ndim == 2:
        pred = pred[:, :, None]
        target = target[:, :, None]
    r = (window - 1) // 2
    taps = [math.exp(-((a - r) ** 2) / (2.0 * sigma * sigma))
            for a in range(window)]
    norm = sum(taps)
    taps = [t / norm for t in taps]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    w, h, nchan = pred.shape
    chan_means = []
    for c in range(nchan):
        scores = []
        for i in range(r, w - r):
            for j in range(r, h - r):
                sx = sy = sxx = syy = sxy = 0.0
                for a in range(window):
                    for b in range(window):
                        wt = taps[a] * taps[b]
                        xv = pred[i + a - r, j + b - r, c]
                        yv = target[i + a - r, j + b - r, c]
                        sx += wt * xv
                        sy += wt * yv
                        sxx += wt * xv * xv
                        syy += wt * yv * yv
                        sxy += wt * xv * yv
                vx, vy, cxy = sxx - sx * sx, syy - sy * sy, sxy - sx * sy
                scores.append(((2 * sx * sy + c1) * (2 * cxy + c2))
                              / ((sx * sx + sy * sy + c1) * (vx + vy + c2)))
        chan_means.append(sum(scores) / len(scores))
    return sum(chan_means) / nchan


class TestForward:
    def test_matches_windowed_oracle(self, rng):
        pred = rng.uniform(0, 1, size=(14, 12, 2))
        target = rng.uniform(0, 1, size=(14, 12, 2))
        got = ssim(pred, target, window=7)
        want = oracle_ssim(pred, target, window=7)
        assert abs(got - want) < 1e-10

    def test_identical_images_score_one(self, rng):
        img = rng.uniform(0, 1, size=(16, 16, 3))
        assert ssim(img, img, window=7) == 1.0

    def test_symmetric_in_arguments(self, rng):
        a = rng.uniform(0, 1, size=(15, 13))
        b = rng.uniform(0, 1, size=(15, 13))
        assert ssim(a, b, window=7) == ssim(b, a, window=7)

    def test_bounded_above_by_one(self, rng):
        a = rng.uniform(0, 1, size=(16, 16, 3))
        b = np.clip(a + rng.normal(0, 0.2, size=a.shape), 0, 1)
        s = ssim(a, b, window=7)
        assert -1.0 <= s < 1.0

    def test_2d_equals_single_channel(self, rng):
        a = rng.uniform(0, 1, size=(14, 14))
        b = rng.uniform(0, 1, size=(14, 14))
        assert ssim(a, b, window=7) == ssim(a[:, :, None], b[:, :, None], window=7)

    def test_window_taps_normalized_and_symmetric(self):
        g = gaussian_window(11, 1.5)
        assert abs(g.sum() - 1.0) < 1e-14
        assert np.allclose(g, g[::-1], atol=0)
        assert np.argmax(g) == 5

    def test_validation(self, rng):
        a = rng.uniform(0, 1, size=(8, 8))
        with pytest.raises(ValueError):
            ssim(a, a[:7, :7], window=7)
        with pytest.raises(ValueError):
            ssim(a, a, window=6)
        with pytest.raises(ValueError):
            ssim(a, a, window=11)  # image smaller than window


class TestBackward:
    def test_gradient_matches_finite_differences(self, rng):
        pred = rng.uniform(0.1, 0.9, size=(12, 10, 2))
        target = rng.uniform(0, 1, size=(12, 10, 2))
        _, ctx = ssim_forward(pred, target, window=7)
        grad = ssim_backward(ctx)
        check_gradient(lambda x: ssim(x, target, window=7),
                       pred, grad, rng, count=16, rtol=1e-5)

    def test_gradient_scale_is_linear(self, rng):
        pred = rng.uniform(0, 1, size=(12, 12))
        target = rng.uniform(0, 1, size=(12, 12))
        _, ctx = ssim_forward(pred, target, window=7)
        g1 = ssim_backward(ctx, 1.0)
        g3 = ssim_backward(ctx, -3.0)
        assert np.allclose(g3, -3.0 * g1, atol=1e-15)

    def test_ascent_step_improves_score(self, rng):
        pred = rng.uniform(0.2, 0.8, size=(14, 14, 1))
        target = rng.uniform(0, 1, size=(14, 14, 1))
        base, ctx = ssim_forward(pred, target, window=7)
        grad = ssim_backward(ctx)
        stepped = ssim(pred + 1e-3 * grad / np.abs(grad).max(), target, window=7)
        assert stepped > base
