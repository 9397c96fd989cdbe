"""Release gate: nine end-to-end checks with pinned tolerances and budgets.

Each check is numbered and self-contained; the one expensive training
run is shared by the two checks that need a trained network.  Budgets
are asserted with ``time.perf_counter`` around the work they cover.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from conftest import check_gradient, random_camera
from test_geometry import oracle_map
from test_render import make_psv
from test_training import micro_batch
from test_unet import EXPECTED_LAYERS

from mpiforge.geometry import (
    PinholeCamera,
    average_reference_camera,
    homography_at_depth,
    make_depth_planes,
)
from mpiforge.io import read_mpi, write_mpi
from mpiforge.neural.layers import (
    Conv3dLayer,
    conv3d_backward,
    conv3d_forward,
    instance_norm_backward,
    instance_norm_forward,
    trilinear_upsample2x,
    trilinear_upsample2x_adjoint,
)
from mpiforge.neural.unet import init_params, param_count, unet_backward, unet_forward
from mpiforge.neural.weights_io import load_weights, save_weights
from mpiforge.refiner import RefinerConfig, assemble_features, init_alpha, run_refiner
from mpiforge.render import (
    clue_backward,
    clue_forward,
    composite_planes_fwd,
    composite_planes_vjp,
    psnr,
    render_novel_view,
)
from mpiforge.scenes import (
    SceneSpec,
    center_index,
    generate_scene,
    ground_truth_mpi,
    render_rig,
    render_scene,
)
from mpiforge.training import (
    TrainConfig,
    build_scene_pool,
    evaluate,
    loss_and_grads,
    train,
)
from mpiforge.warp import (
    ImageStack,
    broadcast_depth,
    broadcast_views,
    warp_from_reference,
    warp_from_reference_vjp,
    warp_table_from_reference,
    warp_to_reference,
    warp_to_reference_vjp,
)


def _line_cameras(n, w=8, h=8, step=0.15):
    cams = []
    for i in range(n):
        k = np.array([[16.0, 0.0, (w - 1) / 2.0],
                      [0.0, 16.0, (h - 1) / 2.0],
                      [0.0, 0.0, 1.0]])
        cams.append(PinholeCamera(K=k, R=np.eye(3),
                                  T=np.array([step * i, 0.0, 0.0]),
                                  width=w, height=h, name="c%d" % i))
    return cams


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """One 2000-step toy training run plus held-out evaluations.

    32x32 images, 8 planes, 2 input views; held-out scenes come from a
    disjoint seed.  The evaluation reads the refinement out at every
    K in 1..4 for both the fresh and the trained network.
    """
    cfg = TrainConfig(total_iterations=2000, width=32, height=32,
                      n_views_range=(2, 2), d_planes_range=(8, 8), seed=0)
    held_out = build_scene_pool(cfg, size=6, seed=999)
    before = evaluate(init_params(cfg.seed), held_out, [1, 2, 3, 4], cfg,
                      d_planes=8)
    run_dir = tmp_path_factory.mktemp("acceptance-train")
    t0 = time.perf_counter()
    params, _, history = train(cfg, run_dir)
    train_seconds = time.perf_counter() - t0
    after = evaluate(params, held_out, [1, 2, 3, 4], cfg, d_planes=8)
    return {"config": cfg, "params": params, "history": history,
            "before": before, "after": after,
            "train_seconds": train_seconds}


class TestCheck1Homography:
    def test_closed_form_matches_projection_oracle(self, rng):
        """1000 random (camera pair, depth) triples agree to 1e-9 in <1s."""
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(1000):
            ref = random_camera(rng)
            other = random_camera(rng)
            z = math.inf if rng.uniform() < 0.1 else float(rng.uniform(1.5, 50.0))
            u = float(rng.uniform(0, ref.width - 1))
            v = float(rng.uniform(0, ref.height - 1))
            p = homography_at_depth(ref, other, z).matrix @ np.array([u, v, 1.0])
            got = np.array([p[0] / p[2], p[1] / p[2]])
            want = np.array(oracle_map(ref, other, z, u, v))
            err = np.abs(got - want).max() / max(1.0, np.abs(want).max())
            worst = max(worst, float(err))
        elapsed = time.perf_counter() - t0
        assert worst < 1e-9
        assert elapsed < 1.0


class TestCheck2Gradients:
    def test_adjoints_and_finite_differences_at_micro_scale(self, rng):
        """Warp adjoints to 1e-6, network FD to 1e-5, end-to-end FD to
        1e-3, all on instances no larger than 8x8 pixels x 4 planes and
        within a five-minute budget."""
        t0 = time.perf_counter()

        # -- warp operators: exact adjoint identities ---------------------
        cams = _line_cameras(3)
        images = rng.uniform(0, 1, size=(3, 8, 8, 3))
        stack = ImageStack(data=images, views=cams)
        planes = make_depth_planes(4, 8.0, 2.0)
        broad = broadcast_depth(stack, planes)
        psv = warp_to_reference(broad, cams[1], cams, planes)
        g_out = rng.standard_normal(psv.data.shape)
        g_in = warp_to_reference_vjp(psv, g_out)
        lhs = float(np.sum(g_out[..., :3] * psv.data[..., :3]))
        rhs = float(np.sum(g_in[..., :3] * broad[..., :3]))
        assert abs(lhs - rhs) < 1e-6 * max(1.0, abs(lhs))

        content = rng.uniform(0, 1, size=(3, 8, 8, 4, 4))
        tables = [warp_table_from_reference(cams[1], c, planes) for c in cams]
        vols = warp_from_reference(content, cams[1], cams, planes,
                                   tables=tables)
        g_out = rng.standard_normal(vols.data.shape)
        g_in = warp_from_reference_vjp(tables, g_out, (8, 8))
        lhs = float(np.sum(g_out * vols.data))
        rhs = float(np.sum(g_in * content))
        assert abs(lhs - rhs) < 1e-6 * max(1.0, abs(lhs))
        check_gradient(
            lambda v: float(np.sum(
                g_out * warp_from_reference(v, cams[1], cams, planes,
                                            tables=tables).data)),
            content, g_in, rng, count=8, rtol=1e-6)

        # -- conv3d / instance norm / upsample ----------------------------
        x = rng.standard_normal((2, 8, 8, 4))
        layer = Conv3dLayer(kernel=rng.standard_normal((2, 2, 3, 3, 3)),
                            bias=rng.standard_normal(2),
                            has_activation=False, has_norm=False)
        g = rng.standard_normal((2, 8, 8, 4))
        gx, gk, gb = conv3d_backward(x, layer, g, threads=1)
        check_gradient(
            lambda v: float(np.sum(g * conv3d_forward(v, layer, threads=1))),
            x, gx, rng, count=8, rtol=1e-6)
        check_gradient(
            lambda v: float(np.sum(g * conv3d_forward(
                x, Conv3dLayer(kernel=v, bias=layer.bias,
                               has_activation=False, has_norm=False),
                threads=1))),
            layer.kernel, gk, rng, count=8, rtol=1e-6)

        scale = rng.uniform(0.5, 1.5, 2)
        shift = rng.standard_normal(2)
        _, ctx = instance_norm_forward(x, scale, shift)
        gn, gsc, gsh = instance_norm_backward(ctx, g)
        check_gradient(
            lambda v: float(np.sum(g * instance_norm_forward(v, scale,
                                                             shift)[0])),
            x, gn, rng, count=8, rtol=1e-6)

        small = rng.standard_normal((2, 4, 4, 2))
        g_up = rng.standard_normal((2, 8, 8, 4))
        g_small = trilinear_upsample2x_adjoint(g_up)
        check_gradient(
            lambda v: float(np.sum(g_up * trilinear_upsample2x(v))),
            small, g_small, rng, count=8, rtol=1e-6)

        # -- compositing and clue statistics ------------------------------
        alpha = rng.uniform(0.05, 0.95, size=(16, 4))
        rgb = rng.uniform(0, 1, size=(16, 4, 3))
        out_rgb, out_acc, cctx = composite_planes_fwd(alpha, rgb)
        g_rgb = rng.standard_normal(out_rgb.shape)
        g_acc = rng.standard_normal(out_acc.shape)
        ga, gr = composite_planes_vjp(cctx, g_rgb, g_acc)
        check_gradient(
            lambda v: float(np.sum(g_rgb * composite_planes_fwd(v, rgb)[0])
                            + np.sum(g_acc * composite_planes_fwd(v, rgb)[1])),
            alpha, ga, rng, count=8, rtol=1e-6)
        check_gradient(
            lambda v: float(np.sum(g_rgb * composite_planes_fwd(alpha, v)[0])),
            rgb, gr, rng, count=8, rtol=1e-6)

        psv = make_psv(rng, n=2, w=6, h=6, d=3)
        logits = rng.uniform(-1.5, 1.5, size=(3, 36))
        g_t = rng.standard_normal((3, 36))
        g_mu = rng.standard_normal((3, 36, 3))
        g_s2 = rng.standard_normal((3, 36, 3))
        _, kctx = clue_forward(logits, psv)
        g_logits = clue_backward(kctx, g_t, g_mu, g_s2)

        def clue_loss(lg):
            (t, mu, s2), _ = clue_forward(lg, psv)
            return float(np.sum(g_t * t) + np.sum(g_mu * mu)
                         + np.sum(g_s2 * s2))

        check_gradient(clue_loss, logits, g_logits, rng, count=8, rtol=2e-6)

        # -- network parameters: central differences ----------------------
        params = init_params(seed=3, dtype=np.float64)
        x = rng.standard_normal((8, 8, 8, 4))
        cot = rng.standard_normal((1, 8, 8, 4))

        def net_loss():
            out, _ = unet_forward(x, params, threads=1)
            return float(np.sum(cot * out))

        _, tape = unet_forward(x, params, threads=1)
        grads, _ = unet_backward(tape, cot, params, threads=1)
        eps = 1e-6
        for lname, key, attr in [("conv1_1", "kernel", "kernel"),
                                 ("conv2_3", "kernel", "kernel"),
                                 ("conv3_2", "kernel", "kernel"),
                                 ("conv1_4", "shift", "norm_shift"),
                                 ("conv2_6", "scale", "norm_scale"),
                                 ("conv1_7", "bias", "bias")]:
            tensor = getattr(params.layers[lname], attr)
            idx = tuple(rng.integers(0, s) for s in tensor.shape)
            orig = tensor[idx]
            tensor[idx] = orig + eps
            f_plus = net_loss()
            tensor[idx] = orig - eps
            f_minus = net_loss()
            tensor[idx] = orig
            fd = (f_plus - f_minus) / (2 * eps)
            an = float(grads[lname][key][idx])
            scale = max(float(np.abs(grads[lname][key]).max()), 1e-8)
            assert abs(fd - an) / max(abs(fd), abs(an), scale) < 1e-5

        # -- whole pipeline, two refinement iterations ---------------------
        batch = micro_batch(rng, k=2)
        params = init_params(seed=3, dtype=np.float64)
        _, grads, _, _ = loss_and_grads(params, batch, ssim_window=7)
        for lname, key, attr in [("conv1_1", "kernel", "kernel"),
                                 ("conv2_2", "scale", "norm_scale"),
                                 ("conv3_3", "kernel", "kernel"),
                                 ("conv1_7", "kernel", "kernel")]:
            tensor = getattr(params.layers[lname], attr)
            idx = tuple(rng.integers(0, s) for s in tensor.shape)
            orig = tensor[idx]
            tensor[idx] = orig + eps
            f_plus = loss_and_grads(params, batch, ssim_window=7)[0]
            tensor[idx] = orig - eps
            f_minus = loss_and_grads(params, batch, ssim_window=7)[0]
            tensor[idx] = orig
            fd = (f_plus - f_minus) / (2 * eps)
            an = float(grads[lname][key][idx])
            scale = max(float(np.abs(grads[lname][key]).max()), 1e-10)
            assert abs(fd - an) / max(abs(fd), abs(an), scale) < 1e-3

        assert time.perf_counter() - t0 < 300.0


class TestCheck3NetworkContract:
    def test_parameter_budget_and_channel_graph(self):
        assert param_count() == 189_457 < 200_000
        params = init_params(seed=0)
        got = tuple(
            (name, layer.kernel.shape[1], layer.kernel.shape[0],
             layer.stride[0], layer.has_norm)
            for name, layer in params.layers.items())
        assert got == EXPECTED_LAYERS

    def test_feature_assembly_produces_eight_channels(self, rng):
        cams = _line_cameras(3, w=8, h=8)
        images = rng.uniform(0, 1, size=(3, 8, 8, 3))
        planes = make_depth_planes(4, 8.0, 2.0)
        stack = ImageStack(data=images, views=cams)
        broad = broadcast_depth(stack, planes)
        psv = warp_to_reference(broad, cams[1], cams, planes)
        cfg = RefinerConfig(iterations=1, planes=planes)
        alpha = init_alpha(cfg, cams[1], dtype=np.float64)
        feats = assemble_features(alpha, psv)
        assert feats.shape == (8, 8, 8, 4)
        assert np.all(np.isfinite(feats))


class TestCheck4Symmetries:
    def test_view_permutation_invariance(self, rng):
        cams = _line_cameras(4, w=12, h=12)
        images = rng.uniform(0, 1, size=(4, 12, 12, 3)).astype(np.float32)
        planes = make_depth_planes(4, 8.0, 2.0)
        params = init_params(seed=2)
        cfg = RefinerConfig(iterations=2, planes=planes)
        perm = [2, 0, 3, 1]
        a = run_refiner(images, cams, cfg, params, deterministic=True)
        b = run_refiner(images[perm], [cams[i] for i in perm], cfg, params,
                        deterministic=True)
        assert np.array_equal(a.data, b.data)
        a = run_refiner(images, cams, cfg, params)
        b = run_refiner(images[perm], [cams[i] for i in perm], cfg, params)
        assert np.abs(a.data - b.data).max() < 1e-6

    def test_network_shift_equivariance(self, rng):
        """Shifting the input by one downsampling period (4 px in width
        and height) shifts the output, away from the zero-padding halo."""
        params = init_params(seed=5, dtype=np.float64)
        w = h = 176
        d, margin = 8, 48
        x = np.tile(rng.standard_normal((8, 4, 4, 4)),
                    (1, w // 4, h // 4, d // 4))
        x[:, 80:96, 80:96, :] = rng.standard_normal((8, 16, 16, d))
        x_shifted = np.roll(x, (4, 4), axis=(1, 2))
        assert np.abs(x - x_shifted).max() > 1.0
        out_a, _ = unet_forward(x, params)
        out_b, _ = unet_forward(x_shifted, params)
        rolled = np.roll(out_a, (4, 4), axis=(1, 2))
        core = (slice(None), slice(margin, w - margin),
                slice(margin, h - margin), slice(None))
        assert np.abs(rolled[core] - out_b[core]).max() < 1e-5

    def test_alpha_compositing_telescopes(self, rng):
        alpha = rng.uniform(0, 1, size=(64, 16))
        rgb = rng.uniform(0, 1, size=(64, 16, 3))
        _, acc, _ = composite_planes_fwd(alpha, rgb)
        assert np.abs(acc - (1.0 - np.prod(1.0 - alpha, axis=-1))).max() < 1e-6


class TestCheck5ExactVolumes:
    def test_ground_truth_volume_rerenders_at_64px(self):
        """64x64 images, 16 planes: over 30 dB against the analytic
        render away from silhouette bands, in under a minute."""
        t0 = time.perf_counter()
        spec = SceneSpec(width=64, height=64, d_planes=16,
                         n_layers_range=(3, 3))
        scene = generate_scene(5, spec)
        planes = spec.planes()
        ref = scene.rig[center_index()]
        gt = ground_truth_mpi(scene, ref, planes)
        vols = broadcast_views(gt.data, 1)
        for cam in scene.rig:
            rendered, acc = render_novel_view(gt, cam)
            analytic = render_scene(scene, cam)
            warped_a = warp_from_reference(vols, ref, [cam],
                                           planes).data[0][..., 3]
            on_edge = ((warped_a > 1e-3) & (warped_a < 1.0 - 1e-3)).any(axis=-1)
            valid = (acc > 0.999) & ~on_edge
            assert valid.mean() > 0.5
            assert psnr(rendered[valid], analytic[valid]) > 30.0
        assert time.perf_counter() - t0 < 60.0


class TestCheck6Training:
    def test_2000_steps_lift_held_out_views_by_6db(self, trained_run):
        assert trained_run["train_seconds"] < 1800.0
        before = trained_run["before"][-1]
        after = trained_run["after"][-1]
        assert before["k"] == after["k"] == 4
        gain = after["psnr"] - before["psnr"]
        assert gain >= 6.0, "held-out PSNR gain %.2f dB" % gain
        losses = [row["loss"] for row in trained_run["history"]]
        assert all(math.isfinite(l) for l in losses)


class TestCheck7Monotonicity:
    def test_mean_ssim_does_not_decrease_with_iterations(self, trained_run):
        rows = trained_run["after"]
        assert [row["k"] for row in rows] == [1, 2, 3, 4]
        ssims = [row["ssim"] for row in rows]
        assert all(b >= a - 1e-9 for a, b in zip(ssims, ssims[1:])), ssims


class TestCheck8Generalization:
    def test_model_trained_small_runs_on_larger_instances(self, rng, tmp_path):
        """Train with 2-3 views on 8 planes and K=2, then run 5 views on
        16 planes for K=6: finite outputs, opacities and accumulated
        alpha inside [0, 1]."""
        cfg = TrainConfig(total_iterations=30, width=16, height=16,
                          n_views_range=(2, 3), d_planes_range=(8, 8),
                          curriculum={0: 2}, scene_pool_size=4, seed=3)
        params, _, history = train(cfg, tmp_path / "run")
        assert all(math.isfinite(row["loss"]) for row in history)

        spec = SceneSpec(width=32, height=32, d_planes=16)
        scene = generate_scene(21, spec)
        images = render_rig(scene)
        idx = [0, 2, 4, 6, 8]          # corners + center of the 3x3 rig
        cams = [scene.rig[i] for i in idx]
        planes = make_depth_planes(16, spec.z_far, spec.z_near)
        mpi = run_refiner(images[idx], cams,
                          RefinerConfig(iterations=6, planes=planes), params)
        assert np.all(np.isfinite(mpi.data))
        assert mpi.data[..., 3].min() >= 0.0
        assert mpi.data[..., 3].max() <= 1.0
        novel = scene.rig[1]
        rgb, acc = render_novel_view(mpi, novel)
        assert np.all(np.isfinite(rgb))
        assert acc.min() >= 0.0 and acc.max() <= 1.0


class TestCheck9Persistence:
    def test_volume_and_weight_files_round_trip_bit_exact(self, rng, tmp_path):
        spec = SceneSpec(width=16, height=16, d_planes=8, z_far=math.inf)
        scene = generate_scene(9, spec)
        ref = scene.rig[center_index()]
        planes = spec.planes()
        assert math.isinf(planes.z_values[0])
        gt = ground_truth_mpi(scene, ref, planes)
        path = tmp_path / "volume.mpiv"
        write_mpi(path, gt)
        loaded = read_mpi(path)
        assert loaded.data.tobytes() == gt.data.astype(np.float32).tobytes()
        assert loaded.planes.z_values.tobytes() == planes.z_values.tobytes()

        params = init_params(seed=31)
        wpath = tmp_path / "net.mpnw"
        save_weights(wpath, params)
        loaded_params = load_weights(wpath)
        for name, layer in params.layers.items():
            other = loaded_params.layers[name]
            assert layer.kernel.tobytes() == other.kernel.tobytes()
            assert layer.bias.tobytes() == other.bias.tobytes()

    def test_deterministic_training_reproduces_checkpoints(self, tmp_path):
        cfg = dict(total_iterations=4, width=16, height=16,
                   n_views_range=(2, 2), d_planes_range=(8, 8),
                   scene_pool_size=2, seed=7, deterministic=True)
        train(TrainConfig(**cfg), tmp_path / "a", threads=1)
        train(TrainConfig(**cfg), tmp_path / "b", threads=1)
        wa = (tmp_path / "a" / "weights.mpnw").read_bytes()
        wb = (tmp_path / "b" / "weights.mpnw").read_bytes()
        assert wa == wb
