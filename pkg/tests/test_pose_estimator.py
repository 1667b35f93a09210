import dataclasses

import numpy as np
import pytest

from suturekit.bench import random_needle_pose
from suturekit.needle import BinaryMask, NeedleParams, pose_to_params, rasterize
from suturekit.pose_estimator import (
    EmptyMasks,
    EstimatorConfig,
    KeypointHints,
    NoConvergence,
    SceneEvaluator,
    _chamfer,
    _run_seed,
    estimate,
    gradient,
    objective,
)
from suturekit.geometry import rotation_geodesic


def make_scene(rig, shape, seed=0, occlusion=None, line_width=1.0):
    rng = np.random.default_rng([seed, 0])
    T = random_needle_pose(rng, rig, shape)
    masks = tuple(rasterize(T, shape, cam, line_width, occlusion) for cam in rig.cameras)
    x_l = pose_to_params(T, shape, rig.left)
    x_r = pose_to_params(T, shape, rig.right)
    hints = KeypointHints(
        left_start=x_l.kp_st, left_end=x_l.kp_ed,
        right_start=x_r.kp_st, right_end=x_r.kp_ed,
    )
    return T, masks, x_l, hints


class TestChamfer:
    def test_single_pair(self):
        assert _chamfer(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]), 1e4) == 25.0

    def test_picks_nearest_point(self):
        mask = np.array([[0.0, 0.0], [10.0, 0.0]])
        pts = np.array([[1.0, 0.0], [9.0, 0.0]])
        assert _chamfer(mask, pts, 1e4) == 2.0

    def test_empty_mask_is_zero(self):
        assert _chamfer(np.empty((0, 2)), np.array([[1.0, 2.0]]), 1e4) == 0.0

    def test_empty_points_pays_penalty(self):
        assert _chamfer(np.array([[0.0, 0.0], [1.0, 1.0]]), np.empty((0, 2)), 1e4) == 2e4


class TestObjective:
    def test_small_at_ground_truth(self, rig, shape):
        _, masks, x_true, _ = make_scene(rig, shape, seed=1)
        report = objective(x_true, masks, shape, rig)
        n = sum(report.mask_pixels_used)
        assert report.value / n < 2.0  # sub-pixel mean squared offset
        assert report.value == pytest.approx(sum(report.per_view_value))

    def test_grows_away_from_truth(self, rig, shape):
        _, masks, x_true, _ = make_scene(rig, shape, seed=2)
        J0 = objective(x_true, masks, shape, rig).value
        shifted = NeedleParams(
            x_true.theta1, x_true.theta2, x_true.kp_st + 15.0, x_true.kp_ed + 15.0
        )
        assert objective(shifted, masks, shape, rig).value > 5.0 * J0

    def test_empty_masks_raise(self, rig, shape):
        empty = BinaryMask(640, 480, np.empty((0, 2), dtype=int))
        x = NeedleParams(1.0, 0.0, np.array([300.0, 240.0]), np.array([340.0, 240.0]))
        with pytest.raises(EmptyMasks):
            objective(x, (empty, empty), shape, rig)

    def test_one_empty_view_pays_penalty_free_pass(self, rig, shape):
        # an empty view contributes zero (no mask pixels to explain)
        _, masks, x_true, _ = make_scene(rig, shape, seed=3)
        empty = BinaryMask(640, 480, np.empty((0, 2), dtype=int))
        report = objective(x_true, (masks[0], empty), shape, rig)
        assert report.per_view_value[1] == 0.0

    def test_subset_mask_never_increases_objective(self, rig, shape):
        _, masks, x_true, _ = make_scene(rig, shape, seed=4)
        full = objective(x_true, masks, shape, rig).value
        half = BinaryMask(640, 480, masks[0].foreground[::2])
        reduced = objective(x_true, (half, masks[1]), shape, rig).value
        assert reduced <= full


class TestSceneEvaluator:
    def test_matches_objective(self, rig, shape):
        _, masks, x_true, _ = make_scene(rig, shape, seed=5)
        cfg = EstimatorConfig()
        ev = SceneEvaluator(masks, shape, rig, cfg)
        for dx in (0.0, 3.0, -7.0):
            x = NeedleParams(
                x_true.theta1, x_true.theta2, x_true.kp_st + dx, x_true.kp_ed + dx
            )
            J_ev = float(ev.evaluate(x.as_vector())[0])
            J_ob = objective(x, masks, shape, rig, cfg).value
            assert J_ev == pytest.approx(J_ob, rel=1e-9)

    def test_batch_matches_single(self, rig, shape):
        _, masks, x_true, _ = make_scene(rig, shape, seed=6)
        ev = SceneEvaluator(masks, shape, rig, EstimatorConfig())
        batch = np.stack([x_true.as_vector() + d for d in (0.0, 1.0, 2.0)])
        joint = ev.evaluate(batch)
        for row, J in zip(batch, joint):
            assert float(ev.evaluate(row)[0]) == pytest.approx(J, rel=1e-12)

    def test_invalid_theta1_is_inf(self, rig, shape):
        _, masks, x_true, _ = make_scene(rig, shape, seed=7)
        ev = SceneEvaluator(masks, shape, rig, EstimatorConfig())
        bad = x_true.as_vector().copy()
        bad[0] = 3.3
        assert np.isinf(ev.evaluate(bad)[0])


class TestGradient:
    def test_matches_independent_finite_differences(self, rig, shape):
        _, masks, x_true, _ = make_scene(rig, shape, seed=8)
        cfg = EstimatorConfig()
        x = NeedleParams(
            x_true.theta1 + 0.05, x_true.theta2 + 0.1, x_true.kp_st + 2.0, x_true.kp_ed - 2.0
        )
        g = gradient(x, masks, shape, rig, cfg)
        # oracle: central differences through the pose-object objective path
        steps = np.array([cfg.fd_step_angle] * 2 + [cfg.fd_step_px] * 4)
        for i in range(6):
            vp, vm = x.as_vector(), x.as_vector()
            vp[i] += steps[i]
            vm[i] -= steps[i]
            fp = objective(NeedleParams.from_vector(vp), masks, shape, rig, cfg).value
            fm = objective(NeedleParams.from_vector(vm), masks, shape, rig, cfg).value
            oracle = (fp - fm) / (2.0 * steps[i])
            assert g[i] == pytest.approx(oracle, rel=1e-4, abs=1e-3)


class TestDescent:
    def test_seed_never_worsens(self, rig, shape):
        _, masks, x_true, _ = make_scene(rig, shape, seed=9)
        cfg = EstimatorConfig()
        ev = SceneEvaluator(masks, shape, rig, cfg)
        vec0 = x_true.as_vector() + np.array([0.05, 0.3, 2.0, -2.0, 1.0, -1.0])
        J0 = float(ev.evaluate(vec0)[0])
        _, J_best, steps = _run_seed(vec0, ev, cfg, 100)
        assert J_best <= J0
        assert 1 <= steps <= 100

    def test_start_at_truth_stays_at_truth(self, rig, shape):
        _, masks, x_true, _ = make_scene(rig, shape, seed=10)
        cfg = EstimatorConfig()
        ev = SceneEvaluator(masks, shape, rig, cfg)
        vec0 = x_true.as_vector()
        best_vec, J_best, _ = _run_seed(vec0, ev, cfg, 200)
        assert J_best <= float(ev.evaluate(vec0)[0])
        assert np.abs(best_vec[2:] - vec0[2:]).max() < 2.0  # keypoints stay put


class TestEstimate:
    def test_accurate_on_clean_scene(self, rig, shape):
        T_true, masks, _, hints = make_scene(rig, shape, seed=11)
        pose, report, steps = estimate(masks, hints, shape, rig)
        assert np.linalg.norm(pose.translation - T_true.translation) < 5e-4
        assert rotation_geodesic(pose.rotation, T_true.rotation) < np.radians(2.0)
        assert steps > 0

    def test_deterministic(self, rig, shape):
        _, masks, _, hints = make_scene(rig, shape, seed=12)
        a, ra, sa = estimate(masks, hints, shape, rig)
        b, rb, sb = estimate(masks, hints, shape, rig)
        assert np.array_equal(a.translation, b.translation)
        assert np.array_equal(a.rotation, b.rotation)
        assert ra.value == rb.value and sa == sb

    def test_without_right_hints(self, rig, shape):
        T_true, masks, x_l, _ = make_scene(rig, shape, seed=13)
        hints = KeypointHints(left_start=x_l.kp_st, left_end=x_l.kp_ed)
        pose, _, _ = estimate(masks, hints, shape, rig)
        assert np.linalg.norm(pose.translation - T_true.translation) < 1e-3

    def test_occluded_scene(self, rig, shape):
        T_true, masks, _, hints = make_scene(rig, shape, seed=14, occlusion=(0.3, 0.6))
        pose, _, _ = estimate(masks, hints, shape, rig)
        assert np.linalg.norm(pose.translation - T_true.translation) < 1e-3

    def test_reject_threshold_raises_with_result(self, rig, shape):
        _, masks, _, hints = make_scene(rig, shape, seed=15)
        cfg = dataclasses.replace(
            EstimatorConfig(), reject_mean_sq_px=1e-12, max_steps=40, explore_steps=10
        )
        with pytest.raises(NoConvergence) as exc:
            estimate(masks, hints, shape, rig, cfg)
        pose, report, steps = exc.value.result
        assert report.value >= 0.0 and steps > 0

    def test_empty_masks_raise(self, rig, shape):
        empty = BinaryMask(640, 480, np.empty((0, 2), dtype=int))
        hints = KeypointHints(
            left_start=np.array([300.0, 240.0]), left_end=np.array([340.0, 240.0])
        )
        with pytest.raises(EmptyMasks):
            estimate((empty, empty), hints, shape, rig)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EstimatorConfig(max_steps=0)
        with pytest.raises(ValueError):
            EstimatorConfig(lr_px=0.0)
