from dataclasses import replace

import numpy as np
import pytest

from deflect_gaze.errors import EmptyMapError, UnreliableLossError
from deflect_gaze.gaze import relative_gaze_angle
from deflect_gaze.optimize import (EyeParamVector, OptConfig,
                                   correspondence_loss, image_loss,
                                   init_guess, loss_gradient, optimize_gaze,
                                   project_params)
from deflect_gaze.render import (CorrespondenceMap, CrossedFringe,
                                 render_correspondence, render_frame)
from deflect_gaze.scene import rotate_eye

UP = np.array([0.0, 1.0, 0.0])


@pytest.fixture(scope="module")
def scene1(scene):
    return replace(scene, cameras=scene.cameras[:1])


@pytest.fixture(scope="module")
def measured_truth(scene1):
    return [render_correspondence(scene1, 0)]


def truth_params(scene1):
    return EyeParamVector.from_eye(scene1.eye)


class TestCorrespondenceLoss:
    def test_zero_at_truth(self, scene1, measured_truth):
        rep = correspondence_loss(truth_params(scene1), measured_truth,
                                  scene1)
        assert rep.total == 0.0
        assert rep.mismatch_penalty == 0.0
        assert rep.n_valid >= 200

    def test_positive_when_perturbed(self, scene1, measured_truth):
        p = truth_params(scene1)
        p2 = p.with_array(p.as_array() + np.array([2, 0, 0, 0, 0, 0, 0, 0.0]))
        assert correspondence_loss(p2, measured_truth, scene1).total > 0

    def test_local_minimum_on_rotation_grid(self, scene1, measured_truth):
        p = truth_params(scene1)
        l0 = correspondence_loss(p, measured_truth, scene1).total
        for daz in (-2.0, -1.0, 1.0, 2.0):
            for del_ in (-2.0, -1.0, 1.0, 2.0):
                x = p.as_array()
                x[0] += daz
                x[1] += del_
                l = correspondence_loss(p.with_array(x), measured_truth,
                                        scene1).total
                assert l > l0

    def test_unreliable_when_overlap_too_small(self, scene1, measured_truth):
        # a measured map with a tiny valid patch starves the joint core
        m = measured_truth[0]
        tiny = CorrespondenceMap(u=m.u.copy(), v=m.v.copy(),
                                 valid=m.valid.copy())
        ys, xs = np.nonzero(tiny.valid)
        keep = set(zip(ys[:40].tolist(), xs[:40].tolist()))
        mask = np.zeros_like(tiny.valid)
        for (y, x) in keep:
            mask[y, x] = True
        tiny.valid &= mask
        with pytest.raises(UnreliableLossError):
            correspondence_loss(truth_params(scene1), [tiny], scene1)


class TestGradient:
    def test_stationary_at_truth(self, scene1, measured_truth):
        g = loss_gradient(truth_params(scene1), measured_truth, scene1,
                          OptConfig())
        assert np.linalg.norm(g) < 1e-3

    def test_sign_matches_slope(self, scene1, measured_truth):
        p = truth_params(scene1)
        x = p.as_array()
        x[0] += 1.0
        p1 = p.with_array(x)
        cfg = OptConfig()
        g = loss_gradient(p1, measured_truth, scene1, cfg)
        l_here = correspondence_loss(p1, measured_truth, scene1).total
        x2 = x.copy()
        x2[0] += cfg.fd_step_deg
        l_up = correspondence_loss(p.with_array(x2), measured_truth,
                                   scene1).total
        assert (g[0] > 0) == (l_up > l_here)


class TestOptimize:
    def test_recovers_perturbed_pose(self, scene1):
        true_eye = rotate_eye(scene1.eye, 2.0, 0.0)
        true_eye = replace(true_eye,
                           sclera_center=true_eye.sclera_center
                           + np.array([0.0, 0.0, 0.5]))
        measured = [render_correspondence(replace(scene1, eye=true_eye), 0)]
        init = init_guess(measured, scene1)
        pstar, est, trace = optimize_gaze(init, measured, scene1, OptConfig())
        assert trace[-1]["iter"] <= 300
        assert abs(pstar.azimuth - 2.0) < 0.1
        losses = [t["loss"] for t in trace]
        assert all(losses[i + 1] <= losses[i] for i in range(len(losses) - 1))

    def test_truth_init_terminates_quickly(self, scene1, measured_truth):
        _, _, trace = optimize_gaze(truth_params(scene1), measured_truth,
                                    scene1, OptConfig())
        assert trace[-1]["iter"] <= 10
        assert trace[-1]["loss"] < 1e-8

    def test_trace_records_params(self, scene1, measured_truth):
        _, _, trace = optimize_gaze(truth_params(scene1), measured_truth,
                                    scene1, OptConfig())
        for key in ("iter", "loss", "step", "azimuth", "elevation", "tx",
                    "ty", "tz"):
            assert key in trace[0]

    def test_rotation_equivariance(self, scene1):
        cfg = OptConfig(pixel_stride=2)
        directions = {}
        for a in (0.0, 3.0):
            sc = replace(scene1, eye=rotate_eye(scene1.eye, a, 0.0))
            measured = [render_correspondence(sc, 0)]
            init = init_guess(measured, scene1)
            _, est, _ = optimize_gaze(init, measured, scene1, cfg)
            directions[a] = est.direction
        theta = relative_gaze_angle(directions[3.0], directions[0.0], UP)
        assert abs(theta - 3.0) < 0.1

    def test_shape_recovery(self, scene1):
        # a +0.3 mm cornea-radius perturbation is recovered when only the
        # shape parameters are active
        true_eye = replace(scene1.eye, cornea_radius=8.1)
        measured = [render_correspondence(replace(scene1, eye=true_eye), 0)]
        active = (False, False, False, False, False, True, False, False)
        init = EyeParamVector.from_eye(scene1.eye, active=active)
        pstar, _, _ = optimize_gaze(init, measured, scene1, OptConfig())
        assert abs(pstar.cornea_radius - 8.1) < 0.05

    def test_projection_keeps_invariants(self, scene1):
        p = EyeParamVector.from_eye(scene1.eye)
        x = p.as_array()
        x[5] = 20.0   # cornea radius above sclera
        x[7] = -4.0   # negative offset
        q = project_params(p.with_array(x))
        eye = q.materialize(scene1.eye)  # must not raise
        assert eye.cornea_radius < eye.sclera_radius


class TestInitGuess:
    def test_near_truth_at_zero_rotation(self, scene1, measured_truth):
        init = init_guess(measured_truth, scene1)
        assert np.linalg.norm(init.translation) < 1.0
        assert init.azimuth == 0.0
        assert init.active == (True, True, True, True, True, False, False,
                               False)

    def test_empty_map(self, scene1):
        empty = CorrespondenceMap(
            u=np.full((128, 128), np.nan), v=np.full((128, 128), np.nan),
            valid=np.zeros((128, 128), dtype=bool))
        with pytest.raises(EmptyMapError):
            init_guess([empty], scene1)

    def test_always_valid_params(self, scene1, measured_truth):
        init = init_guess(measured_truth, scene1)
        init.materialize(scene1.eye)  # must not raise


class TestImageLoss:
    def test_zero_against_own_render(self, scene1):
        pat = CrossedFringe(period_x=200, period_y=200)
        frames = [render_frame(scene1, 0, pat)]
        rep = image_loss(truth_params(scene1), frames, pat, scene1)
        assert rep.total == 0.0

    def test_positive_when_rotated(self, scene1):
        pat = CrossedFringe(period_x=200, period_y=200)
        frames = [render_frame(scene1, 0, pat)]
        p = truth_params(scene1)
        x = p.as_array()
        x[0] += 2.0
        assert image_loss(p.with_array(x), frames, pat, scene1).total > 0

    def test_grid_local_minimum(self, scene1):
        rng = np.random.default_rng(3)
        h_s = scene1.screen.resolution[1]
        w_s = scene1.screen.resolution[0]
        img = np.clip(rng.random((h_s, w_s)), 0, 1)  # high-texture pattern
        from deflect_gaze.render import ImagePattern
        pat = ImagePattern(image=img)
        frames = [render_frame(scene1, 0, pat)]
        p = truth_params(scene1)
        l0 = image_loss(p, frames, pat, scene1).total
        for daz in (-1.0, 1.0):
            for del_ in (-1.0, 1.0):
                x = p.as_array()
                x[0] += daz
                x[1] += del_
                assert image_loss(p.with_array(x), frames, pat,
                                  scene1).total > l0
