from dataclasses import replace

import numpy as np
import pytest

from deflect_gaze.errors import InvariantViolation
from deflect_gaze.geometry import unit
from deflect_gaze.render import (CrossedFringe, ImagePattern, PhaseShiftSet,
                                 add_correspondence_noise, pattern_value,
                                 render_correspondence, render_frame)
from deflect_gaze.scene import RigidPose, ScreenModel
from helpers import plane_mirror_surface


class TestPatternValue:
    def test_crossed_fringe_peak(self):
        p = CrossedFringe(period_x=16, period_y=16)
        assert pattern_value(p, 0.0, 0.0) == pytest.approx(1.0)

    def test_crossed_fringe_half_period(self):
        p = CrossedFringe(period_x=16, period_y=16)
        assert pattern_value(p, 8.0, 0.0) == pytest.approx(0.5)

    def test_phase_shift_quadrature(self):
        p = PhaseShiftSet(period=32, n_shifts=4)
        vals = [pattern_value(p, 8.0, 0.0, k) for k in range(4)]
        assert np.allclose(vals, [0.5, 0.1, 0.5, 0.9])

    def test_image_pattern_bilinear(self):
        img = np.array([[0.0, 1.0], [0.0, 1.0]])
        p = ImagePattern(image=img)
        assert pattern_value(p, 0.5, 0.5) == pytest.approx(0.5)
        with pytest.raises(ValueError):
            pattern_value(p, 5.0, 0.0)

    def test_clipping_invariant(self):
        with pytest.raises(InvariantViolation):
            CrossedFringe(period_x=16, period_y=16, bias=0.9)

    def test_min_period(self):
        with pytest.raises(InvariantViolation):
            CrossedFringe(period_x=2, period_y=16)


class TestRenderCorrespondence:
    def test_plane_mirror_matches_analytic_projection(self, scene):
        p0 = np.array([0.0, 0.0, 12.0])
        cam = scene.cameras[0]
        screen_mid = scene.screen.uv_to_world(299.5, 169.5)
        n = unit(unit(cam.center - p0) + unit(screen_mid - p0))
        corr = render_correspondence(scene, 0,
                                     surface=plane_mirror_surface(p0, n))
        assert corr.n_valid > 3000

        # oracle: the reflected ray is the mirrored-camera ray
        origin, dirs = cam.pixel_rays()
        c_m = cam.center - 2.0 * ((cam.center - p0) @ n) * n
        d_m = dirs - 2.0 * (dirs @ n)[..., None] * n
        sp = scene.screen.plane_point
        sn = scene.screen.plane_normal
        t = ((sp - c_m) @ sn) / (d_m @ sn)
        q = c_m + t[..., None] * d_m
        u, v = scene.screen.world_to_uv(q)
        m = corr.valid
        assert np.abs(corr.u[m] - u[m]).max() < 1e-6
        assert np.abs(corr.v[m] - v[m]).max() < 1e-6

    def test_miss_is_invalid(self, corr_pair):
        corr = corr_pair[0]
        assert not corr.valid[0, 0]
        assert np.isnan(corr.u[0, 0])

    def test_deflectometric_chain_consistency(self, scene, corr_pair,
                                              truth_cam0):
        corr = corr_pair[0]
        cam = scene.cameras[0]
        m = corr.valid
        pts = truth_cam0["points"][m]
        nrm = truth_cam0["normals"][m]
        spt = scene.screen.uv_to_world(corr.u[m], corr.v[m])
        half = unit(unit(cam.center - pts) + unit(spt - pts))
        assert np.abs(half - nrm).max() < 1e-7

    def test_angle_in_equals_angle_out(self, scene, corr_pair, truth_cam0):
        corr = corr_pair[0]
        cam = scene.cameras[0]
        m = corr.valid
        pts = truth_cam0["points"][m]
        nrm = truth_cam0["normals"][m]
        spt = scene.screen.uv_to_world(corr.u[m], corr.v[m])
        cos_in = np.sum(unit(cam.center - pts) * nrm, axis=1)
        cos_out = np.sum(unit(spt - pts) * nrm, axis=1)
        assert np.abs(np.arccos(np.clip(cos_in, -1, 1))
                      - np.arccos(np.clip(cos_out, -1, 1))).max() < 1e-9

    def test_validity_monotone_under_panel_shrink(self, scene, corr_pair):
        small = ScreenModel(
            pose=scene.screen.pose,
            resolution=(scene.screen.resolution[0] // 2,
                        scene.screen.resolution[1] // 2),
            pixel_pitch=scene.screen.pixel_pitch,
        )
        corr_small = render_correspondence(replace(scene, screen=small), 0)
        grew = corr_small.valid & ~corr_pair[0].valid
        assert not grew.any()

    def test_stereo_coverage_sanity(self, scene, corr_pair, truth_cam0):
        hit0 = truth_cam0["hit"]
        assert corr_pair[0].valid.sum() >= 0.2 * hit0.sum()
        origin, dirs = scene.cameras[1].pixel_rays()
        from deflect_gaze.scene import eye_surface_hit_batch
        _, _, _, hit1 = eye_surface_hit_batch(scene.eye, origin, dirs)
        assert corr_pair[1].valid.sum() >= 0.2 * hit1.sum()


class TestRenderFrame:
    def test_noiseless_equals_pattern_at_correspondence(self, scene,
                                                        corr_pair):
        corr = corr_pair[0]
        pat = CrossedFringe(period_x=200, period_y=200)
        frame = render_frame(scene, 0, pat)
        m = corr.valid
        expected = pattern_value(pat, corr.u[m], corr.v[m])
        assert np.array_equal(frame.intensity[m], expected)
        assert np.all(frame.intensity[~m] == 0.02)

    def test_seed_determinism(self, scene):
        pat = CrossedFringe(period_x=200, period_y=200)
        f1 = render_frame(scene, 0, pat, sigma_i=0.02, seed=9)
        f2 = render_frame(scene, 0, pat, sigma_i=0.02, seed=9)
        assert np.array_equal(f1.intensity, f2.intensity)
        f3 = render_frame(scene, 0, pat, sigma_i=0.02, seed=10)
        assert not np.array_equal(f1.intensity, f3.intensity)

    def test_noise_magnitude(self, scene, corr_pair):
        pat = CrossedFringe(period_x=200, period_y=200)
        clean = render_frame(scene, 0, pat)
        noisy = render_frame(scene, 0, pat, sigma_i=0.01, seed=3)
        d = np.abs(noisy.intensity - clean.intensity)
        assert d.size >= 10_000
        mad = d.mean()
        assert 0.006 <= mad <= 0.010  # E|N(0, 0.01)| = 0.00798


class TestCorrespondenceNoise:
    def test_zero_sigma_identity(self, corr_pair):
        out = add_correspondence_noise(corr_pair[0], 0.0, 5)
        assert np.array_equal(out.valid, corr_pair[0].valid)
        m = out.valid
        assert np.array_equal(out.u[m], corr_pair[0].u[m])

    def test_reproducible(self, corr_pair):
        a = add_correspondence_noise(corr_pair[0], 0.5, 11)
        b = add_correspondence_noise(corr_pair[0], 0.5, 11)
        m = a.valid
        assert np.array_equal(a.u[m], b.u[m])

    def test_noise_std(self, scene):
        # a large valid map: plane mirror fills most of the frame
        p0 = np.array([0.0, 0.0, 12.0])
        cam = scene.cameras[0]
        screen_mid = scene.screen.uv_to_world(299.5, 169.5)
        n = unit(unit(cam.center - p0) + unit(screen_mid - p0))
        corr = render_correspondence(scene, 0,
                                     surface=plane_mirror_surface(p0, n))
        assert corr.n_valid >= 10_000
        noisy = add_correspondence_noise(corr, 0.5, 21)
        m = corr.valid
        d = noisy.u[m] - corr.u[m]
        assert 0.45 <= d.std() <= 0.55

    def test_validity_unchanged(self, corr_pair):
        out = add_correspondence_noise(corr_pair[0], 1.0, 2)
        assert np.array_equal(out.valid, corr_pair[0].valid)
