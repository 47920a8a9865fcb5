from dataclasses import replace

import numpy as np
import pytest

from deflect_gaze.errors import EmptyFieldError
from deflect_gaze.geometry import unit
from deflect_gaze.render import (CorrespondenceMap, add_correspondence_noise,
                                 render_correspondence)
from deflect_gaze.stereo import (DepthSweepParams, NormalField,
                                 candidate_normal, default_sweep,
                                 reconstruct_field, solve_depth,
                                 stereo_consistency)


def truth_for(field, truth):
    px, py = field.pixels[:, 0], field.pixels[:, 1]
    return (truth["points"][py, px], truth["normals"][py, px],
            truth["region"][py, px])


def pick_pixel(corr, truth, region=None, seed=0):
    ys, xs = np.nonzero(corr.valid)
    g = np.random.default_rng(seed)
    order = g.permutation(len(xs))
    for i in order:
        px, py = int(xs[i]), int(ys[i])
        if region is None or truth["region"][py, px] == region:
            return px, py
    raise AssertionError("no pixel found")


class TestCandidateNormal:
    def test_true_depth_recovers_normal(self, scene, corr_pair, truth_cam0):
        corr = corr_pair[0]
        cam = scene.cameras[0]
        px, py = pick_pixel(corr, truth_cam0)
        p_true = truth_cam0["points"][py, px]
        t_true = float(np.linalg.norm(p_true - cam.center))
        spt = scene.screen.uv_to_world(corr.u[py, px], corr.v[py, px])
        sample = candidate_normal(cam, (px, py), t_true, spt)
        assert np.abs(sample.normal - truth_cam0["normals"][py, px]).max() < 1e-6

    def test_depth_error_tilts_normal(self, scene, corr_pair, truth_cam0):
        corr = corr_pair[0]
        cam = scene.cameras[0]
        px, py = pick_pixel(corr, truth_cam0, seed=1)
        p_true = truth_cam0["points"][py, px]
        n_true = truth_cam0["normals"][py, px]
        t_true = float(np.linalg.norm(p_true - cam.center))
        spt = scene.screen.uv_to_world(corr.u[py, px], corr.v[py, px])
        for dt in (-2.0, 2.0):
            s = candidate_normal(cam, (px, py), t_true + dt, spt)
            ang = np.degrees(np.arccos(np.clip(s.normal @ n_true, -1, 1)))
            assert ang > 0.5

    def test_degenerate_bisector(self, scene):
        from deflect_gaze.errors import DegenerateBisectorError
        cam = scene.cameras[0]
        ray = cam.pixel_ray(64, 64)
        p = ray.at(30.0)
        behind = p + (p - cam.center)  # screen point collinear, beyond P
        with pytest.raises(DegenerateBisectorError):
            candidate_normal(cam, (64, 64), 30.0, behind)


class TestStereoConsistency:
    def test_small_at_true_depth(self, scene, corr_pair, truth_cam0):
        corr1, corr2 = corr_pair
        cam = scene.cameras[0]
        for seed in range(5):
            px, py = pick_pixel(corr1, truth_cam0, seed=seed)
            t_true = float(np.linalg.norm(truth_cam0["points"][py, px]
                                          - cam.center))
            c = stereo_consistency(scene, (px, py), t_true, corr1, corr2)
            if c is not None:
                assert c < 1e-3

    def test_projection_outside_is_none(self, scene, corr_pair):
        corr1, corr2 = corr_pair
        ys, xs = np.nonzero(corr1.valid)
        px, py = int(xs[0]), int(ys[0])
        # a depth far behind the eye projects outside camera 2's map
        assert stereo_consistency(scene, (px, py), 500.0, corr1, corr2) is None

    def test_unimodal_near_truth(self, scene, corr_pair, truth_cam0):
        corr1, corr2 = corr_pair
        cam = scene.cameras[0]
        ys, xs = np.nonzero(corr1.valid)
        g = np.random.default_rng(4)
        sel = g.choice(len(xs), size=200, replace=False)
        wins = 0
        total = 0
        for i in sel:
            px, py = int(xs[i]), int(ys[i])
            t_true = float(np.linalg.norm(truth_cam0["points"][py, px]
                                          - cam.center))
            c0 = stereo_consistency(scene, (px, py), t_true, corr1, corr2)
            cm = stereo_consistency(scene, (px, py), t_true - 1.0, corr1, corr2)
            cp = stereo_consistency(scene, (px, py), t_true + 1.0, corr1, corr2)
            if c0 is None or cm is None or cp is None:
                continue
            total += 1
            if c0 < cm and c0 < cp:
                wins += 1
        assert total > 100
        assert wins / total >= 0.95


class TestSolveDepth:
    def test_accuracy_with_refinement(self, scene, corr_pair, field,
                                      truth_cam0):
        cam = scene.cameras[0]
        p_true, n_true, _ = truth_for(field, truth_cam0)
        t_true = np.linalg.norm(p_true - cam.center, axis=1)
        t_est = np.linalg.norm(field.points - cam.center, axis=1)
        err = np.abs(t_est - t_true)
        sweep = default_sweep(scene)
        step = (sweep.t_max - sweep.t_min) / sweep.n_steps
        assert (err < step).mean() >= 0.95
        assert np.median(err) < 0.02

    def test_invalid_corr2_gives_none(self, scene, corr_pair):
        corr1, corr2 = corr_pair
        empty = CorrespondenceMap(u=np.full_like(corr2.u, np.nan),
                                  v=np.full_like(corr2.v, np.nan),
                                  valid=np.zeros_like(corr2.valid))
        ys, xs = np.nonzero(corr1.valid)
        px, py = int(xs[100]), int(ys[100])
        assert solve_depth(scene, (px, py), corr1, empty,
                           default_sweep(scene)) is None

    def test_noisy_normal_error(self, scene, corr_pair, truth_cam0):
        corr1 = add_correspondence_noise(corr_pair[0], 0.5, 31)
        corr2 = add_correspondence_noise(corr_pair[1], 0.5, 32)
        f = reconstruct_field(scene, corr1, corr2)
        _, n_true, _ = truth_for(f, truth_cam0)
        ang = np.degrees(np.arccos(np.clip(np.sum(f.normals * n_true, axis=1),
                                           -1, 1)))
        assert np.median(ang) < 0.5


class TestReconstructField:
    def test_covers_both_regions(self, field, truth_cam0):
        _, _, reg = truth_for(field, truth_cam0)
        assert (reg == 0).sum() > 100
        assert (reg == 1).sum() > 100

    def test_stride_subset(self, scene, corr_pair, field):
        f4 = reconstruct_field(scene, corr_pair[0], corr_pair[1], stride=2)
        key1 = {tuple(p) for p in field.pixels}
        for i, p in enumerate(f4.pixels):
            assert tuple(p) in key1
        # same values at shared pixels
        lookup = {tuple(p): j for j, p in enumerate(field.pixels)}
        for i, p in enumerate(f4.pixels):
            j = lookup[tuple(p)]
            assert np.allclose(f4.points[i], field.points[j])

    def test_swapped_cameras_never_silently_plausible(self, scene, corr_pair,
                                                       field):
        # misconfigured maps must read grossly inconsistent next to a
        # correct run (here two orders of magnitude), never plausible
        try:
            f = reconstruct_field(scene, corr_pair[1], corr_pair[0],
                                  cam1_index=0, cam2_index=1,
                                  max_consistency=np.inf)
            good = np.median(field.consistency)
            assert np.median(f.consistency) > max(50.0 * good, 0.01)
        except EmptyFieldError:
            pass

    def test_points_lie_on_surface(self, scene, field, truth_cam0):
        _, _, reg = truth_for(field, truth_cam0)
        cc, sc = scene.eye.cornea_center, scene.eye.sclera_center
        d_c = np.abs(np.linalg.norm(field.points[reg == 0] - cc, axis=1)
                     - scene.eye.cornea_radius)
        d_s = np.abs(np.linalg.norm(field.points[reg == 1] - sc, axis=1)
                     - scene.eye.sclera_radius)
        assert np.median(np.concatenate([d_c, d_s])) < 0.05

    def test_camera2_normal_agrees_within_consistency(self, scene, corr_pair,
                                                      field):
        cam2 = scene.cameras[1]
        px2, py2, z2 = cam2.project(field.points)
        from deflect_gaze.stereo import _bilinear_uv
        u2, v2, ok = _bilinear_uv(corr_pair[1], px2, py2)
        spt = scene.screen.uv_to_world(u2[ok], v2[ok])
        p = field.points[ok]
        n2 = unit(unit(cam2.center - p) + unit(spt - p))
        ang = np.arccos(np.clip(np.sum(field.normals[ok] * n2, axis=1), -1, 1))
        assert (ang <= field.consistency[ok] + 1e-9).all()

    def test_monotone_noise_degradation(self, scene, corr_pair, truth_cam0):
        med = []
        for i, sig in enumerate((0.0, 0.25, 0.5, 1.0)):
            c1 = add_correspondence_noise(corr_pair[0], sig, 50 + i)
            c2 = add_correspondence_noise(corr_pair[1], sig, 60 + i)
            f = reconstruct_field(scene, c1, c2, stride=2)
            _, n_true, _ = truth_for(f, truth_cam0)
            ang = np.degrees(np.arccos(
                np.clip(np.sum(f.normals * n_true, axis=1), -1, 1)))
            med.append(np.median(ang))
        assert all(med[i] <= med[i + 1] + 1e-12 for i in range(3))

    def test_csv_round_trip(self, field, tmp_path):
        p = tmp_path / "field.csv"
        field.to_csv(p)
        back = NormalField.from_csv(p)
        assert np.array_equal(back.pixels, field.pixels)
        assert np.allclose(back.points, field.points, atol=1e-9)
        assert np.allclose(back.normals, field.normals, atol=1e-12)
        header = p.read_text().splitlines()[0]
        assert header == "px,py,X,Y,Z,nx,ny,nz,consistency"
