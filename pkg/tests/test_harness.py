"""Synthetic-scene harness: spec handling, metrics, corruption, experiments."""

import json

import numpy as np
import pytest
from scipy.stats import chisquare

from splatpose.harness import (
    PoseError,
    SceneSpec,
    apply_corruption,
    make_scene_camera,
    make_synthetic_cloud,
    pose_error,
    run_recovery_experiment,
    sample_perturbation,
)
from splatpose.lie import Pose, so3_exp
from splatpose.refine import RefineConfig
from splatpose.render import render


def _fast_cfg(**kw):
    return RefineConfig(max_iters_camera=kw.pop("cam", 40),
                        max_iters_object=kw.pop("obj", 40), **kw)


class TestSceneSpec:
    def test_defaults_validate(self):
        SceneSpec().validate()

    @pytest.mark.parametrize(
        "bad",
        [
            {"n_gaussians": 0},
            {"extent": 0.0},
            {"extent": -1.0},
            {"color_mode": "rgb"},
            {"opacity_range": (0.0, 0.5)},
            {"opacity_range": (0.6, 0.4)},
            {"opacity_range": (0.5, 1.0)},
            {"image_size": 8},
        ],
    )
    def test_validate_rejects(self, bad):
        with pytest.raises(ValueError):
            SceneSpec(**bad).validate()

    def test_json_round_trip(self, tmp_path):
        spec = SceneSpec(n_gaussians=7, extent=2.5, color_mode="full_sh",
                         opacity_range=(0.5, 0.8), seed=99, image_size=64)
        path = tmp_path / "spec.json"
        spec.save_json(path)
        loaded = SceneSpec.load_json(path)
        assert loaded == spec

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown spec key"):
            SceneSpec.from_json_dict({"n_splats": 5})


class TestMakeSyntheticCloud:
    def test_same_seed_bit_identical(self):
        a = make_synthetic_cloud(SceneSpec(n_gaussians=50, seed=11))
        b = make_synthetic_cloud(SceneSpec(n_gaussians=50, seed=11))
        for name in ("positions", "rotations", "log_scales",
                     "opacity_logits", "sh_coeffs"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_different_seed_differs(self):
        a = make_synthetic_cloud(SceneSpec(n_gaussians=50, seed=11))
        b = make_synthetic_cloud(SceneSpec(n_gaussians=50, seed=12))
        assert not np.array_equal(a.positions, b.positions)

    def test_single_gaussian_renders(self):
        spec = SceneSpec(n_gaussians=1, seed=3, image_size=64)
        cloud = make_synthetic_cloud(spec)
        pose, intr = make_scene_camera(spec)
        out = render(cloud, pose, intr)
        assert out.alpha.max() > 0.0

    def test_geometry_within_spec(self):
        spec = SceneSpec(n_gaussians=120, extent=2.0, seed=5,
                         opacity_range=(0.5, 0.9))
        cloud = make_synthetic_cloud(spec)
        assert np.linalg.norm(cloud.positions, axis=1).max() <= spec.extent
        scales = cloud.scales()
        assert scales.min() >= spec.extent / 50.0
        assert scales.max() <= spec.extent / 10.0
        op = cloud.opacities()
        assert op.min() >= 0.5 - 1e-12 and op.max() <= 0.9 + 1e-12

    def test_default_scene_covers_image(self):
        spec = SceneSpec(seed=0)
        cloud = make_synthetic_cloud(spec)
        pose, intr = make_scene_camera(spec)
        out = render(cloud, pose, intr)
        frac = (out.alpha > 0.5).mean()
        assert frac >= 0.05

    def test_full_sh_mode_populates_higher_bands(self):
        cloud = make_synthetic_cloud(
            SceneSpec(n_gaussians=10, seed=2, color_mode="full_sh"))
        assert np.abs(cloud.sh_coeffs[:, :, 1:]).max() > 0.0


class TestSamplePerturbation:
    def test_bounds_respected(self):
        rng = np.random.default_rng(0)
        max_phi = np.deg2rad(10.0)
        for _ in range(500):
            tau = sample_perturbation(10.0, 0.1, 2.0, rng)
            angle = np.linalg.norm(tau.phi)
            assert 0.0 < angle <= max_phi
            assert np.linalg.norm(tau.rho) <= 0.1 * 2.0 + 1e-15

    def test_angle_distribution_uniform(self):
        rng = np.random.default_rng(123)
        angles = np.array([
            np.linalg.norm(sample_perturbation(10.0, 0.1, 1.0, rng).phi)
            for _ in range(10_000)
        ])
        counts, _ = np.histogram(angles, bins=20,
                                 range=(0.0, np.deg2rad(10.0)))
        _, p = chisquare(counts)
        assert p > 0.01

    def test_tiny_bounds_give_tiny_tangent(self):
        rng = np.random.default_rng(1)
        tau = sample_perturbation(1e-9, 1e-9, 1.0, rng)
        assert np.linalg.norm(tau.phi) <= np.deg2rad(1e-9)
        assert np.linalg.norm(tau.rho) <= 1e-9


class TestPoseError:
    def test_identical_poses_zero(self):
        pose = Pose(so3_exp(np.array([0.1, -0.2, 0.3])), np.array([1.0, 2.0, 3.0]))
        pts = np.random.default_rng(0).normal(size=(20, 3))
        err = pose_error(pose, pose, pts)
        assert err.rotation_deg == 0.0
        assert err.translation == 0.0
        assert err.add == 0.0
        assert err.add_s == 0.0

    def test_pure_translation(self):
        gt = Pose(np.eye(3), np.zeros(3))
        d = np.array([0.3, -0.4, 1.2])
        est = Pose(np.eye(3), d)
        pts = np.random.default_rng(1).normal(size=(50, 3))
        err = pose_error(est, gt, pts)
        assert err.rotation_deg == 0.0
        np.testing.assert_allclose(err.add, np.linalg.norm(d), rtol=1e-12)
        np.testing.assert_allclose(err.translation, np.linalg.norm(d), rtol=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(100, 3))
        t_est = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
        t_gt = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
        err = pose_error(t_est, t_gt, pts)

        est = (t_est.rotation @ pts.T).T + t_est.translation
        gt = (t_gt.rotation @ pts.T).T + t_gt.translation
        add = np.mean([np.linalg.norm(a - b) for a, b in zip(est, gt)])
        add_s = np.mean([
            min(np.linalg.norm(a - b) for b in gt) for a in est
        ])
        assert abs(err.add - add) < 1e-9
        assert abs(err.add_s - add_s) < 1e-9
        assert err.add_s <= err.add + 1e-15

    def test_json_dict_floats(self):
        err = PoseError(rotation_deg=1.0, translation=2.0, add=3.0, add_s=2.5)
        d = err.to_json_dict()
        assert json.dumps(d)
        assert set(d) == {"rotation_deg", "translation", "add", "add_s"}


class TestApplyCorruption:
    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.img = np.random.default_rng(5).uniform(0.2, 0.8, size=(32, 32, 3))

    def test_none_returns_equal(self):
        np.testing.assert_array_equal(
            apply_corruption(self.img, "none", self.rng), self.img)

    def test_gain_scales(self):
        out = apply_corruption(self.img, "gain", self.rng)
        np.testing.assert_allclose(out, self.img * 0.7, rtol=1e-12)

    def test_gain_custom_strength_clips(self):
        out = apply_corruption(self.img, "gain", self.rng, strength=2.0)
        assert out.max() <= 1.0
        np.testing.assert_allclose(
            out, np.clip(self.img * 2.0, 0.0, 1.0), rtol=1e-12)

    def test_noise_bounded_and_seeded(self):
        a = apply_corruption(self.img, "noise", np.random.default_rng(9))
        b = apply_corruption(self.img, "noise", np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0
        assert not np.array_equal(a, self.img)

    def test_occlusion_paints_gray_rectangle(self):
        out = apply_corruption(self.img, "occlusion", self.rng)
        gray = np.all(out == 0.5, axis=2)
        expected = max(1, int(32 * 0.2)) ** 2
        assert gray.sum() >= expected
        rows = np.where(gray.any(axis=1))[0]
        cols = np.where(gray.any(axis=0))[0]
        block = gray[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
        assert block.all()

    def test_blur_preserves_constant_image(self):
        const = np.full((16, 16, 3), 0.25)
        out = apply_corruption(const, "blur", self.rng)
        np.testing.assert_allclose(out, const, rtol=1e-12)

    def test_blur_smooths(self):
        out = apply_corruption(self.img, "blur", self.rng)
        assert out.std() < self.img.std()

    def test_unknown_kind_raises(self):
        with pytest.raises(ValueError, match="unknown corruption"):
            apply_corruption(self.img, "vignette", self.rng)


class TestRecoveryExperiment:
    def test_tiny_perturbation_full_success(self):
        spec = SceneSpec(n_gaussians=40, image_size=64, seed=21)
        rep = run_recovery_experiment(
            spec, max_rot_deg=1e-6, max_trans_frac=1e-6,
            cfg=_fast_cfg(cam=5, obj=5), trials=3)
        assert rep["aggregates"]["success_rate"] == 1.0
        assert rep["aggregates"]["n_errors"] == 0

    def test_deterministic_in_seed(self):
        spec = SceneSpec(n_gaussians=40, image_size=64, seed=33)
        kw = dict(max_rot_deg=5.0, max_trans_frac=0.05,
                  cfg=_fast_cfg(cam=8, obj=8), trials=2,
                  include_timings=False)
        a = run_recovery_experiment(spec, **kw)
        b = run_recovery_experiment(spec, **kw)
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)

    def test_timings_optional(self):
        spec = SceneSpec(n_gaussians=30, image_size=64, seed=4)
        kw = dict(max_rot_deg=2.0, max_trans_frac=0.02,
                  cfg=_fast_cfg(cam=3, obj=3), trials=1)
        with_t = run_recovery_experiment(spec, **kw)
        without = run_recovery_experiment(spec, include_timings=False, **kw)
        assert "timings" in with_t and with_t["trials"][0]["wall_time"] > 0.0
        assert "timings" not in without
        assert "wall_time" not in without["trials"][0]

    def test_refinement_beats_zero_iterations(self):
        # Tight success threshold: most 10%/10 deg perturbations must fail
        # unrefined while the refined poses land orders of magnitude closer.
        spec = SceneSpec(n_gaussians=40, image_size=64, seed=8)
        kw = dict(max_rot_deg=10.0, max_trans_frac=0.10, trials=6,
                  diameter_frac=0.05)
        refined = run_recovery_experiment(spec, cfg=_fast_cfg(), **kw)
        frozen = run_recovery_experiment(
            spec, cfg=_fast_cfg(cam=0, obj=0, depth_correction=False), **kw)
        assert (refined["aggregates"]["success_rate"]
                > frozen["aggregates"]["success_rate"])

    def test_trial_rows_shape(self):
        spec = SceneSpec(n_gaussians=30, image_size=64, seed=14)
        rep = run_recovery_experiment(
            spec, max_rot_deg=3.0, max_trans_frac=0.03,
            cfg=_fast_cfg(cam=4, obj=4), trials=2)
        assert len(rep["trials"]) == 2
        row = rep["trials"][0]
        assert row["diameter"] > 0.0
        assert row["initial"]["add"] > 0.0
        assert rep["bounds"] == {"max_rot_deg": 3.0, "max_trans_frac": 0.03}

    def test_corrupted_target_still_runs(self):
        spec = SceneSpec(n_gaussians=30, image_size=64, seed=17)
        rep = run_recovery_experiment(
            spec, max_rot_deg=2.0, max_trans_frac=0.02,
            cfg=_fast_cfg(cam=4, obj=4), trials=2, corruption="noise")
        assert rep["corruption"] == "noise"
        assert rep["aggregates"]["n_errors"] == 0

    def test_invalid_trials_rejected(self):
        with pytest.raises(ValueError, match="trials"):
            run_recovery_experiment(SceneSpec(), 1.0, 0.01, trials=0)

    def test_parallel_jobs_match_serial(self):
        spec = SceneSpec(n_gaussians=30, image_size=64, seed=41)
        kw = dict(max_rot_deg=3.0, max_trans_frac=0.03,
                  cfg=_fast_cfg(cam=3, obj=3), trials=2,
                  include_timings=False)
        serial = run_recovery_experiment(spec, jobs=1, **kw)
        parallel = run_recovery_experiment(spec, jobs=2, **kw)
        assert json.dumps(serial, sort_keys=True) == json.dumps(
            parallel, sort_keys=True)
