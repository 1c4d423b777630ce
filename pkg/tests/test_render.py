"""Renderer tests: projection oracles, compositing semantics, tiled vs dense."""

import numpy as np
import pytest
from conftest import make_camera, make_test_cloud, make_test_scene

from splatpose.lie import Pose, Tangent, se3_exp
from splatpose.model import GaussianCloud, evaluate_sh, logit
from splatpose.render import (
    CameraIntrinsics,
    project_covariance,
    project_point,
    projection_jacobian,
    render,
    render_reference,
)

SH_DC = 0.28209479177387814


def single_splat_cloud(opacity=0.9, gray=0.6, sigma=0.05):
    sh = np.zeros((1, 3, 16))
    sh[0, :, 0] = (gray - 0.5) / SH_DC
    return GaussianCloud(
        positions=np.zeros((1, 3)),
        rotations=[[1.0, 0.0, 0.0, 0.0]],
        log_scales=np.full((1, 3), np.log(sigma)),
        opacity_logits=[logit(opacity)],
        sh_coeffs=sh,
    )


def test_project_point_on_axis():
    intr = CameraIntrinsics(fx=100, fy=100, cx=50, cy=50, width=101, height=101)
    pixel, z = project_point(Pose.identity(), intr, [0.0, 0.0, 1.0])
    assert np.allclose(pixel, [50.0, 50.0]) and z == 1.0
    pixel, _ = project_point(Pose.identity(), intr, [0.1, 0.0, 1.0])
    assert np.allclose(pixel, [60.0, 50.0])


def test_project_point_matrix_oracle():
    rng = np.random.default_rng(0)
    intr = CameraIntrinsics(fx=310, fy=290, cx=31.5, cy=30.5, width=64, height=64)
    k = np.array([[intr.fx, 0, intr.cx], [0, intr.fy, intr.cy], [0, 0, 1.0]])
    for _ in range(300):
        pose = se3_exp(
            Tangent(rng.normal(size=3), rng.normal(size=3) * 0.5)
        )
        p_m = rng.normal(size=3) + [0, 0, 5.0]
        proj = k @ pose.matrix()[:3] @ np.append(p_m, 1.0)
        pixel, z = project_point(pose, intr, p_m)
        assert abs(z - proj[2]) < 1e-9
        assert np.max(np.abs(pixel - proj[:2] / proj[2])) < 1e-9


def test_projection_jacobian_trivial():
    intr = CameraIntrinsics(fx=1, fy=1, cx=0, cy=0, width=4, height=4)
    assert np.allclose(
        projection_jacobian([0, 0, 1.0], intr), [[1, 0, 0], [0, 1, 0]]
    )
    assert np.allclose(
        projection_jacobian([0, 0, 2.0], intr), [[0.5, 0, 0], [0, 0.5, 0]]
    )


def test_projection_jacobian_fd_oracle():
    rng = np.random.default_rng(1)
    intr = CameraIntrinsics(fx=250, fy=270, cx=32, cy=32, width=65, height=65)
    h = 1e-6
    for _ in range(100):
        p_c = rng.normal(size=3) * [1, 1, 0.3] + [0, 0, 4.0]
        jac = projection_jacobian(p_c, intr)
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = h
            plus, _ = project_point(Pose.identity(), intr, p_c + dp)
            minus, _ = project_point(Pose.identity(), intr, p_c - dp)
            assert np.max(np.abs(jac[:, k] - (plus - minus) / (2 * h))) < 1e-5


def test_project_covariance_trivial():
    j = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    got = project_covariance(j, np.eye(3), np.eye(3))
    assert np.allclose(got, np.eye(2) * 1.3)
    got = project_covariance(j, np.eye(3), np.zeros((3, 3)))
    assert np.allclose(got, np.eye(2) * 0.3)


def test_project_covariance_eigenvalue_floor():
    rng = np.random.default_rng(2)
    for _ in range(200):
        j = rng.normal(size=(2, 3))
        r = se3_exp(Tangent(np.zeros(3), rng.normal(size=3))).rotation
        m = rng.normal(size=(3, 3))
        sigma = m @ m.T
        got = project_covariance(j, r, sigma)
        assert np.max(np.abs(got - got.T)) < 1e-12
        assert np.min(np.linalg.eigvalsh(got)) >= 0.3 - 1e-9


def test_all_behind_camera_black():
    cloud = single_splat_cloud()
    pose = Pose(np.eye(3), np.array([0.0, 0.0, -5.0]))
    _, intr = make_camera()
    out = render(cloud, pose, intr)
    assert np.all(out.color == 0.0) and np.all(out.alpha == 0.0)
    assert np.all(out.depth == 0.0)
    assert out.tape.n_visible == 0
    ref = render_reference(cloud, pose, intr)
    assert np.all(ref.color == 0.0)


def test_single_splat_center_pixel():
    cloud = single_splat_cloud(opacity=0.9, gray=0.6)
    intr = CameraIntrinsics(fx=300, fy=300, cx=32, cy=32, width=64, height=64)
    pose = Pose(np.eye(3), np.array([0.0, 0.0, 4.0]))
    out = render(cloud, pose, intr)
    expected_color = 0.9 * evaluate_sh(cloud.sh_coeffs[0], [0.0, 0.0, -1.0])
    assert abs(out.alpha[32, 32] - 0.9) < 1e-12
    assert np.max(np.abs(out.color[32, 32] - expected_color)) < 1e-12
    assert abs(out.depth[32, 32] - 4.0) < 1e-12
    contribs = out.tape.pixel_contributions(32, 32)
    assert len(contribs) == 1
    idx, alpha, color, trans = contribs[0]
    assert idx == 0 and abs(alpha - 0.9) < 1e-12 and trans == 1.0


def test_tiled_matches_reference_quick():
    for seed in range(20):
        cloud, pose, intr = make_test_scene(seed, n=60, size=96, full_sh=seed % 2)
        out = render(cloud, pose, intr)
        ref = render_reference(cloud, pose, intr)
        assert np.max(np.abs(out.color - ref.color)) < 1e-5
        assert np.max(np.abs(out.alpha - ref.alpha)) < 1e-5
        assert np.max(np.abs(out.depth - ref.depth)) < 1e-4


def test_opacity_monotonicity():
    rng = np.random.default_rng(3)
    cloud = make_test_cloud(rng, n=30)
    pose, intr = make_camera()
    dark = cloud.copy()
    dark.opacity_logits[:] = -1e9
    out = render(dark, pose, intr)
    assert np.all(out.color == 0.0) and np.all(out.alpha == 0.0)

    base = render(cloud, pose, intr)
    boosted = cloud.copy()
    boosted.opacity_logits[7] += 2.0
    after = render(boosted, pose, intr)
    assert np.all(after.alpha - base.alpha >= -1e-12)


def test_transmittance_bookkeeping():
    cloud, pose, intr = make_test_scene(4, n=80, size=64)
    out = render(cloud, pose, intr)
    ys, xs = np.nonzero(out.alpha > 0.01)
    rng = np.random.default_rng(5)
    pick = rng.choice(ys.size, size=min(30, ys.size), replace=False)
    for y, x in zip(ys[pick], xs[pick]):
        contribs = out.tape.pixel_contributions(int(x), int(y))
        total = sum(a * t for _, a, _, t in contribs)
        assert abs(total - out.alpha[y, x]) < 1e-6


def test_alpha_zero_iff_tape_empty():
    cloud, pose, intr = make_test_scene(6, n=40, size=64)
    out = render(cloud, pose, intr)
    rng = np.random.default_rng(7)
    for _ in range(60):
        x = int(rng.integers(0, intr.width))
        y = int(rng.integers(0, intr.height))
        contribs = out.tape.pixel_contributions(x, y)
        if out.alpha[y, x] == 0.0:
            assert contribs == []
        else:
            assert len(contribs) > 0


def test_render_deterministic():
    cloud, pose, intr = make_test_scene(8, n=50, size=64)
    a = render(cloud, pose, intr)
    b = render(cloud, pose, intr)
    assert np.array_equal(a.color, b.color)
    assert np.array_equal(a.alpha, b.alpha)
    assert np.array_equal(a.depth, b.depth)


def test_depth_weighted_mean():
    # Two splats on the same ray: depth must sit between them, nearer the
    # more opaque front one.
    sh = np.zeros((2, 3, 16))
    sh[:, :, 0] = 0.5
    cloud = GaussianCloud(
        positions=[[0, 0, -0.5], [0, 0, 0.5]],
        rotations=np.tile([1.0, 0, 0, 0], (2, 1)),
        log_scales=np.full((2, 3), np.log(0.05)),
        opacity_logits=[logit(0.8), logit(0.8)],
        sh_coeffs=sh,
    )
    intr = CameraIntrinsics(fx=300, fy=300, cx=32, cy=32, width=64, height=64)
    pose = Pose(np.eye(3), np.array([0.0, 0.0, 4.0]))
    out = render(cloud, pose, intr)
    d = out.depth[32, 32]
    w1, w2 = 0.8, 0.2 * 0.8
    expected = (w1 * 3.5 + w2 * 4.5) / (w1 + w2)
    assert abs(d - expected) < 1e-9


def test_color_channels_clamped():
    cloud, pose, intr = make_test_scene(9, n=120, size=48)
    bright = cloud.copy()
    bright.sh_coeffs[:, :, 0] = 3.0  # base color well above 1
    out = render(bright, pose, intr)
    assert np.max(out.color) <= 1.0
    assert np.min(out.color) >= 0.0


def test_intrinsics_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, width=4, height=4)
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=1, fy=1, cx=9, cy=0, width=4, height=4)
    intr = CameraIntrinsics(fx=100.5, fy=99.0, cx=31.5, cy=30.0, width=64, height=61)
    path = tmp_path / "k.json"
    intr.save_json(path)
    back = CameraIntrinsics.load_json(path)
    assert back == intr


def test_nonsquare_image_and_edge_tiles():
    # Width/height not multiples of 16 exercise padded-tile cropping.
    cloud, _, _ = make_test_scene(10, n=40, size=64)
    intr = CameraIntrinsics(fx=150, fy=150, cx=35.2, cy=20.1, width=70, height=45)
    pose = Pose(np.eye(3), np.array([0.0, 0.0, 4.0]))
    out = render(cloud, pose, intr)
    ref = render_reference(cloud, pose, intr)
    assert out.color.shape == (45, 70, 3)
    assert np.max(np.abs(out.color - ref.color)) < 1e-5
