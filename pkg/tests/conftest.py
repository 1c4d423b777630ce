"""Shared scene builders for the test suite."""

import numpy as np

from splatpose.lie import Pose, Tangent, se3_exp
from splatpose.model import GaussianCloud, logit
from splatpose.render import CameraIntrinsics


def make_test_cloud(rng, n=50, radius=1.0, full_sh=False, opacity=(0.3, 0.95)):
    """Random cloud inside a ball, colors kept away from the clamp kinks."""
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    positions = v * radius * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / 3.0)
    sh = np.zeros((n, 3, 16))
    # DC chosen so the base color sits in [0.15, 0.85].
    sh[:, :, 0] = (rng.uniform(0.15, 0.85, size=(n, 3)) - 0.5) / 0.28209479177387814
    if full_sh:
        sh[:, :, 1:] = rng.normal(scale=0.08, size=(n, 3, 15))
    return GaussianCloud(
        positions=positions,
        rotations=rng.normal(size=(n, 4)),
        log_scales=np.log(rng.uniform(radius / 50.0, radius / 10.0, size=(n, 3))),
        opacity_logits=logit(rng.uniform(*opacity, size=n)),
        sh_coeffs=sh,
    )


def make_camera(size=64, radius=1.0, distance_factor=4.0):
    """Camera looking straight down +z at the object center."""
    distance = distance_factor * radius
    focal = 0.4 * size * distance / radius
    intr = CameraIntrinsics(
        fx=focal, fy=focal, cx=size / 2.0 - 0.5, cy=size / 2.0 - 0.5,
        width=size, height=size,
    )
    pose = Pose(np.eye(3), np.array([0.0, 0.0, distance]))
    return pose, intr


def make_test_scene(seed, n=50, size=64, radius=1.0, full_sh=False, tilt=True):
    """Cloud plus a slightly rotated camera pose and matching intrinsics."""
    rng = np.random.default_rng(seed)
    cloud = make_test_cloud(rng, n=n, radius=radius, full_sh=full_sh)
    pose, intr = make_camera(size=size, radius=radius)
    if tilt:
        nudge = Tangent(
            rng.uniform(-0.05, 0.05, size=3) * radius,
            rng.uniform(-0.3, 0.3, size=3),
        )
        pose = pose.compose(se3_exp(nudge))
    return cloud, pose, intr
