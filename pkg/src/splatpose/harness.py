"""Synthetic scenes, perturbation sampling, pose metrics, batch experiments.

Stands in for dataset-scale evaluation: builds random Gaussian clouds,
renders ground-truth views (optionally corrupted), perturbs the pose within
stated bounds, refines, and scores recovery with ADD / ADD-S style metrics
against the Gaussian centers.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy.ndimage import uniform_filter
from scipy.spatial.distance import cdist

from .lie import Pose, Tangent, apply_right_perturbation, so3_log
from .model import SH_DC, GaussianCloud, logit
from .refine import RefineConfig, refine
from .render import CameraIntrinsics, render


@dataclass
class SceneSpec:
    """Recipe for a reproducible synthetic cloud and its camera."""

    n_gaussians: int = 200
    extent: float = 1.0
    color_mode: str = "dc_only"
    opacity_range: tuple = (0.4, 0.95)
    seed: int = 0
    image_size: int = 256

    def validate(self):
        if self.n_gaussians < 1:
            raise ValueError("n_gaussians must be >= 1")
        if self.extent <= 0.0:
            raise ValueError("extent must be > 0")
        if self.color_mode not in ("dc_only", "full_sh"):
            raise ValueError(f"unknown color_mode {self.color_mode!r}")
        lo, hi = self.opacity_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("opacity_range must satisfy 0 < lo <= hi < 1")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")

    def to_json_dict(self):
        return {
            "n_gaussians": self.n_gaussians,
            "extent": self.extent,
            "color_mode": self.color_mode,
            "opacity_range": list(self.opacity_range),
            "seed": self.seed,
            "image_size": self.image_size,
        }

    @classmethod
    def from_json_dict(cls, data):
        spec = cls()
        for key, value in data.items():
            if not hasattr(spec, key):
                raise ValueError(f"unknown spec key {key!r}")
            if key == "opacity_range":
                value = tuple(value)
            setattr(spec, key, value)
        spec.validate()
        return spec

    def save_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load_json(cls, path):
        with open(path) as f:
            return cls.from_json_dict(json.load(f))


@dataclass
class PoseError:
    rotation_deg: float
    translation: float
    add: float
    add_s: float

    def to_json_dict(self):
        return {
            "rotation_deg": float(self.rotation_deg),
            "translation": float(self.translation),
            "add": float(self.add),
            "add_s": float(self.add_s),
        }


def make_synthetic_cloud(spec: SceneSpec) -> GaussianCloud:
    """Random cloud in the extent ball, deterministic in the spec seed."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    n = spec.n_gaussians
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = spec.extent * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / 3.0)
    positions = direction * radius
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = (rng.uniform(0.15, 0.85, size=(n, 3)) - 0.5) / SH_DC
    if spec.color_mode == "full_sh":
        sh[:, :, 1:] = rng.normal(scale=0.06, size=(n, 3, 15))
    lo, hi = spec.opacity_range
    return GaussianCloud(
        positions=positions,
        rotations=rng.normal(size=(n, 4)),
        log_scales=np.log(
            rng.uniform(spec.extent / 50.0, spec.extent / 10.0, size=(n, 3))
        ),
        opacity_logits=logit(rng.uniform(lo, hi, size=n)),
        sh_coeffs=sh,
    )


def make_scene_camera(spec: SceneSpec):
    """Ground-truth pose and intrinsics: camera at 4 x extent, centered."""
    distance = 4.0 * spec.extent
    size = spec.image_size
    focal = 0.4 * size * distance / spec.extent
    intr = CameraIntrinsics(
        fx=focal, fy=focal, cx=size / 2.0 - 0.5, cy=size / 2.0 - 0.5,
        width=size, height=size,
    )
    pose = Pose(np.eye(3), np.array([0.0, 0.0, distance]))
    return pose, intr


def sample_perturbation(max_rot_deg, max_trans_frac, extent, rng) -> Tangent:
    """Uniform rotation angle in (0, max], uniform translation ball."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    # 1 - u maps [0,1) to (0,1] so the angle never degenerates to zero.
    angle = np.deg2rad(max_rot_deg) * (1.0 - rng.uniform(0.0, 1.0))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    rho = (
        direction
        * max_trans_frac
        * extent
        * rng.uniform(0.0, 1.0) ** (1.0 / 3.0)
    )
    return Tangent(rho, axis * angle)


def pose_error(t_est: Pose, t_gt: Pose, model_points) -> PoseError:
    """ADD, ADD-S, rotation angle, and translation distance between poses."""
    pts = np.asarray(model_points, dtype=float).reshape(-1, 3)
    est = t_est.apply(pts)
    gt = t_gt.apply(pts)
    add = float(np.linalg.norm(est - gt, axis=1).mean())
    add_s = float(cdist(est, gt).min(axis=1).mean())
    rel = t_est.rotation.T @ t_gt.rotation
    rotation_deg = float(np.degrees(np.linalg.norm(so3_log(rel))))
    translation = float(np.linalg.norm(t_est.translation - t_gt.translation))
    return PoseError(
        rotation_deg=rotation_deg, translation=translation, add=add, add_s=add_s
    )


def apply_corruption(image, kind, rng, strength=None):
    """Photometric disturbances for robustness experiments.

    gain: global multiplicative factor; noise: additive Gaussian per pixel;
    occlusion: random rectangle filled with gray; blur: box-kernel smoothing.
    """
    img = np.asarray(image, dtype=float)
    if kind == "none":
        return img
    if kind == "gain":
        return np.clip(img * (0.7 if strength is None else strength), 0.0, 1.0)
    if kind == "noise":
        sigma = 0.02 if strength is None else strength
        return np.clip(img + rng.normal(scale=sigma, size=img.shape), 0.0, 1.0)
    if kind == "occlusion":
        frac = 0.2 if strength is None else strength
        h, w = img.shape[:2]
        bh, bw = max(1, int(h * frac)), max(1, int(w * frac))
        y0 = int(rng.integers(0, h - bh + 1))
        x0 = int(rng.integers(0, w - bw + 1))
        out = img.copy()
        out[y0 : y0 + bh, x0 : x0 + bw] = 0.5
        return out
    if kind == "blur":
        k = 3 if strength is None else int(strength)
        return uniform_filter(img, size=(k, k, 1), mode="nearest")
    raise ValueError(f"unknown corruption {kind!r}")


def _run_trial(
    spec: SceneSpec,
    trial_index: int,
    max_rot_deg: float,
    max_trans_frac: float,
    cfg: RefineConfig,
    diameter_frac: float,
    corruption: str,
    with_depth: bool,
):
    t_start = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, trial_index]))
    trial_spec = SceneSpec(
        n_gaussians=spec.n_gaussians,
        extent=spec.extent,
        color_mode=spec.color_mode,
        opacity_range=spec.opacity_range,
        seed=int(rng.integers(0, 2**63 - 1)),
        image_size=spec.image_size,
    )
    cloud = make_synthetic_cloud(trial_spec)
    gt_pose, intr = make_scene_camera(trial_spec)
    out_gt = render(cloud, gt_pose, intr)
    image = apply_corruption(out_gt.color, corruption, rng)
    mask = np.ones(image.shape[:2], dtype=bool)
    depth = None
    if with_depth:
        depth = np.where(out_gt.alpha > 0.5, out_gt.depth, 0.0)

    tau = sample_perturbation(max_rot_deg, max_trans_frac, spec.extent, rng)
    t0 = apply_right_perturbation(tau, gt_pose)

    diameter = cloud.diameter()
    centers = cloud.positions
    initial = pose_error(t0, gt_pose, centers)
    error = None
    try:
        report = refine(cloud, t0, image, mask, intr, observed_depth=depth, cfg=cfg)
        final = pose_error(report.final_pose, gt_pose, centers)
        final_loss = float(report.final_loss)
        converged = bool(report.converged)
        iterations = int(report.iterations_used)
    except Exception as exc:  # failed trials count as non-successes
        error = f"{type(exc).__name__}: {exc}"
        final = initial
        final_loss = float("inf")
        converged = False
        iterations = 0
    return {
        "trial": trial_index,
        "initial": initial.to_json_dict(),
        "final": final.to_json_dict(),
        "diameter": float(diameter),
        "success": bool(final.add < diameter_frac * diameter),
        "final_loss": final_loss,
        "converged": converged,
        "iterations": iterations,
        "error": error,
        "wall_time": time.perf_counter() - t_start,
    }


def run_recovery_experiment(
    spec: SceneSpec,
    max_rot_deg: float,
    max_trans_frac: float,
    cfg: RefineConfig | None = None,
    trials: int = 50,
    diameter_frac: float = 0.1,
    corruption: str = "none",
    with_depth: bool = False,
    jobs: int = 1,
    include_timings: bool = True,
):
    """Perturb-and-refine over independent trials; deterministic in seed.

    With include_timings=False all wall-clock fields are dropped, leaving a
    report that is a pure function of the inputs.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if cfg is None:
        cfg = RefineConfig()
    cfg.validate()
    spec.validate()
    args = [
        (spec, t, max_rot_deg, max_trans_frac, cfg, diameter_frac, corruption, with_depth)
        for t in range(trials)
    ]
    if jobs == 1:
        rows = [_run_trial(*a) for a in args]
    else:
        rows = Parallel(n_jobs=jobs)(delayed(_run_trial)(*a) for a in args)

    walls = np.array([r.pop("wall_time") for r in rows])
    rot = np.array([r["final"]["rotation_deg"] for r in rows])
    trans = np.array([r["final"]["translation"] for r in rows])
    add = np.array([r["final"]["add"] for r in rows])
    report = {
        "spec": spec.to_json_dict(),
        "bounds": {"max_rot_deg": max_rot_deg, "max_trans_frac": max_trans_frac},
        "diameter_frac": diameter_frac,
        "corruption": corruption,
        "with_depth": with_depth,
        "trials": rows,
        "aggregates": {
            "n_trials": trials,
            "success_rate": float(np.mean([r["success"] for r in rows])),
            "mean_rotation_deg": float(rot.mean()),
            "median_rotation_deg": float(np.median(rot)),
            "mean_translation": float(trans.mean()),
            "median_translation": float(np.median(trans)),
            "mean_add": float(add.mean()),
            "median_add": float(np.median(add)),
            "n_errors": int(sum(r["error"] is not None for r in rows)),
        },
    }
    if include_timings:
        for row, wall in zip(rows, walls):
            row["wall_time"] = float(wall)
        report["timings"] = {
            "total_wall_time": float(walls.sum()),
            "mean_trial_wall_time": float(walls.mean()),
        }
    return report
