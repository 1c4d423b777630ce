"""Multi-stage photometric pose refinement.

Starting from a coarse pose, the pipeline runs an optional depth-based
z-correction, then a camera-frame stage (left perturbations), then an
object-frame stage (right perturbations), then an optional environment
adaptation stage that jointly updates the pose together with SH colors and
Gaussian orientations so illumination changes are absorbed without touching
geometry. Every stage keeps the best-loss pose it visited and re-zeroes the
tangent after each retraction, so the renderer's Jacobians are always
evaluated at tau = 0.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .backward import (
    camera_pose_gradient,
    object_pose_gradient,
    pose_and_appearance_gradients,
)
from .errors import NoValidDepth
from .lie import Pose, Tangent, apply_left_perturbation, apply_right_perturbation
from .loss import image_loss
from .model import GaussianCloud, ParamMask
from .render import CameraIntrinsics, render

CONVERGENCE_WINDOW = 5
DIVERGENCE_FACTOR = 10.0


@dataclass
class RefineConfig:
    """Knobs for the refinement loop; defaults follow the library tuning.

    lr_rho = None scales the translational rate to 1e-3 of the cloud's
    bounding radius at refine time; an explicit value is used as-is.
    """

    lam: float = 0.2
    max_iters_camera: int = 100
    max_iters_object: int = 100
    lr_rho: float | None = None
    lr_phi: float = 5e-3
    lr_sh: float = 2.5e-3
    lr_rot: float = 1e-3
    rel_tol: float = 1e-5
    env_adaptation: bool = False
    depth_correction: bool = True
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0,1], got {self.lam}")
        for name in ("lr_phi", "lr_sh", "lr_rot"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be > 0")
        if self.lr_rho is not None and self.lr_rho <= 0.0:
            raise ValueError("lr_rho must be > 0")
        if self.rel_tol <= 0.0:
            raise ValueError("rel_tol must be > 0")
        if self.max_iters_camera < 0 or self.max_iters_object < 0:
            raise ValueError("iteration budgets must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_json_dict(self):
        return {
            "lambda": self.lam,
            "max_iters_camera": self.max_iters_camera,
            "max_iters_object": self.max_iters_object,
            "lr_rho": self.lr_rho,
            "lr_phi": self.lr_phi,
            "lr_sh": self.lr_sh,
            "lr_rot": self.lr_rot,
            "rel_tol": self.rel_tol,
            "env_adaptation": self.env_adaptation,
            "depth_correction": self.depth_correction,
            "optimizer": self.optimizer,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    @classmethod
    def from_json_dict(cls, data):
        cfg = cls()
        names = {"lambda": "lam"}
        for key, value in data.items():
            attr = names.get(key, key)
            if not hasattr(cfg, attr):
                raise ValueError(f"unknown config key {key!r}")
            setattr(cfg, attr, value)
        cfg.validate()
        return cfg

    def save_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load_json(cls, path):
        with open(path) as f:
            return cls.from_json_dict(json.load(f))


@dataclass
class StageReport:
    name: str
    loss_history: list
    converged: bool
    diverged: bool
    best_loss: float


@dataclass
class RefineReport:
    initial_pose: Pose
    final_pose: Pose
    loss_history: list
    stage_boundaries: list
    converged: bool
    iterations_used: int
    wall_time: float
    final_loss: float
    stages: list = field(default_factory=list)
    adapted_cloud: GaussianCloud | None = None

    def to_json_dict(self, include_timings=False):
        out = {
            "initial_pose": self.initial_pose.to_json_dict(),
            "final_pose": self.final_pose.to_json_dict(),
            "loss_history": [float(x) for x in self.loss_history],
            "stage_boundaries": list(self.stage_boundaries),
            "converged": bool(self.converged),
            "iterations_used": int(self.iterations_used),
            "final_loss": float(self.final_loss),
            "stages": [
                {
                    "name": s.name,
                    "iterations": len(s.loss_history),
                    "converged": bool(s.converged),
                    "diverged": bool(s.diverged),
                    "best_loss": None if np.isnan(s.best_loss) else float(s.best_loss),
                }
                for s in self.stages
            ],
        }
        if include_timings:
            out["wall_time"] = float(self.wall_time)
        return out


class _Adam:
    """Standard bias-corrected Adam on a single parameter array."""

    def __init__(self, beta1, beta2, eps):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, grad):
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)


class _Sgd:
    def step(self, grad):
        return grad


def _make_optimizer(cfg: RefineConfig):
    if cfg.optimizer == "adam":
        return _Adam(cfg.beta1, cfg.beta2, cfg.eps)
    return _Sgd()


def _resolve_lr_rho(cfg: RefineConfig, cloud: GaussianCloud) -> float:
    if cfg.lr_rho is not None:
        return cfg.lr_rho
    extent = float(cloud.bounding_radius())
    if extent == 0.0:
        # Degenerate single-point cloud: fall back to the splat size.
        extent = 3.0 * float(np.max(cloud.scales()))
    return 1e-3 * max(extent, 1e-12)


def _window_converged(history, rel_tol):
    """Stop once the best loss stops improving across the window.

    The raw per-iteration loss dithers around the optimum under adaptive
    steps, so the change is measured on the running best: if the last
    CONVERGENCE_WINDOW evaluations improved it by less than rel_tol
    (relatively), the stage has stalled. A stall only counts while the
    current loss sits near the best; a transient excursion far above it is
    an optimizer overshoot still in flight, not convergence.
    """
    if history and history[-1] == 0.0:
        return True
    if len(history) < CONVERGENCE_WINDOW:
        return False
    now_best = min(history)
    if history[-1] > DIVERGENCE_FACTOR * max(now_best, 1e-12):
        return False
    prev_best = min(history[: 1 - CONVERGENCE_WINDOW])
    return prev_best - now_best < rel_tol * max(now_best, 1e-12)


def _window_diverged(history):
    """Sustained blowup: every recent loss far above the starting loss.

    A single exploratory step that spikes and recovers is normal for
    adaptive optimizers started near an optimum; divergence means the whole
    window stayed beyond the guard factor.
    """
    if not history or history[0] <= 0.0 or len(history) < CONVERGENCE_WINDOW:
        return False
    return min(history[-CONVERGENCE_WINDOW:]) > DIVERGENCE_FACTOR * history[0]


def depth_z_correct(
    cloud: GaussianCloud,
    pose: Pose,
    intr: CameraIntrinsics,
    observed_depth,
    observed_mask,
) -> Pose:
    """Shift t_z so mean rendered depth matches mean observed depth.

    Zero observed depth marks invalid pixels; rendered pixels count where
    alpha exceeds 0.5. Rotation is returned untouched.
    """
    observed_depth = np.asarray(observed_depth, dtype=float)
    observed_mask = np.asarray(observed_mask, dtype=bool)
    valid = observed_mask & (observed_depth > 0.0)
    if not valid.any():
        raise NoValidDepth("no valid observed depth pixels under the mask")
    out = render(cloud, pose, intr)
    solid = out.alpha > 0.5
    if not solid.any():
        raise NoValidDepth("rendered image has no alpha > 0.5 pixels")
    z1 = float(observed_depth[valid].mean())
    z2 = float(out.depth[solid].mean())
    translation = pose.translation.copy()
    translation[2] += z1 - z2
    return Pose(pose.rotation, translation)


def _run_stage(
    cloud, pose, image, mask, intr, cfg, side, max_iters, lr_rho, adapt=False
):
    """One gradient-descent stage; returns (best pose, StageReport).

    With adapt=True the stage also steps SH and orientation parameters and
    restores the best-loss appearance state into the cloud on exit.
    """
    history = []
    best_loss = np.inf
    best_pose = pose
    best_sh = best_rot = None
    converged = False
    diverged = False
    opt_tau = _make_optimizer(cfg)
    lr_tau = np.concatenate([np.full(3, lr_rho), np.full(3, cfg.lr_phi)])
    if adapt:
        opt_sh = _make_optimizer(cfg)
        opt_rot = _make_optimizer(cfg)
        param_mask = ParamMask()
    move = apply_left_perturbation if side == "camera" else apply_right_perturbation

    for it in range(max_iters):
        out = render(cloud, pose, intr)
        loss, dl = image_loss(image, out.color, mask, cfg.lam)
        history.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_pose = pose
            if adapt:
                best_sh = cloud.sh_coeffs.copy()
                best_rot = cloud.rotations.copy()
        if _window_diverged(history):
            diverged = True
            break
        if _window_converged(history, cfg.rel_tol):
            converged = True
            break
        if it == max_iters - 1:
            # The step after the last evaluation could never be scored.
            break
        if adapt:
            pose_g, app_g = pose_and_appearance_gradients(
                cloud, pose, intr, out, dl, side=side, mask=param_mask
            )
            cloud.sh_coeffs -= cfg.lr_sh * opt_sh.step(app_g.d_sh)
            cloud.rotations -= cfg.lr_rot * opt_rot.step(app_g.d_rot)
            cloud.rotations /= np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
        elif side == "camera":
            pose_g = camera_pose_gradient(cloud, pose, intr, out, dl)
        else:
            pose_g = object_pose_gradient(cloud, pose, intr, out, dl)
        delta = -lr_tau * opt_tau.step(pose_g.d_tau)
        pose = move(Tangent.from_vector(delta), pose)

    if max_iters == 0:
        best_pose = pose
        best_loss = float("nan")
        converged = True
    if adapt and best_sh is not None:
        cloud.sh_coeffs[...] = best_sh
        cloud.rotations[...] = best_rot
    report = StageReport(
        name="env" if adapt else side,
        loss_history=history,
        converged=converged,
        diverged=diverged,
        best_loss=best_loss,
    )
    return best_pose, report


def refine_stage(
    cloud: GaussianCloud,
    t0: Pose,
    image,
    mask,
    intr: CameraIntrinsics,
    cfg: RefineConfig,
    stage: str,
):
    """Run a single camera or object stage from t0; returns (pose, report)."""
    cfg.validate()
    if stage not in ("camera", "object"):
        raise ValueError(f"unknown stage {stage!r}")
    max_iters = cfg.max_iters_camera if stage == "camera" else cfg.max_iters_object
    return _run_stage(
        cloud,
        t0,
        np.asarray(image, dtype=float),
        np.asarray(mask, dtype=bool),
        intr,
        cfg,
        stage,
        max_iters,
        _resolve_lr_rho(cfg, cloud),
    )


def refine(
    cloud: GaussianCloud,
    t0: Pose,
    image,
    mask,
    intr: CameraIntrinsics,
    observed_depth=None,
    cfg: RefineConfig | None = None,
) -> RefineReport:
    """Full pipeline: depth z-correction, camera stage, object stage, env.

    The input cloud is never mutated; when env adaptation is enabled the
    adapted copy is attached to the report. Geometry (positions, scales,
    opacities) is read-only throughout.
    """
    if cfg is None:
        cfg = RefineConfig()
    cfg.validate()
    image = np.asarray(image, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    start = time.perf_counter()
    lr_rho = _resolve_lr_rho(cfg, cloud)

    pose = t0
    if cfg.depth_correction and observed_depth is not None:
        pose = depth_z_correct(cloud, pose, intr, observed_depth, mask)

    work_cloud = cloud.copy() if cfg.env_adaptation else cloud
    stages = []
    history = []
    boundaries = []
    plan = [("camera", cfg.max_iters_camera, False), ("object", cfg.max_iters_object, False)]
    if cfg.env_adaptation:
        plan.append(("object", cfg.max_iters_object, True))
    for side, iters, adapt in plan:
        if history:
            boundaries.append(len(history))
        pose, stage_rep = _run_stage(
            work_cloud, pose, image, mask, intr, cfg, side, iters, lr_rho, adapt
        )
        stages.append(stage_rep)
        history.extend(stage_rep.loss_history)

    if not history:
        out = render(work_cloud, pose, intr)
        loss, _ = image_loss(image, out.color, mask, cfg.lam)
        history.append(loss)
    final_losses = [s.best_loss for s in stages if s.loss_history]
    final_loss = final_losses[-1] if final_losses else history[-1]
    return RefineReport(
        initial_pose=t0,
        final_pose=pose,
        loss_history=history,
        stage_boundaries=boundaries,
        converged=all(s.converged for s in stages) and stages != [],
        iterations_used=len(history),
        wall_time=time.perf_counter() - start,
        final_loss=final_loss,
        stages=stages,
        adapted_cloud=work_cloud if cfg.env_adaptation else None,
    )
