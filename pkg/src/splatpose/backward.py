"""Analytic backpropagation through the compositing recurrence.

From a per-pixel loss gradient image this module produces
  * pose tangent gradients for a left (camera-frame) or right (object-frame)
    perturbation, evaluated at tau = 0,
  * per-Gaussian SH and orientation gradients for appearance adaptation.

All derivative paths are closed form: compositing weights, the alpha
quadratic, the projection Jacobian's own dependence on the camera-frame
point, the covariance flattening chain, and the spherical-harmonic
view-direction dependence on the camera center.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TapeMismatch
from .lie import Pose
from .model import (
    GaussianCloud,
    ParamMask,
    quat_to_rotmat,
    quat_to_rotmat_jacobian,
    sh_basis_jacobian,
)
from .render import TILE, ForwardTape, RenderOutput


@dataclass
class PoseGradient:
    """Gradient of the scalar loss w.r.t. a pose tangent at tau = 0."""

    d_tau: np.ndarray  # (6,) ordered [rho; phi]


@dataclass
class ParamGradients:
    """Per-Gaussian appearance gradients, zero for masked-off groups."""

    d_sh: np.ndarray  # (N,3,16)
    d_rot: np.ndarray  # (N,4) raw quaternion components


@dataclass
class CompositeGradients:
    """Reverse of the compositing sum, aligned with the forward tape.

    d_alpha rows follow the tape's (tile, splat) pair layout; d_color is
    accumulated per visible splat over all pixels.
    """

    d_alpha: np.ndarray  # (P,256)
    d_color: np.ndarray  # (Nv,3)


@dataclass
class _CoreGradients:
    """Intermediate accumulators shared by the public gradient functions."""

    d_pc: np.ndarray  # (Nv,3) gradient w.r.t. camera-frame centers
    d_sigma_c: np.ndarray  # (Nv,3,3) gradient w.r.t. camera-frame covariances
    d_color: np.ndarray  # (Nv,3)
    d_cm: np.ndarray  # (3,) gradient w.r.t. the camera center (object frame)


def _gather_pixel_gradient(tape: ForwardTape, dl_dpixel):
    """Loss gradient image rearranged to the tape's per-pair tile slots."""
    intr = tape.intr
    h, w = intr.height, intr.width
    dl = np.asarray(dl_dpixel, dtype=float)
    if dl.shape != (h, w, 3):
        raise TapeMismatch(
            f"loss gradient shape {dl.shape} does not match render {(h, w, 3)}"
        )
    # Undo the [0,1] ceiling applied at compositing.
    dl = np.where(tape.overflow, 0.0, dl)
    ntx, nty = -(-w // TILE), -(-h // TILE)
    padded = np.zeros((nty * TILE, ntx * TILE, 3))
    padded[:h, :w] = dl
    tiles = (
        padded.reshape(nty, TILE, ntx, TILE, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(nty * ntx, TILE * TILE, 3)
    )
    return tiles[tape.tile_ids]


def _segment_lengths(tape: ForwardTape) -> np.ndarray:
    total = tape.pair_tile.shape[0]
    return np.diff(np.append(tape.tile_starts, total))


def _composite_backward(tape: ForwardTape, dl_dpixel) -> CompositeGradients:
    n_visible = tape.n_visible
    if n_visible == 0:
        return CompositeGradients(
            d_alpha=np.zeros((0, TILE * TILE)), d_color=np.zeros((0, 3))
        )
    g_tiles = _gather_pixel_gradient(tape, dl_dpixel)
    seg_len = _segment_lengths(tape)
    g_pair = np.repeat(g_tiles, seg_len, axis=0)  # (P,256,3)

    incl = tape.included()
    weight = np.where(incl, tape.alpha * tape.trans, 0.0)
    color_pair = tape.color[tape.pair_splat]  # (P,3)

    # d pixel / d color_i = w_i per channel, summed over pixels.
    d_color_pair = np.einsum("psc,ps->pc", g_pair, weight)
    d_color = np.zeros((n_visible, 3))
    np.add.at(d_color, tape.pair_splat, d_color_pair)

    # d pixel / d alpha_k = T_k c_k - (suffix sum of w_i c_i) / (1 - alpha_k).
    dw = np.einsum("psc,pc->ps", g_pair, color_pair)
    del g_pair
    m = dw * weight
    cum = np.cumsum(m, axis=0)
    starts = tape.tile_starts
    total = m.shape[0]
    prior = np.where(starts > 0, starts - 1, 0)
    base = np.repeat(np.where(starts[:, None] > 0, cum[prior], 0.0), seg_len, axis=0)
    seg_inclusive = cum - base
    ends = np.append(starts[1:], total) - 1
    totals = np.repeat(seg_inclusive[ends], seg_len, axis=0)
    suffix = totals - seg_inclusive
    d_alpha = np.where(incl, dw * tape.trans - suffix / (1.0 - tape.alpha), 0.0)
    return CompositeGradients(d_alpha=d_alpha, d_color=d_color)


def composite_backward(output: RenderOutput, dl_dpixel) -> CompositeGradients:
    """Exact reverse of the front-to-back compositing sum."""
    if output.tape is None:
        raise TapeMismatch("render output carries no backward tape")
    return _composite_backward(output.tape, dl_dpixel)


def _backward_core(cloud: GaussianCloud, tape: ForwardTape, dl_dpixel) -> _CoreGradients:
    """Chain composite gradients back to camera-frame quantities."""
    comp = _composite_backward(tape, dl_dpixel)
    n_visible = tape.n_visible
    if n_visible == 0:
        return _CoreGradients(
            d_pc=np.zeros((0, 3)),
            d_sigma_c=np.zeros((0, 3, 3)),
            d_color=np.zeros((0, 3)),
            d_cm=np.zeros(3),
        )
    intr = tape.intr
    ntx = -(-intr.width // TILE)

    # Rebuild per-pair pixel offsets against splat centers.
    slot_x = np.arange(TILE * TILE) % TILE
    slot_y = np.arange(TILE * TILE) // TILE
    px = (tape.pair_tile % ntx * TILE)[:, None] + slot_x[None, :]
    py = (tape.pair_tile // ntx * TILE)[:, None] + slot_y[None, :]
    dx = px - tape.center2d[tape.pair_splat, 0][:, None]
    dy = py - tape.center2d[tape.pair_splat, 1][:, None]
    del px, py

    # alpha = min(0.99, a exp(-q/2)): d alpha/d q = -alpha/2 unless clamped.
    d_q = comp.d_alpha * (-0.5 * tape.alpha)
    d_q[tape.alpha_clamped] = 0.0

    a = tape.inv_cov2d[tape.pair_splat]
    gx = 2.0 * (a[:, 0, 0][:, None] * dx + a[:, 0, 1][:, None] * dy)
    gy = 2.0 * (a[:, 0, 1][:, None] * dx + a[:, 1, 1][:, None] * dy)
    d_center_pair = np.stack(
        [-np.einsum("ps,ps->p", d_q, gx), -np.einsum("ps,ps->p", d_q, gy)], axis=1
    )
    del gx, gy
    # q = <A, d d^T>: gradient w.r.t. the inverse-covariance entries.
    ga_pair = np.empty((d_q.shape[0], 3))
    ga_pair[:, 0] = np.einsum("ps,ps->p", d_q, dx * dx)
    ga_pair[:, 1] = np.einsum("ps,ps->p", d_q, dx * dy)
    ga_pair[:, 2] = np.einsum("ps,ps->p", d_q, dy * dy)
    del dx, dy, d_q

    d_center2d = np.zeros((n_visible, 2))
    np.add.at(d_center2d, tape.pair_splat, d_center_pair)
    ga = np.zeros((n_visible, 3))
    np.add.at(ga, tape.pair_splat, ga_pair)
    ga_mat = np.empty((n_visible, 2, 2))
    ga_mat[:, 0, 0] = ga[:, 0]
    ga_mat[:, 0, 1] = ga[:, 1]
    ga_mat[:, 1, 0] = ga[:, 1]
    ga_mat[:, 1, 1] = ga[:, 2]

    # A = Sigma2d^{-1}: dL/dSigma2d = -A G_A A.
    inv = tape.inv_cov2d
    d_sigma2d = -np.einsum("nij,njk,nkl->nil", inv, ga_mat, inv)

    # Sigma2d = J Sigma_c J^T + reg.
    r = tape.pose.rotation
    sigma_c = np.einsum("ij,njk,lk->nil", r, tape.sigma_m, r)
    d_jac = 2.0 * np.einsum("nij,njk,nkl->nil", d_sigma2d, tape.jac, sigma_c)
    d_sigma_c = np.einsum("nji,njk,nkl->nil", tape.jac, d_sigma2d, tape.jac)

    # J's own dependence on the camera-frame point.
    x, y, z = tape.p_c[:, 0], tape.p_c[:, 1], tape.p_c[:, 2]
    fx, fy = intr.fx, intr.fy
    z2, z3 = z * z, z * z * z
    d_pc = np.zeros((n_visible, 3))
    d_pc[:, 0] = d_jac[:, 0, 2] * (-fx / z2)
    d_pc[:, 1] = d_jac[:, 1, 2] * (-fy / z2)
    d_pc[:, 2] = (
        d_jac[:, 0, 0] * (-fx / z2)
        + d_jac[:, 1, 1] * (-fy / z2)
        + d_jac[:, 0, 2] * (2.0 * fx * x / z3)
        + d_jac[:, 1, 2] * (2.0 * fy * y / z3)
    )
    # Projection of the center: pixel = (fx x/z + cx, fy y/z + cy).
    d_pc[:, 0] += d_center2d[:, 0] * fx / z
    d_pc[:, 1] += d_center2d[:, 1] * fy / z
    d_pc[:, 2] += -d_center2d[:, 0] * fx * x / z2 - d_center2d[:, 1] * fy * y / z2

    # Color path: the zero clamp gates per-channel gradients; the SH basis
    # depends on the view direction, hence on the camera center.
    d_c_eff = np.where(tape.color_raw > 0.0, comp.d_color, 0.0)
    coeffs = cloud.sh_coeffs[tape.orig_index]
    d_basis = np.einsum("nc,nck->nk", d_c_eff, coeffs)
    norms = np.linalg.norm(tape.view_vec, axis=1, keepdims=True)
    norms = np.where(norms == 0.0, 1.0, norms)
    dirs = tape.view_vec / norms
    d_dir = np.einsum("nk,nkj->nj", d_basis, sh_basis_jacobian(dirs))
    proj = (np.eye(3)[None] - dirs[:, :, None] * dirs[:, None, :]) / norms[:, :, None]
    d_view = np.einsum("nij,nj->ni", proj, d_dir)
    d_cm = d_view.sum(axis=0)

    return _CoreGradients(
        d_pc=d_pc, d_sigma_c=d_sigma_c, d_color=comp.d_color, d_cm=d_cm
    )


def _vee(m: np.ndarray) -> np.ndarray:
    """Projection onto the so(3) generator basis: <E_k, m> componentwise."""
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])


def _pose_tangent(
    cloud: GaussianCloud, tape: ForwardTape, core: _CoreGradients, side: str
) -> np.ndarray:
    """Assemble dL/d tau for the requested perturbation side."""
    d_tau = np.zeros(6)
    if tape.n_visible == 0:
        return d_tau
    r = tape.pose.rotation
    # Covariance path: Sigma_c = R Sigma_m R^T summed over splats.
    d_r = 2.0 * np.einsum("nij,jk,nkl->il", core.d_sigma_c, r, tape.sigma_m)
    if side == "camera":
        # p_c' = exp(phi^) p_c + V rho: Jacobian [I | -p_c^].
        d_tau[:3] += core.d_pc.sum(axis=0)
        d_tau[3:] += np.cross(tape.p_c, core.d_pc).sum(axis=0)
        # R' = exp(phi^) R.
        d_tau[3:] += _vee(d_r @ r.T)
        # Camera center: d c_m/d rho = -R^T, d c_m/d phi = 0.
        d_tau[:3] += -r @ core.d_cm
    elif side == "object":
        # p_c' = R (exp(phi^) p_m + V rho) + t: Jacobian [R | -R p_m^].
        rt_dpc = core.d_pc @ r
        p_m = cloud.positions[tape.orig_index]
        d_tau[:3] += rt_dpc.sum(axis=0)
        d_tau[3:] += np.cross(p_m, rt_dpc).sum(axis=0)
        # R' = R exp(phi^).
        d_tau[3:] += _vee(r.T @ d_r)
        # Camera center: c_m' = exp(-phi^)(c_m - V rho).
        d_tau[:3] += -core.d_cm
        d_tau[3:] += np.cross(core.d_cm, tape.pose.camera_center())
    else:
        raise ValueError(f"unknown perturbation side {side!r}")
    return d_tau


def _appearance(
    cloud: GaussianCloud, tape: ForwardTape, core: _CoreGradients, mask: ParamMask
) -> ParamGradients:
    n = cloud.count
    d_sh = np.zeros((n, 3, 16))
    d_rot = np.zeros((n, 4))
    if tape.n_visible == 0:
        return ParamGradients(d_sh=d_sh, d_rot=d_rot)
    idx = tape.orig_index
    if mask.learn_sh:
        d_c_eff = np.where(tape.color_raw > 0.0, core.d_color, 0.0)
        d_sh[idx] = d_c_eff[:, :, None] * tape.basis[:, None, :]
    if mask.learn_rot:
        r = tape.pose.rotation
        # Sigma_m = R_q diag(s^2) R_q^T per Gaussian.
        g_m = np.einsum("ji,njk,kl->nil", r, core.d_sigma_c, r)
        r_q = quat_to_rotmat(cloud.rotations[idx])
        s2 = np.exp(2.0 * cloud.log_scales[idx])
        d_rq = 2.0 * np.einsum("nij,njk,nk->nik", g_m, r_q, s2)
        jac_q = quat_to_rotmat_jacobian(cloud.rotations[idx])
        d_rot[idx] = np.einsum("nij,nijk->nk", d_rq, jac_q)
    return ParamGradients(d_sh=d_sh, d_rot=d_rot)


def _require_tape(output: RenderOutput) -> ForwardTape:
    if output.tape is None:
        raise TapeMismatch("render output carries no backward tape")
    return output.tape


def camera_pose_gradient(
    cloud: GaussianCloud, pose: Pose, intr, output: RenderOutput, dl_dpixel
) -> PoseGradient:
    """Gradient w.r.t. a left (camera-frame) perturbation exp(tau) @ T."""
    tape = _require_tape(output)
    core = _backward_core(cloud, tape, dl_dpixel)
    return PoseGradient(_pose_tangent(cloud, tape, core, "camera"))


def object_pose_gradient(
    cloud: GaussianCloud, pose: Pose, intr, output: RenderOutput, dl_dpixel
) -> PoseGradient:
    """Gradient w.r.t. a right (object-frame) perturbation T @ exp(tau)."""
    tape = _require_tape(output)
    core = _backward_core(cloud, tape, dl_dpixel)
    return PoseGradient(_pose_tangent(cloud, tape, core, "object"))


def appearance_gradients(
    cloud: GaussianCloud,
    pose: Pose,
    intr,
    output: RenderOutput,
    dl_dpixel,
    mask: ParamMask | None = None,
) -> ParamGradients:
    """Per-Gaussian SH and orientation gradients under a parameter mask."""
    if mask is None:
        mask = ParamMask()
    tape = _require_tape(output)
    n = cloud.count
    if not (mask.learn_sh or mask.learn_rot):
        return ParamGradients(d_sh=np.zeros((n, 3, 16)), d_rot=np.zeros((n, 4)))
    core = _backward_core(cloud, tape, dl_dpixel)
    return _appearance(cloud, tape, core, mask)


def pose_and_appearance_gradients(
    cloud: GaussianCloud,
    pose: Pose,
    intr,
    output: RenderOutput,
    dl_dpixel,
    side: str,
    mask: ParamMask | None = None,
):
    """One shared backward pass for stages updating pose plus appearance."""
    if mask is None:
        mask = ParamMask()
    tape = _require_tape(output)
    core = _backward_core(cloud, tape, dl_dpixel)
    return (
        PoseGradient(_pose_tangent(cloud, tape, core, side)),
        _appearance(cloud, tape, core, mask),
    )
