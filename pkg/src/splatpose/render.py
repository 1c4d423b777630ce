"""Forward rasterization of a Gaussian cloud under a rigid pose.

Two implementations share the same per-splat math:

  * render() bins splats into 16x16 pixel tiles and composites every tile's
    candidate list in one vectorized pass (log-space transmittance cumsum),
    keeping a flat tape of (tile, splat) pairs for the backward pass;
  * render_reference() loops over splats in depth order against the full
    image, the straightforward oracle the tiled path is tested against.

Both resolve each pixel to the identical front-to-back recurrence
    pixel = sum_i c_i * alpha_i * prod_{j<i} (1 - alpha_j)
with alpha_i = min(0.99, a_i * exp(-q/2)), contributions below 1/255 skipped
and compositing cut off once transmittance drops under 1e-4.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .lie import Pose
from .model import GaussianCloud, quat_to_rotmat, sh_basis, sigmoid

TILE = 16
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_STOP = 1e-4
COV_REG = 0.3  # px^2 low-pass added to every projected covariance
DET_MIN = 1e-12
Z_NEAR_DEFAULT = 1e-3


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics; pixels are sampled at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width >= 1 and self.height >= 1):
            raise ValueError("image size must be at least 1x1")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_json_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "CameraIntrinsics":
        return cls(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            width=int(data["width"]),
            height=int(data["height"]),
        )

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load_json(cls, path) -> "CameraIntrinsics":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def project_point(pose: Pose, intr: CameraIntrinsics, p_m):
    """Project one object-frame point; returns (pixel (2,), z_c).

    A z_c at or below the near plane means the point is behind the camera;
    callers cull on z rather than catching an exception.
    """
    p_c = pose.apply(np.asarray(p_m, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        pixel = np.array(
            [
                intr.fx * p_c[0] / p_c[2] + intr.cx,
                intr.fy * p_c[1] / p_c[2] + intr.cy,
            ]
        )
    return pixel, float(p_c[2])


def projection_jacobian(p_c, intr: CameraIntrinsics) -> np.ndarray:
    """d(pixel)/d(camera point) for the pinhole projection, shape (2,3)."""
    x, y, z = np.asarray(p_c, dtype=float)
    return np.array(
        [
            [intr.fx / z, 0.0, -intr.fx * x / (z * z)],
            [0.0, intr.fy / z, -intr.fy * y / (z * z)],
        ]
    )


def project_covariance(jac, r_cm, sigma_m) -> np.ndarray:
    """Screen-space 2x2 covariance J (R Sigma R^T) J^T plus the low-pass."""
    jac = np.asarray(jac, dtype=float)
    r_cm = np.asarray(r_cm, dtype=float)
    sigma_m = np.asarray(sigma_m, dtype=float)
    sigma_c = r_cm @ sigma_m @ r_cm.T
    out = jac @ sigma_c @ jac.T + COV_REG * np.eye(2)
    return 0.5 * (out + out.T)


@dataclass
class ForwardTape:
    """Everything the backward pass needs from one forward render.

    Splat arrays are depth-sorted over the visible subset; pair arrays flatten
    the (tile, splat) incidence in tile-major, depth-minor order so segmented
    reductions reproduce sequential front-to-back compositing exactly.
    """

    pose: Pose
    intr: CameraIntrinsics
    z_near: float
    # visible splats, z-sorted
    orig_index: np.ndarray  # (Nv,) indices into the cloud
    p_c: np.ndarray  # (Nv,3) camera-frame centers
    center2d: np.ndarray  # (Nv,2)
    inv_cov2d: np.ndarray  # (Nv,2,2)
    opacity: np.ndarray  # (Nv,)
    color: np.ndarray  # (Nv,3) clamped at 0
    color_raw: np.ndarray  # (Nv,3) before the zero clamp
    view_vec: np.ndarray  # (Nv,3) camera_center - position, unnormalized
    basis: np.ndarray  # (Nv,16) SH basis at the view direction
    jac: np.ndarray  # (Nv,2,3)
    sigma_m: np.ndarray  # (Nv,3,3)
    # (tile, splat) pairs sorted by (tile, depth rank)
    pair_tile: np.ndarray  # (P,)
    pair_splat: np.ndarray  # (P,) indices into the sorted splat arrays
    tile_starts: np.ndarray  # (Tt,) segment starts into the pair arrays
    tile_ids: np.ndarray  # (Tt,) tile id per segment
    alpha: np.ndarray  # (P,256) evaluated alpha, zeroed under 1/255
    trans: np.ndarray  # (P,256) transmittance before each contribution
    alpha_clamped: np.ndarray  # (P,256) bool, alpha hit the 0.99 ceiling
    overflow: np.ndarray  # (H,W,3) bool, composited color clipped at 1

    @property
    def n_visible(self) -> int:
        return self.orig_index.shape[0]

    def included(self) -> np.ndarray:
        """(P,256) mask of contributions present in the composite."""
        return (self.alpha > 0.0) & (self.trans >= T_STOP)

    def pixel_contributions(self, x: int, y: int):
        """Ordered (gaussian_index, alpha, color, transmittance) at one pixel."""
        tx, ty = x // TILE, y // TILE
        ntx = -(-self.intr.width // TILE)
        tile_id = ty * ntx + tx
        slot = (y - ty * TILE) * TILE + (x - tx * TILE)
        rows = np.nonzero(self.pair_tile == tile_id)[0]
        out = []
        incl = self.included()
        for r in rows:
            if incl[r, slot]:
                s = self.pair_splat[r]
                out.append(
                    (
                        int(self.orig_index[s]),
                        float(self.alpha[r, slot]),
                        self.color[s].copy(),
                        float(self.trans[r, slot]),
                    )
                )
        return out


@dataclass
class RenderOutput:
    color: np.ndarray  # (H,W,3) in [0,1]
    alpha: np.ndarray  # (H,W) in [0,1]
    depth: np.ndarray  # (H,W), alpha-weighted mean z, 0 where alpha = 0
    tape: ForwardTape | None


def _prepare_splats(cloud: GaussianCloud, pose: Pose, intr: CameraIntrinsics, z_near):
    """Cull, project, sort by depth; returns per-splat arrays or None."""
    p_c = cloud.positions @ pose.rotation.T + pose.translation
    opacity = sigmoid(cloud.opacity_logits)
    keep = (p_c[:, 2] > z_near) & (opacity * 0.99 >= ALPHA_MIN)
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return None
    # Global stable z sort, ties broken by index (idx is already ascending).
    order = np.lexsort((idx, p_c[idx, 2]))
    idx = idx[order]
    p_c = p_c[idx]
    opacity = opacity[idx]

    z = p_c[:, 2]
    center2d = np.stack(
        [intr.fx * p_c[:, 0] / z + intr.cx, intr.fy * p_c[:, 1] / z + intr.cy],
        axis=1,
    )
    jac = np.zeros((idx.size, 2, 3))
    jac[:, 0, 0] = intr.fx / z
    jac[:, 0, 2] = -intr.fx * p_c[:, 0] / (z * z)
    jac[:, 1, 1] = intr.fy / z
    jac[:, 1, 2] = -intr.fy * p_c[:, 1] / (z * z)

    sigma_m = cloud.covariances()[idx]
    sigma_c = np.einsum("ij,njk,lk->nil", pose.rotation, sigma_m, pose.rotation)
    cov2d = np.einsum("nij,njk,nlk->nil", jac, sigma_c, jac)
    cov2d[:, 0, 0] += COV_REG
    cov2d[:, 1, 1] += COV_REG
    cov2d = 0.5 * (cov2d + cov2d.transpose(0, 2, 1))
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    ok = np.isfinite(det) & (det >= DET_MIN)
    if not np.all(ok):
        # Degenerate covariances are skipped per-splat, not raised.
        (idx, p_c, opacity, z, center2d, jac, sigma_m, sigma_c, cov2d, det) = (
            arr[ok]
            for arr in (idx, p_c, opacity, z, center2d, jac, sigma_m, sigma_c, cov2d, det)
        )
        if idx.size == 0:
            return None
    inv_cov = np.empty_like(cov2d)
    inv_cov[:, 0, 0] = cov2d[:, 1, 1] / det
    inv_cov[:, 1, 1] = cov2d[:, 0, 0] / det
    inv_cov[:, 0, 1] = -cov2d[:, 0, 1] / det
    inv_cov[:, 1, 0] = inv_cov[:, 0, 1]

    cam_center = pose.camera_center()
    view_vec = cam_center[None, :] - cloud.positions[idx]
    norms = np.linalg.norm(view_vec, axis=1, keepdims=True)
    norms = np.where(norms == 0.0, 1.0, norms)
    basis = sh_basis(view_vec / norms)
    color_raw = np.einsum("nck,nk->nc", cloud.sh_coeffs[idx], basis) + 0.5
    color = np.maximum(color_raw, 0.0)

    q_max = 2.0 * np.log(255.0 * np.clip(opacity, ALPHA_MIN, None))
    return {
        "orig_index": idx,
        "p_c": p_c,
        "center2d": center2d,
        "cov2d": cov2d,
        "inv_cov2d": inv_cov,
        "opacity": opacity,
        "q_max": q_max,
        "color": color,
        "color_raw": color_raw,
        "view_vec": view_vec,
        "basis": basis,
        "jac": jac,
        "sigma_m": sigma_m,
    }


def _alpha_from_quadratic(a00, a01, a11, opacity, dx, dy):
    """Shared alpha evaluation so both renderers agree operation-for-operation.

    The inverse-covariance entries and opacity must broadcast against the
    pixel offset arrays dx, dy.
    """
    q = a00 * dx * dx + 2.0 * a01 * dx * dy + a11 * dy * dy
    # Only entries that can reach the alpha floor need the exponential.
    live = q <= 2.0 * np.log(255.0 * opacity)
    raw = np.zeros_like(q)
    np.exp(-0.5 * q, out=raw, where=live)
    raw *= opacity
    alpha = np.minimum(raw, ALPHA_MAX)
    alpha[alpha < ALPHA_MIN] = 0.0
    return alpha, raw > ALPHA_MAX


def _empty_output(intr: CameraIntrinsics, pose: Pose, z_near, with_tape=True):
    h, w = intr.height, intr.width
    tape = None
    if with_tape:
        tape = ForwardTape(
            pose=pose,
            intr=intr,
            z_near=z_near,
            orig_index=np.zeros(0, dtype=int),
            p_c=np.zeros((0, 3)),
            center2d=np.zeros((0, 2)),
            inv_cov2d=np.zeros((0, 2, 2)),
            opacity=np.zeros(0),
            color=np.zeros((0, 3)),
            color_raw=np.zeros((0, 3)),
            view_vec=np.zeros((0, 3)),
            basis=np.zeros((0, 16)),
            jac=np.zeros((0, 2, 3)),
            sigma_m=np.zeros((0, 3, 3)),
            pair_tile=np.zeros(0, dtype=int),
            pair_splat=np.zeros(0, dtype=int),
            tile_starts=np.zeros(0, dtype=int),
            tile_ids=np.zeros(0, dtype=int),
            alpha=np.zeros((0, TILE * TILE)),
            trans=np.zeros((0, TILE * TILE)),
            alpha_clamped=np.zeros((0, TILE * TILE), dtype=bool),
            overflow=np.zeros((h, w, 3), dtype=bool),
        )
    return RenderOutput(
        color=np.zeros((h, w, 3)),
        alpha=np.zeros((h, w)),
        depth=np.zeros((h, w)),
        tape=tape,
    )


def render(
    cloud: GaussianCloud,
    pose: Pose,
    intr: CameraIntrinsics,
    z_near: float = Z_NEAR_DEFAULT,
) -> RenderOutput:
    """Tiled rasterization; keeps the backward tape."""
    prep = _prepare_splats(cloud, pose, intr, z_near)
    if prep is None:
        return _empty_output(intr, pose, z_near)

    h, w = intr.height, intr.width
    ntx, nty = -(-w // TILE), -(-h // TILE)
    center2d = prep["center2d"]
    cov2d = prep["cov2d"]
    # Threshold-ellipse half extents, padded one pixel so borderline
    # contributions can never be lost to bbox rounding.
    hx = np.sqrt(prep["q_max"] * cov2d[:, 0, 0]) + 1.0
    hy = np.sqrt(prep["q_max"] * cov2d[:, 1, 1]) + 1.0
    x0 = np.ceil(center2d[:, 0] - hx)
    x1 = np.floor(center2d[:, 0] + hx)
    y0 = np.ceil(center2d[:, 1] - hy)
    y1 = np.floor(center2d[:, 1] + hy)
    x0 = np.clip(x0, 0, w - 1)
    x1 = np.clip(x1, 0, w - 1)
    y0 = np.clip(y0, 0, h - 1)
    y1 = np.clip(y1, 0, h - 1)
    on_screen = (
        (center2d[:, 0] + hx >= 0)
        & (center2d[:, 0] - hx <= w - 1)
        & (center2d[:, 1] + hy >= 0)
        & (center2d[:, 1] - hy <= h - 1)
    )
    keep = np.nonzero(on_screen)[0]
    if keep.size == 0:
        return _empty_output(intr, pose, z_near)
    if keep.size < center2d.shape[0]:
        prep = {k: v[keep] for k, v in prep.items()}
        center2d = prep["center2d"]
        x0, x1, y0, y1 = x0[keep], x1[keep], y0[keep], y1[keep]

    tx0 = (x0 // TILE).astype(int)
    tx1 = (x1 // TILE).astype(int)
    ty0 = (y0 // TILE).astype(int)
    ty1 = (y1 // TILE).astype(int)
    nx_t = tx1 - tx0 + 1
    ny_t = ty1 - ty0 + 1
    counts = nx_t * ny_t
    total = int(counts.sum())

    splat_of_pair = np.repeat(np.arange(counts.size), counts)
    offsets = np.repeat(np.cumsum(counts) - counts, counts)
    slot = np.arange(total) - offsets
    nx_rep = nx_t[splat_of_pair]
    tile_x = tx0[splat_of_pair] + slot % nx_rep
    tile_y = ty0[splat_of_pair] + slot // nx_rep
    tile_of_pair = tile_y * ntx + tile_x

    # Tile-major, depth-minor: splat arrays are already depth sorted, so the
    # pair's splat row number is its depth rank.
    order = np.lexsort((splat_of_pair, tile_of_pair))
    pair_tile = tile_of_pair[order]
    pair_splat = splat_of_pair[order]

    tile_ids, tile_starts = np.unique(pair_tile, return_index=True)

    # Pixel offsets of every pair row against its splat center.
    slot_x = np.arange(TILE * TILE) % TILE
    slot_y = np.arange(TILE * TILE) // TILE
    px = (pair_tile % ntx * TILE)[:, None] + slot_x[None, :]
    py = (pair_tile // ntx * TILE)[:, None] + slot_y[None, :]
    dx = px - center2d[pair_splat, 0][:, None]
    dy = py - center2d[pair_splat, 1][:, None]
    inv_cov = prep["inv_cov2d"]
    alpha, clamped = _alpha_from_quadratic(
        inv_cov[pair_splat, 0, 0][:, None],
        inv_cov[pair_splat, 0, 1][:, None],
        inv_cov[pair_splat, 1, 1][:, None],
        prep["opacity"][pair_splat, None],
        dx,
        dy,
    )
    del px, py, dx, dy

    # Segmented log-space transmittance: per pixel column, the cumulative sum
    # of log1p(-alpha) within each tile segment reproduces the sequential
    # front-to-back product exactly (skipped rows contribute log1p(0) = 0).
    hit = alpha > 0.0
    logs = np.zeros_like(alpha)
    np.log1p(-alpha, out=logs, where=hit)
    cum = np.cumsum(logs, axis=0)
    prior = np.where(tile_starts > 0, tile_starts - 1, 0)
    base_rows = np.repeat(
        np.where(tile_starts[:, None] > 0, cum[prior], 0.0),
        np.diff(np.append(tile_starts, total)),
        axis=0,
    )
    # Transmittance is only consumed on rows that hit the pixel; elsewhere it
    # stays 0, which the inclusion test below already excludes.
    cum -= base_rows
    cum -= logs
    trans = np.zeros_like(alpha)
    np.exp(cum, out=trans, where=hit)
    del cum, base_rows, logs

    incl = hit & (trans >= T_STOP)
    weight = np.where(incl, alpha * trans, 0.0)

    color = prep["color"]
    z = prep["p_c"][:, 2]
    wc = weight[:, :, None] * color[pair_splat][:, None, :]
    wz = weight * z[pair_splat][:, None]
    tile_color = np.add.reduceat(wc, tile_starts, axis=0)
    tile_alpha = np.add.reduceat(weight, tile_starts, axis=0)
    tile_wz = np.add.reduceat(wz, tile_starts, axis=0)
    del wc, wz

    pad_color = np.zeros((nty, ntx, TILE * TILE, 3))
    pad_alpha = np.zeros((nty, ntx, TILE * TILE))
    pad_wz = np.zeros((nty, ntx, TILE * TILE))
    t_y, t_x = tile_ids // ntx, tile_ids % ntx
    pad_color[t_y, t_x] = tile_color
    pad_alpha[t_y, t_x] = tile_alpha
    pad_wz[t_y, t_x] = tile_wz

    def unpad(a):
        full = a.reshape(nty, ntx, TILE, TILE, *a.shape[3:])
        full = np.moveaxis(full, 2, 1).reshape(nty * TILE, ntx * TILE, *a.shape[3:])
        return full[:h, :w]

    img = unpad(pad_color)
    alpha_img = unpad(pad_alpha)
    wz_img = unpad(pad_wz)

    overflow = img > 1.0
    np.clip(img, 0.0, 1.0, out=img)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(alpha_img > 0.0, wz_img / alpha_img, 0.0)

    tape = ForwardTape(
        pose=pose,
        intr=intr,
        z_near=z_near,
        orig_index=prep["orig_index"],
        p_c=prep["p_c"],
        center2d=center2d,
        inv_cov2d=prep["inv_cov2d"],
        opacity=prep["opacity"],
        color=color,
        color_raw=prep["color_raw"],
        view_vec=prep["view_vec"],
        basis=prep["basis"],
        jac=prep["jac"],
        sigma_m=prep["sigma_m"],
        pair_tile=pair_tile,
        pair_splat=pair_splat,
        tile_starts=tile_starts,
        tile_ids=tile_ids,
        alpha=alpha,
        trans=trans,
        alpha_clamped=clamped,
        overflow=overflow,
    )
    return RenderOutput(color=img, alpha=alpha_img, depth=depth, tape=tape)


def render_reference(
    cloud: GaussianCloud,
    pose: Pose,
    intr: CameraIntrinsics,
    z_near: float = Z_NEAR_DEFAULT,
) -> RenderOutput:
    """Dense per-splat compositing over the whole image; the oracle renderer.

    No tiling, no bounding boxes; produces no backward tape.
    """
    prep = _prepare_splats(cloud, pose, intr, z_near)
    if prep is None:
        return _empty_output(intr, pose, z_near, with_tape=False)

    h, w = intr.height, intr.width
    ys, xs = np.mgrid[0:h, 0:w]
    img = np.zeros((h, w, 3))
    alpha_img = np.zeros((h, w))
    wz = np.zeros((h, w))
    log_t = np.zeros((h, w))
    for i in range(prep["orig_index"].size):
        dx = xs - prep["center2d"][i, 0]
        dy = ys - prep["center2d"][i, 1]
        inv_cov = prep["inv_cov2d"][i]
        alpha, _ = _alpha_from_quadratic(
            inv_cov[0, 0], inv_cov[0, 1], inv_cov[1, 1], prep["opacity"][i], dx, dy
        )
        trans = np.exp(log_t)
        weight = np.where((alpha > 0.0) & (trans >= T_STOP), alpha * trans, 0.0)
        img += weight[:, :, None] * prep["color"][i]
        alpha_img += weight
        wz += weight * prep["p_c"][i, 2]
        log_t += np.log1p(-alpha)

    np.clip(img, 0.0, 1.0, out=img)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(alpha_img > 0.0, wz / alpha_img, 0.0)
    return RenderOutput(color=img, alpha=alpha_img, depth=depth, tape=None)
