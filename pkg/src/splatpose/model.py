"""Gaussian-cloud object model: storage conventions, PLY I/O, SH color.

Storage follows the de-facto 3DGS conventions so reconstructions produced by
standard pipelines load unchanged: opacity through a sigmoid, scales through
exp, quaternions (w, x, y, z) normalized on ingest, and degree-3 spherical
harmonics stored channel-major (all 15 rest coefficients of R, then G, then B).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyCloud, MissingProperty, ParseError

SH_DC = 0.28209479177387814
SH_DEG1 = 0.4886025119029199
SH_DEG2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_DEG3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

N_SH_COEFFS = 16


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(quats) -> np.ndarray:
    """Batch (N,4) unit quaternions (w,x,y,z) to (N,3,3) rotation matrices."""
    q = np.asarray(quats, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[:, 0, 1] = 2.0 * (x * y - w * z)
    r[:, 0, 2] = 2.0 * (x * z + w * y)
    r[:, 1, 0] = 2.0 * (x * y + w * z)
    r[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[:, 1, 2] = 2.0 * (y * z - w * x)
    r[:, 2, 0] = 2.0 * (x * z - w * y)
    r[:, 2, 1] = 2.0 * (y * z + w * x)
    r[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r[0] if single else r


def quat_to_rotmat_jacobian(quats) -> np.ndarray:
    """d(rotation matrix)/d(raw quaternion), shape (N,3,3,4).

    Includes the chain through normalization q/|q|, so the derivative is
    with respect to the stored (already unit) components perturbed freely.
    """
    q = np.asarray(quats, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    n = q.shape[0]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    d = np.zeros((n, 3, 3, 4))
    # Per-entry partials of the unit-quaternion rotation matrix.
    d[:, 0, 0, 2] = -4.0 * y
    d[:, 0, 0, 3] = -4.0 * z
    d[:, 0, 1] = np.stack([-2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w], axis=1)
    d[:, 0, 2] = np.stack([2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x], axis=1)
    d[:, 1, 0] = np.stack([2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w], axis=1)
    d[:, 1, 1, 1] = -4.0 * x
    d[:, 1, 1, 3] = -4.0 * z
    d[:, 1, 2] = np.stack([-2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y], axis=1)
    d[:, 2, 0] = np.stack([-2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x], axis=1)
    d[:, 2, 1] = np.stack([2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y], axis=1)
    d[:, 2, 2, 1] = -4.0 * x
    d[:, 2, 2, 2] = -4.0 * y
    # Project through normalization: dq_unit/dq_raw = I - q q^T at |q| = 1.
    proj = np.eye(4)[None] - q[:, :, None] * q[:, None, :]
    d = np.einsum("nijk,nkl->nijl", d, proj)
    return d[0] if single else d


@dataclass
class ParamMask:
    """Which cloud parameter groups an adaptation stage may update.

    Defaults freeze geometry (positions, scales, opacities) and open only
    the appearance-bearing parameters (SH coefficients and orientations).
    """

    learn_sh: bool = True
    learn_rot: bool = True
    learn_xyz: bool = False
    learn_scale: bool = False
    learn_opacity: bool = False


@dataclass
class GaussianCloud:
    """A rigid object as N anisotropic Gaussians in its own object frame."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = self.positions.shape[0]
        if n == 0:
            raise EmptyCloud("a Gaussian cloud needs at least one primitive")
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(n, 4)
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ParseError("zero-norm quaternion cannot be normalized")
        self.rotations = self.rotations / norms
        self.log_scales = np.asarray(self.log_scales, dtype=float).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=float).reshape(n)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=float).reshape(n, 3, N_SH_COEFFS)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def rotation_matrices(self) -> np.ndarray:
        return quat_to_rotmat(self.rotations)

    def covariances(self) -> np.ndarray:
        """Per-Gaussian object-frame covariances R diag(s^2) R^T, (N,3,3)."""
        r = self.rotation_matrices()
        s2 = self.scales() ** 2
        return np.einsum("nij,nj,nkj->nik", r, s2, r)

    def bounding_radius(self) -> float:
        """Max center distance from the centroid; the object's extent scale."""
        centroid = self.positions.mean(axis=0)
        return float(np.max(np.linalg.norm(self.positions - centroid, axis=1)))

    def diameter(self) -> float:
        """Max pairwise center distance (brute force, meant for small N)."""
        d2 = np.sum((self.positions[:, None] - self.positions[None]) ** 2, axis=2)
        return float(np.sqrt(d2.max()))

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.sh_coeffs.copy(),
        )


def covariance_world(rotation_quat, log_scale) -> np.ndarray:
    """Object-frame covariance of one Gaussian from quaternion and log-scales."""
    q = np.asarray(rotation_quat, dtype=float)
    r = quat_to_rotmat(q / np.linalg.norm(q))
    s = np.exp(np.asarray(log_scale, dtype=float))
    return r @ np.diag(s * s) @ r.T


def sh_basis(dirs) -> np.ndarray:
    """Real SH basis values for unit directions, shape (N, 16), degrees 0..3."""
    d = np.atleast_2d(np.asarray(dirs, dtype=float))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty((d.shape[0], N_SH_COEFFS))
    out[:, 0] = SH_DC
    out[:, 1] = -SH_DEG1 * y
    out[:, 2] = SH_DEG1 * z
    out[:, 3] = -SH_DEG1 * x
    out[:, 4] = SH_DEG2[0] * x * y
    out[:, 5] = SH_DEG2[1] * y * z
    out[:, 6] = SH_DEG2[2] * (2.0 * zz - xx - yy)
    out[:, 7] = SH_DEG2[3] * x * z
    out[:, 8] = SH_DEG2[4] * (xx - yy)
    out[:, 9] = SH_DEG3[0] * y * (3.0 * xx - yy)
    out[:, 10] = SH_DEG3[1] * x * y * z
    out[:, 11] = SH_DEG3[2] * y * (4.0 * zz - xx - yy)
    out[:, 12] = SH_DEG3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[:, 13] = SH_DEG3[4] * x * (4.0 * zz - xx - yy)
    out[:, 14] = SH_DEG3[5] * z * (xx - yy)
    out[:, 15] = SH_DEG3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_jacobian(dirs) -> np.ndarray:
    """d(basis)/d(direction components), shape (N, 16, 3).

    Treats the direction as a free 3-vector; callers chain through the
    normalization Jacobian when the direction comes from a difference vector.
    """
    d = np.atleast_2d(np.asarray(dirs, dtype=float))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    zero = np.zeros_like(x)
    xx, yy, zz = x * x, y * y, z * z
    jac = np.zeros((d.shape[0], N_SH_COEFFS, 3))
    jac[:, 1, 1] = -SH_DEG1
    jac[:, 2, 2] = SH_DEG1
    jac[:, 3, 0] = -SH_DEG1
    jac[:, 4] = SH_DEG2[0] * np.stack([y, x, zero], axis=1)
    jac[:, 5] = SH_DEG2[1] * np.stack([zero, z, y], axis=1)
    jac[:, 6] = SH_DEG2[2] * np.stack([-2 * x, -2 * y, 4 * z], axis=1)
    jac[:, 7] = SH_DEG2[3] * np.stack([z, zero, x], axis=1)
    jac[:, 8] = SH_DEG2[4] * np.stack([2 * x, -2 * y, zero], axis=1)
    jac[:, 9] = SH_DEG3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], axis=1)
    jac[:, 10] = SH_DEG3[1] * np.stack([y * z, x * z, x * y], axis=1)
    jac[:, 11] = SH_DEG3[2] * np.stack(
        [-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], axis=1
    )
    jac[:, 12] = SH_DEG3[3] * np.stack(
        [-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], axis=1
    )
    jac[:, 13] = SH_DEG3[4] * np.stack(
        [4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], axis=1
    )
    jac[:, 14] = SH_DEG3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], axis=1)
    jac[:, 15] = SH_DEG3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], axis=1)
    return jac


def evaluate_sh(coeffs, view_dir) -> np.ndarray:
    """Color of one Gaussian seen along a unit view direction.

    coeffs is (3, 16). The conventional +0.5 offset is added and the result
    clamped at zero; the [0,1] ceiling is applied later at compositing.
    """
    basis = sh_basis(view_dir)[0]
    return np.maximum(np.asarray(coeffs, dtype=float) @ basis + 0.5, 0.0)


# ---------------------------------------------------------------------------
# PLY I/O (de-facto 3DGS vertex layout)

_BASE_PROPS = (
    "x",
    "y",
    "z",
    "f_dc_0",
    "f_dc_1",
    "f_dc_2",
    "opacity",
    "scale_0",
    "scale_1",
    "scale_2",
    "rot_0",
    "rot_1",
    "rot_2",
    "rot_3",
)

_PLY_TYPES = {
    "float": ("<f4", 4),
    "float32": ("<f4", 4),
    "double": ("<f8", 8),
    "float64": ("<f8", 8),
    "uchar": ("<u1", 1),
    "uint8": ("<u1", 1),
    "int": ("<i4", 4),
    "int32": ("<i4", 4),
    "uint": ("<u4", 4),
    "uint32": ("<u4", 4),
    "short": ("<i2", 2),
    "ushort": ("<u2", 2),
}


def _parse_header(fh):
    """Read the header, returning (format, [(elem_name, count, [(prop, dtype)])])."""
    magic = fh.readline().strip()
    if magic != b"ply":
        raise ParseError("not a PLY file (missing 'ply' magic)")
    fmt = None
    elements = []
    while True:
        raw = fh.readline()
        if not raw:
            raise ParseError("unexpected end of file inside header")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        parts = line.split()
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in (
                "ascii",
                "binary_little_endian",
            ):
                raise ParseError(f"unsupported PLY format line: {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise ParseError(f"malformed element line: {line!r}")
            try:
                count = int(parts[2])
            except ValueError as exc:
                raise ParseError(f"bad element count in {line!r}") from exc
            elements.append((parts[1], count, []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before any element")
            if parts[1] == "list":
                raise ParseError("list properties are not supported")
            if len(parts) != 3:
                raise ParseError(f"malformed property line: {line!r}")
            if parts[1] not in _PLY_TYPES:
                raise ParseError(f"unsupported property type {parts[1]!r}")
            elements[-1][2].append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            break
        else:
            raise ParseError(f"unrecognized header line: {line!r}")
    if fmt is None:
        raise ParseError("header has no format line")
    return fmt, elements


def _read_vertex_table(fh, fmt, elements):
    """Return (names, float64 array of shape (count, n_props)) for 'vertex'."""
    index = next((i for i, e in enumerate(elements) if e[0] == "vertex"), None)
    if index is None:
        raise ParseError("no 'vertex' element in header")
    if fmt == "binary_little_endian":
        for _, count, props in elements[:index]:
            fh.seek(count * sum(_PLY_TYPES[t][1] for _, t in props), 1)
        _, count, props = elements[index]
        dtype = np.dtype([(name, _PLY_TYPES[t][0]) for name, t in props])
        raw = fh.read(count * dtype.itemsize)
        if len(raw) != count * dtype.itemsize:
            raise ParseError("binary payload truncated")
        table = np.frombuffer(raw, dtype=dtype)
        names = [name for name, _ in props]
        return names, np.stack([table[n].astype(float) for n in names], axis=1)
    # ASCII: one whitespace-separated row per record, elements in order.
    rows_per_element = []
    for _, count, props in elements:
        rows_per_element.append((count, len(props)))
    text = fh.read().decode("ascii", errors="replace").split()
    cursor = 0
    for i, (count, width) in enumerate(rows_per_element):
        needed = count * width
        if i == index:
            chunk = text[cursor : cursor + needed]
            if len(chunk) != needed:
                raise ParseError("ascii payload truncated")
            try:
                values = np.array([float(v) for v in chunk])
            except ValueError as exc:
                raise ParseError("non-numeric token in ascii payload") from exc
            names = [name for name, _ in elements[index][2]]
            return names, values.reshape(count, width)
        cursor += needed
    raise ParseError("no 'vertex' element in header")


def load_ply(path) -> GaussianCloud:
    """Read a Gaussian cloud from a 3DGS-layout PLY file.

    Files storing fewer than 45 f_rest coefficients (lower SH degree) are
    zero-padded up to degree 3.
    """
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        names, table = _read_vertex_table(fh, fmt, elements)
    col = {name: i for i, name in enumerate(names)}
    for required in _BASE_PROPS:
        if required not in col:
            raise MissingProperty(f"PLY vertex element lacks property {required!r}")
    n = table.shape[0]
    if n == 0:
        raise EmptyCloud("PLY file declares zero vertices")

    rest_count = 0
    while f"f_rest_{rest_count}" in col:
        rest_count += 1
    if rest_count % 3 != 0 or rest_count > 45:
        raise ParseError(f"unsupported f_rest property count {rest_count}")
    per_channel = rest_count // 3

    sh = np.zeros((n, 3, N_SH_COEFFS))
    for ch in range(3):
        sh[:, ch, 0] = table[:, col[f"f_dc_{ch}"]]
        for k in range(per_channel):
            sh[:, ch, 1 + k] = table[:, col[f"f_rest_{ch * per_channel + k}"]]

    return GaussianCloud(
        positions=table[:, [col["x"], col["y"], col["z"]]],
        rotations=table[:, [col["rot_0"], col["rot_1"], col["rot_2"], col["rot_3"]]],
        log_scales=table[:, [col["scale_0"], col["scale_1"], col["scale_2"]]],
        opacity_logits=table[:, col["opacity"]],
        sh_coeffs=sh,
    )


def save_ply(cloud: GaussianCloud, path, ascii_format: bool = False) -> None:
    """Write a cloud in the standard 62-property 3DGS layout (float32)."""
    n = cloud.count
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(45)]
    names += ["opacity", "scale_0", "scale_1", "scale_2"]
    names += [f"rot_{i}" for i in range(4)]

    table = np.zeros((n, len(names)), dtype=np.float32)
    table[:, 0:3] = cloud.positions
    table[:, 6:9] = cloud.sh_coeffs[:, :, 0]
    rest = cloud.sh_coeffs[:, :, 1:]  # (N, 3, 15) channel-major on disk
    table[:, 9:54] = rest.reshape(n, 45)
    table[:, 54] = cloud.opacity_logits
    table[:, 55:58] = cloud.log_scales
    table[:, 58:62] = cloud.rotations

    fmt = "ascii" if ascii_format else "binary_little_endian"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if ascii_format:
            for row in table:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))
        else:
            fh.write(table.astype("<f4").tobytes())
