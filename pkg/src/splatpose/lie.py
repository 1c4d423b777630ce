"""SE(3)/SO(3) representations, exp/log maps, and perturbation Jacobians.

Conventions used throughout the library:
  * a rigid transform maps object/model coordinates to camera coordinates,
    p_c = R @ p_m + t;
  * tangent vectors are ordered [rho; phi] with rho the translational part
    (scene units) and phi the rotational part (radians);
  * a left perturbation updates the camera frame, T' = exp(tau) @ T, and a
    right perturbation updates the object frame, T' = T @ exp(tau).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPi

# Below this angle the closed-form sin/cos coefficients lose precision and
# the truncated Taylor branches take over.
SMALL_ANGLE = 1e-8


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector, hat(v) @ x == cross(v, x)."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi) -> np.ndarray:
    """Rodrigues rotation for an axis-angle 3-vector."""
    phi = np.asarray(phi, dtype=float)
    w = hat(phi)
    w2 = w @ w
    angle = float(np.linalg.norm(phi))
    if angle < SMALL_ANGLE:
        return np.eye(3) + w + 0.5 * w2
    s = np.sin(angle) / angle
    c = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + s * w + c * w2


def so3_log(rotation) -> np.ndarray:
    """Axis-angle vector of a rotation matrix.

    Raises AngleNearPi when the angle is within the branch-cut guard of pi,
    where the axis sign is ambiguous.
    """
    rotation = np.asarray(rotation, dtype=float)
    trace = float(np.trace(rotation))
    if trace <= -1.0 + 1e-6:
        raise AngleNearPi("rotation angle too close to pi for a stable log")
    cos_angle = min(1.0, max(-1.0, 0.5 * (trace - 1.0)))
    angle = float(np.arccos(cos_angle))
    skew_part = 0.5 * np.array(
        [
            rotation[2, 1] - rotation[1, 2],
            rotation[0, 2] - rotation[2, 0],
            rotation[1, 0] - rotation[0, 1],
        ]
    )
    if angle < SMALL_ANGLE:
        return skew_part
    return (angle / np.sin(angle)) * skew_part


def so3_left_jacobian(phi) -> np.ndarray:
    """V(phi) coupling rotation and translation in the SE(3) exponential."""
    phi = np.asarray(phi, dtype=float)
    w = hat(phi)
    angle = float(np.linalg.norm(phi))
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * w
    a2 = angle * angle
    c1 = (1.0 - np.cos(angle)) / a2
    c2 = (angle - np.sin(angle)) / (a2 * angle)
    return np.eye(3) + c1 * w + c2 * (w @ w)


@dataclass
class Tangent:
    """se(3) element as [rho; phi]: rho translational, phi rotational."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float).reshape(3)
        self.phi = np.asarray(self.phi, dtype=float).reshape(3)

    @classmethod
    def zero(cls) -> "Tangent":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, tau) -> "Tangent":
        tau = np.asarray(tau, dtype=float).reshape(6)
        return cls(tau[:3], tau[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])


@dataclass
class Pose:
    """Rigid transform: rotation (3x3) plus translation (3,)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """Transform chaining: (self @ other) applied to p = self(other(p))."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Map one point (3,) or many (N,3) through the transform."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def camera_center(self) -> np.ndarray:
        """Origin of the camera frame expressed in object coordinates."""
        return -self.rotation.T @ self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (
            np.all(np.abs(r.T @ r - np.eye(3)) <= tol)
            and abs(np.linalg.det(r) - 1.0) <= tol
            and bool(np.all(np.isfinite(self.translation)))
        )

    def to_json_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.reshape(9)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "Pose":
        return cls(
            np.array(data["rotation"], dtype=float).reshape(3, 3),
            np.array(data["translation"], dtype=float).reshape(3),
        )

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load_json(cls, path) -> "Pose":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def se3_exp(tau: Tangent) -> Pose:
    """Exponential map se(3) -> SE(3) with the exact V(phi) coupling."""
    rotation = so3_exp(tau.phi)
    translation = so3_left_jacobian(tau.phi) @ tau.rho
    return Pose(rotation, translation)


def se3_log(pose: Pose) -> Tangent:
    """Inverse of se3_exp; raises AngleNearPi near the branch cut."""
    phi = so3_log(pose.rotation)
    rho = np.linalg.solve(so3_left_jacobian(phi), pose.translation)
    return Tangent(rho, phi)


def apply_left_perturbation(tau: Tangent, pose: Pose) -> Pose:
    """Camera-frame update exp(tau) @ pose."""
    return se3_exp(tau).compose(pose)


def apply_right_perturbation(tau: Tangent, pose: Pose) -> Pose:
    """Object-frame update pose @ exp(tau)."""
    return pose.compose(se3_exp(tau))


def adjoint(pose: Pose) -> np.ndarray:
    """6x6 adjoint satisfying pose @ exp(tau) == exp(Ad @ tau) @ pose."""
    ad = np.zeros((6, 6))
    ad[:3, :3] = pose.rotation
    ad[:3, 3:] = hat(pose.translation) @ pose.rotation
    ad[3:, 3:] = pose.rotation
    return ad


def point_jacobian_left(p_c) -> np.ndarray:
    """d(exp(tau) @ p_c)/d tau at tau = 0, columns ordered [rho; phi]."""
    p_c = np.asarray(p_c, dtype=float)
    jac = np.zeros((3, 6))
    jac[:, :3] = np.eye(3)
    jac[:, 3:] = -hat(p_c)
    return jac


def point_jacobian_right(pose: Pose, p_m) -> np.ndarray:
    """d(pose @ exp(tau) @ p_m)/d tau at tau = 0, columns [rho; phi]."""
    p_m = np.asarray(p_m, dtype=float)
    jac = np.zeros((3, 6))
    jac[:, :3] = pose.rotation
    jac[:, 3:] = -pose.rotation @ hat(p_m)
    return jac
