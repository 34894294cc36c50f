"""SE(3) pose algebra and pinhole projection.

Twists are ordered (rotation, translation) throughout the package, and pose
perturbations are applied on the right: ``x (+) d = x o exp(d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

SMALL_ANGLE = 1e-6
Z_MIN = 0.05


class BranchCutError(ValueError):
    """Rotation angle at pi: the logarithm is not unique."""


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        return se3_compose(self, other)

    def inverse(self) -> "Pose":
        return se3_inverse(self)

    def transform(self, point) -> np.ndarray:
        """Map a point from this pose's local frame into the parent frame."""
        return self.rotation @ np.asarray(point, dtype=float) + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (
            bool(np.all(np.isfinite(r)) and np.all(np.isfinite(self.translation)))
            and np.abs(r.T @ r - np.eye(3)).max() <= tol
            and np.linalg.det(r) > 0
        )

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )

    def __repr__(self):
        return f"Pose(t={np.round(self.translation, 4).tolist()}, rotvec={np.round(so3_log(self.rotation), 4).tolist()})"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


def se3_compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def se3_inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    k = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * k @ k
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * k @ k


def so3_log(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    s = vee(r - r.T) / 2.0  # sin(theta) * axis
    c = (np.trace(r) - 1.0) / 2.0
    sin_theta = np.linalg.norm(s)
    theta = np.arctan2(sin_theta, c)
    if theta < SMALL_ANGLE:
        return s * (1.0 + theta**2 / 6.0)
    if np.pi - theta < 1e-12:
        raise BranchCutError("rotation angle is pi; logarithm is ambiguous")
    if theta < np.pi - 1e-2:
        return s * (theta / sin_theta)
    # near pi the antisymmetric part vanishes; recover the axis from the symmetric part
    b = (r + r.T) / 2.0 - c * np.eye(3)
    i = int(np.argmax(np.diag(b)))
    axis = b[:, i] / np.sqrt(b[i, i] * (1.0 - c))
    axis /= np.linalg.norm(axis)
    if axis @ s < 0:
        axis = -axis
    return axis * theta


def _left_jacobian_so3(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    k = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + k @ k / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * k
        + (theta - np.sin(theta)) / theta**3 * k @ k
    )


def _left_jacobian_so3_inv(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    k = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + k @ k / 12.0
    half = theta / 2.0
    coef = (1.0 - half / np.tan(half)) / theta**2
    return np.eye(3) - 0.5 * k + coef * k @ k


def se3_exp(twist) -> Pose:
    twist = np.asarray(twist, dtype=float).reshape(6)
    w, v = twist[:3], twist[3:]
    return Pose(so3_exp(w), _left_jacobian_so3(w) @ v)


def se3_log(p: Pose) -> np.ndarray:
    w = so3_log(p.rotation)
    v = _left_jacobian_so3_inv(w) @ p.translation
    return np.concatenate([w, v])


def transform_to_frame(p: Pose, point_world) -> np.ndarray:
    """Express a world point in the frame of ``p``: R^T (point - t)."""
    return p.rotation.T @ (np.asarray(point_world, dtype=float) - p.translation)


def project_pinhole(k: CameraIntrinsics, point_cam, z_min: float = Z_MIN):
    """Pixel coordinates of a camera-frame point, or None when it is behind the camera."""
    x, y, z = np.asarray(point_cam, dtype=float)
    if z <= z_min:
        return None
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])


def back_project(k: CameraIntrinsics, pixel, depth: float) -> np.ndarray:
    u, v = pixel
    return np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])


# -- Lie-group Jacobians used by the optimizer ---------------------------------


def adjoint(p: Pose) -> np.ndarray:
    """Adjoint of ``p`` acting on (rotation, translation) twists."""
    ad = np.zeros((6, 6))
    ad[:3, :3] = p.rotation
    ad[3:, 3:] = p.rotation
    ad[3:, :3] = skew(p.translation) @ p.rotation
    return ad


def ad_matrix(twist) -> np.ndarray:
    twist = np.asarray(twist, dtype=float)
    m = np.zeros((6, 6))
    m[:3, :3] = skew(twist[:3])
    m[3:, 3:] = skew(twist[:3])
    m[3:, :3] = skew(twist[3:])
    return m


def se3_left_jacobian(twist) -> np.ndarray:
    """sum_n ad^n / (n+1)!, read off the exponential of an augmented block matrix."""
    block = np.zeros((12, 12))
    block[:6, :6] = ad_matrix(twist)
    block[:6, 6:] = np.eye(6)
    return expm(block)[:6, 6:]


def _se3_q(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Lower-left block of the SE(3) left Jacobian."""
    theta = np.linalg.norm(w)
    W, V = skew(w), skew(v)
    WV, VW, WVW = W @ V, V @ W, W @ V @ W
    if theta < 1e-3:
        c1, c2, c3 = 1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0
    else:
        t2 = theta * theta
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / (t2 * theta)
        c2 = (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta)
    return (
        0.5 * V
        + c1 * (WV + VW + WVW)
        + c2 * (W @ WV + VW @ W - 3.0 * WVW)
        + c3 * (WVW @ W + W @ WVW)
    )


def se3_left_jacobian_inv(twist) -> np.ndarray:
    twist = np.asarray(twist, dtype=float)
    w, v = twist[:3], twist[3:]
    j_inv = _left_jacobian_so3_inv(w)
    out = np.zeros((6, 6))
    out[:3, :3] = j_inv
    out[3:, 3:] = j_inv
    out[3:, :3] = -j_inv @ _se3_q(w, v) @ j_inv
    return out


def se3_right_jacobian_inv(twist) -> np.ndarray:
    """Inverse right Jacobian: log(exp(x) exp(d)) ~= x + Jr^-1(x) d."""
    return se3_left_jacobian_inv(-np.asarray(twist, dtype=float))


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


_CORNER_SIGNS = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)


def project_box(center, extent, pose: Pose, k: CameraIntrinsics, z_min: float = Z_MIN):
    """Pixel hull (u0, v0, u1, v1) of a world axis-aligned box seen from ``pose``.

    Returns None when the box center is not in front of the camera. Corners
    behind the near plane are skipped. The hull is not clipped to the image.
    """
    center = np.asarray(center, dtype=float)
    c_cam = transform_to_frame(pose, center)
    if c_cam[2] <= z_min:
        return None
    corners = center + 0.5 * _CORNER_SIGNS * np.asarray(extent, dtype=float)
    cam = (corners - pose.translation) @ pose.rotation
    cam = cam[cam[:, 2] > z_min]
    cam = np.vstack([cam, c_cam])
    u = k.fx * cam[:, 0] / cam[:, 2] + k.cx
    v = k.fy * cam[:, 1] / cam[:, 2] + k.cy
    return (float(u.min()), float(v.min()), float(u.max()), float(v.max()))


def clip_box(box, k: CameraIntrinsics):
    """Clip a pixel box to the image; None when it lies fully outside."""
    u0, v0, u1, v1 = box
    if u1 <= 0 or v1 <= 0 or u0 >= k.width or v0 >= k.height:
        return None
    return (max(u0, 0.0), max(v0, 0.0), min(u1, float(k.width)), min(v1, float(k.height)))
