"""Camera model and SE(3)/SO(3) arithmetic used by every other module.

Conventions, fixed once here and relied on everywhere:

* Rotations are 3x3 orthonormal matrices; translations are 3-vectors in
  meters. A ``PoseSE3`` is the placement of a camera in its parent frame:
  ``p_parent = R @ p_cam + t``.
* Twists are 6-vectors ``[rho, phi]`` with the translational part first,
  so ``se3_exp([0, 0, 0, pi/2, 0, 0])`` is a pure 90 degree rotation
  about the x-axis.
* Pixels are (u, v) with u along columns (x-right) and v along rows
  (y-down); depth is the camera-frame z coordinate in meters.
* Covariances are 3x3, symmetric PSD, ordered (x, y, z).

All functions are pure and never mutate their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this rotation angle the closed-form exp/log coefficients are
# replaced by their series expansions to avoid catastrophic cancellation.
_SMALL_ANGLE = 1e-4
# so3_log is undefined (axis ambiguous) this close to pi.
_MAX_LOG_ANGLE = np.pi - 1e-6


@dataclass(frozen=True)
class StereoCamera:
    """Pinhole intrinsics plus stereo baseline.

    fx, fy, cx, cy are in pixels, baseline in meters, width/height in
    pixels.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (self.baseline > 0):
            raise ValueError(f"baseline must be positive, got {self.baseline}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )


def skew(v) -> np.ndarray:
    """3x3 skew-symmetric matrix such that skew(a) @ b == cross(a, b)."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi) -> np.ndarray:
    """Rodrigues formula: axis-angle 3-vector to rotation matrix."""
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    k = skew(phi)
    kk = k @ k
    if theta < _SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 * (1.0 - theta2 / 12.0)
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * k + b * kk


def so3_log(rotation) -> np.ndarray:
    """Axis-angle 3-vector of a rotation matrix.

    Raises ValueError when the rotation angle is within 1e-6 of pi, where
    the axis is not recoverable from the skew part.
    """
    r = np.asarray(rotation, dtype=float)
    # 0.5 * vee(R - R^T) == sin(theta) * axis
    w = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = float(np.linalg.norm(w))
    c = float(np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0))
    theta = float(np.arctan2(s, c))
    if theta >= _MAX_LOG_ANGLE:
        raise ValueError(f"rotation angle {theta:.9f} too close to pi for a stable log")
    if theta < 1e-7:
        # second-order fallback of theta/sin(theta)
        return w * (1.0 + theta * theta / 6.0)
    return w * (theta / s)


def _left_jacobian(phi) -> np.ndarray:
    """V(phi) relating the twist translation to the group translation."""
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    k = skew(phi)
    kk = k @ k
    if theta < _SMALL_ANGLE:
        a = 0.5 * (1.0 - theta2 / 12.0)
        b = (1.0 - theta2 / 20.0) / 6.0
    else:
        a = (1.0 - np.cos(theta)) / theta2
        b = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + a * k + b * kk


def _left_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    k = skew(phi)
    kk = k @ k
    if theta < _SMALL_ANGLE:
        b = (1.0 + theta2 / 60.0) / 12.0
    else:
        b = (1.0 - 0.5 * theta * np.sin(theta) / (1.0 - np.cos(theta))) / theta2
    return np.eye(3) - 0.5 * k + b * kk


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform: ``apply(p) = rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self after other: compose(A, B).apply(p) == A.apply(B.apply(p))."""
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform one (3,) point or a stack (N, 3) of points."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def orthonormalized(self) -> "PoseSE3":
        """Project the rotation onto SO(3) (nearest orthonormal matrix).

        Long chains of compositions compound each factor's rounding error
        multiplicatively; re-projecting once per chain link keeps the
        drift bounded.
        """
        u, _, vt = np.linalg.svd(self.rotation)
        r = u @ vt
        if np.linalg.det(r) < 0:
            r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
        return PoseSE3(r, self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m) -> "PoseSE3":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        return PoseSE3(m[:3, :3], m[:3, 3])


def se3_exp(xi) -> PoseSE3:
    """Twist [rho, phi] to pose; exp(0) is the identity."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    return PoseSE3(so3_exp(phi), _left_jacobian(phi) @ rho)


def se3_log(pose: PoseSE3) -> np.ndarray:
    """Inverse of se3_exp; requires the rotation angle to be below pi."""
    phi = so3_log(pose.rotation)
    rho = _left_jacobian_inv(phi) @ pose.translation
    return np.concatenate([rho, phi])


def rotation_angle(rotation) -> float:
    """Geodesic angle of a rotation matrix, in radians.

    atan2 of the skew/trace parts stays accurate for tiny angles where
    an arccos of the trace would bottom out near sqrt(eps).
    """
    r = np.asarray(rotation, dtype=float)
    s = 0.5 * np.linalg.norm(
        [r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]
    )
    c = 0.5 * (np.trace(r) - 1.0)
    return float(np.arctan2(s, c))


def psd_within_sym3(c: np.ndarray, tol: float = 1e-10) -> bool:
    """True when a symmetric 3x3 matrix has no eigenvalue below -tol.

    Hand-rolled Cholesky of C + ridge*I (succeeds iff PD); orders of
    magnitude cheaper than a LAPACK call for the hot per-landmark path.
    """
    flat = c.ravel()
    a00, a11, a22 = float(flat[0]), float(flat[4]), float(flat[8])
    a01, a02, a12 = float(flat[1]), float(flat[2]), float(flat[5])
    ridge = tol + 1e-14 * max(abs(a00), abs(a11), abs(a22))
    d0 = a00 + ridge
    if d0 <= 0.0:
        return False
    l10 = a01 / math.sqrt(d0)
    l20 = a02 / math.sqrt(d0)
    d1 = a11 + ridge - l10 * l10
    if d1 <= 0.0:
        return False
    l21 = (a12 - l20 * l10) / math.sqrt(d1)
    d2 = a22 + ridge - l20 * l20 - l21 * l21
    return d2 > 0.0


@dataclass(frozen=True)
class Landmark3D:
    """3D point with a full covariance, tagged with its frame.

    position is [x, y, z] in meters, covariance 3x3 in meters^2 ordered
    (x, y, z), frame either "camera" or "world".
    """

    position: np.ndarray
    covariance: np.ndarray
    frame: str = "camera"

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        c = np.asarray(self.covariance, dtype=float)
        if c.shape != (3, 3):
            raise ValueError(f"covariance must be 3x3, got {c.shape}")
        if np.max(np.abs(c - c.T)) > 1e-12:
            raise ValueError("covariance is not symmetric within 1e-12")
        if not psd_within_sym3(c):
            raise ValueError("covariance has an eigenvalue below -1e-10")
        if self.frame not in ("camera", "world"):
            raise ValueError(f"frame must be 'camera' or 'world', got {self.frame!r}")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "covariance", c)


def backproject(cam: StereoCamera, u: float, v: float, d: float) -> np.ndarray:
    """Pixel (u, v) with depth d to a camera-frame point [x, y, z]."""
    if not d > 0:
        raise ValueError(f"depth must be positive, got {d}")
    return np.array([(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d])


def project(cam: StereoCamera, point) -> tuple[float, float, float]:
    """Camera-frame point to (u, v, depth); requires z > 0."""
    x, y, z = np.asarray(point, dtype=float)
    if not z > 0:
        raise ValueError(f"point is not in front of the camera, z={z}")
    return (cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, z)


def transform_landmark(pose: PoseSE3, landmark: Landmark3D) -> Landmark3D:
    """Move a camera-frame landmark into the world frame.

    The covariance is conjugated by the rotation (a similarity transform,
    so eigenvalues and PSD-ness are preserved).
    """
    if landmark.frame != "camera":
        raise ValueError(f"expected a camera-frame landmark, got frame {landmark.frame!r}")
    cov = pose.rotation @ landmark.covariance @ pose.rotation.T
    cov = 0.5 * (cov + cov.T)
    return Landmark3D(pose.apply(landmark.position), cov, frame="world")
