"""SE(3) rigid transforms, Lie exp/log maps and error-vector conventions.

Conventions used everywhere in the package:

* A :class:`Pose` ``T = (R, t)`` maps points of its child frame into its
  parent frame, ``p_parent = R p_child + t``.
* Twists are ordered ``(rho, phi)``: translational part first, rotation
  vector second.
* Error vectors are ``(tx, ty, tz, roll, pitch, yaw)`` with intrinsic
  X-Y'-Z'' Tait-Bryan angles, i.e. ``R = Rx(roll) @ Ry(pitch) @ Rz(yaw)``.
  In the camera frame (z forward) yaw is the rotation about the optical axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import GimbalLock, NearPiRotation

ORTHO_TOL = 1e-9
REORTHO_TOL = 1e-12
NEAR_PI_TOL = 1e-6
GIMBAL_TOL = 1e-6
SMALL_ANGLE = 1e-8


def _project_to_so3(R):
    u, _, vt = np.linalg.svd(R)
    Rn = u @ vt
    if np.linalg.det(Rn) < 0:
        u[:, -1] *= -1
        Rn = u @ vt
    return Rn


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform in SE(3)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"bad pose shapes {R.shape}, {t.shape}")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_translation(cls, t):
        return cls(np.eye(3), t)

    @classmethod
    def from_rotation(cls, R):
        return cls(R, np.zeros(3))

    def as_matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def is_valid(self, tol=ORTHO_TOL):
        R = self.rotation
        return (
            np.linalg.norm(R.T @ R - np.eye(3)) < tol
            and abs(np.linalg.det(R) - 1.0) < tol
            and np.all(np.isfinite(self.translation))
        )

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def rot_x(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def vee(S):
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def compose(a: Pose, b: Pose) -> Pose:
    R = a.rotation @ b.rotation
    if np.linalg.norm(R.T @ R - np.eye(3)) > REORTHO_TOL:
        R = _project_to_so3(R)
    return Pose(R, a.rotation @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    Rt = a.rotation.T
    return Pose(Rt, -Rt @ a.translation)


def relative(a: Pose, b: Pose) -> Pose:
    """``inverse(a) @ b``: the pose of ``b`` expressed in the frame of ``a``."""
    return compose(inverse(a), b)


def vo_error(gt: Pose, est: Pose) -> Pose:
    """Left error ``gt @ inverse(est)`` of an estimated relative transform."""
    return compose(gt, inverse(est))


def correction_target(gt: Pose, est: Pose) -> Pose:
    """Right error ``inverse(est) @ gt``; composing it after ``est`` yields ``gt``."""
    return compose(inverse(est), gt)


def apply_correction(vo: Pose, corr: Pose) -> Pose:
    """Correct a VO increment: the estimate first, then the correction."""
    return compose(vo, corr)


# --- SO(3) / SE(3) series coefficients ------------------------------------
# All take theta >= 0 and switch to Taylor expansions where the closed form
# loses precision.


def _sinc(theta):
    if theta < 1e-4:
        t2 = theta * theta
        return 1.0 - t2 / 6.0 + t2 * t2 / 120.0
    return math.sin(theta) / theta


def _one_minus_cos_over_t2(theta):
    if theta < 1e-4:
        t2 = theta * theta
        return 0.5 - t2 / 24.0 + t2 * t2 / 720.0
    s = math.sin(0.5 * theta)
    return 2.0 * s * s / (theta * theta)


def _t_minus_sin_over_t3(theta):
    if theta < 1e-3:
        t2 = theta * theta
        return 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    return (theta - math.sin(theta)) / theta**3


def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + _sinc(theta) * K + _one_minus_cos_over_t2(theta) * K @ K


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return np.eye(3) + _one_minus_cos_over_t2(theta) * K + _t_minus_sin_over_t3(theta) * K @ K


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-4:
        t2 = theta * theta
        coeff = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        half = 0.5 * theta
        coeff = (1.0 - half / math.tan(half)) / (theta * theta)
    return np.eye(3) - 0.5 * K + coeff * K @ K


def rotation_log(R):
    """Rotation vector of ``R`` on the branch ``|phi| < pi``."""
    cos_t = 0.5 * (np.trace(R) - 1.0)
    w = 0.5 * vee(R - R.T)  # sin(theta) * axis
    sin_t = float(np.linalg.norm(w))
    theta = math.atan2(sin_t, min(max(cos_t, -1.0), 1.0))
    if theta >= math.pi - NEAR_PI_TOL:
        raise NearPiRotation(f"rotation angle {theta!r} too close to pi")
    if theta < SMALL_ANGLE:
        # log(R) ~ vee((R - R^T) / 2) to second order
        return w
    if theta < 0.5 * math.pi:
        return (theta / sin_t) * w
    # Near pi the antisymmetric part is tiny; take the axis from the symmetric part.
    B = 0.5 * (R + R.T) - cos_t * np.eye(3)  # (1 - cos) * axis axis^T
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / math.sqrt(B[k, k] * (1.0 - cos_t))
    axis /= np.linalg.norm(axis)
    if axis @ w < 0:
        axis = -axis
    return theta * axis


def exp_map(xi) -> Pose:
    """SE(3) exponential of a twist ``(rho, phi)``."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def log_map(a: Pose) -> np.ndarray:
    """SE(3) logarithm as a 6-vector ``(rho, phi)``.

    Raises :class:`NearPiRotation` when the rotation angle is within 1e-6 of pi.
    """
    phi = rotation_log(a.rotation)
    rho = so3_left_jacobian_inv(phi) @ a.translation
    return np.concatenate([rho, phi])


def adjoint(a: Pose) -> np.ndarray:
    """6x6 adjoint for ``(rho, phi)`` ordered twists."""
    R, t = a.rotation, a.translation
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = R
    Ad[:3, 3:] = skew(t) @ R
    Ad[3:, 3:] = R
    return Ad


def _q_matrix(rho, phi):
    # Coupling block of the SE(3) left Jacobian.
    theta = float(np.linalg.norm(phi))
    P, Q = skew(phi), skew(rho)
    if theta < 1e-3:
        t2 = theta * theta
        a = 1.0 / 6.0 - t2 / 120.0
        b = 1.0 / 24.0 - t2 / 720.0
        c = 1.0 / 120.0 - t2 / 2520.0
    else:
        t2 = theta * theta
        a = (theta - math.sin(theta)) / (t2 * theta)
        b = (t2 + 2.0 * math.cos(theta) - 2.0) / (2.0 * t2 * t2)
        c = (2.0 * theta - 3.0 * math.sin(theta) + theta * math.cos(theta)) / (2.0 * t2 * t2 * theta)
    PQ = P @ Q
    QP = Q @ P
    PQP = PQ @ P
    return (
        0.5 * Q
        + a * (PQ + QP + PQP)
        + b * (P @ PQ + QP @ P - 3.0 * PQP)
        + c * (PQP @ P + P @ PQP)
    )


def se3_left_jacobian(xi):
    xi = np.asarray(xi, dtype=float)
    J = np.zeros((6, 6))
    Jl = so3_left_jacobian(xi[3:])
    J[:3, :3] = Jl
    J[3:, 3:] = Jl
    J[:3, 3:] = _q_matrix(xi[:3], xi[3:])
    return J


def se3_right_jacobian_inv(xi):
    """Inverse right Jacobian: ``log(exp(xi) exp(d)) ~ xi + Jr^-1(xi) d``."""
    xi = -np.asarray(xi, dtype=float)
    Jinv = so3_left_jacobian_inv(xi[3:])
    Q = _q_matrix(xi[:3], xi[3:])
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[:3, 3:] = -Jinv @ Q @ Jinv
    return out


# --- Tait-Bryan error vectors ---------------------------------------------


def euler_to_rotation(roll, pitch, yaw):
    return rot_x(roll) @ rot_y(pitch) @ rot_z(yaw)


def rotation_to_euler(R):
    """Intrinsic X-Y'-Z'' angles ``(roll, pitch, yaw)`` of ``R``."""
    sp = float(np.clip(R[0, 2], -1.0, 1.0))
    pitch = math.asin(sp)
    if abs(pitch) >= 0.5 * math.pi - GIMBAL_TOL:
        raise GimbalLock(f"pitch {pitch!r} within {GIMBAL_TOL} of +-pi/2")
    roll = math.atan2(-R[1, 2], R[2, 2])
    yaw = math.atan2(-R[0, 1], R[0, 0])
    return roll, pitch, yaw


def pose_to_error_vector(e: Pose) -> np.ndarray:
    return np.concatenate([e.translation, rotation_to_euler(e.rotation)])


def error_vector_to_pose(v) -> Pose:
    v = np.asarray(v, dtype=float)
    return Pose(euler_to_rotation(*v[3:6]), v[:3])


def rotation_angle(a: Pose) -> float:
    """Angle-axis magnitude of the rotation, in ``[0, pi]``."""
    R = a.rotation
    c = 0.5 * (np.trace(R) - 1.0)
    s = 0.5 * np.linalg.norm(vee(R - R.T))
    return math.atan2(s, c)


# --- quaternions (file serialization only) ---------------------------------


def rotation_to_quaternion(R):
    """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
    from scipy.spatial.transform import Rotation

    q = Rotation.from_matrix(R).as_quat()
    if q[3] < 0:
        q = -q
    return q


def quaternion_to_rotation(q):
    from scipy.spatial.transform import Rotation

    return Rotation.from_quat(np.asarray(q, dtype=float)).as_matrix()


# --- array helpers -----------------------------------------------------------


def integrate(relatives, start: Pose | None = None):
    """Cumulative composition ``X_{i+1} = X_i @ T_i`` starting at ``start``."""
    poses = [Pose.identity() if start is None else start]
    for T in relatives:
        poses.append(compose(poses[-1], T))
    return poses


def relatives_of(poses):
    """Consecutive relative transforms ``inverse(X_i) @ X_{i+1}``."""
    return [relative(a, b) for a, b in zip(poses[:-1], poses[1:])]


def translations(poses):
    return np.array([p.translation for p in poses])
