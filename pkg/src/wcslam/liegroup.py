"""SE(3)/SO(3) algebra.

Twists are ordered ``(omega, v)``: rotation first, then translation. Tangent
perturbations are applied on the left, ``T' = exp(xi) * T``, everywhere in the
package.

The :class:`Pose3` value type stores a unit quaternion ``(qx, qy, qz, qw)``
with ``qw >= 0`` plus a translation. The ``*_batch`` helpers work on stacked
rotation matrices and are what the factor code uses in its hot loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

# Taylor branch for exp/log V-matrix terms.
SMALL_ANGLE = 1e-8
# Taylor branch for the SE(3) Jacobian coefficients, which cancel much earlier.
JACOBIAN_SMALL_ANGLE = 1e-2
# log() refuses rotations this close to pi.
PI_MARGIN = 1e-6


class AngleNearPi(ValueError):
    """Rotation angle is within ``PI_MARGIN`` of pi; the log axis is ambiguous."""


# ---------------------------------------------------------------------------
# so(3) helpers
# ---------------------------------------------------------------------------


def skew(v: np.ndarray) -> np.ndarray:
    """Hat operator; accepts (3,) or (N, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def so3_exp_batch(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula for (N, 3) rotation vectors."""
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(th) / th)
    b = np.where(small, 0.5 - theta**2 / 24.0, 2.0 * (np.sin(0.5 * th) / th) ** 2)
    W = skew(omega)
    return np.eye(3) + a[:, None, None] * W + b[:, None, None] * (W @ W)


def so3_log_batch(R: np.ndarray) -> np.ndarray:
    """Rotation vectors for (N, 3, 3) matrices.

    Uses ``atan2`` on the skew and trace parts, which keeps full precision for
    tiny angles. Raises :class:`AngleNearPi` if any angle is too close to pi.
    """
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    a = 0.5 * vee(R - np.swapaxes(R, -1, -2))
    s = np.linalg.norm(a, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)
    if np.any(theta > math.pi - PI_MARGIN):
        raise AngleNearPi(f"rotation angle {float(theta.max()):.9f} is within {PI_MARGIN} of pi")
    small = s < SMALL_ANGLE
    scale = np.where(small, 1.0 + theta**2 / 6.0, theta / np.where(small, 1.0, s))
    return a * scale[:, None]


def _so3_coeffs(theta: np.ndarray):
    """Return sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 without cancellation."""
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(th) / th)
    b = np.where(small, 0.5 - theta**2 / 24.0, 2.0 * (np.sin(0.5 * th) / th) ** 2)
    # t - sin t cancels badly; the series is exact to roundoff below 1e-2
    mid = theta < JACOBIAN_SMALL_ANGLE
    thc = np.where(mid, 1.0, theta)
    t2 = theta**2
    c = np.where(mid, 1.0 / 6.0 - t2 / 120.0 + t2**2 / 5040.0, (thc - np.sin(thc)) / thc**3)
    return a, b, c


def so3_left_jacobian_batch(omega: np.ndarray) -> np.ndarray:
    omega = np.atleast_2d(omega)
    theta = np.linalg.norm(omega, axis=-1)
    _, b, c = _so3_coeffs(theta)
    W = skew(omega)
    return np.eye(3) + b[:, None, None] * W + c[:, None, None] * (W @ W)


def so3_left_jacobian_inv_batch(omega: np.ndarray) -> np.ndarray:
    omega = np.atleast_2d(omega)
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < JACOBIAN_SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    coef = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / th**2 - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th)),
    )
    W = skew(omega)
    return np.eye(3) - 0.5 * W + coef[:, None, None] * (W @ W)


# ---------------------------------------------------------------------------
# se(3) batch helpers
# ---------------------------------------------------------------------------


def se3_exp_batch(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(N, 6) twists -> (R (N,3,3), t (N,3))."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    omega, v = xi[:, :3], xi[:, 3:]
    R = so3_exp_batch(omega)
    V = so3_left_jacobian_batch(omega)
    return R, np.einsum("nij,nj->ni", V, v)


def se3_log_batch(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """(R, t) stacks -> (N, 6) twists."""
    omega = so3_log_batch(R)
    Vinv = so3_left_jacobian_inv_batch(omega)
    return np.concatenate([omega, np.einsum("nij,nj->ni", Vinv, np.atleast_2d(t))], axis=-1)


def _q_matrix(v: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Off-diagonal block of the SE(3) left Jacobian (translation/rotation coupling)."""
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < JACOBIAN_SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    t2 = theta**2
    c1 = np.where(small, 1.0 / 6.0 - t2 / 120.0, (th - np.sin(th)) / th**3)
    c2 = np.where(
        small, 1.0 / 24.0 - t2 / 720.0, (th**2 + 2.0 * np.cos(th) - 2.0) / (2.0 * th**4)
    )
    c3 = np.where(
        small,
        1.0 / 120.0 - t2 / 2520.0,
        (2.0 * th - 3.0 * np.sin(th) + th * np.cos(th)) / (2.0 * th**5),
    )
    P = skew(omega)
    V = skew(v)
    PV = P @ V
    VP = V @ P
    PVP = PV @ P
    PPV = P @ PV
    VPP = VP @ P
    return (
        0.5 * V
        + c1[:, None, None] * (PV + VP + PVP)
        + c2[:, None, None] * (PPV + VPP - 3.0 * PVP)
        + c3[:, None, None] * (PVP @ P + P @ PVP)
    )


def se3_left_jacobian_batch(xi: np.ndarray) -> np.ndarray:
    xi = np.atleast_2d(xi)
    omega, v = xi[:, :3], xi[:, 3:]
    J = so3_left_jacobian_batch(omega)
    out = np.zeros((xi.shape[0], 6, 6))
    out[:, :3, :3] = J
    out[:, 3:, 3:] = J
    out[:, 3:, :3] = _q_matrix(v, omega)
    return out


def se3_right_jacobian_inv_batch(xi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: ``log(exp(xi) exp(d)) ~ xi + Jr^-1(xi) d``."""
    xi = -np.atleast_2d(xi)
    omega, v = xi[:, :3], xi[:, 3:]
    Jinv = so3_left_jacobian_inv_batch(omega)
    Q = _q_matrix(v, omega)
    out = np.zeros((xi.shape[0], 6, 6))
    out[:, :3, :3] = Jinv
    out[:, 3:, 3:] = Jinv
    out[:, 3:, :3] = -Jinv @ Q @ Jinv
    return out


def adjoint_batch(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Adjoint in (omega, v) ordering: ``T exp(xi) T^-1 = exp(Ad_T xi)``."""
    R = R.reshape(-1, 3, 3)
    t = np.atleast_2d(t)
    out = np.zeros((R.shape[0], 6, 6))
    out[:, :3, :3] = R
    out[:, 3:, 3:] = R
    out[:, 3:, :3] = skew(t) @ R
    return out


def compose_batch(Ra, ta, Rb, tb):
    return Ra @ Rb, np.einsum("nij,nj->ni", Ra, tb) + ta


def inverse_batch(R, t):
    Rt = np.swapaxes(R, -1, -2)
    return Rt, -np.einsum("nij,nj->ni", Rt, t)


def transform_batch(R, t, p):
    return np.einsum("nij,nj->ni", R, p) + t


# ---------------------------------------------------------------------------
# Quaternion conversions
# ---------------------------------------------------------------------------


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns (x, y, z, w)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    return np.array(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # terms grouped so that q^-1 * q cancels exactly
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            (aw * bx + ax * bw) + (ay * bz - az * by),
            (aw * by + ay * bw) + (az * bx - ax * bz),
            (aw * bz + az * bw) + (ax * by - ay * bx),
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid transform. Holds camera poses, object poses and motions alike."""

    quat: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        q = np.array(self.quat, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and non-zero")
        q /= n
        if q[3] < 0.0:
            q = -q
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)

    # construction -----------------------------------------------------------
    @classmethod
    def identity(cls) -> Pose3:
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R: np.ndarray, t: Iterable[float]) -> Pose3:
        pose = cls(matrix_to_quat(R), np.asarray(t, dtype=float))
        return pose

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose3:
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @classmethod
    def from_list(cls, values: Sequence[float]) -> Pose3:
        """Parse ``[tx, ty, tz, qx, qy, qz, qw]``."""
        if len(values) != 7:
            raise ValueError(f"pose needs 7 numbers, got {len(values)}")
        return cls(np.asarray(values[3:], dtype=float), np.asarray(values[:3], dtype=float))

    def to_list(self) -> list[float]:
        return [float(x) for x in self.translation] + [float(x) for x in self.quat]

    # accessors ----------------------------------------------------------------
    @cached_property
    def rotation(self) -> np.ndarray:
        R = quat_to_matrix(self.quat)
        R.setflags(write=False)
        return R

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        return 2.0 * math.atan2(float(np.linalg.norm(self.quat[:3])), float(self.quat[3]))

    # group operations -------------------------------------------------------
    def compose(self, other: Pose3) -> Pose3:
        return Pose3(
            quat_multiply(self.quat, other.quat),
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> Pose3:
        q = self.quat * np.array([-1.0, -1.0, -1.0, 1.0])
        return Pose3(q, -(self.rotation.T @ self.translation))

    def between(self, other: Pose3) -> Pose3:
        """``self^-1 * other``.

        Evaluated as ``R^T (t_other - t)`` so that equal poses give an exact identity.
        """
        q = self.quat * np.array([-1.0, -1.0, -1.0, 1.0])
        return Pose3(quat_multiply(q, other.quat), self.rotation.T @ (other.translation - self.translation))

    def transform_point(self, p: np.ndarray) -> np.ndarray:
        """Apply to a (3,) point or an (N, 3) array of points."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.translation

    def __repr__(self) -> str:
        t = ", ".join(f"{x:.6g}" for x in self.translation)
        q = ", ".join(f"{x:.6g}" for x in self.quat)
        return f"Pose3(t=[{t}], q=[{q}])"

    def allclose(self, other: Pose3, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0.0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0.0)
        )


def se3_exp(xi: Sequence[float]) -> Pose3:
    """Exponential map from an ``(omega, v)`` twist."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ValueError("twist must be finite")
    omega, v = xi[:3], xi[3:]
    theta = float(np.linalg.norm(omega))
    if theta < SMALL_ANGLE:
        q = np.array([0.5 * omega[0], 0.5 * omega[1], 0.5 * omega[2], 1.0])
    else:
        half = 0.5 * theta
        q = np.concatenate([math.sin(half) * omega / theta, [math.cos(half)]])
    V = so3_left_jacobian_batch(omega[None])[0]
    return Pose3(q, V @ v)


def se3_log(pose: Pose3) -> np.ndarray:
    """Logarithm map to an ``(omega, v)`` twist on the principal branch."""
    qv = pose.quat[:3]
    s = float(np.linalg.norm(qv))
    theta = 2.0 * math.atan2(s, float(pose.quat[3]))
    if theta > math.pi - PI_MARGIN:
        raise AngleNearPi(f"rotation angle {theta:.9f} is within {PI_MARGIN} of pi")
    if s < 0.5 * SMALL_ANGLE:
        omega = 2.0 * qv / pose.quat[3]
    else:
        omega = theta * qv / s
    Vinv = so3_left_jacobian_inv_batch(omega[None])[0]
    return np.concatenate([omega, Vinv @ pose.translation])


def frame_change_motion(local_motion: Pose3, anchor: Pose3) -> Pose3:
    """Express a body-frame motion in the anchor's parent frame: ``A * H_local * A^-1``."""
    return anchor.compose(local_motion).compose(anchor.inverse())


def apply_motion_to_point(h_world: Pose3, m_prev: np.ndarray) -> np.ndarray:
    """Move world-frame point(s) by an absolute motion."""
    return h_world.transform_point(m_prev)


def poses_to_arrays(poses: Sequence[Pose3]) -> tuple[np.ndarray, np.ndarray]:
    if len(poses) == 0:
        return np.zeros((0, 3, 3)), np.zeros((0, 3))
    R = np.stack([p.rotation for p in poses])
    t = np.stack([p.translation for p in poses])
    return R, t


def rotation_angle(R: np.ndarray) -> np.ndarray:
    """Angle of (N, 3, 3) rotations in [0, pi].

    Same value as ``arccos((trace(R) - 1) / 2)`` clamped to [-1, 1], computed
    with atan2 so that tiny angles keep full precision.
    """
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    s = np.linalg.norm(0.5 * vee(R - np.swapaxes(R, -1, -2)), axis=-1)
    c = np.clip(0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    return np.arctan2(s, c)


def fit_rigid_transform(src: np.ndarray, dst: np.ndarray) -> Pose3:
    """Least-squares rigid T with ``dst ~ T src`` (Kabsch/Umeyama, scale 1)."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return Pose3.from_rt(R, mu_d - R @ mu_s)
