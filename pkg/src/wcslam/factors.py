"""Residuals and analytic Jacobians for every factor in the estimators.

Each factor class evaluates a whole stack of same-type factors at once through
``evaluate_batch``. Pose variables are passed as ``(R, t)`` stacks and
perturbed on the left (``exp(xi) * T``); vector variables (points, flows) are
plain ``(N, dim)`` arrays. Twist residuals are ordered rotation first.

The module-level ``*_residual`` functions are the single-instance versions and
return ``(residual, [jacobian per connected variable])``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import ClassVar, Hashable, NamedTuple, Sequence

import numpy as np

from .camera import CameraModel, project_batch, projection_jacobian
from .liegroup import (
    Pose3,
    adjoint_batch,
    compose_batch,
    inverse_batch,
    se3_log_batch,
    se3_right_jacobian_inv_batch,
    skew,
)

DEFAULT_HUBER = 1.345


class NonPSDCovariance(ValueError):
    """Covariance is not symmetric positive-definite."""


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Gaussian noise with an optional Huber kernel on the Mahalanobis norm."""

    covariance: np.ndarray
    huber: float | None = None

    def __post_init__(self) -> None:
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape[0] != cov.shape[1] or np.abs(cov - cov.T).max() > 1e-12 * max(1.0, np.abs(cov).max()):
            raise NonPSDCovariance("covariance must be a symmetric square matrix")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NonPSDCovariance("covariance is not positive-definite") from exc
        if self.huber is not None and not self.huber > 0:
            raise ValueError("Huber threshold must be positive")
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def isotropic(cls, dim: int, sigma: float, huber: float | None = None) -> NoiseModel:
        return cls(np.eye(dim) * sigma**2, huber)

    @classmethod
    def diagonal(cls, sigmas: Sequence[float], huber: float | None = None) -> NoiseModel:
        return cls(np.diag(np.asarray(sigmas, dtype=float) ** 2), huber)

    @classmethod
    def twist(cls, sigma_rot: float, sigma_trans: float, huber: float | None = None) -> NoiseModel:
        return cls.diagonal([sigma_rot] * 3 + [sigma_trans] * 3, huber)

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    @cached_property
    def sqrt_information(self) -> np.ndarray:
        """W with W^T W = covariance^-1."""
        return np.linalg.inv(self._chol)

    def whiten(self, r: np.ndarray) -> np.ndarray:
        return self.sqrt_information @ np.asarray(r, dtype=float)

    def mahalanobis(self, r: np.ndarray) -> float:
        return float(np.linalg.norm(self.whiten(r)))


class VariableKind:
    CAMERA_POSE = "X"
    OBJECT_MOTION = "H"
    OBJECT_POSE = "L"
    POINT = "m"
    FLOW = "f"
    ALL = ("X", "H", "L", "m", "f")


class VariableKey(NamedTuple):
    """Graph variable id. ``frame``/``obj``/``track`` are -1 when not applicable.

    A plain tuple so hashing stays cheap in large graphs; build keys with
    :func:`X`, :func:`H`, :func:`L`, :func:`M`, :func:`F` which validate them.
    """

    kind: str
    frame: int = -1
    obj: int = -1
    track: int = -1

    def __str__(self) -> str:
        parts = [self.kind]
        if self.obj >= 0:
            parts.append(f"j{self.obj}")
        if self.track >= 0:
            parts.append(f"i{self.track}")
        if self.frame >= 0:
            parts.append(f"k{self.frame}")
        return "_".join(parts)


def _check_ids(**ids: int) -> None:
    for name, v in ids.items():
        if int(v) < 0:
            raise ValueError(f"{name} must be non-negative, got {v}")


def X(k: int) -> VariableKey:
    _check_ids(frame=k)
    return VariableKey(VariableKind.CAMERA_POSE, int(k))


def H(j: int, k: int) -> VariableKey:
    """Motion of object j from k-1 to k."""
    _check_ids(frame=k, obj=j)
    return VariableKey(VariableKind.OBJECT_MOTION, int(k), int(j))


def L(j: int, k: int) -> VariableKey:
    _check_ids(frame=k, obj=j)
    return VariableKey(VariableKind.OBJECT_POSE, int(k), int(j))


def M(i: int, k: int = -1) -> VariableKey:
    """Point of tracklet i; ``k`` set for per-frame dynamic points."""
    _check_ids(track=i)
    return VariableKey(VariableKind.POINT, int(k), -1, int(i))


def F(i: int, k: int) -> VariableKey:
    _check_ids(frame=k, track=i)
    return VariableKey(VariableKind.FLOW, int(k), -1, int(i))


# ---------------------------------------------------------------------------
# Factor base
# ---------------------------------------------------------------------------


class Factor:
    """A residual over ``keys`` with a noise model.

    ``slots`` names the manifold of each connected variable (``"pose"`` or
    ``"vector"``) and ``dims`` its tangent size. Subclasses implement ``evaluate_batch`` and ``data``.
    """

    slots: ClassVar[tuple[str, ...]] = ()
    # tangent dimension of each connected variable
    dims: tuple[int, ...] = ()
    dim: int = 0

    def __init__(self, keys: Sequence[Hashable], noise: NoiseModel) -> None:
        if len(keys) != len(self.slots):
            raise ValueError(f"{type(self).__name__} expects {len(self.slots)} keys")
        if noise.dim != self.dim:
            raise ValueError(f"{type(self).__name__} noise dim {noise.dim} != residual dim {self.dim}")
        self.keys = tuple(keys)
        self.noise = noise

    def data(self) -> tuple[np.ndarray, ...]:
        return ()

    @classmethod
    def evaluate_batch(cls, values: list, data: list[np.ndarray]):
        raise NotImplementedError

    def evaluate(self, values: Sequence) -> tuple[np.ndarray, list[np.ndarray]]:
        """Evaluate with explicit per-slot values (Pose3 or arrays)."""
        batch = []
        for slot, v in zip(self.slots, values):
            if slot == "pose":
                batch.append((v.rotation[None], v.translation[None]))
            else:
                batch.append(np.asarray(v, dtype=float)[None])
        data = [np.asarray(d)[None] for d in self.data()]
        r, jacs = self.evaluate_batch(batch, data)
        return r[0], [J[0] for J in jacs]

    def __repr__(self) -> str:
        keys = ", ".join(str(k) for k in self.keys)
        return f"{type(self).__name__}({keys})"


def _log_residual(R: np.ndarray, t: np.ndarray):
    r = se3_log_batch(R, t)
    return r, se3_right_jacobian_inv_batch(r)


class PriorFactor(Factor):
    """r = log(value * prior^-1); the Jacobian is the identity at the prior."""

    slots = ("pose",)
    dims = (6,)
    dim = 6

    def __init__(self, key, prior: Pose3, noise: NoiseModel) -> None:
        super().__init__((key,), noise)
        self.prior = prior

    def data(self):
        return (self.prior.rotation, self.prior.translation)

    @classmethod
    def evaluate_batch(cls, values, data):
        (R, t), = values
        Rp, tp = data
        E = compose_batch(R, t, *inverse_batch(Rp, tp))
        r, Jinv = _log_residual(*E)
        return r, [Jinv @ adjoint_batch(*inverse_batch(*E))]


class BetweenFactor(Factor):
    """Odometry: r = log(T^-1 * X_prev^-1 * X_curr)."""

    slots = ("pose", "pose")
    dims = (6, 6)
    dim = 6

    def __init__(self, key_prev, key_curr, measured: Pose3, noise: NoiseModel) -> None:
        super().__init__((key_prev, key_curr), noise)
        self.measured = measured

    def data(self):
        return (self.measured.rotation, self.measured.translation)

    @classmethod
    def evaluate_batch(cls, values, data):
        (Ra, ta), (Rb, tb) = values
        Rm, tm = data
        E = compose_batch(*inverse_batch(Rm, tm), *compose_batch(*inverse_batch(Ra, ta), Rb, tb))
        r, Jinv = _log_residual(*E)
        Jb = Jinv @ adjoint_batch(*inverse_batch(Rb, tb))
        return r, [-Jb, Jb]


class MotionSmoothingFactor(Factor):
    """Constant-motion prior: r = log(H_prev^-1 * H_curr)."""

    slots = ("pose", "pose")
    dims = (6, 6)
    dim = 6

    def __init__(self, key_prev, key_curr, noise: NoiseModel) -> None:
        super().__init__((key_prev, key_curr), noise)

    @classmethod
    def evaluate_batch(cls, values, data):
        (Ra, ta), (Rb, tb) = values
        r, Jinv = _log_residual(*compose_batch(*inverse_batch(Ra, ta), Rb, tb))
        Jb = Jinv @ adjoint_batch(*inverse_batch(Rb, tb))
        return r, [-Jb, Jb]


class PoseSmoothingFactor(Factor):
    """r = log((L_b L_a^-1)^-1 (L_c L_b^-1)), the pose-parametrised smoothing factor."""

    slots = ("pose", "pose", "pose")
    dims = (6, 6, 6)
    dim = 6

    def __init__(self, key_a, key_b, key_c, noise: NoiseModel) -> None:
        super().__init__((key_a, key_b, key_c), noise)

    @classmethod
    def evaluate_batch(cls, values, data):
        (Ra, ta), (Rb, tb), (Rc, tc) = values
        Rbi, tbi = inverse_batch(Rb, tb)
        A = compose_batch(Ra, ta, Rbi, tbi)  # L_a L_b^-1
        B = compose_batch(Rc, tc, Rbi, tbi)  # L_c L_b^-1
        E = compose_batch(*A, *B)
        r, Jinv = _log_residual(*E)
        Ad_Binv = adjoint_batch(*inverse_batch(*B))
        Ja = Jinv @ adjoint_batch(*inverse_batch(*E))
        Jc = Jinv @ Ad_Binv
        Jb = -Jinv @ (Ad_Binv + np.eye(6))
        return r, [Ja, Jb, Jc]


class PointMeasurementFactor(Factor):
    """3D measurement in the camera frame: r = z - X^-1 m."""

    slots = ("pose", "vector")
    dims = (6, 3)
    dim = 3

    def __init__(self, pose_key, point_key, measured: np.ndarray, noise: NoiseModel) -> None:
        super().__init__((pose_key, point_key), noise)
        self.measured = np.asarray(measured, dtype=float).reshape(3)

    def data(self):
        return (self.measured,)

    @classmethod
    def evaluate_batch(cls, values, data):
        (R, t), m = values
        (z,) = data
        Rt = np.swapaxes(R, -1, -2)
        local = np.einsum("nij,nj->ni", Rt, m - t)
        r = z - local
        JX = np.concatenate([-Rt @ skew(m), Rt], axis=-1)
        return r, [JX, -Rt]


class TernaryMotionFactor(Factor):
    """Rigid motion of a world point: r = m_curr - H m_prev."""

    slots = ("pose", "vector", "vector")
    dims = (6, 3, 3)
    dim = 3

    def __init__(self, motion_key, prev_key, curr_key, noise: NoiseModel) -> None:
        super().__init__((motion_key, prev_key, curr_key), noise)

    @classmethod
    def evaluate_batch(cls, values, data):
        (R, t), mp, mc = values
        q = np.einsum("nij,nj->ni", R, mp) + t
        r = mc - q
        n = len(r)
        JH = np.concatenate([skew(q), -np.broadcast_to(np.eye(3), (n, 3, 3))], axis=-1)
        return r, [JH, -R, np.broadcast_to(np.eye(3), (n, 3, 3)).copy()]


class QuaternaryMotionFactor(Factor):
    """Motion written through two object poses: r = m_curr - L_curr L_prev^-1 m_prev."""

    slots = ("pose", "pose", "vector", "vector")
    dims = (6, 6, 3, 3)
    dim = 3

    def __init__(self, pose_prev_key, pose_curr_key, prev_key, curr_key, noise: NoiseModel) -> None:
        super().__init__((pose_prev_key, pose_curr_key, prev_key, curr_key), noise)

    @classmethod
    def evaluate_batch(cls, values, data):
        (Rp, tp), (Rc, tc), mp, mc = values
        Rh, th = compose_batch(Rc, tc, *inverse_batch(Rp, tp))
        q = np.einsum("nij,nj->ni", Rh, mp) + th
        r = mc - q
        n = len(r)
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        J_curr = np.concatenate([skew(q), -eye], axis=-1)
        J_prev = np.concatenate([-Rh @ skew(mp), Rh], axis=-1)
        return r, [J_prev, J_curr, -Rh, eye.copy()]


def _camera_point(R, t, m, invert):
    """Point in the camera frame and d(point)/d(left twist) for both conventions."""
    Rt = np.swapaxes(R, -1, -2)
    p_inv = np.einsum("nij,nj->ni", Rt, m - t)
    p_fwd = np.einsum("nij,nj->ni", R, m) + t
    inv = invert.astype(bool)
    p = np.where(inv[:, None], p_inv, p_fwd)
    n = len(m)
    J_inv = np.concatenate([Rt @ skew(m), -Rt], axis=-1)
    J_fwd = np.concatenate([-skew(p_fwd), np.broadcast_to(np.eye(3), (n, 3, 3))], axis=-1)
    return p, np.where(inv[:, None, None], J_inv, J_fwd)


class PoseProjectionFactor(Factor):
    """Reprojection of a fixed world point: r = z - pi(T' m).

    ``invert=True`` means the variable is a camera pose X (T' = X^-1);
    otherwise the variable maps world points straight into the camera (G).
    """

    slots = ("pose",)
    dims = (6,)
    dim = 2

    def __init__(self, key, pixel, point, cam: CameraModel, noise: NoiseModel, invert: bool = True) -> None:
        super().__init__((key,), noise)
        self.pixel = np.asarray(pixel, dtype=float).reshape(2)
        self.point = np.asarray(point, dtype=float).reshape(3)
        self.intrinsics = cam.intrinsics
        self.invert = invert

    def data(self):
        return (self.pixel, self.point, self.intrinsics, np.array(self.invert))

    @classmethod
    def evaluate_batch(cls, values, data):
        ((R, t),) = values
        z, m, intr, inv = data
        p, dp = _camera_point(R, t, m, inv)
        r = z - project_batch(intr, p)
        return r, [-projection_jacobian(intr, p) @ dp]


class ProjectionFactor(Factor):
    """Reprojection of a point variable into a camera variable: r = z - pi(X^-1 m)."""

    slots = ("pose", "vector")
    dims = (6, 3)
    dim = 2

    def __init__(self, pose_key, point_key, pixel, cam: CameraModel, noise: NoiseModel) -> None:
        super().__init__((pose_key, point_key), noise)
        self.pixel = np.asarray(pixel, dtype=float).reshape(2)
        self.intrinsics = cam.intrinsics

    def data(self):
        return (self.pixel, self.intrinsics)

    @classmethod
    def evaluate_batch(cls, values, data):
        (R, t), m = values
        z, intr = data
        Rt = np.swapaxes(R, -1, -2)
        p = np.einsum("nij,nj->ni", Rt, m - t)
        Dpi = projection_jacobian(intr, p)
        r = z - project_batch(intr, p)
        JX = -Dpi @ np.concatenate([Rt @ skew(m), -Rt], axis=-1)
        return r, [JX, -Dpi @ Rt]


class FlowProjectionFactor(Factor):
    """Flow-displaced reprojection: r = z_prev + f - pi(T' m)."""

    slots = ("pose", "vector")
    dims = (6, 2)
    dim = 2

    def __init__(self, pose_key, flow_key, pixel_prev, point, cam: CameraModel, noise: NoiseModel, invert: bool) -> None:
        super().__init__((pose_key, flow_key), noise)
        self.pixel_prev = np.asarray(pixel_prev, dtype=float).reshape(2)
        self.point = np.asarray(point, dtype=float).reshape(3)
        self.intrinsics = cam.intrinsics
        self.invert = invert

    def data(self):
        return (self.pixel_prev, self.point, self.intrinsics, np.array(self.invert))

    @classmethod
    def evaluate_batch(cls, values, data):
        (R, t), f = values
        z, m, intr, inv = data
        p, dp = _camera_point(R, t, m, inv)
        r = z + f - project_batch(intr, p)
        n = len(r)
        return r, [-projection_jacobian(intr, p) @ dp, np.broadcast_to(np.eye(2), (n, 2, 2)).copy()]


class VectorPriorFactor(Factor):
    """r = x - measured for a vector variable of any size."""

    slots = ("vector",)

    def __init__(self, key, measured, noise: NoiseModel) -> None:
        self.measured = np.atleast_1d(np.asarray(measured, dtype=float))
        self.dim = len(self.measured)
        self.dims = (self.dim,)
        super().__init__((key,), noise)

    def data(self):
        return (self.measured,)

    @classmethod
    def evaluate_batch(cls, values, data):
        (x,) = values
        (z,) = data
        n, d = x.shape
        return x - z, [np.broadcast_to(np.eye(d), (n, d, d)).copy()]


class FlowPriorFactor(VectorPriorFactor):
    """Optical-flow prior: r0(f) = f - f_measured."""


# ---------------------------------------------------------------------------
# Single-instance residual operations
# ---------------------------------------------------------------------------

_UNIT3 = NoiseModel.isotropic(3, 1.0)
_UNIT6 = NoiseModel.isotropic(6, 1.0)
_UNIT2 = NoiseModel.isotropic(2, 1.0)


def point_measurement_residual(X_k: Pose3, m_world, z3d):
    return PointMeasurementFactor(0, 1, z3d, _UNIT3).evaluate([X_k, m_world])


def odometry_between_residual(X_prev: Pose3, X_curr: Pose3, odom: Pose3):
    return BetweenFactor(0, 1, odom, _UNIT6).evaluate([X_prev, X_curr])


def ternary_motion_residual(H_world: Pose3, m_prev, m_curr):
    return TernaryMotionFactor(0, 1, 2, _UNIT3).evaluate([H_world, m_prev, m_curr])


def motion_smoothing_residual(H_prev: Pose3, H_curr: Pose3):
    return MotionSmoothingFactor(0, 1, _UNIT6).evaluate([H_prev, H_curr])


def quaternary_motion_residual(L_prev: Pose3, L_curr: Pose3, m_prev, m_curr):
    return QuaternaryMotionFactor(0, 1, 2, 3, _UNIT3).evaluate([L_prev, L_curr, m_prev, m_curr])


def pose_smoothing_residual(L_a: Pose3, L_b: Pose3, L_c: Pose3):
    return PoseSmoothingFactor(0, 1, 2, _UNIT6).evaluate([L_a, L_b, L_c])


def prior_residual(value: Pose3, prior: Pose3):
    return PriorFactor(0, prior, _UNIT6).evaluate([value])


def flow_reprojection_residual(kind: str, pose: Pose3, m_world, z2d_prev, flow, cam: CameraModel):
    """``kind="camera"``: ``pose`` is X_k and the point is static.
    ``kind="object"``: ``pose`` is G = X_k^-1 H and the point is m at k-1."""
    if kind not in ("camera", "object"):
        raise ValueError(f"unknown flow residual kind {kind!r}")
    fac = FlowProjectionFactor(0, 1, z2d_prev, m_world, cam, _UNIT2, invert=(kind == "camera"))
    return fac.evaluate([pose, flow])


def flow_prior_residual(flow, measured):
    return FlowPriorFactor(0, measured, _UNIT2).evaluate([flow])


def reprojection_residual(X_k: Pose3, m_world, z2d, cam: CameraModel):
    return ProjectionFactor(0, 1, z2d, cam, _UNIT2).evaluate([X_k, m_world])
