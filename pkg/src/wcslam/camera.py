"""Pinhole camera with depth: projection and back-projection."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .liegroup import Pose3


class BehindCamera(ValueError):
    """A point has non-positive depth in the camera frame."""


class OutOfImage(ValueError):
    """A projected point falls outside the image bounds."""


@dataclass(frozen=True)
class CameraModel:
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    min_depth: float = 0.1
    max_depth: float = 50.0

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("depth range must satisfy 0 < min_depth < max_depth")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CameraModel:
        return cls(**d)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def project_local(self, p: np.ndarray) -> np.ndarray:
        """Camera-frame point(s) -> pixel(s). Raises BehindCamera for z <= 0."""
        p = np.asarray(p, dtype=float)
        z = p[..., 2]
        if np.any(z <= 0.0):
            raise BehindCamera("point behind the camera")
        u = self.fx * p[..., 0] / z + self.cx
        v = self.fy * p[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def back_project(self, pixel: np.ndarray, depth: np.ndarray) -> np.ndarray:
        pixel = np.asarray(pixel, dtype=float)
        d = np.asarray(depth, dtype=float)
        x = (pixel[..., 0] - self.cx) / self.fx * d
        y = (pixel[..., 1] - self.cy) / self.fy * d
        return np.stack([x, y, d * np.ones_like(x)], axis=-1)

    def in_image(self, pixel: np.ndarray) -> np.ndarray:
        pixel = np.asarray(pixel, dtype=float)
        return (
            (pixel[..., 0] >= 0.0)
            & (pixel[..., 0] < self.width)
            & (pixel[..., 1] >= 0.0)
            & (pixel[..., 1] < self.height)
        )

    def visible(self, p: np.ndarray) -> np.ndarray:
        """Frustum test for camera-frame points (depth range and image bounds)."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        z = p[:, 2]
        ok = (z >= self.min_depth) & (z <= self.max_depth)
        pix = np.full((len(p), 2), -1.0)
        pix[ok] = self.project_local(p[ok])
        return ok & self.in_image(pix)


def project(cam: CameraModel, pose: Pose3, m_world: np.ndarray) -> tuple[np.ndarray, float]:
    """World point -> (pixel, depth) for a camera at ``pose``."""
    p = pose.inverse().transform_point(np.asarray(m_world, dtype=float))
    if p[2] <= 0.0:
        raise BehindCamera(f"point has local depth {p[2]:.6g}")
    pix = cam.project_local(p)
    if not bool(cam.in_image(pix)):
        raise OutOfImage(f"pixel {pix} outside {cam.width}x{cam.height}")
    return pix, float(p[2])


def back_project(cam: CameraModel, z2d: np.ndarray, d: float) -> np.ndarray:
    """Pixel + depth -> camera-frame point."""
    return cam.back_project(z2d, d)


def projection_jacobian(intrinsics: np.ndarray, p: np.ndarray) -> np.ndarray:
    """d(pi)/dp for (N, 3) points and (N, 4) or (4,) intrinsics -> (N, 2, 3)."""
    intr = np.broadcast_to(intrinsics, (len(p), 4))
    fx, fy = intr[:, 0], intr[:, 1]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    inv = 1.0 / z
    J = np.zeros((len(p), 2, 3))
    J[:, 0, 0] = fx * inv
    J[:, 0, 2] = -fx * x * inv**2
    J[:, 1, 1] = fy * inv
    J[:, 1, 2] = -fy * y * inv**2
    return J


def project_batch(intrinsics: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Vectorised pinhole projection with per-row intrinsics."""
    if np.any(p[:, 2] <= 0.0):
        raise BehindCamera("point behind the camera")
    intr = np.broadcast_to(intrinsics, (len(p), 4))
    u = intr[:, 0] * p[:, 0] / p[:, 2] + intr[:, 2]
    v = intr[:, 1] * p[:, 1] / p[:, 2] + intr[:, 3]
    return np.stack([u, v], axis=-1)
