"""Shared test utilities: random states and finite-difference Jacobians."""

from __future__ import annotations

import numpy as np

from wcslam.liegroup import Pose3, se3_exp

FD_STEP = 1e-6

# one "CRITERION n: PASS|FAIL ..." line per acceptance check, printed at session end
ACCEPTANCE_LINES: list[str] = []


def random_pose(rng: np.random.Generator, max_angle: float = 2.0, max_trans: float = 5.0) -> Pose3:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    omega = axis * rng.uniform(0.0, max_angle)
    R = se3_exp(np.concatenate([omega, np.zeros(3)])).rotation
    return Pose3.from_rt(R, rng.uniform(-max_trans, max_trans, 3))


def perturb(value, delta):
    if isinstance(value, Pose3):
        return se3_exp(delta).compose(value)
    return np.asarray(value, dtype=float) + delta


def tangent_dim(value) -> int:
    return 6 if isinstance(value, Pose3) else len(np.atleast_1d(value))


def numerical_jacobians(fn, values, step: float = FD_STEP):
    """Central differences of ``fn(values) -> residual`` w.r.t. each value."""
    out = []
    for idx, v in enumerate(values):
        d = tangent_dim(v)
        cols = []
        for c in range(d):
            e = np.zeros(d)
            e[c] = step
            plus = list(values)
            minus = list(values)
            plus[idx] = perturb(v, e)
            minus[idx] = perturb(v, -e)
            cols.append((np.asarray(fn(plus)) - np.asarray(fn(minus))) / (2 * step))
        out.append(np.stack(cols, axis=-1))
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.linalg.norm(analytic - numeric) / max(1.0, np.linalg.norm(numeric)))


def oracle_frontend(scene, ms):
    """Front-end output that passes ground truth through: true camera poses and
    motions, every measurement an inlier."""
    from wcslam.frontend import FrontendFrame, FrontendOutput

    frames = []
    for k, meas in enumerate(ms.frames):
        motions = {}
        if k > 0:
            for j, o in scene.objects.items():
                if o.observed(k) and o.observed(k - 1):
                    motions[j] = o.motion(k)
        frames.append(FrontendFrame(k, scene.camera_poses[k], motions, dict(motions), np.ones(len(meas), dtype=bool)))
    return FrontendOutput(ms, frames)


def ground_truth_estimate(scene, formulation: str = "wcme"):
    """EstimatorOutput holding the ground truth itself."""
    from wcslam.backend import EstimatorOutput

    motions, poses = {}, {}
    for j, o in scene.objects.items():
        for k in o.frames:
            poses[(j, k)] = o.pose(k)
            if k > o.first_frame:
                motions[(j, k)] = o.motion(k)
    cams = {k: p for k, p in enumerate(scene.camera_poses)}
    return EstimatorOutput(formulation, cams, motions, poses, {}, {}, {})
