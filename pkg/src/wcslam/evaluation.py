"""Trajectory and motion metrics: RMSE decomposition, ATE, RPE, Motion Error.

Angles are radians internally; reports carry degrees. Time-steps are matched
by integer frame index.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from .liegroup import Pose3, fit_rigid_transform, poses_to_arrays, rotation_angle

FORMAT_VERSION = 1
MIN_CONSECUTIVE_FRAMES = 3
CSV_COLUMNS = ("metric", "target", "translation_m", "rotation_deg", "count")
TRACE_COLUMNS = ("frame", "object", "stage", "me_t_m", "me_r_deg")

Trajectory = Union[Mapping[int, Pose3], Sequence[Pose3]]


class EmptySampleSet(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class MissingGroundTruthPose(KeyError):
    pass


class DegenerateTrajectory(ValueError):
    pass


@dataclass(frozen=True)
class ErrorSample:
    frame: int
    error: Pose3
    obj: int | None = None

    @property
    def translation_error(self) -> float:
        return float(np.linalg.norm(self.error.translation))

    @property
    def rotation_error(self) -> float:
        """Radians."""
        return float(rotation_angle(self.error.rotation)[0])


@dataclass
class MetricResult:
    """RMSE of one metric over one trajectory (camera or a single object)."""

    metric: str
    target: str
    translation: float  # meters
    rotation: float  # degrees
    samples: list[ErrorSample] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.samples)

    def row(self) -> dict:
        return {
            "metric": self.metric,
            "target": self.target,
            "translation_m": self.translation,
            "rotation_deg": self.rotation,
            "count": self.count,
        }


def _as_mapping(traj: Trajectory) -> dict[int, Pose3]:
    if isinstance(traj, Mapping):
        return {int(k): v for k, v in traj.items()}
    return {k: p for k, p in enumerate(traj)}


def _result(metric: str, target: str, samples: list[ErrorSample]) -> MetricResult:
    e_t, e_r = rmse_components(samples)
    return MetricResult(metric, target, e_t, e_r, samples)


def rmse_components(samples: Sequence[ErrorSample]) -> tuple[float, float]:
    """(translation RMSE in meters, rotation RMSE in degrees)."""
    if len(samples) == 0:
        raise EmptySampleSet("no error samples")
    R, t = poses_to_arrays([s.error for s in samples])
    trans = np.linalg.norm(t, axis=1)
    ang = rotation_angle(R)
    e_t = math.sqrt(float(np.mean(trans**2)))
    e_r = math.degrees(math.sqrt(float(np.mean(ang**2))))
    return e_t, e_r


def umeyama_align(est_traj: Trajectory, gt_traj: Trajectory) -> Pose3:
    """Rigid transform S (scale 1) minimizing sum ||p_est - S p_gt||^2.

    Apply it to the ground truth (``S * L_gt``) to bring it onto the estimate.
    """
    est, gt = _as_mapping(est_traj), _as_mapping(gt_traj)
    if set(est) != set(gt):
        raise LengthMismatch(f"trajectories cover different frames ({len(est)} vs {len(gt)})")
    frames = sorted(est)
    if len(frames) < 3:
        raise DegenerateTrajectory(f"alignment needs at least 3 positions, got {len(frames)}")
    p_est = np.stack([est[k].translation for k in frames])
    p_gt = np.stack([gt[k].translation for k in frames])
    for p in (p_est, p_gt):
        sv = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
        if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
            raise DegenerateTrajectory("positions are coincident or collinear")
    return fit_rigid_transform(p_gt, p_est)


def ate(est_traj: Trajectory, gt_traj: Trajectory, align: bool = False, target: str = "camera") -> MetricResult:
    """Absolute error ``E_k = M_gt,k^-1 M_k``; translation RMSE is the ATE."""
    est, gt = _as_mapping(est_traj), _as_mapping(gt_traj)
    if set(est) != set(gt):
        raise LengthMismatch(f"trajectories cover different frames ({len(est)} vs {len(gt)})")
    if align:
        S = umeyama_align(est, gt)
        gt = {k: S.compose(p) for k, p in gt.items()}
    samples = [ErrorSample(k, gt[k].between(est[k])) for k in sorted(est)]
    return _result("ate", target, samples)


def rpe(est_traj: Trajectory, gt_traj: Trajectory, target: str = "camera") -> MetricResult:
    """Consecutive-frame relative error ``(M_gt,k-1^-1 M_gt,k)^-1 (M_k-1^-1 M_k)``."""
    est, gt = _as_mapping(est_traj), _as_mapping(gt_traj)
    if set(est) != set(gt):
        raise LengthMismatch(f"trajectories cover different frames ({len(est)} vs {len(gt)})")
    samples = []
    for k in sorted(est):
        if k - 1 in est:
            rel_gt = gt[k - 1].between(gt[k])
            rel_est = est[k - 1].between(est[k])
            samples.append(ErrorSample(k, rel_gt.between(rel_est)))
    if not samples:
        raise LengthMismatch("relative error needs at least two consecutive frames")
    return _result("rpe", target, samples)


def motion_error_sample(H_est: Pose3, H_gt: Pose3, L_gt_prev: Pose3) -> Pose3:
    """Error between two world-frame motions, expressed in the ground-truth body frame at k-1."""
    local_gt = L_gt_prev.inverse().compose(H_gt).compose(L_gt_prev)
    local_est = L_gt_prev.inverse().compose(H_est).compose(L_gt_prev)
    return local_gt.between(local_est)


def motion_error(
    est_motions: Mapping[int, Pose3],
    gt_poses: Mapping[int, Pose3],
    gt_motions: Mapping[int, Pose3] | None = None,
    target: str = "object",
) -> MetricResult:
    """Motion Error of one object.

    ``est_motions[k]`` is the world-frame motion from k-1 to k. Ground-truth
    motions default to ``L_k L_k-1^-1`` from the poses.
    """
    samples = []
    for k in sorted(est_motions):
        if k - 1 not in gt_poses:
            raise MissingGroundTruthPose(f"{target}: no ground-truth pose at frame {k - 1}")
        if gt_motions is not None and k in gt_motions:
            H_gt = gt_motions[k]
        elif k in gt_poses:
            H_gt = gt_poses[k].compose(gt_poses[k - 1].inverse())
        else:
            raise MissingGroundTruthPose(f"{target}: no ground-truth motion at frame {k}")
        err = motion_error_sample(est_motions[k], H_gt, gt_poses[k - 1])
        samples.append(ErrorSample(k, err, None))
    return _result("me", target, samples)


def motion_change_diagnostic(anchor: Pose3, local_delta: Pose3) -> tuple[Pose3, Pose3]:
    """Change of motion in the body frame and the same change seen from the world.

    ``anchor`` is the object pose ``L_k+1``; the world-frame change is its
    conjugation of ``local_delta``.
    """
    world_delta = anchor.compose(local_delta).compose(anchor.inverse())
    return local_delta, world_delta


def motion_change_from_poses(L0: Pose3, L1: Pose3, L2: Pose3) -> tuple[Pose3, Pose3]:
    """Motion change over three consecutive object poses, computed from the motions themselves."""
    local_delta = L0.between(L1).between(L1.between(L2))
    H01 = L1.compose(L0.inverse())
    H12 = L2.compose(L1.inverse())
    return local_delta, H01.between(H12)


def longest_consecutive_run(frames) -> int:
    frames = sorted(set(int(f) for f in frames))
    best = run = 0
    prev = None
    for f in frames:
        run = run + 1 if prev is not None and f == prev + 1 else 1
        best = max(best, run)
        prev = f
    return best


# ---------------------------------------------------------------------------
# Whole-estimate report
# ---------------------------------------------------------------------------


@dataclass
class TraceRow:
    frame: int
    obj: int
    stage: str
    me_t: float
    me_r: float  # degrees


@dataclass
class MetricReport:
    sequence_id: str
    results: list[MetricResult]
    traces: list[TraceRow] = field(default_factory=list)
    excluded_objects: list[int] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def get(self, metric: str, target: str) -> MetricResult:
        for r in self.results:
            if r.metric == metric and r.target == target:
                return r
        raise KeyError((metric, target))

    def object_average(self, metric: str) -> tuple[float, float] | None:
        """Equal-weight mean over objects of per-object RMSEs."""
        rows = [r for r in self.results if r.metric == metric and r.target.startswith("object_")]
        if not rows:
            return None
        return float(np.mean([r.translation for r in rows])), float(np.mean([r.rotation for r in rows]))

    def summary(self) -> dict:
        out: dict = {
            "format_version": FORMAT_VERSION,
            "sequence_id": self.sequence_id,
            "metrics": [r.row() for r in self.results],
            "sequence_average": {},
            "excluded_objects": list(self.excluded_objects),
            "diagnostics": self.diagnostics,
        }
        metrics = sorted({r.metric for r in self.results if r.target.startswith("object_")})
        for m in metrics:
            avg = self.object_average(m)
            out["sequence_average"][m] = {"translation_m": avg[0], "rotation_deg": avg[1]}
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.results:
            w.writerow({k: _fmt(v) for k, v in r.row().items()})
        return buf.getvalue()

    def traces_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for t in self.traces:
            w.writerow([t.frame, t.obj, t.stage, _fmt(t.me_t), _fmt(t.me_r)])
        return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def _object_frames(est, j: int) -> set[int]:
    frames = {k for (i, k) in est.object_poses if i == j}
    for i, k in est.motions:
        if i == j:
            frames.update((k - 1, k))
    return frames


def _trace(result: MetricResult, obj: int, stage: str) -> list[TraceRow]:
    return [
        TraceRow(s.frame, obj, stage, s.translation_error, math.degrees(s.rotation_error))
        for s in result.samples
    ]


def _world_inflation(track) -> dict:
    """RMS translation of motion changes in body and world frames along the true trajectory."""
    poses = track.poses
    if len(poses) < 3:
        return {}
    local_t, world_t = [], []
    for a, b, c in zip(poses, poses[1:], poses[2:]):
        ld, wd = motion_change_diagnostic(b, a.between(b).between(b.between(c)))
        local_t.append(np.linalg.norm(ld.translation))
        world_t.append(np.linalg.norm(wd.translation))
    return {
        "anchor_distance_m": float(np.mean([np.linalg.norm(p.translation) for p in poses])),
        "local_change_t_m": float(np.sqrt(np.mean(np.square(local_t)))),
        "world_change_t_m": float(np.sqrt(np.mean(np.square(world_t)))),
    }


def evaluate_estimate(est, scene, frontend=None, align: bool = False, sequence_id: str = "") -> MetricReport:
    """Camera ATE/RPE plus per-object ME, RPE and ATE against a ground-truth scene.

    ``frontend`` (optional) adds per-frame ME traces of the front-end motions.
    Objects with fewer than three consecutive estimated frames are skipped.
    """
    gt_cam = {k: p for k, p in enumerate(scene.camera_poses)}
    est_cam = dict(est.camera_poses)
    missing = set(est_cam) - set(gt_cam)
    if missing:
        raise MissingGroundTruthPose(f"no ground-truth camera pose for frames {sorted(missing)}")
    gt_cam = {k: gt_cam[k] for k in est_cam}
    results = [ate(est_cam, gt_cam, align=align, target="camera"), rpe(est_cam, gt_cam, target="camera")]
    traces: list[TraceRow] = []
    excluded: list[int] = []
    diagnostics: dict = {}
    for j in est.object_ids():
        if longest_consecutive_run(_object_frames(est, j)) < MIN_CONSECUTIVE_FRAMES:
            excluded.append(j)
            continue
        if j not in scene.objects:
            raise MissingGroundTruthPose(f"object {j} has no ground truth")
        track = scene.objects[j]
        gt_poses = {k: track.pose(k) for k in track.frames}
        name = f"object_{j}"
        motions = {k: H for (i, k), H in est.motions.items() if i == j}
        if motions:
            me = motion_error(motions, gt_poses, target=name)
            results.append(me)
            traces.extend(_trace(me, j, "backend"))
            if frontend is not None:
                fe_motions = {}
                for k in motions:
                    H = frontend.motion(j, k)
                    if H is not None:
                        fe_motions[k] = H
                if fe_motions:
                    traces.extend(_trace(motion_error(fe_motions, gt_poses, target=name), j, "frontend"))
        poses = {k: L for (i, k), L in est.object_poses.items() if i == j}
        if poses:
            lacking = set(poses) - set(gt_poses)
            if lacking:
                raise MissingGroundTruthPose(f"{name}: no ground-truth pose for frames {sorted(lacking)}")
            gt_sub = {k: gt_poses[k] for k in poses}
            results.append(ate(poses, gt_sub, target=name))
            if longest_consecutive_run(poses) >= 2:
                results.append(rpe(poses, gt_sub, target=name))
        diagnostics[name] = _world_inflation(track)
    return MetricReport(sequence_id, results, traces, excluded, diagnostics)
