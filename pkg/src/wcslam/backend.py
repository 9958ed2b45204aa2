"""Back-end estimation: world-centric motion (WCME) and pose (WCPE) graphs.

Both formulations share the camera part of the graph (prior on the first
camera pose, front-end odometry between consecutive frames, static point
measurements). They differ in how objects are parametrised:

* WCME: one absolute motion ``H[j, k]`` (from k-1 to k) per object and frame
  pair, linked to per-frame dynamic points by ternary factors and smoothed by
  constant-motion factors between consecutive motions.
* WCPE: one pose ``L[j, k]`` per object and frame, linked to points through
  quaternary factors, smoothed by pose-smoothing factors, each chain fixed by a
  weak prior on its first pose.

Outputs of both are harmonised: WCME poses are recovered by chaining motions
from an anchor; WCPE motions are ``L_k L_{k-1}^-1``.
"""

from __future__ import annotations

import enum
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .factors import (
    BetweenFactor,
    MotionSmoothingFactor,
    NoiseModel,
    PointMeasurementFactor,
    PoseSmoothingFactor,
    PriorFactor,
    QuaternaryMotionFactor,
    TernaryMotionFactor,
    H as Hkey,
    L as Lkey,
    M as Mkey,
    X as Xkey,
)
from .frontend import FrontendOutput, backprojection_covariance
from .liegroup import Pose3, fit_rigid_transform
from .graph_solver import FactorGraph, SolverConfig, SolveStats, optimize

log = logging.getLogger(__name__)


class FormulationKind(str, enum.Enum):
    WCME = "wcme"
    WCPE = "wcpe"


class EmptyWindow(ValueError):
    """The estimation window holds fewer than two frames."""


class BrokenTrack(ValueError):
    """A correspondence refers to inconsistent or missing variables."""


class GapInMotionChain(ValueError):
    """Motions needed to propagate an object pose are missing."""


@dataclass
class BackendConfig:
    pixel_sigma: float = 1.0
    depth_sigma: float = 0.01
    # "backprojected": covariance from pixel/depth noise; "isotropic": point_sigma^2 I
    point_noise: str = "backprojected"
    point_sigma: float = 0.02
    motion_sigma: float = 0.05
    smoothing_rot_sigma: float = 0.1
    smoothing_trans_sigma: float = 1.0
    odometry_rot_sigma: float = 0.01
    odometry_trans_sigma: float = 0.05
    first_pose_sigma: float = 1e-4
    object_pose_prior_sigma: float = 10.0
    huber: float | None = 1.345
    min_motion_points: int = 3
    smoothing: bool = True
    anchor: str = "centroid"
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self) -> None:
        if self.point_noise not in ("backprojected", "isotropic"):
            raise ValueError("point_noise must be 'backprojected' or 'isotropic'")
        if self.anchor not in ("centroid", "ground_truth", "explicit"):
            raise ValueError("anchor must be 'centroid', 'ground_truth' or 'explicit'")
        if self.min_motion_points < 1:
            raise ValueError("min_motion_points must be >= 1")
        for name in (
            "pixel_sigma",
            "depth_sigma",
            "point_sigma",
            "motion_sigma",
            "smoothing_rot_sigma",
            "smoothing_trans_sigma",
            "odometry_rot_sigma",
            "odometry_trans_sigma",
            "first_pose_sigma",
            "object_pose_prior_sigma",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class EstimatorOutput:
    formulation: str
    camera_poses: dict[int, Pose3]
    motions: dict[tuple[int, int], Pose3]  # (j, k): motion from k-1 to k
    object_poses: dict[tuple[int, int], Pose3]  # (j, k)
    dynamic_points: dict[tuple[int, int], np.ndarray]  # (track, k)
    point_object: dict[int, int]
    static_points: dict[int, np.ndarray]
    stats: list[SolveStats] = field(default_factory=list)

    def camera_trajectory(self) -> list[Pose3]:
        return [self.camera_poses[k] for k in sorted(self.camera_poses)]

    def object_ids(self) -> list[int]:
        return sorted({j for j, _ in self.object_poses} | {j for j, _ in self.motions})


# ---------------------------------------------------------------------------
# Window data
# ---------------------------------------------------------------------------


@dataclass
class _Obs:
    frame: int
    track: int
    obj: int
    point: np.ndarray  # camera-frame 3D measurement
    cov: np.ndarray


class _WindowData:
    """Inlier observations of one window, indexed for graph construction."""

    def __init__(self, fo: FrontendOutput, frames: list[int], cfg: BackendConfig) -> None:
        if len(frames) < 2:
            raise EmptyWindow(f"window needs at least 2 frames, got {len(frames)}")
        cam = fo.measurements.camera
        self.frames = frames
        self.obs: dict[int, dict[int, _Obs]] = {}
        self.track_obj: dict[int, int] = {}
        for k in frames:
            inl = fo.inliers(k)
            pts = inl.points(cam)
            if cfg.point_noise == "backprojected":
                covs = backprojection_covariance(cam, inl.pixel, inl.depth, cfg.pixel_sigma, cfg.depth_sigma)
            else:
                covs = np.broadcast_to(np.eye(3) * cfg.point_sigma**2, (len(inl), 3, 3))
            per = {}
            for n in range(len(inl)):
                t, j = int(inl.track[n]), int(inl.obj[n])
                if self.track_obj.setdefault(t, j) != j:
                    raise BrokenTrack(f"track {t} changes object id ({self.track_obj[t]} -> {j})")
                per[t] = _Obs(k, t, j, pts[n], covs[n])
            self.obs[k] = per
        self.objects = sorted({j for j in self.track_obj.values() if j != 0})
        # motion pairs: (j, k) -> tracks observed at k-1 and k
        self.pairs: OrderedDict[tuple[int, int], list[int]] = OrderedDict()
        for j in self.objects:
            for k in frames[1:]:
                if k - 1 not in self.obs:
                    continue
                prev, cur = self.obs[k - 1], self.obs[k]
                tracks = [t for t, o in cur.items() if o.obj == j and t in prev]
                if len(tracks) >= cfg.min_motion_points:
                    self.pairs[(j, k)] = sorted(tracks)
        self.static_tracks = sorted({t for k in frames for t, o in self.obs[k].items() if o.obj == 0})

    def dynamic_instances(self) -> list[tuple[int, int]]:
        """(track, frame) of every dynamic point taking part in a motion pair."""
        seen = OrderedDict()
        for (j, k), tracks in self.pairs.items():
            for t in tracks:
                seen[(t, k - 1)] = None
                seen[(t, k)] = None
        return sorted(seen)

    def object_segments(self, j: int) -> list[list[int]]:
        """Maximal runs of consecutive frames joined by motion pairs of object j."""
        ks = sorted(k for (jj, k) in self.pairs if jj == j)
        segs: list[list[int]] = []
        for k in ks:
            if segs and segs[-1][-1] == k - 1:
                segs[-1].append(k)
            else:
                segs.append([k - 1, k])
        return segs

    def observed_frames(self, j: int) -> list[int]:
        return [k for k in self.frames if any(o.obj == j for o in self.obs[k].values())]


@dataclass
class _Carry:
    """Estimates carried between sliding windows (latest value per key)."""

    values: dict = field(default_factory=dict)


def _point_noise(obs: _Obs, cfg: BackendConfig) -> NoiseModel:
    return NoiseModel(obs.cov, huber=cfg.huber)


def _initial_motion(fo: FrontendOutput, data: _WindowData, j: int, k: int, X: dict[int, Pose3], carry: _Carry) -> Pose3:
    key = Hkey(j, k)
    if key in carry.values:
        return carry.values[key]
    H = fo.motion(j, k)
    if H is not None:
        return H
    tracks = data.pairs[(j, k)]
    src = np.array([X[k - 1].transform_point(data.obs[k - 1][t].point) for t in tracks])
    dst = np.array([X[k].transform_point(data.obs[k][t].point) for t in tracks])
    return fit_rigid_transform(src, dst)


def _camera_part(graph: FactorGraph, fo: FrontendOutput, data: _WindowData, cfg: BackendConfig, carry: _Carry) -> dict[int, Pose3]:
    fe_poses = fo.camera_poses()
    X = {}
    for k in data.frames:
        X[k] = carry.values.get(Xkey(k), fe_poses[k])
        graph.insert(Xkey(k), X[k])
    first = data.frames[0]
    graph.add(PriorFactor(Xkey(first), X[first], NoiseModel.isotropic(6, cfg.first_pose_sigma)))
    odo = NoiseModel.twist(cfg.odometry_rot_sigma, cfg.odometry_trans_sigma)
    for k in data.frames[1:]:
        graph.add(BetweenFactor(Xkey(k - 1), Xkey(k), fe_poses[k - 1].between(fe_poses[k]), odo))
    for t in data.static_tracks:
        first_obs = next(data.obs[k][t] for k in data.frames if t in data.obs[k])
        key = Mkey(t)
        graph.insert(key, carry.values.get(key, X[first_obs.frame].transform_point(first_obs.point)))
        for k in data.frames:
            o = data.obs[k].get(t)
            if o is not None:
                graph.add(PointMeasurementFactor(Xkey(k), key, o.point, _point_noise(o, cfg)))
    return X


def _dynamic_points(graph: FactorGraph, data: _WindowData, cfg: BackendConfig, X: dict[int, Pose3], carry: _Carry) -> None:
    for t, k in data.dynamic_instances():
        o = data.obs[k][t]
        key = Mkey(t, k)
        graph.insert(key, carry.values.get(key, X[k].transform_point(o.point)))
        graph.add(PointMeasurementFactor(Xkey(k), key, o.point, _point_noise(o, cfg)))


def build_wcme(fo: FrontendOutput, cfg: BackendConfig | None = None, frames: list[int] | None = None, carry: _Carry | None = None) -> FactorGraph:
    """Motion-parametrised graph over ``frames`` (default: whole sequence)."""
    cfg = cfg or BackendConfig()
    carry = carry or _Carry()
    frames = list(range(fo.num_frames)) if frames is None else list(frames)
    data = _WindowData(fo, frames, cfg)
    graph = FactorGraph()
    graph.window = data  # type: ignore[attr-defined]
    X = _camera_part(graph, fo, data, cfg, carry)
    _dynamic_points(graph, data, cfg, X, carry)
    motion_noise = NoiseModel.isotropic(3, cfg.motion_sigma, huber=cfg.huber)
    smooth = NoiseModel.twist(cfg.smoothing_rot_sigma, cfg.smoothing_trans_sigma)
    for (j, k), tracks in data.pairs.items():
        key = Hkey(j, k)
        graph.insert(key, _initial_motion(fo, data, j, k, X, carry))
        for t in tracks:
            graph.add(TernaryMotionFactor(key, Mkey(t, k - 1), Mkey(t, k), motion_noise))
        if cfg.smoothing and (j, k - 1) in data.pairs:
            graph.add(MotionSmoothingFactor(Hkey(j, k - 1), key, smooth))
    return graph


def _centroid_anchor(points: np.ndarray) -> Pose3:
    return Pose3.from_rt(np.eye(3), np.asarray(points, dtype=float).reshape(-1, 3).mean(axis=0))


def build_wcpe(
    fo: FrontendOutput,
    cfg: BackendConfig | None = None,
    frames: list[int] | None = None,
    carry: _Carry | None = None,
    anchor_fn: Callable[[int, int, np.ndarray], Pose3] | None = None,
) -> FactorGraph:
    """Pose-parametrised graph. ``anchor_fn(j, k, world_points)`` sets first poses (default: centroid)."""
    cfg = cfg or BackendConfig()
    carry = carry or _Carry()
    frames = list(range(fo.num_frames)) if frames is None else list(frames)
    data = _WindowData(fo, frames, cfg)
    graph = FactorGraph()
    graph.window = data  # type: ignore[attr-defined]
    X = _camera_part(graph, fo, data, cfg, carry)
    _dynamic_points(graph, data, cfg, X, carry)
    motion_noise = NoiseModel.isotropic(3, cfg.motion_sigma, huber=cfg.huber)
    smooth = NoiseModel.twist(cfg.smoothing_rot_sigma, cfg.smoothing_trans_sigma)
    weak = NoiseModel.isotropic(6, cfg.object_pose_prior_sigma)
    for j in data.objects:
        segments = data.object_segments(j)
        covered = {k for seg in segments for k in seg}
        for k in data.observed_frames(j):
            if k not in covered:
                # isolated observation: the pose only sees its weak prior
                log.warning("object %d at frame %d has no motion pair; pose is under-constrained", j, k)
                segments.append([k])
        for seg in sorted(segments):
            s = seg[0]
            world = np.array([X[s].transform_point(o.point) for o in data.obs[s].values() if o.obj == j])
            key = Lkey(j, s)
            if key in carry.values:
                L_prev = carry.values[key]
            elif anchor_fn is not None:
                L_prev = anchor_fn(j, s, world)
            else:
                L_prev = _centroid_anchor(world)
            graph.insert(key, L_prev)
            graph.add(PriorFactor(key, L_prev, weak))
            for k in seg[1:]:
                key = Lkey(j, k)
                L_k = carry.values.get(key)
                if L_k is None:
                    L_k = _initial_motion(fo, data, j, k, X, carry).compose(L_prev)
                graph.insert(key, L_k)
                L_prev = L_k
                for t in data.pairs[(j, k)]:
                    graph.add(QuaternaryMotionFactor(Lkey(j, k - 1), key, Mkey(t, k - 1), Mkey(t, k), motion_noise))
                if cfg.smoothing and (j, k - 1) in data.pairs:
                    graph.add(PoseSmoothingFactor(Lkey(j, k - 2), Lkey(j, k - 1), key, smooth))
    return graph


# ---------------------------------------------------------------------------
# Harmonisation
# ---------------------------------------------------------------------------


def recover_object_poses(motions: dict[int, Pose3], anchor: Pose3, start: int, end: int | None = None) -> dict[int, Pose3]:
    """Chain ``L_k = H_k L_{k-1}`` from ``L_start = anchor``; ``motions[k]`` maps k-1 to k."""
    end = max(motions, default=start) if end is None else end
    poses = {start: anchor}
    for k in range(start + 1, end + 1):
        if k not in motions:
            raise GapInMotionChain(f"missing motion into frame {k}")
        poses[k] = motions[k].compose(poses[k - 1])
    return poses


def motion_segments(motion_frames) -> list[list[int]]:
    """Group sorted motion frame indices into contiguous chains (frame lists incl. the start)."""
    segs: list[list[int]] = []
    for k in sorted(motion_frames):
        if segs and segs[-1][-1] == k - 1:
            segs[-1].append(k)
        else:
            segs.append([k - 1, k])
    return segs


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


AnchorFn = Callable[[int, int, np.ndarray], Pose3]


def _anchor_function(cfg: BackendConfig, ground_truth=None, anchors: dict | None = None) -> AnchorFn:
    if cfg.anchor == "ground_truth":
        if ground_truth is None:
            raise ValueError("ground_truth anchor policy needs the ground-truth scene")

        def fn(j, k, world):
            return ground_truth.objects[j].pose(k)

        return fn
    if cfg.anchor == "explicit":
        if anchors is None:
            raise ValueError("explicit anchor policy needs anchors")

        def fn(j, k, world):
            if (j, k) in anchors:
                return anchors[(j, k)]
            if j in anchors:
                return anchors[j]
            return _centroid_anchor(world)

        return fn
    return lambda j, k, world: _centroid_anchor(world)


def window_ranges(num_frames: int, window: int | None, overlap: int = 1) -> list[list[int]]:
    if num_frames < 2:
        raise EmptyWindow("sequence needs at least 2 frames")
    if window is None or window >= num_frames:
        return [list(range(num_frames))]
    if window < 2 or not 0 <= overlap < window:
        raise ValueError("need window >= 2 and 0 <= overlap < window")
    out = []
    s = 0
    while True:
        e = min(s + window, num_frames)
        out.append(list(range(s, e)))
        if e >= num_frames:
            break
        s = e - overlap
    return out


def _run_windows(kind, fo: FrontendOutput, cfg: BackendConfig, windows: list[list[int]], ground_truth=None, anchors=None) -> EstimatorOutput:
    kind = FormulationKind(kind)
    anchor_fn = _anchor_function(cfg, ground_truth, anchors)
    carry = _Carry()
    stitched: dict = {}
    stats: list[SolveStats] = []
    for frames in windows:
        if kind is FormulationKind.WCME:
            graph = build_wcme(fo, cfg, frames, carry)
        else:
            graph = build_wcpe(fo, cfg, frames, carry, anchor_fn)
        try:
            values, st = optimize(graph, cfg=cfg.solver)
        except Exception as exc:
            exc.partial_stats = list(stats)  # type: ignore[attr-defined]
            exc.window = (frames[0], frames[-1])  # type: ignore[attr-defined]
            raise
        stats.append(st)
        if kind is FormulationKind.WCPE:
            # motions implied by this window's own poses
            data = graph.window  # type: ignore[attr-defined]
            for (j, k) in data.pairs:
                values[Hkey(j, k)] = values[Lkey(j, k)].compose(values[Lkey(j, k - 1)].inverse())
        carry.values.update(values)
        stitched.update(values)
    return _harmonise(kind, fo, stitched, stats, anchor_fn)


def _harmonise(kind, fo: FrontendOutput, values: dict, stats, anchor_fn: AnchorFn) -> EstimatorOutput:
    cams = {k.frame: v for k, v in values.items() if k.kind == "X"}
    motions = {(k.obj, k.frame): v for k, v in values.items() if k.kind == "H"}
    est_poses = {(k.obj, k.frame): v for k, v in values.items() if k.kind == "L"}
    dyn = {(k.track, k.frame): v for k, v in values.items() if k.kind == "m" and k.frame >= 0}
    static = {k.track: v for k, v in values.items() if k.kind == "m" and k.frame < 0}
    point_object = {}
    for f in fo.measurements.frames:
        for t, j in zip(f.track, f.obj):
            point_object[int(t)] = int(j)
    object_poses: dict[tuple[int, int], Pose3] = {}
    for j in sorted({j for j, _ in motions} | {j for j, _ in est_poses}):
        frames_j = [k for (jj, k) in motions if jj == j]
        covered = set()
        for seg in motion_segments(frames_j):
            s = seg[0]
            if kind is FormulationKind.WCPE:
                anchor = est_poses[(j, s)]
            else:
                world = np.array([v for (t, k), v in dyn.items() if k == s and point_object.get(t) == j])
                anchor = anchor_fn(j, s, world)
            chain = recover_object_poses({k: motions[(j, k)] for k in seg[1:]}, anchor, s, seg[-1])
            for k, L in chain.items():
                object_poses.setdefault((j, k), L)
            covered.update(seg)
        for (jj, k), L in est_poses.items():
            if jj == j and k not in covered:
                object_poses[(j, k)] = L
    return EstimatorOutput(
        formulation=FormulationKind(kind).value,
        camera_poses=dict(sorted(cams.items())),
        motions=dict(sorted(motions.items())),
        object_poses=dict(sorted(object_poses.items())),
        dynamic_points=dict(sorted(dyn.items())),
        point_object=point_object,
        static_points=dict(sorted(static.items())),
        stats=stats,
    )


def run_batch(kind, fo: FrontendOutput, cfg: BackendConfig | None = None, ground_truth=None, anchors=None) -> EstimatorOutput:
    """Single full-batch solve over every frame."""
    cfg = cfg or BackendConfig()
    return _run_windows(kind, fo, cfg, window_ranges(fo.num_frames, None), ground_truth, anchors)


def run_sliding_window(kind, fo: FrontendOutput, window: int = 20, overlap: int = 1, cfg: BackendConfig | None = None, ground_truth=None, anchors=None) -> EstimatorOutput:
    """Sequential window solves; overlapping states are initialised from the previous window."""
    cfg = cfg or BackendConfig()
    return _run_windows(kind, fo, cfg, window_ranges(fo.num_frames, window, overlap), ground_truth, anchors)
