"""Synthetic dynamic scenes and simulated RGB-D tracking measurements.

Conventions: the world frame is the first camera frame (x right, y down,
z forward). Every object has a body frame placed at the centroid of its point
cloud with identity rotation at its first observed frame. Tracklet ids are
``0..S-1`` for static points followed by object points; object ids start at 1
(0 marks static measurements).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .camera import CameraModel
from .liegroup import Pose3, se3_exp

FORMAT_VERSION = 1
MOTION_SCRIPTS = ("constant", "piecewise", "smooth")


class ConfigError(ValueError):
    """Invalid scene or noise configuration."""


@dataclass
class ObjectSpec:
    """Optional per-object overrides. ``None`` fields fall back to scene defaults."""

    motion: str | None = None
    num_points: int | None = None
    first_frame: int = 0
    last_frame: int | None = None
    # local (body-frame) twist per frame, (omega, v); random when None
    twist: list[float] | None = None
    # half-open [start, end) frame intervals where the object is hidden
    occlusions: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class SceneConfig:
    num_frames: int = 15
    num_objects: int = 2
    points_per_object: int = 100
    num_static_points: int = 50
    motion: str = "constant"
    seed: int = 0
    camera_speed: float = 0.5
    camera_yaw_amplitude: float = 0.02
    object_extent: tuple[float, float, float] = (1.8, 1.5, 4.0)
    static_depth: tuple[float, float] = (4.0, 30.0)
    object_depth: tuple[float, float] = (6.0, 12.0)
    min_visible_fraction: float = 0.8
    objects: list[ObjectSpec] = field(default_factory=list)
    camera: CameraModel = field(default_factory=CameraModel)

    def validate(self) -> None:
        if self.num_frames < 1:
            raise ConfigError("scene needs at least one frame")
        if self.num_objects < 0 or self.num_static_points < 0:
            raise ConfigError("counts must be non-negative")
        if self.num_objects > 0 and self.points_per_object < 1:
            raise ConfigError("objects need non-empty point clouds")
        if self.motion not in MOTION_SCRIPTS:
            raise ConfigError(f"unknown motion script {self.motion!r}")
        if len(self.objects) > self.num_objects:
            raise ConfigError("more object overrides than objects")
        if not 0 < self.min_visible_fraction <= 1:
            raise ConfigError("min_visible_fraction must be in (0, 1]")
        for j, spec in enumerate(self.objects, start=1):
            if spec.motion is not None and spec.motion not in MOTION_SCRIPTS:
                raise ConfigError(f"object {j}: unknown motion script {spec.motion!r}")
            if spec.num_points is not None and spec.num_points < 1:
                raise ConfigError(f"object {j}: empty point cloud")
            first, last = self.object_window(j)
            if first < 0 or last >= self.num_frames or last - first + 1 < 3:
                raise ConfigError(f"object {j}: window [{first}, {last}] must lie in the sequence and span >= 3 frames")
            if spec.twist is not None and len(spec.twist) != 6:
                raise ConfigError(f"object {j}: twist needs 6 values")
        if self.num_objects > 0 and self.num_frames < 3 and len(self.objects) < self.num_objects:
            raise ConfigError("objects need a window of at least 3 frames")

    def object_spec(self, j: int) -> ObjectSpec:
        return self.objects[j - 1] if j - 1 < len(self.objects) else ObjectSpec()

    def object_window(self, j: int) -> tuple[int, int]:
        spec = self.object_spec(j)
        last = self.num_frames - 1 if spec.last_frame is None else spec.last_frame
        return spec.first_frame, last

    def to_dict(self) -> dict:
        d = asdict(self)
        d["object_extent"] = list(self.object_extent)
        d["static_depth"] = list(self.static_depth)
        d["object_depth"] = list(self.object_depth)
        for o in d["objects"]:
            o["occlusions"] = [list(iv) for iv in o["occlusions"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SceneConfig:
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        if "camera" in d and isinstance(d["camera"], dict):
            try:
                d["camera"] = CameraModel.from_dict(d["camera"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"camera: {exc}") from exc
        objs = []
        for o in d.get("objects", []):
            o = dict(o)
            o["occlusions"] = [tuple(iv) for iv in o.get("occlusions", [])]
            try:
                objs.append(ObjectSpec(**o))
            except TypeError as exc:
                raise ConfigError(f"object spec: {exc}") from exc
        d["objects"] = objs
        for key in ("object_extent", "static_depth", "object_depth"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class NoiseSpec:
    sigma_pixel: float = 1.0
    sigma_depth: float = 0.01
    sigma_flow: float = 0.0
    outlier_rate: float = 0.0

    def validate(self) -> None:
        for name in ("sigma_pixel", "sigma_depth", "sigma_flow"):
            v = getattr(self, name)
            if not (v >= 0 and np.isfinite(v)):
                raise ConfigError(f"{name} must be non-negative")
        if not 0 <= self.outlier_rate < 1:
            raise ConfigError("outlier_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NoiseSpec:
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"noise spec: {exc}") from exc


@dataclass
class ObjectTrack:
    """Ground-truth object: body-frame points and poses over [first_frame, last_frame]."""

    obj_id: int
    first_frame: int
    poses: list[Pose3]
    body_points: np.ndarray
    track_ids: np.ndarray
    occlusions: list[tuple[int, int]] = field(default_factory=list)

    @property
    def last_frame(self) -> int:
        return self.first_frame + len(self.poses) - 1

    @property
    def frames(self) -> range:
        return range(self.first_frame, self.last_frame + 1)

    def observed(self, k: int) -> bool:
        return self.first_frame <= k <= self.last_frame

    def occluded(self, k: int) -> bool:
        return any(a <= k < b for a, b in self.occlusions)

    def pose(self, k: int) -> Pose3:
        if not self.observed(k):
            raise KeyError(f"object {self.obj_id} not present at frame {k}")
        return self.poses[k - self.first_frame]

    def motion(self, k: int) -> Pose3:
        """World-frame motion from k-1 to k."""
        return self.pose(k).compose(self.pose(k - 1).inverse())

    def local_motion(self, k: int) -> Pose3:
        """Body-frame motion from k-1 to k."""
        return self.pose(k - 1).inverse().compose(self.pose(k))

    def world_points(self, k: int) -> np.ndarray:
        return self.pose(k).transform_point(self.body_points)


@dataclass
class GroundTruthScene:
    config: SceneConfig
    camera_poses: list[Pose3]
    static_points: np.ndarray
    objects: dict[int, ObjectTrack]

    @property
    def num_frames(self) -> int:
        return len(self.camera_poses)

    @property
    def camera(self) -> CameraModel:
        return self.config.camera

    def object_motion(self, j: int, k: int) -> Pose3:
        return self.objects[j].motion(k)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "camera_poses": [p.to_list() for p in self.camera_poses],
            "static_points": self.static_points.tolist(),
            "objects": [
                {
                    "id": o.obj_id,
                    "first_frame": o.first_frame,
                    "poses": [p.to_list() for p in o.poses],
                    "body_points": o.body_points.tolist(),
                    "track_ids": o.track_ids.tolist(),
                    "occlusions": [list(iv) for iv in o.occlusions],
                }
                for o in self.objects.values()
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> GroundTruthScene:
        cfg = SceneConfig.from_dict(d["config"])
        objects = {}
        for o in d["objects"]:
            objects[int(o["id"])] = ObjectTrack(
                obj_id=int(o["id"]),
                first_frame=int(o["first_frame"]),
                poses=[Pose3.from_list(p) for p in o["poses"]],
                body_points=np.asarray(o["body_points"], dtype=float).reshape(-1, 3),
                track_ids=np.asarray(o["track_ids"], dtype=int),
                occlusions=[tuple(iv) for iv in o.get("occlusions", [])],
            )
        return cls(
            config=cfg,
            camera_poses=[Pose3.from_list(p) for p in d["camera_poses"]],
            static_points=np.asarray(d["static_points"], dtype=float).reshape(-1, 3),
            objects=objects,
        )


@dataclass(frozen=True)
class TrackedMeasurement:
    frame: int
    track: int
    obj: int
    pixel: np.ndarray
    depth: float
    point: np.ndarray  # camera-frame 3D point from back-projection
    flow: np.ndarray | None


@dataclass
class FrameMeasurements:
    """All measurements of one frame as parallel arrays.

    ``flow`` holds the measured pixel displacement from the previous frame
    (NaN when the tracklet was not seen at k-1). ``outlier`` is simulator
    truth and must not be read by estimators.
    """

    frame: int
    track: np.ndarray
    obj: np.ndarray
    pixel: np.ndarray
    depth: np.ndarray
    flow: np.ndarray
    outlier: np.ndarray

    def __len__(self) -> int:
        return len(self.track)

    def points(self, cam: CameraModel) -> np.ndarray:
        """Back-projected camera-frame 3D points."""
        return cam.back_project(self.pixel, self.depth)

    def select(self, mask: np.ndarray) -> FrameMeasurements:
        return FrameMeasurements(
            self.frame,
            self.track[mask],
            self.obj[mask],
            self.pixel[mask],
            self.depth[mask],
            self.flow[mask],
            self.outlier[mask],
        )

    def index_of(self) -> dict[int, int]:
        return {int(t): n for n, t in enumerate(self.track)}

    def to_dict(self) -> dict:
        return {
            "frame": self.frame,
            "track": self.track.tolist(),
            "obj": self.obj.tolist(),
            "pixel": self.pixel.tolist(),
            "depth": self.depth.tolist(),
            "flow": [None if np.isnan(f[0]) else f.tolist() for f in self.flow],
            "outlier": self.outlier.astype(bool).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> FrameMeasurements:
        n = len(d["track"])
        flow = np.full((n, 2), np.nan)
        for i, f in enumerate(d["flow"]):
            if f is not None:
                flow[i] = f
        return cls(
            frame=int(d["frame"]),
            track=np.asarray(d["track"], dtype=int).reshape(n),
            obj=np.asarray(d["obj"], dtype=int).reshape(n),
            pixel=np.asarray(d["pixel"], dtype=float).reshape(n, 2),
            depth=np.asarray(d["depth"], dtype=float).reshape(n),
            flow=flow,
            outlier=np.asarray(d.get("outlier", [False] * n), dtype=bool).reshape(n),
        )


@dataclass
class MeasurementSet:
    camera: CameraModel
    noise: NoiseSpec
    frames: list[FrameMeasurements]

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def static(self, k: int) -> FrameMeasurements:
        f = self.frames[k]
        return f.select(f.obj == 0)

    def dynamic(self, k: int, j: int) -> FrameMeasurements:
        f = self.frames[k]
        return f.select(f.obj == j)

    def tracked(self, k: int) -> list[TrackedMeasurement]:
        f = self.frames[k]
        pts = f.points(self.camera)
        return [
            TrackedMeasurement(
                k,
                int(f.track[n]),
                int(f.obj[n]),
                f.pixel[n].copy(),
                float(f.depth[n]),
                pts[n],
                None if np.isnan(f.flow[n, 0]) else f.flow[n].copy(),
            )
            for n in range(len(f))
        ]

    def object_ids(self) -> list[int]:
        ids = set()
        for f in self.frames:
            ids.update(int(j) for j in np.unique(f.obj) if j != 0)
        return sorted(ids)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _camera_trajectory(cfg: SceneConfig) -> list[Pose3]:
    poses = [Pose3.identity()]
    for k in range(1, cfg.num_frames):
        yaw = cfg.camera_yaw_amplitude * np.sin(2 * np.pi * k / 20.0)
        pitch = 0.1 * cfg.camera_yaw_amplitude * np.cos(2 * np.pi * k / 13.0)
        step = se3_exp([pitch, yaw, 0.0, 0.0, 0.0, cfg.camera_speed])
        poses.append(poses[-1].compose(step))
    return poses


def _static_points(cfg: SceneConfig, cams: list[Pose3], rng: np.random.Generator) -> np.ndarray:
    cam = cfg.camera
    out = np.zeros((cfg.num_static_points, 3))
    for n in range(cfg.num_static_points):
        k = int(rng.integers(0, len(cams)))
        pix = rng.uniform([0.05 * cam.width, 0.05 * cam.height], [0.95 * cam.width, 0.95 * cam.height])
        d = rng.uniform(*cfg.static_depth)
        out[n] = cams[k].transform_point(cam.back_project(pix, d))
    return out


def _box_points(n: int, extent, rng: np.random.Generator) -> np.ndarray:
    pts = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.asarray(extent)
    return pts - pts.mean(axis=0)


def _base_twist(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    yaw = rng.uniform(-0.015, 0.015)
    vx = rng.uniform(-0.05, 0.05)
    vz = cfg.camera_speed + rng.uniform(-0.1, 0.25)
    return np.array([0.0, yaw, 0.0, vx, 0.0, vz])


def _twist_schedule(script: str, base: np.ndarray, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Per-step local twists for ``n`` steps."""
    if script == "constant":
        return [base.copy() for _ in range(n)]
    if script == "piecewise":
        switches = sorted(rng.choice(np.arange(1, max(n, 2)), size=min(2, max(n - 1, 0)), replace=False).tolist())
        twists = []
        cur = base.copy()
        for s in range(n):
            if s in switches:
                cur = base + np.array([0.0, rng.uniform(-0.01, 0.01), 0.0, rng.uniform(-0.03, 0.03), 0.0, rng.uniform(-0.1, 0.1)])
            twists.append(cur.copy())
        return twists
    phase = rng.uniform(0, 2 * np.pi)
    amp = np.array([0.0, 0.008, 0.0, 0.02, 0.0, 0.08])
    return [base + amp * np.sin(2 * np.pi * s / 12.0 + phase) for s in range(n)]


def _visible_fraction(cam: CameraModel, X: Pose3, world_pts: np.ndarray) -> float:
    local = X.inverse().transform_point(world_pts)
    return float(np.mean(cam.visible(local)))


def generate_scene(config: SceneConfig) -> GroundTruthScene:
    """Deterministic ground-truth scene from ``config`` (seeded)."""
    config.validate()
    rng = np.random.default_rng([config.seed, 0])
    cams = _camera_trajectory(config)
    static = _static_points(config, cams, rng)
    cam = config.camera
    objects: dict[int, ObjectTrack] = {}
    next_track = config.num_static_points
    placed: list[np.ndarray] = []
    for j in range(1, config.num_objects + 1):
        spec = config.object_spec(j)
        first, last = config.object_window(j)
        n_pts = spec.num_points or config.points_per_object
        script = spec.motion or config.motion
        for _attempt in range(200):
            body = _box_points(n_pts, config.object_extent, rng)
            X0 = cams[first]
            local_c = np.array(
                [rng.uniform(-3.0, 3.0), rng.uniform(0.3, 1.2), rng.uniform(*config.object_depth)]
            )
            centre = X0.transform_point(local_c)
            base = np.asarray(spec.twist, dtype=float) if spec.twist is not None else _base_twist(config, rng)
            twists = _twist_schedule(script, base, last - first, rng)
            poses = [Pose3.from_rt(np.eye(3), centre)]
            for xi in twists:
                poses.append(poses[-1].compose(se3_exp(xi)))
            separated = all(np.linalg.norm(centre - c) > 3.0 for c in placed)
            ok = separated and all(
                _visible_fraction(cam, cams[first + s], p.transform_point(body)) >= config.min_visible_fraction
                for s, p in enumerate(poses)
            )
            if ok:
                break
        else:
            raise ConfigError(f"could not place object {j} visibly; relax the scene configuration")
        placed.append(centre)
        objects[j] = ObjectTrack(
            obj_id=j,
            first_frame=first,
            poses=poses,
            body_points=body,
            track_ids=np.arange(next_track, next_track + n_pts),
            occlusions=[tuple(iv) for iv in spec.occlusions],
        )
        next_track += n_pts
    return GroundTruthScene(config, cams, static, objects)


def simulate_measurements(scene: GroundTruthScene, cam: CameraModel | None = None, noise: NoiseSpec | None = None, seed: int | None = None) -> MeasurementSet:
    """Project the scene into every frame, cull, add noise and outliers.

    Noise is drawn for every (frame, point) pair up front, so culling changes
    which measurements exist but never the values of the surviving ones.
    """
    cam = cam or scene.camera
    noise = noise or NoiseSpec()
    noise.validate()
    seed = scene.config.seed if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    K = scene.num_frames
    tracks = [np.arange(len(scene.static_points))]
    objs = [np.zeros(len(scene.static_points), dtype=int)]
    for o in scene.objects.values():
        tracks.append(o.track_ids)
        objs.append(np.full(len(o.track_ids), o.obj_id))
    all_tracks = np.concatenate(tracks)
    all_objs = np.concatenate(objs)
    P = len(all_tracks)
    pix_noise = rng.normal(0.0, 1.0, size=(K, P, 2)) * noise.sigma_pixel
    depth_noise = rng.normal(0.0, 1.0, size=(K, P)) * noise.sigma_depth
    flow_noise = rng.normal(0.0, 1.0, size=(K, P, 2)) * noise.sigma_flow
    is_outlier = rng.uniform(size=(K, P)) < noise.outlier_rate
    out_pix = rng.uniform([0.0, 0.0], [cam.width, cam.height], size=(K, P, 2))
    out_depth = rng.uniform(cam.min_depth, cam.max_depth, size=(K, P))

    frames: list[FrameMeasurements] = []
    prev_pixel: dict[int, np.ndarray] = {}
    for k in range(K):
        world = np.full((P, 3), np.nan)
        present = np.zeros(P, dtype=bool)
        S = len(scene.static_points)
        world[:S] = scene.static_points
        present[:S] = True
        start = S
        for o in scene.objects.values():
            n = len(o.track_ids)
            if o.observed(k) and not o.occluded(k):
                world[start : start + n] = o.world_points(k)
                present[start : start + n] = True
            start += n
        local = np.zeros((P, 3))
        local[present] = scene.camera_poses[k].inverse().transform_point(world[present])
        vis = np.zeros(P, dtype=bool)
        vis[present] = cam.visible(local[present])
        idx = np.nonzero(vis)[0]
        true_pix = cam.project_local(local[idx]) if len(idx) else np.zeros((0, 2))
        pix = true_pix + pix_noise[k, idx]
        depth = local[idx, 2] + depth_noise[k, idx]
        out = is_outlier[k, idx]
        pix[out] = out_pix[k, idx][out]
        depth[out] = out_depth[k, idx][out]
        flow = np.full((len(idx), 2), np.nan)
        cur_pixel = {}
        for n, p in enumerate(idx):
            t = int(all_tracks[p])
            cur_pixel[t] = pix[n]
            if t in prev_pixel:
                flow[n] = pix[n] - prev_pixel[t] + flow_noise[k, p]
        prev_pixel = cur_pixel
        frames.append(
            FrameMeasurements(
                frame=k,
                track=all_tracks[idx].copy(),
                obj=all_objs[idx].copy(),
                pixel=pix,
                depth=depth,
                flow=flow,
                outlier=out.copy(),
            )
        )
    return MeasurementSet(cam, noise, frames)
