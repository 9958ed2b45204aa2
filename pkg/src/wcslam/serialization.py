"""On-disk formats (JSON and JSON Lines).

Every record carries ``format_version`` and ``sequence_id``. Poses are
``[tx, ty, tz, qx, qy, qz, qw]`` (meters, unit quaternion, scalar last).

Dataset directory:
  scene.json    config, noise, seed, camera model, static points, object
                body-frame point clouds with their tracklet ids
  frames.jsonl  one record per frame: ground-truth camera and object poses
                plus the measurement arrays (pixel [px], depth [m],
                flow [px], obj, track, simulator outlier flag)

frontend.jsonl: one FrontendFrame record per frame.
estimate.jsonl: one ``"record": "frame"`` line per frame (camera pose,
per-object motion into the frame and pose, dynamic points) and a final
``"record": "map"`` line (static points, point-to-object table).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backend import EstimatorOutput
from .camera import CameraModel
from .frontend import FrontendFrame, FrontendOutput
from .liegroup import Pose3
from .scenegen import FrameMeasurements, GroundTruthScene, MeasurementSet, NoiseSpec, ObjectTrack, SceneConfig

FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Malformed or inconsistent input file."""


class SequenceMismatch(DatasetError):
    pass


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def make_sequence_id(config: dict, noise: dict, seed: int) -> str:
    digest = hashlib.sha256(dumps({"config": config, "noise": noise, "seed": seed}).encode()).hexdigest()
    return f"seq-{seed}-{digest[:12]}"


def _header(sequence_id: str) -> dict:
    return {"format_version": FORMAT_VERSION, "sequence_id": sequence_id}


def _check_header(rec: dict, where: str, sequence_id: str | None = None) -> str:
    if not isinstance(rec, dict):
        raise DatasetError(f"{where}: expected a JSON object")
    version = rec.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetError(f"{where}: unsupported format_version {version!r}")
    seq = rec.get("sequence_id")
    if not isinstance(seq, str):
        raise DatasetError(f"{where}: missing sequence_id")
    if sequence_id is not None and seq != sequence_id:
        raise SequenceMismatch(f"{where}: sequence_id {seq!r} does not match {sequence_id!r}")
    return seq


def _read_jsonl(path: Path, sequence_id: str | None = None):
    """Yield (line number, record) with header checks; errors name the line."""
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    with path.open() as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path.name}:{n}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}: invalid JSON ({exc.msg})") from None
            _check_header(rec, where, sequence_id)
            yield where, rec


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    try:
        rec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path.name}: invalid JSON ({exc.msg})") from None
    _check_header(rec, path.name)
    return rec


def _pose(value, where: str) -> Pose3:
    try:
        return Pose3.from_list(value)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: bad pose ({exc})") from None


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    sequence_id: str
    seed: int
    scene: GroundTruthScene
    measurements: MeasurementSet


def write_dataset(out_dir: str | Path, scene: GroundTruthScene, ms: MeasurementSet, seed: int, sequence_id: str | None = None) -> Dataset:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = scene.config.to_dict()
    noise = ms.noise.to_dict()
    sequence_id = sequence_id or make_sequence_id(config, noise, seed)
    head = {
        **_header(sequence_id),
        "seed": seed,
        "num_frames": scene.num_frames,
        "config": config,
        "noise": noise,
        "camera": ms.camera.to_dict(),
        "static_points": scene.static_points.tolist(),
        "objects": [
            {
                "id": o.obj_id,
                "first_frame": o.first_frame,
                "last_frame": o.last_frame,
                "body_points": o.body_points.tolist(),
                "track_ids": o.track_ids.tolist(),
                "occlusions": [list(iv) for iv in o.occlusions],
            }
            for o in scene.objects.values()
        ],
    }
    (out / "scene.json").write_text(json.dumps(head, sort_keys=True, indent=1, allow_nan=False) + "\n")
    with (out / "frames.jsonl").open("w") as fh:
        for k, meas in enumerate(ms.frames):
            rec = {
                **_header(sequence_id),
                "frame": k,
                "camera_pose": scene.camera_poses[k].to_list(),
                "object_poses": {str(j): o.pose(k).to_list() for j, o in scene.objects.items() if o.observed(k)},
                "measurements": meas.to_dict(),
            }
            fh.write(dumps(rec) + "\n")
    return Dataset(sequence_id, seed, scene, ms)


def read_dataset(data_dir: str | Path) -> Dataset:
    data = Path(data_dir)
    head = _read_json(data / "scene.json")
    seq = head["sequence_id"]
    try:
        config = SceneConfig.from_dict(head["config"])
        noise = NoiseSpec.from_dict(head["noise"])
        camera = CameraModel.from_dict(head["camera"])
        num_frames = int(head["num_frames"])
        static = np.asarray(head["static_points"], dtype=float).reshape(-1, 3)
        obj_heads = {int(o["id"]): o for o in head["objects"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"scene.json: {exc}") from None
    cams: dict[int, Pose3] = {}
    obj_poses: dict[int, dict[int, Pose3]] = {j: {} for j in obj_heads}
    frames: dict[int, FrameMeasurements] = {}
    for where, rec in _read_jsonl(data / "frames.jsonl", seq):
        try:
            k = int(rec["frame"])
            if k in frames or not 0 <= k < num_frames:
                raise DatasetError(f"{where}: duplicate or out-of-range frame {k}")
            cams[k] = _pose(rec["camera_pose"], where)
            for j, p in rec["object_poses"].items():
                obj_poses[int(j)][k] = _pose(p, where)
            frames[k] = FrameMeasurements.from_dict(rec["measurements"])
        except DatasetError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: {type(exc).__name__}: {exc}") from None
        if frames[k].frame != k:
            raise DatasetError(f"{where}: measurement frame {frames[k].frame} != record frame {k}")
    if sorted(frames) != list(range(num_frames)):
        raise DatasetError(f"frames.jsonl: expected frames 0..{num_frames - 1}, got {len(frames)} records")
    objects = {}
    for j, o in obj_heads.items():
        first, last = int(o["first_frame"]), int(o["last_frame"])
        if sorted(obj_poses[j]) != list(range(first, last + 1)):
            raise DatasetError(f"object {j}: ground-truth poses do not cover frames {first}..{last}")
        objects[j] = ObjectTrack(
            obj_id=j,
            first_frame=first,
            poses=[obj_poses[j][k] for k in range(first, last + 1)],
            body_points=np.asarray(o["body_points"], dtype=float).reshape(-1, 3),
            track_ids=np.asarray(o["track_ids"], dtype=int),
            occlusions=[tuple(iv) for iv in o.get("occlusions", [])],
        )
    scene = GroundTruthScene(config, [cams[k] for k in range(num_frames)], static, objects)
    ms = MeasurementSet(camera, noise, [frames[k] for k in range(num_frames)])
    return Dataset(seq, int(head.get("seed", config.seed)), scene, ms)


# ---------------------------------------------------------------------------
# Front-end and estimate files
# ---------------------------------------------------------------------------


def write_frontend(path: str | Path, fo: FrontendOutput, sequence_id: str) -> None:
    with Path(path).open("w") as fh:
        for fr in fo.frames:
            fh.write(dumps({**_header(sequence_id), **fr.to_dict()}) + "\n")


def read_frontend(path: str | Path, measurements: MeasurementSet, sequence_id: str | None = None) -> FrontendOutput:
    frames = []
    for where, rec in _read_jsonl(Path(path), sequence_id):
        try:
            fr = FrontendFrame.from_dict(rec)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: {exc}") from None
        if fr.frame != len(frames) or len(fr.inliers) != len(measurements.frames[fr.frame]):
            raise DatasetError(f"{where}: frame record does not match the dataset")
        frames.append(fr)
    if len(frames) != measurements.num_frames:
        raise DatasetError(f"{path}: {len(frames)} frames, dataset has {measurements.num_frames}")
    return FrontendOutput(measurements, frames)


def write_estimate(path: str | Path, est: EstimatorOutput, sequence_id: str) -> None:
    frames = sorted(set(est.camera_poses) | {k for _, k in est.motions} | {k for _, k in est.object_poses})
    with Path(path).open("w") as fh:
        for k in frames:
            objs: dict[str, dict] = {}
            for j in est.object_ids():
                H = est.motions.get((j, k))
                L = est.object_poses.get((j, k))
                if H is not None or L is not None:
                    objs[str(j)] = {
                        "motion": H.to_list() if H is not None else None,
                        "pose": L.to_list() if L is not None else None,
                    }
            cam = est.camera_poses.get(k)
            rec = {
                **_header(sequence_id),
                "record": "frame",
                "formulation": est.formulation,
                "frame": k,
                "camera_pose": cam.to_list() if cam is not None else None,
                "objects": objs,
                "points": {str(t): p.tolist() for (t, kk), p in sorted(est.dynamic_points.items()) if kk == k},
            }
            fh.write(dumps(rec) + "\n")
        fh.write(
            dumps(
                {
                    **_header(sequence_id),
                    "record": "map",
                    "formulation": est.formulation,
                    "static_points": {str(t): p.tolist() for t, p in sorted(est.static_points.items())},
                    "point_object": {str(t): j for t, j in sorted(est.point_object.items())},
                }
            )
            + "\n"
        )


def read_estimate(path: str | Path, sequence_id: str | None = None) -> tuple[EstimatorOutput, str]:
    est = EstimatorOutput("", {}, {}, {}, {}, {}, {})
    seq = None
    for where, rec in _read_jsonl(Path(path), sequence_id):
        seq = rec["sequence_id"]
        try:
            est.formulation = rec["formulation"]
            if rec["record"] == "frame":
                k = int(rec["frame"])
                if rec["camera_pose"] is not None:
                    est.camera_poses[k] = _pose(rec["camera_pose"], where)
                for j, o in rec["objects"].items():
                    if o["motion"] is not None:
                        est.motions[(int(j), k)] = _pose(o["motion"], where)
                    if o["pose"] is not None:
                        est.object_poses[(int(j), k)] = _pose(o["pose"], where)
                for t, p in rec["points"].items():
                    est.dynamic_points[(int(t), k)] = np.asarray(p, dtype=float).reshape(3)
            elif rec["record"] == "map":
                est.static_points = {int(t): np.asarray(p, dtype=float).reshape(3) for t, p in rec["static_points"].items()}
                est.point_object = {int(t): int(j) for t, j in rec["point_object"].items()}
            else:
                raise DatasetError(f"{where}: unknown record type {rec['record']!r}")
        except DatasetError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: {type(exc).__name__}: {exc}") from None
    if seq is None:
        raise DatasetError(f"{path}: empty estimate file")
    return est, seq
