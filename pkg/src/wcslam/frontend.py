"""Per-frame initial estimation of camera poses and object motions.

Stages for every frame ``k > 0``:

1. camera pose by RANSAC PnP on static points (world points from frame k-1),
2. joint optical-flow / camera-pose refinement,
3. per object: RANSAC PnP for ``G = X_k^-1 H`` and recovery ``H = X_k G``,
4. joint optical-flow / ``G`` refinement,
5. motion-only refinement of ``H`` with 3D gating.

A correspondence (track i, frames k-1 and k) that survives every stage it
entered verifies both of its measurements. A rejected correspondence blames
the measurement at k when the one at k-1 was already verified, otherwise the
one at k-1 (and the track restarts at k).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel, project_batch, projection_jacobian
from .factors import (
    FlowPriorFactor,
    FlowProjectionFactor,
    M,
    NoiseModel,
    PointMeasurementFactor,
    PoseProjectionFactor,
    PriorFactor,
    ProjectionFactor,
    TernaryMotionFactor,
    H as Hkey,
    X as Xkey,
)
from .liegroup import Pose3, poses_to_arrays, se3_exp_batch, skew
from .scenegen import FrameMeasurements, MeasurementSet
from .graph_solver import FactorGraph, SolverConfig, optimize


class InsufficientCorrespondences(ValueError):
    """Fewer correspondences than the minimal sample needs."""


class DegenerateGeometry(ValueError):
    """Correspondences do not constrain a full 6-DoF pose."""


@dataclass
class FrontendConfig:
    ransac_max_iterations: int = 200
    ransac_threshold_px: float = 4.0
    ransac_confidence: float = 0.99
    ransac_batch: int = 20
    sample_size: int = 6
    pixel_sigma: float = 1.0
    depth_sigma: float = 0.01
    flow_prior_sigma: float = 1.0
    camera_prior_sigma: float = 1e-4
    motion_sigma: float = 0.05
    gate_sigma: float = 3.0
    huber: float = 1.345
    refine_flow: bool = True
    refine_motion: bool = True
    condition_limit: float = 1e10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sample_size < 6:
            raise ValueError("sample_size must be at least 6")
        for name in ("ransac_threshold_px", "pixel_sigma", "depth_sigma", "flow_prior_sigma", "camera_prior_sigma", "motion_sigma", "gate_sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.ransac_confidence < 1:
            raise ValueError("ransac_confidence must be in (0, 1)")


_POLISH = SolverConfig(max_iterations=30, relative_tolerance=1e-5)


# ---------------------------------------------------------------------------
# RANSAC PnP on T: world -> camera
# ---------------------------------------------------------------------------


def _check_geometry(points: np.ndarray) -> None:
    c = points - points.mean(axis=0)
    ev = np.linalg.eigvalsh(c.T @ c / len(points))
    if ev[-1] < 1e-12 or ev[-2] < 1e-10 * ev[-1]:
        raise DegenerateGeometry("correspondences are coincident or collinear")


def _reprojection_errors(R, t, m, z, intr):
    """(B, N) pixel errors of world points ``m`` under hypotheses (R, t); inf behind the camera."""
    p = np.einsum("bij,nj->bni", R, m) + t[:, None, :]
    z_ok = p[..., 2] > 1e-9
    safe = np.where(z_ok[..., None], p, np.array([0.0, 0.0, 1.0]))
    u = intr[0] * safe[..., 0] / safe[..., 2] + intr[2]
    v = intr[1] * safe[..., 1] / safe[..., 2] + intr[3]
    err = np.hypot(z[None, :, 0] - u, z[None, :, 1] - v)
    return np.where(z_ok, err, np.inf)


def _minimal_solve(R0, t0, m, z, intr, iterations: int = 10):
    """Batched Gauss-Newton from a common seed; m (B, S, 3), z (B, S, 2)."""
    B = m.shape[0]
    R = np.broadcast_to(R0, (B, 3, 3)).copy()
    t = np.broadcast_to(t0, (B, 3)).copy()
    valid = np.ones(B, dtype=bool)
    for _ in range(iterations):
        p = np.einsum("bij,bsj->bsi", R, m) + t[:, None, :]
        valid &= np.all(p[..., 2] > 1e-6, axis=1)
        p[..., 2] = np.maximum(p[..., 2], 1e-6)
        flat = p.reshape(-1, 3)
        r = (z.reshape(-1, 2) - project_batch(intr, flat)).reshape(B, -1, 2)
        Dpi = projection_jacobian(intr, flat).reshape(B, -1, 2, 3)
        dp = np.concatenate([-skew(p), np.broadcast_to(np.eye(3), p.shape + (3,))], axis=-1)
        J = -(Dpi @ dp).reshape(B, -1, 6)
        r = r.reshape(B, -1)
        A = np.einsum("bni,bnj->bij", J, J) + 1e-9 * np.eye(6)
        g = np.einsum("bni,bn->bi", J, r)
        try:
            delta = -np.linalg.solve(A, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            delta = np.zeros((B, 6))
        delta = np.where(np.isfinite(delta), delta, 0.0)
        dR, dt = se3_exp_batch(delta)
        R = dR @ R
        t = np.einsum("bij,bj->bi", dR, t) + dt
    return R, t, valid


def _pnp_ransac(m: np.ndarray, z: np.ndarray, cam: CameraModel, seed: Pose3, cfg: FrontendConfig, rng: np.random.Generator):
    """Robust world->camera transform T with ``z ~ pi(T m)``. Returns (T, inlier mask)."""
    n = len(m)
    if n < cfg.sample_size:
        raise InsufficientCorrespondences(f"{n} correspondences, need {cfg.sample_size}")
    _check_geometry(m)
    intr = cam.intrinsics
    best = None  # (count, -rms, R, t, mask)
    done = 0
    needed = cfg.ransac_max_iterations
    R0, t0 = seed.rotation, seed.translation
    while done < min(needed, cfg.ransac_max_iterations):
        b = min(cfg.ransac_batch, cfg.ransac_max_iterations - done)
        idx = np.stack([rng.choice(n, cfg.sample_size, replace=False) for _ in range(b)])
        R, t, valid = _minimal_solve(R0, t0, m[idx], z[idx], intr)
        err = _reprojection_errors(R, t, m, z, intr)
        inl = (err < cfg.ransac_threshold_px) & valid[:, None]
        counts = inl.sum(axis=1)
        sq = np.where(inl, err, 0.0) ** 2
        rms = np.sqrt(sq.sum(axis=1) / np.maximum(counts, 1))
        for h in range(b):
            key = (int(counts[h]), -float(rms[h]))
            if best is None or key > best[0]:
                best = (key, R[h], t[h], inl[h])
        done += b
        w = best[0][0] / n
        p_good = w**cfg.sample_size
        if p_good >= 1.0:
            needed = 0
        elif p_good > 1e-12:
            needed = math.ceil(math.log(1.0 - cfg.ransac_confidence) / math.log(1.0 - p_good))
    (count, _), R, t, mask = best
    if count < cfg.sample_size:
        raise InsufficientCorrespondences(f"only {count} RANSAC inliers")
    T = _polish_pose(Pose3.from_rt(R, t), m[mask], z[mask], cam, cfg)
    return T, mask


def _polish_pose(T: Pose3, m, z, cam, cfg: FrontendConfig) -> Pose3:
    graph = FactorGraph()
    noise = NoiseModel.isotropic(2, cfg.pixel_sigma)
    for mi, zi in zip(m, z):
        graph.add(PoseProjectionFactor("T", zi, mi, cam, noise, invert=False))
    graph.insert("T", T)
    values, _ = optimize(graph, cfg=_POLISH)
    out = values["T"]
    # conditioning of the information matrix at the solution
    fac = PoseProjectionFactor
    Rb, tb = poses_to_arrays([out] * len(m))
    data = [z, m, np.broadcast_to(cam.intrinsics, (len(m), 4)), np.zeros(len(m), dtype=bool)]
    _, (J,) = fac.evaluate_batch([(Rb, tb)], data)
    J = J.reshape(-1, 6)
    s = np.linalg.svd(J, compute_uv=False)
    if s[-1] <= 0 or (s[0] / s[-1]) ** 2 > cfg.condition_limit:
        raise DegenerateGeometry("pose is poorly constrained by the inliers")
    return out


def estimate_camera_pose(points_world, pixels, cam: CameraModel, prev_pose: Pose3, cfg: FrontendConfig | None = None, rng=None):
    """Camera pose X_k from static 3D map points and their pixels at k."""
    cfg = cfg or FrontendConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    m = np.asarray(points_world, dtype=float).reshape(-1, 3)
    z = np.asarray(pixels, dtype=float).reshape(-1, 2)
    T, mask = _pnp_ransac(m, z, cam, prev_pose.inverse(), cfg, rng)
    return T.inverse(), mask


def estimate_object_motion(points_world_prev, pixels, X_k: Pose3, cam: CameraModel, cfg: FrontendConfig | None = None, rng=None, prev_motion: Pose3 | None = None):
    """Absolute motion H from object points at k-1 (world) and their pixels at k."""
    cfg = cfg or FrontendConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    m = np.asarray(points_world_prev, dtype=float).reshape(-1, 3)
    z = np.asarray(pixels, dtype=float).reshape(-1, 2)
    seed = X_k.inverse().compose(prev_motion or Pose3.identity())
    G, mask = _pnp_ransac(m, z, cam, seed, cfg, rng)
    return X_k.compose(G), mask


# ---------------------------------------------------------------------------
# Refinement stages
# ---------------------------------------------------------------------------


def _flow_errors(T: Pose3, invert: bool, m, z_prev, flows, cam):
    Tm = T.inverse() if invert else T
    p = Tm.transform_point(m).reshape(-1, 3)
    err = np.full(len(p), np.inf)
    ok = p[:, 2] > 0
    if np.any(ok):
        err[ok] = np.linalg.norm(z_prev[ok] + flows[ok] - project_batch(cam.intrinsics, p[ok]), axis=1)
    return err


def build_flow_graph(stage: str, points_world, pixels_prev, flows, T: Pose3, cam: CameraModel, cfg: FrontendConfig | None = None, flows_init=None, ids=None) -> FactorGraph:
    """Pose variable ``"T"`` plus one flow variable ``("f", id)`` per track."""
    cfg = cfg or FrontendConfig()
    invert = stage == "camera"
    ids = range(len(flows)) if ids is None else ids
    flows_init = flows if flows_init is None else flows_init
    proj = NoiseModel.isotropic(2, cfg.pixel_sigma, huber=cfg.huber)
    prior = NoiseModel.isotropic(2, cfg.flow_prior_sigma)
    graph = FactorGraph()
    graph.insert("T", T)
    for n, i in enumerate(ids):
        key = ("f", int(i))
        graph.add(FlowProjectionFactor("T", key, pixels_prev[n], points_world[n], cam, proj, invert=invert))
        graph.add(FlowPriorFactor(key, flows[n], prior))
        graph.insert(key, flows_init[n])
    return graph


def refine_joint_flow(stage: str, points_world, pixels_prev, flows, T_init: Pose3, cam: CameraModel, cfg: FrontendConfig | None = None):
    """Jointly refine a pose and per-track flows.

    ``stage="camera"``: ``T_init`` is the camera pose X_k and points are static.
    ``stage="object"``: ``T_init`` is G = X_k^-1 H and points are at k-1.
    Returns ``(T, refined flows, inlier mask)``.
    """
    if stage not in ("camera", "object"):
        raise ValueError(f"unknown stage {stage!r}")
    cfg = cfg or FrontendConfig()
    invert = stage == "camera"
    m = np.asarray(points_world, dtype=float).reshape(-1, 3)
    z_prev = np.asarray(pixels_prev, dtype=float).reshape(-1, 2)
    f_meas = np.asarray(flows, dtype=float).reshape(-1, 2)
    mask = np.ones(len(m), dtype=bool)
    T = T_init
    f_out = f_meas.copy()
    for _ in range(2):
        idx = np.nonzero(mask)[0]
        if len(idx) < cfg.sample_size:
            break
        graph = build_flow_graph(stage, m[idx], z_prev[idx], f_meas[idx], T, cam, cfg, flows_init=f_out[idx], ids=idx)
        values, _ = optimize(graph, cfg=_POLISH)
        T = values["T"]
        for i in idx:
            f_out[i] = values[("f", int(i))]
        new_mask = mask & (_flow_errors(T, invert, m, z_prev, f_meas, cam) <= cfg.ransac_threshold_px)
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    return T, f_out, mask


def backprojection_covariance(cam: CameraModel, pixels, depths, pixel_sigma: float, depth_sigma: float) -> np.ndarray:
    """(N, 3, 3) covariance of back-projected points from pixel and depth noise."""
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    d = np.asarray(depths, dtype=float).reshape(-1)
    A = np.zeros((len(d), 3, 3))
    A[:, 0, 0] = d / cam.fx
    A[:, 0, 2] = (pixels[:, 0] - cam.cx) / cam.fx
    A[:, 1, 1] = d / cam.fy
    A[:, 1, 2] = (pixels[:, 1] - cam.cy) / cam.fy
    A[:, 2, 2] = 1.0
    S = np.diag([pixel_sigma**2, pixel_sigma**2, depth_sigma**2])
    return A @ S @ np.swapaxes(A, 1, 2)


def motion_gate(H: Pose3, X_prev: Pose3, X_curr: Pose3, pts_prev, pts_curr, cov_prev, cov_curr) -> np.ndarray:
    """Mahalanobis norm of the measured-point motion residual X_k z_k - H X_{k-1} z_{k-1}."""
    HX = H.compose(X_prev)
    r = X_curr.transform_point(pts_curr) - HX.transform_point(pts_prev)
    Rc, Rp = X_curr.rotation, HX.rotation
    cov = Rc @ cov_curr @ Rc.T + Rp @ cov_prev @ Rp.T
    sol = np.linalg.solve(cov, r[..., None])[..., 0]
    return np.sqrt(np.maximum(np.einsum("ni,ni->n", r, sol), 0.0))


def _motion_graph(idx, zp, zc, pts_p, pts_c, cov_p, cov_c, X_prev, X_curr, H, cam, cfg) -> FactorGraph:
    prior = NoiseModel.isotropic(6, cfg.camera_prior_sigma)
    pix = NoiseModel.isotropic(2, cfg.pixel_sigma)
    motion = NoiseModel.isotropic(3, cfg.motion_sigma, huber=cfg.huber)
    graph = FactorGraph()
    kp, kc, kh = Xkey(0), Xkey(1), Hkey(1, 1)
    graph.insert(kp, X_prev)
    graph.insert(kc, X_curr)
    graph.insert(kh, H)
    graph.add(PriorFactor(kp, X_prev, prior))
    graph.add(PriorFactor(kc, X_curr, prior))
    for i in idx:
        mp, mc = M(int(i), 0), M(int(i), 1)
        graph.insert(mp, X_prev.transform_point(pts_p[i]))
        graph.insert(mc, X_curr.transform_point(pts_c[i]))
        graph.add(ProjectionFactor(kp, mp, zp[i], cam, pix))
        graph.add(ProjectionFactor(kc, mc, zc[i], cam, pix))
        graph.add(PointMeasurementFactor(kp, mp, pts_p[i], NoiseModel(cov_p[i])))
        graph.add(PointMeasurementFactor(kc, mc, pts_c[i], NoiseModel(cov_c[i])))
        graph.add(TernaryMotionFactor(kh, mp, mc, motion))
    return graph


def build_motion_graph(pixels_prev, depths_prev, pixels_curr, depths_curr, X_prev: Pose3, X_curr: Pose3, H: Pose3, cam: CameraModel, cfg: FrontendConfig | None = None) -> FactorGraph:
    """Motion-only refinement graph: camera priors, per-point reprojection and 3D
    factors at k-1 and k, and one ternary motion factor per point."""
    cfg = cfg or FrontendConfig()
    zp = np.asarray(pixels_prev, dtype=float).reshape(-1, 2)
    zc = np.asarray(pixels_curr, dtype=float).reshape(-1, 2)
    dp = np.asarray(depths_prev, dtype=float).reshape(-1)
    dc = np.asarray(depths_curr, dtype=float).reshape(-1)
    cov_p = backprojection_covariance(cam, zp, dp, cfg.pixel_sigma, cfg.depth_sigma)
    cov_c = backprojection_covariance(cam, zc, dc, cfg.pixel_sigma, cfg.depth_sigma)
    return _motion_graph(range(len(zp)), zp, zc, cam.back_project(zp, dp), cam.back_project(zc, dc), cov_p, cov_c, X_prev, X_curr, H, cam, cfg)


def refine_object_motion(
    pixels_prev,
    depths_prev,
    pixels_curr,
    depths_curr,
    X_prev: Pose3,
    X_curr: Pose3,
    H_init: Pose3,
    cam: CameraModel,
    cfg: FrontendConfig | None = None,
):
    """Motion-only refinement of one object's absolute motion between k-1 and k.

    Camera poses are held by tight priors; both frames' points are variables
    anchored by reprojection and 3D measurement factors and linked by the
    ternary motion factor. Returns ``(H, inlier mask)``.
    """
    cfg = cfg or FrontendConfig()
    zp = np.asarray(pixels_prev, dtype=float).reshape(-1, 2)
    zc = np.asarray(pixels_curr, dtype=float).reshape(-1, 2)
    dp = np.asarray(depths_prev, dtype=float).reshape(-1)
    dc = np.asarray(depths_curr, dtype=float).reshape(-1)
    pts_p = cam.back_project(zp, dp)
    pts_c = cam.back_project(zc, dc)
    cov_p = backprojection_covariance(cam, zp, dp, cfg.pixel_sigma, cfg.depth_sigma)
    cov_c = backprojection_covariance(cam, zc, dc, cfg.pixel_sigma, cfg.depth_sigma)
    mask = np.ones(len(zp), dtype=bool)
    H = H_init
    for _ in range(2):
        idx = np.nonzero(mask)[0]
        if len(idx) < 3:
            break
        graph = _motion_graph(idx, zp, zc, pts_p, pts_c, cov_p, cov_c, X_prev, X_curr, H, cam, cfg)
        values, _ = optimize(graph, cfg=_POLISH)
        kp, kc, kh = Xkey(0), Xkey(1), Hkey(1, 1)
        H = values[kh]
        gate = motion_gate(H, values[kp], values[kc], pts_p, pts_c, cov_p, cov_c)
        new_mask = mask & (gate <= cfg.gate_sigma)
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    return H, mask


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class FrontendFrame:
    frame: int
    camera_pose: Pose3
    motions: dict[int, Pose3] = field(default_factory=dict)
    initial_motions: dict[int, Pose3] = field(default_factory=dict)
    inliers: np.ndarray | None = None  # mask over the frame's measurements
    stage_counts: dict[str, dict[str, int]] = field(default_factory=dict)
    camera_ok: bool = True

    def to_dict(self) -> dict:
        return {
            "frame": self.frame,
            "camera_pose": self.camera_pose.to_list(),
            "camera_ok": self.camera_ok,
            "motions": {str(j): H.to_list() for j, H in sorted(self.motions.items())},
            "initial_motions": {str(j): H.to_list() for j, H in sorted(self.initial_motions.items())},
            "inliers": self.inliers.astype(bool).tolist(),
            "stage_counts": self.stage_counts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> FrontendFrame:
        return cls(
            frame=int(d["frame"]),
            camera_pose=Pose3.from_list(d["camera_pose"]),
            motions={int(j): Pose3.from_list(v) for j, v in d.get("motions", {}).items()},
            initial_motions={int(j): Pose3.from_list(v) for j, v in d.get("initial_motions", {}).items()},
            inliers=np.asarray(d["inliers"], dtype=bool),
            stage_counts=d.get("stage_counts", {}),
            camera_ok=bool(d.get("camera_ok", True)),
        )


@dataclass
class FrontendOutput:
    measurements: MeasurementSet
    frames: list[FrontendFrame]

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def camera_poses(self) -> list[Pose3]:
        return [f.camera_pose for f in self.frames]

    def inliers(self, k: int) -> FrameMeasurements:
        return self.measurements.frames[k].select(self.frames[k].inliers)

    def motion(self, j: int, k: int) -> Pose3 | None:
        return self.frames[k].motions.get(j)

    def flagged_pairs(self) -> set[tuple[int, int]]:
        """(track, frame) pairs rejected by the front end."""
        out = set()
        for fr, meas in zip(self.frames, self.measurements.frames):
            for t in meas.track[~fr.inliers]:
                out.add((int(t), fr.frame))
        return out

    def object_ids(self) -> list[int]:
        return self.measurements.object_ids()


def _stage(counts: dict, name: str, mask: np.ndarray) -> None:
    n_in = int(np.count_nonzero(mask))
    counts[name] = {"inliers": n_in, "outliers": int(len(mask) - n_in)}


def _predict_camera(poses: list[Pose3]) -> Pose3:
    if len(poses) >= 2:
        return poses[-1].compose(poses[-2].between(poses[-1]))
    return poses[-1]


def process_object(j, k, prev: FrameMeasurements, cur: FrameMeasurements, pi, ci, X_prev, X_k, cam, cfg, prev_motion):
    """All object stages for one object at frame k; returns (H, H_pnp, pass mask, counts) or None."""
    counts: dict = {}
    rng = np.random.default_rng([cfg.seed, k, j])
    m_prev = X_prev.transform_point(prev.points(cam)[pi]).reshape(-1, 3)
    z_cur = cur.pixel[ci]
    try:
        H, mask = estimate_object_motion(m_prev, z_cur, X_k, cam, cfg, rng, prev_motion)
    except (InsufficientCorrespondences, DegenerateGeometry):
        return None
    H_pnp = H
    _stage(counts, "object_pnp", mask)
    if cfg.refine_flow and np.count_nonzero(mask) >= cfg.sample_size:
        idx = np.nonzero(mask)[0]
        G0 = X_k.inverse().compose(H)
        G, _, fmask = refine_joint_flow("object", m_prev[idx], prev.pixel[pi][idx], cur.flow[ci][idx], G0, cam, cfg)
        H = X_k.compose(G)
        mask[idx[~fmask]] = False
        _stage(counts, "object_flow", mask)
    if cfg.refine_motion and np.count_nonzero(mask) >= 3:
        idx = np.nonzero(mask)[0]
        H, rmask = refine_object_motion(
            prev.pixel[pi][idx], prev.depth[pi][idx], cur.pixel[ci][idx], cur.depth[ci][idx], X_prev, X_k, H, cam, cfg
        )
        mask[idx[~rmask]] = False
        _stage(counts, "object_refine", mask)
    return H, H_pnp, mask, counts


def run_frontend(measurements: MeasurementSet, cfg: FrontendConfig | None = None, objects: list[int] | None = None) -> FrontendOutput:
    """Sequential front end over all frames. ``objects`` restricts which objects are processed."""
    cfg = cfg or FrontendConfig()
    cam = measurements.camera
    frames_meas = measurements.frames
    K = len(frames_meas)
    flagged = [np.zeros(len(f), dtype=bool) for f in frames_meas]
    verified = [np.zeros(len(f), dtype=bool) for f in frames_meas]
    out: list[FrontendFrame] = []
    poses: list[Pose3] = []
    last_motion: dict[int, Pose3] = {}
    for k in range(K):
        cur = frames_meas[k]
        if k == 0:
            poses.append(Pose3.identity())
            out.append(FrontendFrame(0, poses[0]))
            continue
        prev = frames_meas[k - 1]
        prev_index = {int(t): n for n, t in enumerate(prev.track) if not flagged[k - 1][n]}
        pairs = [(prev_index[int(t)], n) for n, t in enumerate(cur.track) if int(t) in prev_index]
        pi = np.array([p for p, _ in pairs], dtype=int)
        ci = np.array([c for _, c in pairs], dtype=int)
        frame = FrontendFrame(k, poses[-1])
        results: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []  # (pi, ci, pass)

        # camera
        static = cur.obj[ci] == 0 if len(ci) else np.zeros(0, dtype=bool)
        spi, sci = pi[static], ci[static]
        X_prev = poses[-1]
        rng = np.random.default_rng([cfg.seed, k, 0])
        m_static = X_prev.transform_point(prev.points(cam)[spi]).reshape(-1, 3)
        try:
            X_k, smask = estimate_camera_pose(m_static, cur.pixel[sci], cam, X_prev, cfg, rng)
            _stage(frame.stage_counts, "camera_pnp", smask)
            if cfg.refine_flow and np.count_nonzero(smask) >= cfg.sample_size:
                idx = np.nonzero(smask)[0]
                X_k, _, fmask = refine_joint_flow("camera", m_static[idx], prev.pixel[spi][idx], cur.flow[sci][idx], X_k, cam, cfg)
                smask[idx[~fmask]] = False
                _stage(frame.stage_counts, "camera_flow", smask)
            results.append((spi, sci, smask))
        except (InsufficientCorrespondences, DegenerateGeometry):
            X_k = _predict_camera(poses)
            frame.camera_ok = False
        frame.camera_pose = X_k
        poses.append(X_k)

        # objects
        obj_ids = sorted(int(j) for j in np.unique(cur.obj[ci]) if j != 0) if len(ci) else []
        if objects is not None:
            obj_ids = [j for j in obj_ids if j in objects]
        for j in obj_ids:
            sel = cur.obj[ci] == j
            res = process_object(j, k, prev, cur, pi[sel], ci[sel], X_prev, X_k, cam, cfg, last_motion.get(j))
            if res is None:
                continue
            H, H_pnp, mask, counts = res
            frame.motions[j] = H
            frame.initial_motions[j] = H_pnp
            frame.stage_counts.update({f"{name}_{j}": c for name, c in counts.items()})
            last_motion[j] = H
            results.append((pi[sel], ci[sel], mask))

        for rp, rc, ok in results:
            verified[k - 1][rp[ok]] = True
            verified[k][rc[ok]] = True
            bad_p, bad_c = rp[~ok], rc[~ok]
            was_verified = verified[k - 1][bad_p]
            flagged[k][bad_c[was_verified]] = True
            flagged[k - 1][bad_p[~was_verified]] = True
        out.append(frame)
    for k, fr in enumerate(out):
        fr.inliers = ~flagged[k]
    return FrontendOutput(measurements, out)
