"""Synthetic stereo-matching frontend and observation-file I/O.

Replaces a learned matching network with a generator that renders dense
depth, optical flow, validity and calibrated per-pixel variance maps for
a scene of fronto-parallel walls plus a point-landmark cloud, moved
through by a scripted camera. Emitted variance maps equal the generating
noise variances (honest mode), or stay at the baseline level inside
anomaly regions (overconfident mode), so downstream modules can be
tested against both.

A frame's flow maps pixel centers of frame t to their corresponding
(float) locations in frame t+1; the last frame carries zero flow.
All maps are float64 in memory; the on-disk format is float32.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

from .errors import ConfigError, DataFormatError
from .evaluation import Trajectory, read_tum, write_tum
from .geometry import PoseSE3, StereoCamera, se3_exp

OBS_MAGIC = b"MACVOOBS"
# map layout in the .obs container: name -> channel count
OBS_CHANNELS = (("flow", 2), ("flow_var", 2), ("depth", 1), ("depth_var", 1), ("mask", 1))
_FRAME_RE = re.compile(r"frame_(\d{6})\.obs$")

DEFAULT_FRAME_DT = 1.0
# relative slack when deciding whether a reprojected point is occluded
_OCCLUSION_REL_TOL = 0.02
_FIELD_AMPLITUDE = 0.4


@dataclass(frozen=True)
class NoiseModel:
    sigma_flow: float = 0.0  # per-axis matching noise std, pixels
    gamma_disp: float = 0.0  # relative depth error rate (std = gamma * depth)
    heteroscedastic: bool = False  # scale noise by a smooth spatial field
    lie_in_anomalies: bool = False  # emit un-inflated variances inside anomalies

    def __post_init__(self):
        if self.sigma_flow < 0:
            raise ConfigError(f"noise.sigma_flow: must be >= 0, got {self.sigma_flow}")
        if not 0 <= self.gamma_disp < 0.3:
            raise ConfigError(f"noise.gamma_disp: must be in [0, 0.3), got {self.gamma_disp}")


@dataclass(frozen=True)
class AnomalyRegion:
    """Pixel rectangle [u0, u1) x [v0, v1) whose noise is multiplied."""

    rect: tuple[float, float, float, float]  # u0, v0, u1, v1
    multiplier: float

    def __post_init__(self):
        u0, v0, u1, v1 = self.rect
        if not (u1 > u0 and v1 > v0):
            raise ConfigError(f"anomaly_regions.rect: empty rectangle {self.rect}")
        if not self.multiplier > 0:
            raise ConfigError(f"anomaly_regions.multiplier: must be positive, got {self.multiplier}")


@dataclass(frozen=True)
class Wall:
    """Fronto-parallel rectangle at world depth z spanning the given
    world x/y extents."""

    z: float
    x_range: tuple[float, float]
    y_range: tuple[float, float]


@dataclass(frozen=True)
class MotionSpec:
    kind: str = "static"  # static | constant_velocity | orbit | waypoints
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)  # m/frame, camera frame
    angular_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)  # rad/frame
    orbit_radius: float = 5.0
    orbit_rate: float = 0.02  # rad/frame
    waypoints: tuple[tuple[float, ...], ...] = ()  # rows of tx ty tz qx qy qz qw

    def __post_init__(self):
        if self.kind not in ("static", "constant_velocity", "orbit", "waypoints"):
            raise ConfigError(f"motion.kind: unknown kind {self.kind!r}")
        if self.kind == "orbit" and not self.orbit_radius > 0:
            raise ConfigError(f"motion.orbit_radius: must be positive, got {self.orbit_radius}")


@dataclass(frozen=True)
class SceneConfig:
    seed: int
    num_frames: int
    camera: StereoCamera
    motion: MotionSpec = MotionSpec()
    landmark_count: int = 100
    depth_range: tuple[float, float] = (1.0, 20.0)
    noise: NoiseModel = NoiseModel()
    anomaly_regions: tuple[AnomalyRegion, ...] = ()
    walls: tuple[Wall, ...] | None = None  # None: auto-generate from the seed
    wall_count: int = 3
    render_landmarks: bool = True
    frame_dt: float = DEFAULT_FRAME_DT

    def __post_init__(self):
        if self.num_frames < 2:
            raise ConfigError(f"num_frames: must be >= 2, got {self.num_frames}")
        if self.landmark_count < 50:
            raise ConfigError(f"landmark_count: must be >= 50, got {self.landmark_count}")
        lo, hi = self.depth_range
        if not (lo > 0 and hi > lo):
            raise ConfigError(f"depth_range: must be positive and increasing, got {self.depth_range}")
        if self.wall_count < 1:
            raise ConfigError(f"wall_count: must be >= 1, got {self.wall_count}")
        if not self.frame_dt > 0:
            raise ConfigError(f"frame_dt: must be positive, got {self.frame_dt}")


@dataclass
class FrameObservation:
    """Dense maps for one frame plus its ground-truth pose."""

    flow: np.ndarray  # (H, W, 2) pixels, frame t -> t+1
    flow_var: np.ndarray  # (H, W, 2) pixels^2
    depth: np.ndarray  # (H, W) meters
    depth_var: np.ndarray  # (H, W) meters^2
    valid: np.ndarray  # (H, W) bool
    pose: PoseSE3  # camera-to-world ground truth
    timestamp: float

    def __post_init__(self):
        hw = self.depth.shape
        same = (
            self.flow.shape == hw + (2,)
            and self.flow_var.shape == hw + (2,)
            and self.depth_var.shape == hw
            and self.valid.shape == hw
        )
        if not same:
            raise ValueError("observation maps do not share dimensions")
        if (self.flow_var[self.valid] < 0).any() or (self.depth_var[self.valid] < 0).any():
            raise ValueError("variance maps must be non-negative on valid pixels")


# ---------------------------------------------------------------------------
# trajectory scripting


def motion_poses(motion: MotionSpec, num_frames: int) -> list[PoseSE3]:
    """Ground-truth camera-to-world poses for the requested motion."""
    if motion.kind == "static":
        return [PoseSE3.identity() for _ in range(num_frames)]
    if motion.kind == "constant_velocity":
        delta = se3_exp(np.concatenate([motion.velocity, motion.angular_velocity]))
        poses = [PoseSE3.identity()]
        for _ in range(num_frames - 1):
            poses.append(poses[-1].compose(delta))
        return poses
    if motion.kind == "orbit":
        # circle in the world x-z plane around [0, 0, radius], camera
        # yawed to keep facing the center; starts at the origin
        center = np.array([0.0, 0.0, motion.orbit_radius])
        poses = []
        for t in range(num_frames):
            theta = motion.orbit_rate * t
            rot = np.array(
                [
                    [np.cos(theta), 0.0, np.sin(theta)],
                    [0.0, 1.0, 0.0],
                    [-np.sin(theta), 0.0, np.cos(theta)],
                ]
            )
            pos = center - motion.orbit_radius * np.array([np.sin(theta), 0.0, np.cos(theta)])
            poses.append(PoseSE3(rot, pos))
        return poses
    if len(motion.waypoints) != num_frames:
        raise ConfigError(
            f"motion.waypoints: need {num_frames} rows, got {len(motion.waypoints)}"
        )
    poses = []
    for i, row in enumerate(motion.waypoints):
        if len(row) != 7:
            raise ConfigError(f"motion.waypoints[{i}]: expected 7 values tx..qw")
        quat = np.asarray(row[3:], dtype=float)
        poses.append(PoseSE3(Rotation.from_quat(quat / np.linalg.norm(quat)).as_matrix(), row[:3]))
    return poses


# ---------------------------------------------------------------------------
# world construction and rendering


def _auto_walls(cfg: SceneConfig, poses: list[PoseSE3], rng: np.random.Generator) -> list[Wall]:
    lo, hi = cfg.depth_range
    cam = cfg.camera
    tan_u = max(cam.cx, cam.width - cam.cx) / cam.fx
    tan_v = max(cam.cy, cam.height - cam.cy) / cam.fy
    span = float(np.max(np.abs(np.stack([p.translation for p in poses])))) if poses else 0.0
    # backdrop guaranteed to fill the view from anywhere on the trajectory
    z_far = 0.9 * hi
    ext_x = 1.5 * (tan_u * z_far + span)
    ext_y = 1.5 * (tan_v * z_far + span)
    walls = [Wall(z=z_far, x_range=(-ext_x, ext_x), y_range=(-ext_y, ext_y))]
    for _ in range(cfg.wall_count - 1):
        z = float(rng.uniform(lo + 0.15 * (hi - lo), 0.7 * hi))
        cx = float(rng.uniform(-0.4, 0.4)) * tan_u * z
        cy = float(rng.uniform(-0.4, 0.4)) * tan_v * z
        half_x = float(rng.uniform(0.1, 0.35)) * tan_u * z
        half_y = float(rng.uniform(0.1, 0.35)) * tan_v * z
        walls.append(Wall(z=z, x_range=(cx - half_x, cx + half_x), y_range=(cy - half_y, cy + half_y)))
    return walls


def _sample_landmarks(cfg: SceneConfig, pose0: PoseSE3, rng: np.random.Generator) -> np.ndarray:
    lo, hi = cfg.depth_range
    cam = cfg.camera
    n = cfg.landmark_count
    d = rng.uniform(lo + 0.1 * (hi - lo), 0.85 * hi, size=n)
    u = rng.uniform(0.1 * cam.width, 0.9 * cam.width, size=n)
    v = rng.uniform(0.1 * cam.height, 0.9 * cam.height, size=n)
    pts_cam = np.stack([(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d], axis=1)
    return pose0.apply(pts_cam)


def _pixel_rays(cam: StereoCamera) -> np.ndarray:
    """(H, W, 3) camera-frame rays with unit z through pixel centers."""
    u = np.arange(cam.width, dtype=float)
    v = np.arange(cam.height, dtype=float)
    xu = (u - cam.cx) / cam.fx
    yv = (v - cam.cy) / cam.fy
    rays = np.empty((cam.height, cam.width, 3))
    rays[..., 0] = xu[None, :]
    rays[..., 1] = yv[:, None]
    rays[..., 2] = 1.0
    return rays


def _render_depth(
    cam: StereoCamera,
    pose: PoseSE3,
    rays: np.ndarray,
    walls: list[Wall],
    landmarks: np.ndarray | None,
) -> np.ndarray:
    """Z-buffer the walls (and optional landmark splats) at pixel centers.

    Returns camera-frame depth; +inf where nothing is hit.
    """
    origin = pose.translation
    rays_w = rays @ pose.rotation.T
    depth = np.full(rays.shape[:2], np.inf)
    rz = rays_w[..., 2]
    for wall in walls:
        with np.errstate(divide="ignore", invalid="ignore"):
            d = (wall.z - origin[2]) / rz
        xw = origin[0] + d * rays_w[..., 0]
        yw = origin[1] + d * rays_w[..., 1]
        hit = (
            np.isfinite(d)
            & (d > 0)
            & (xw >= wall.x_range[0])
            & (xw <= wall.x_range[1])
            & (yw >= wall.y_range[0])
            & (yw <= wall.y_range[1])
        )
        depth = np.where(hit & (d < depth), d, depth)
    if landmarks is not None and len(landmarks):
        pts = pose.inverse().apply(landmarks)
        front = pts[:, 2] > 0
        pts = pts[front]
        if len(pts):
            uu = np.rint(cam.fx * pts[:, 0] / pts[:, 2] + cam.cx).astype(int)
            vv = np.rint(cam.fy * pts[:, 1] / pts[:, 2] + cam.cy).astype(int)
            ok = (uu >= 0) & (uu < cam.width) & (vv >= 0) & (vv < cam.height)
            np.minimum.at(depth, (vv[ok], uu[ok]), pts[ok][:, 2])
    return depth


def _noise_field(cam: StereoCamera, het: bool, rng: np.random.Generator) -> np.ndarray:
    """Smooth positive field scaling the noise level across the image."""
    if not het:
        return np.ones((cam.height, cam.width))
    fu, fv = rng.integers(1, 3), rng.integers(1, 3)
    pu, pv = rng.uniform(0.0, 1.0, size=2)
    u = np.arange(cam.width) / cam.width
    v = np.arange(cam.height) / cam.height
    grid = np.sin(2 * np.pi * (fu * u[None, :] + pu)) * np.cos(2 * np.pi * (fv * v[:, None] + pv))
    return 1.0 + _FIELD_AMPLITUDE * grid


def _anomaly_multiplier(cam: StereoCamera, regions) -> np.ndarray:
    mult = np.ones((cam.height, cam.width))
    u = np.arange(cam.width, dtype=float)
    v = np.arange(cam.height, dtype=float)
    for reg in regions:
        u0, v0, u1, v1 = reg.rect
        inside = ((u >= u0) & (u < u1))[None, :] & ((v >= v0) & (v < v1))[:, None]
        mult = np.where(inside, mult * reg.multiplier, mult)
    return mult


def generate_sequence(cfg: SceneConfig) -> list[FrameObservation]:
    """Render the scene along the scripted trajectory and add noise.

    Deterministic given cfg.seed. The per-pixel variance maps equal the
    generating noise variances, except inside anomaly regions when
    cfg.noise.lie_in_anomalies is set, where the emitted variances stay
    at the baseline level (an overconfident frontend).
    """
    cam = cfg.camera
    poses = motion_poses(cfg.motion, cfg.num_frames)
    rng_world = np.random.default_rng([cfg.seed, 0])
    rng_field = np.random.default_rng([cfg.seed, 1])

    walls = list(cfg.walls) if cfg.walls is not None else _auto_walls(cfg, poses, rng_world)
    landmarks = _sample_landmarks(cfg, poses[0], rng_world)
    rays = _pixel_rays(cam)
    splats = landmarks if cfg.render_landmarks else None
    depth_true = [_render_depth(cam, p, rays, walls, splats) for p in poses]

    field = _noise_field(cam, cfg.noise.heteroscedastic, rng_field)
    mult = _anomaly_multiplier(cam, cfg.anomaly_regions)
    sigma_flow_true = cfg.noise.sigma_flow * field * mult
    gamma_true = cfg.noise.gamma_disp * field * mult
    if cfg.noise.lie_in_anomalies:
        sigma_flow_emit = cfg.noise.sigma_flow * field
        gamma_emit = cfg.noise.gamma_disp * field
    else:
        sigma_flow_emit, gamma_emit = sigma_flow_true, gamma_true

    frames = []
    for t in range(cfg.num_frames):
        rng_t = np.random.default_rng([cfg.seed, 2, t])
        dt_map = depth_true[t]
        depth_ok = np.isfinite(dt_map)

        if t + 1 < cfg.num_frames:
            pts_world = poses[t].apply((rays * np.where(depth_ok, dt_map, 1.0)[..., None]).reshape(-1, 3))
            pts_next = poses[t + 1].inverse().apply(pts_world).reshape(cam.height, cam.width, 3)
            zb = pts_next[..., 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                mu = cam.fx * pts_next[..., 0] / zb + cam.cx
                mv = cam.fy * pts_next[..., 1] / zb + cam.cy
            in_view = (
                (zb > 1e-9)
                & (mu >= 0)
                & (mu <= cam.width - 1)
                & (mv >= 0)
                & (mv <= cam.height - 1)
            )
            ui = np.clip(np.rint(np.where(in_view, mu, 0)).astype(int), 0, cam.width - 1)
            vi = np.clip(np.rint(np.where(in_view, mv, 0)).astype(int), 0, cam.height - 1)
            seen = depth_true[t + 1][vi, ui]
            not_occluded = seen >= zb * (1.0 - _OCCLUSION_REL_TOL)
            valid = depth_ok & in_view & not_occluded
            uu, vv = rays[..., 0] * cam.fx + cam.cx, rays[..., 1] * cam.fy + cam.cy
            flow_true = np.stack([np.where(valid, mu - uu, 0.0), np.where(valid, mv - vv, 0.0)], axis=-1)
        else:
            valid = depth_ok.copy()
            flow_true = np.zeros((cam.height, cam.width, 2))

        eps_flow = rng_t.standard_normal((cam.height, cam.width, 2))
        eps_depth = rng_t.standard_normal((cam.height, cam.width))
        flow = flow_true + sigma_flow_true[..., None] * eps_flow
        depth = np.where(depth_ok, dt_map, 0.0) * (1.0 + gamma_true * eps_depth)
        valid = valid & (depth > 0)

        flow_var = np.broadcast_to((sigma_flow_emit**2)[..., None], flow.shape).copy()
        depth_var = np.where(depth_ok, (gamma_emit * np.where(depth_ok, dt_map, 0.0)) ** 2, 0.0)
        flow[~valid] = 0.0
        flow_var[~valid] = 0.0
        depth = np.where(valid, depth, 0.0)
        depth_var = np.where(valid, depth_var, 0.0)

        frames.append(
            FrameObservation(
                flow=flow,
                flow_var=flow_var,
                depth=depth,
                depth_var=depth_var,
                valid=valid,
                pose=poses[t],
                timestamp=t * cfg.frame_dt,
            )
        )
    return frames


# ---------------------------------------------------------------------------
# observation directory I/O


def _frame_path(directory: Path, index: int) -> Path:
    return directory / f"frame_{index:06d}.obs"


def write_observations(frames: list[FrameObservation], directory) -> None:
    """Write poses_gt.txt plus one binary .obs file per frame."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    traj = Trajectory(np.array([f.timestamp for f in frames]), [f.pose for f in frames])
    write_tum(traj, directory / "poses_gt.txt")
    for i, frame in enumerate(frames):
        h, w = frame.depth.shape
        header = OBS_MAGIC + struct.pack(
            "<II5I", w, h, *(c for _, c in OBS_CHANNELS)
        )
        blobs = [
            frame.flow.astype("<f4").tobytes(),
            frame.flow_var.astype("<f4").tobytes(),
            frame.depth.astype("<f4").tobytes(),
            frame.depth_var.astype("<f4").tobytes(),
            frame.valid.astype("<f4").tobytes(),
        ]
        _frame_path(directory, i).write_bytes(header + b"".join(blobs))


def _read_obs_file(path: Path) -> dict[str, np.ndarray]:
    data = path.read_bytes()
    head_len = len(OBS_MAGIC) + 4 * (2 + len(OBS_CHANNELS))
    if len(data) < head_len:
        raise DataFormatError(f"{path}: truncated header")
    if data[: len(OBS_MAGIC)] != OBS_MAGIC:
        raise DataFormatError(f"{path}: bad magic {data[:len(OBS_MAGIC)]!r}")
    w, h, *channels = struct.unpack("<II5I", data[len(OBS_MAGIC) : head_len])
    expected = tuple(c for _, c in OBS_CHANNELS)
    if tuple(channels) != expected:
        raise DataFormatError(f"{path}: channel layout {channels} != {list(expected)}")
    need = head_len + 4 * h * w * sum(channels)
    if len(data) != need:
        kind = "truncated" if len(data) < need else "oversized"
        raise DataFormatError(f"{path}: {kind} payload ({len(data)} bytes, expected {need})")
    maps: dict[str, np.ndarray] = {}
    offset = head_len
    for (name, c) in OBS_CHANNELS:
        count = h * w * c
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(float)
        offset += 4 * count
        maps[name] = arr.reshape((h, w, c)) if c > 1 else arr.reshape((h, w))
    return maps


def ingest_observations(directory) -> list[FrameObservation]:
    """Load a directory written by write_observations (or a compatible
    producer): poses_gt.txt plus frame_NNNNNN.obs files."""
    directory = Path(directory)
    pose_file = directory / "poses_gt.txt"
    if not pose_file.exists():
        raise DataFormatError(f"missing trajectory file {pose_file}")
    traj = read_tum(pose_file)
    frame_files = sorted(p for p in directory.iterdir() if _FRAME_RE.search(p.name))
    if len(frame_files) != len(traj):
        raise DataFormatError(
            f"frame/pose count mismatch: {len(frame_files)} frames vs {len(traj)} poses in {directory}"
        )
    frames = []
    for i, path in enumerate(frame_files):
        maps = _read_obs_file(path)
        frames.append(
            FrameObservation(
                flow=maps["flow"],
                flow_var=maps["flow_var"],
                depth=maps["depth"],
                depth_var=maps["depth_var"],
                valid=maps["mask"] > 0.5,
                pose=traj.poses[i],
                timestamp=float(traj.timestamps[i]),
            )
        )
    return frames


# ---------------------------------------------------------------------------
# scene config files


def _need(d: dict, key: str, path: str):
    if key not in d:
        raise ConfigError(f"{path}{key}: missing required field")
    return d[key]


def camera_from_dict(d: dict, path: str = "camera.") -> StereoCamera:
    try:
        return StereoCamera(
            fx=float(_need(d, "fx", path)),
            fy=float(_need(d, "fy", path)),
            cx=float(_need(d, "cx", path)),
            cy=float(_need(d, "cy", path)),
            baseline=float(_need(d, "baseline", path)),
            width=int(_need(d, "width", path)),
            height=int(_need(d, "height", path)),
        )
    except ValueError as exc:
        raise ConfigError(f"{path.rstrip('.')}: {exc}") from exc


def scene_config_from_dict(d: dict, path: str = "") -> SceneConfig:
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'scene'}: expected a mapping")
    motion_d = dict(d.get("motion", {"kind": "static"}))
    motion = MotionSpec(
        kind=str(motion_d.get("kind", "static")),
        velocity=tuple(float(x) for x in motion_d.get("velocity", (0.0, 0.0, 0.0))),
        angular_velocity=tuple(float(x) for x in motion_d.get("angular_velocity", (0.0, 0.0, 0.0))),
        orbit_radius=float(motion_d.get("orbit_radius", 5.0)),
        orbit_rate=float(motion_d.get("orbit_rate", 0.02)),
        waypoints=tuple(tuple(float(x) for x in row) for row in motion_d.get("waypoints", ())),
    )
    noise_d = dict(d.get("noise", {}))
    noise = NoiseModel(
        sigma_flow=float(noise_d.get("sigma_flow", 0.0)),
        gamma_disp=float(noise_d.get("gamma_disp", 0.0)),
        heteroscedastic=bool(noise_d.get("heteroscedastic", False)),
        lie_in_anomalies=bool(noise_d.get("lie_in_anomalies", False)),
    )
    regions = tuple(
        AnomalyRegion(rect=tuple(float(x) for x in r["rect"]), multiplier=float(r["multiplier"]))
        for r in d.get("anomaly_regions", ())
    )
    walls = d.get("walls")
    if walls is not None:
        walls = tuple(
            Wall(
                z=float(_need(w, "z", f"{path}walls[{i}].")),
                x_range=tuple(float(x) for x in _need(w, "x_range", f"{path}walls[{i}].")),
                y_range=tuple(float(x) for x in _need(w, "y_range", f"{path}walls[{i}].")),
            )
            for i, w in enumerate(walls)
        )
    try:
        return SceneConfig(
            seed=int(_need(d, "seed", path)),
            num_frames=int(_need(d, "num_frames", path)),
            camera=camera_from_dict(_need(d, "camera", path), f"{path}camera."),
            motion=motion,
            landmark_count=int(d.get("landmark_count", 100)),
            depth_range=tuple(float(x) for x in d.get("depth_range", (1.0, 20.0))),
            noise=noise,
            anomaly_regions=regions,
            walls=walls,
            wall_count=int(d.get("wall_count", 3)),
            render_landmarks=bool(d.get("render_landmarks", True)),
            frame_dt=float(d.get("frame_dt", DEFAULT_FRAME_DT)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'scene'}: {exc}") from exc


def load_scene_config(path) -> SceneConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise DataFormatError(f"cannot read scene config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return scene_config_from_dict(raw or {})
