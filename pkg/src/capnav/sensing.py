"""Four-view planar depth cameras and observation assembly.

Experts see clean clamped depth rays. Students see a sliding window of the
same rays after pooling (history), quantization and additive noise.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from capnav import geometry
from capnav.simkernel import ContractError, RobotState
from capnav.world import ROBOT_HALF_EXTENTS, Scene

MIN_DEPTH = 0.01
MAX_DEPTH = 4.0
RAYS = 32
POOL = 4
WINDOW = 8


class Mount(enum.IntEnum):
    FRONT = 0
    RIGHT = 1
    BACK = 2
    LEFT = 3

    @property
    def yaw_offset(self) -> float:
        return (0.0, -math.pi / 2, math.pi, math.pi / 2)[self]

    @property
    def offset(self) -> tuple[float, float]:
        hx, hy = ROBOT_HALF_EXTENTS
        return ((hx, 0.0), (0.0, -hy), (-hx, 0.0), (0.0, hy))[self]


MOUNTS = tuple(Mount)


@dataclass
class SensorParams:
    rays: int = RAYS
    fov_min_deg: float = 100.0
    fov_max_deg: float = 140.0
    fov_eval_deg: float = 120.0
    jitter: float = 0.05
    window: int = WINDOW
    quant_levels: int = 8
    student_noise: float = 0.1
    proprio_sigma: float = 0.05

    def validate(self) -> list[str]:
        bad = []
        if self.rays < 2 or self.rays % POOL:
            bad.append("rays")
        if not (0 < self.fov_min_deg <= self.fov_max_deg < 180):
            bad.append("fov_min_deg")
        if not (0 < self.fov_eval_deg < 180):
            bad.append("fov_eval_deg")
        for name in ("jitter", "student_noise", "proprio_sigma"):
            if getattr(self, name) < 0:
                bad.append(name)
        if self.window < 1:
            bad.append("window")
        if self.quant_levels < 2:
            bad.append("quant_levels")
        return bad


@dataclass(frozen=True)
class EpisodeSensors:
    """Per-episode camera randomization: field of view and ray-origin jitter."""

    fov: float
    jitter: tuple[float, float] = (0.0, 0.0)

    @classmethod
    def sample(cls, rng: np.random.Generator, params: SensorParams) -> "EpisodeSensors":
        fov = math.radians(rng.uniform(params.fov_min_deg, params.fov_max_deg))
        j = rng.uniform(-params.jitter, params.jitter, size=2)
        return cls(float(fov), (float(j[0]), float(j[1])))

    @classmethod
    def nominal(cls, params: SensorParams) -> "EpisodeSensors":
        return cls(math.radians(params.fov_eval_deg))


@dataclass(frozen=True)
class DepthImage:
    rays: np.ndarray
    mount: Mount
    fov: float


@dataclass(frozen=True)
class ExpertObservation:
    views: tuple[DepthImage, DepthImage, DepthImage, DepthImage]
    last_action: np.ndarray
    goal_rel: np.ndarray

    @property
    def depth(self) -> np.ndarray:
        return np.stack([v.rays for v in self.views])


class Granularity(enum.Enum):
    FINE = "fine"
    COARSE = "coarse"


@dataclass(frozen=True)
class Frame:
    """Raw clean rays of all four views at one control step."""

    rays: np.ndarray  # (4, R)
    timestamp: float


@dataclass(frozen=True)
class FrameFeatures:
    rays: np.ndarray  # (4, R) fine or (4, R // 4) coarse
    granularity: Granularity
    timestamp: float


@dataclass(frozen=True)
class StudentObservation:
    window: tuple[FrameFeatures, ...]
    goal_rel: np.ndarray

    def arrays(self, window: int = WINDOW) -> tuple[np.ndarray, np.ndarray]:
        """Fine rays ``(4R,)`` and zero-padded coarse history ``(window-1, 4R/4)``."""
        fine = self.window[-1].rays.reshape(-1)
        width = fine.size // POOL
        coarse = np.zeros((window - 1, width))
        hist = [f.rays.reshape(-1) for f in self.window[:-1]]
        if hist:
            coarse[window - 1 - len(hist):] = np.stack(hist)
        return fine, coarse


# ---------------------------------------------------------------------------
# ray casting


def _ray_geometry(poses: np.ndarray, fovs: np.ndarray, jitters: np.ndarray, rays: int, mounts=MOUNTS):
    """World-frame origins and directions ``(E, V*R, 2)`` for each view."""
    e = poses.shape[0]
    offs = np.array([m.offset for m in mounts])  # (V, 2)
    yaw_off = np.array([m.yaw_offset for m in mounts])
    local = offs[None] + jitters[:, None, :]  # (E, V, 2)
    c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    ox = poses[:, 0:1] + c[:, None] * local[..., 0] - s[:, None] * local[..., 1]
    oy = poses[:, 1:2] + s[:, None] * local[..., 0] + c[:, None] * local[..., 1]
    frac = np.linspace(-0.5, 0.5, rays)
    ang = poses[:, 2, None, None] + yaw_off[None, :, None] + fovs[:, None, None] * frac[None, None, :]  # (E, V, R)
    dirs = np.stack([np.cos(ang), np.sin(ang)], -1).reshape(e, -1, 2)
    origins = np.repeat(np.stack([ox, oy], -1), rays, axis=1)
    return origins, dirs


def raycast_batch(poses: np.ndarray, prims: geometry.BatchPrimitives, fovs, jitters, rays: int = RAYS,
                  mounts=MOUNTS) -> np.ndarray:
    """Clamped depths ``(E, V, R)`` for every env's cameras."""
    poses = np.asarray(poses, float)
    fovs = np.broadcast_to(np.asarray(fovs, float), (poses.shape[0],))
    jitters = np.broadcast_to(np.asarray(jitters, float), (poses.shape[0], 2))
    origins, dirs = _ray_geometry(poses, fovs, jitters, rays, mounts)
    segs, circles = geometry.ray_segments(prims)
    depth = geometry.cast_rays(origins, dirs, segs, circles)
    return np.clip(depth, MIN_DEPTH, MAX_DEPTH).reshape(poses.shape[0], len(mounts), rays)


def raycast(state: RobotState, scene: Scene, mount: Mount, fov: float, rays: int = RAYS,
            jitter=(0.0, 0.0)) -> DepthImage:
    if rays < 2 or not 0 < fov < math.pi:
        raise ValueError("raycast needs rays >= 2 and 0 < fov < pi")
    prims = geometry.stack([scene.primitives()])
    d = raycast_batch(state.pose[None], prims, [fov], [jitter], rays, mounts=(Mount(mount),))
    return DepthImage(d[0, 0], Mount(mount), fov)


# ---------------------------------------------------------------------------
# observations


def goal_in_body(poses: np.ndarray, goals: np.ndarray) -> np.ndarray:
    d = goals - poses[:, :2]
    c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], -1)


GOAL_SCALE = math.log1p(10.0)


def goal_features(goal_rel: np.ndarray) -> np.ndarray:
    """Body-frame goal direction with log-compressed range for network input."""
    goal_rel = np.asarray(goal_rel, float)
    n = np.linalg.norm(goal_rel, axis=-1, keepdims=True)
    return goal_rel * (np.log1p(n) / np.maximum(n, 1e-9) / GOAL_SCALE)


def perturb(last_action: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise on proprioceptive inputs."""
    if sigma <= 0:
        return np.array(last_action, float)
    return last_action + rng.normal(0.0, sigma, size=np.shape(last_action))


def assemble_expert_obs(state: RobotState, scene: Scene, last_action, goal, sensors: EpisodeSensors,
                        rays: int = RAYS) -> ExpertObservation:
    prims = geometry.stack([scene.primitives()])
    depth = raycast_batch(state.pose[None], prims, [sensors.fov], [sensors.jitter], rays)[0]
    views = tuple(DepthImage(depth[m], m, sensors.fov) for m in MOUNTS)
    goal_rel = goal_in_body(state.pose[None], np.asarray(goal, float)[None])[0]
    last = np.zeros(3) if last_action is None else np.asarray(last_action, float).copy()
    return ExpertObservation(views, last, goal_rel)


def add_proprio_noise(obs: ExpertObservation, sigma: float, rng: np.random.Generator) -> ExpertObservation:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return obs
    noisy = obs.last_action + rng.normal(0.0, sigma, size=obs.last_action.shape)
    return ExpertObservation(obs.views, noisy, obs.goal_rel)


def pool(rays: np.ndarray) -> np.ndarray:
    """Mean over contiguous groups of four rays along the last axis."""
    return rays.reshape(rays.shape[:-1] + (rays.shape[-1] // POOL, POOL)).mean(-1)


def degrade(rays: np.ndarray, rng: np.random.Generator, params: SensorParams) -> np.ndarray:
    """Uniform quantization followed by clamped Gaussian noise."""
    steps = params.quant_levels - 1
    span = MAX_DEPTH - MIN_DEPTH
    q = MIN_DEPTH + np.round((np.clip(rays, MIN_DEPTH, MAX_DEPTH) - MIN_DEPTH) / span * steps) * (span / steps)
    if params.student_noise > 0:
        q = q + rng.normal(0.0, params.student_noise, size=q.shape)
    return np.clip(q, MIN_DEPTH, MAX_DEPTH)


def assemble_student_obs(history: Sequence[Frame], goal_rel, rng: np.random.Generator,
                         params: Optional[SensorParams] = None) -> StudentObservation:
    params = params or SensorParams()
    if not history:
        raise ContractError("student observation needs at least one frame")
    frames = list(history)[-params.window:]
    window = []
    for f in frames[:-1]:
        window.append(FrameFeatures(degrade(pool(f.rays), rng, params), Granularity.COARSE, f.timestamp))
    last = frames[-1]
    window.append(FrameFeatures(degrade(last.rays, rng, params), Granularity.FINE, last.timestamp))
    return StudentObservation(tuple(window), np.asarray(goal_rel, float).copy())


class FrameHistory:
    """Per-env ring of clean frames for batched student observation assembly."""

    def __init__(self, n_envs: int, rays: int = RAYS, window: int = WINDOW):
        self.window = window
        self.buf = np.zeros((n_envs, window, len(MOUNTS), rays))
        self.count = np.zeros(n_envs, int)

    def reset(self, i: int) -> None:
        self.count[i] = 0
        self.buf[i] = 0.0

    def push(self, depth: np.ndarray, mask: Optional[np.ndarray] = None) -> None:
        """Append ``(E, 4, R)`` frames for envs in ``mask``."""
        idx = np.arange(len(self.count)) if mask is None else np.flatnonzero(mask)
        self.buf[idx, :-1] = self.buf[idx, 1:]
        self.buf[idx, -1] = depth[idx]
        self.count[idx] = np.minimum(self.count[idx] + 1, self.window)

    def student_arrays(self, rng: np.random.Generator, params: SensorParams) -> tuple[np.ndarray, np.ndarray]:
        """Degraded fine ``(E, 4R)`` and coarse ``(E, window-1, 4R/4)`` features.

        Slots older than an env's history are zero, matching
        :meth:`StudentObservation.arrays`.
        """
        e = len(self.count)
        fine = degrade(self.buf[:, -1], rng, params).reshape(e, -1)
        coarse = degrade(pool(self.buf[:, :-1]), rng, params).reshape(e, self.window - 1, -1)
        slot = np.arange(self.window - 1)[None, :]
        valid = slot >= (self.window - self.count[:, None])
        return fine, np.where(valid[..., None], coarse, 0.0)
