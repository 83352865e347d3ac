"""Omnidirectional kinematics, collision checks and episode termination."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from capnav import geometry
from capnav.world import ROBOT_HALF_EXTENTS, EpisodeSpec, Scene, step_dynamics

V_MAX = np.array([1.5, 1.0, math.pi / 4])
DT = 0.1
GOAL_RADIUS = 0.5


class InvalidActionError(ValueError):
    pass


class ContractError(RuntimeError):
    """A caller broke a precondition (e.g. stepping a finished episode)."""


@dataclass
class SimParams:
    dt: float = DT
    goal_radius: float = GOAL_RADIUS
    collision_margin: float = 0.0


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    yaw: float

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw], dtype=float)

    @classmethod
    def from_pose(cls, pose) -> "RobotState":
        return cls(float(pose[0]), float(pose[1]), float(wrap_angle(pose[2])))


@dataclass(frozen=True)
class StepOutcome:
    next_state: RobotState
    collided: bool
    reached: bool
    timed_out: bool
    elapsed: float

    @property
    def done(self) -> bool:
        return self.collided or self.reached or self.timed_out


@dataclass
class EpisodeClock:
    """Mutable per-episode bookkeeping: step count and current dynamic scene."""

    scene: Scene
    steps: int = 0
    terminated: bool = False
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def start(cls, spec: EpisodeSpec) -> "EpisodeClock":
        return cls(spec.scene, rng=np.random.default_rng([spec.seed & 0xFFFFFFFFFFFFFFFF, 31]))


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(a, float), 2 * math.pi)


def clip_action(a) -> np.ndarray:
    a = np.asarray(a, float)
    if not np.all(np.isfinite(a)):
        raise InvalidActionError(f"non-finite action {a!r}")
    return np.clip(a, -1.0, 1.0) * V_MAX


def integrate_poses(poses: np.ndarray, v: np.ndarray, dt: float) -> np.ndarray:
    """Explicit Euler step for ``(E, 3)`` poses with body-frame velocities."""
    c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    out = np.empty(poses.shape, float)
    out[:, 0] = poses[:, 0] + (c * v[:, 0] - s * v[:, 1]) * dt
    out[:, 1] = poses[:, 1] + (s * v[:, 0] + c * v[:, 1]) * dt
    out[:, 2] = wrap_angle(poses[:, 2] + v[:, 2] * dt)
    return out


def integrate(state: RobotState, v, dt: float) -> RobotState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    pose = integrate_poses(state.pose[None], np.asarray(v, float)[None], dt)[0]
    return RobotState(float(pose[0]), float(pose[1]), float(pose[2]))


def check_collision(state: RobotState, scene: Scene, margin: float = 0.0) -> bool:
    batch = geometry.stack([scene.primitives()])
    return bool(geometry.collide_batch(state.pose[None], batch, ROBOT_HALF_EXTENTS, margin)[0])


def timeout_steps(timeout: float, dt: float) -> int:
    return int(math.ceil(timeout / dt - 1e-9))


def step_episode(spec: EpisodeSpec, state: RobotState, a, clock: EpisodeClock,
                 params: Optional[SimParams] = None) -> StepOutcome:
    """Advance one control period; collision takes priority over goal, goal over timeout."""
    params = params or SimParams()
    if clock.terminated:
        raise ContractError("episode already terminated")
    v = clip_action(a)
    nxt = integrate(state, v, params.dt)
    clock.scene = step_dynamics(clock.scene, params.dt, clock.rng)
    clock.steps += 1
    elapsed = clock.steps * params.dt
    collided = check_collision(nxt, clock.scene, params.collision_margin)
    reached = not collided and math.hypot(nxt.x - spec.goal[0], nxt.y - spec.goal[1]) <= params.goal_radius
    timed_out = not (collided or reached) and clock.steps >= timeout_steps(spec.timeout, params.dt)
    clock.terminated = collided or reached or timed_out
    return StepOutcome(nxt, collided, reached, timed_out, elapsed)


class BatchSim:
    """Lock-step simulation of many independent episodes.

    Each slot owns its episode spec, dynamic scene and rng stream, so results
    for a slot do not depend on which other episodes share the batch.
    """

    def __init__(self, specs: Sequence[EpisodeSpec], params: Optional[SimParams] = None):
        self.params = params or SimParams()
        n = len(specs)
        self.specs: list[EpisodeSpec] = list(specs)
        self.clocks: list[EpisodeClock] = [EpisodeClock.start(s) for s in specs]
        self.poses = np.array([s.start for s in specs], float).reshape(n, 3)
        self.goals = np.array([s.goal for s in specs], float).reshape(n, 2)
        self.steps = np.zeros(n, int)
        self.limits = np.array([timeout_steps(s.timeout, self.params.dt) for s in specs], int)
        self.done = np.zeros(n, bool)
        self._static = [s.scene.static_primitives() for s in specs]
        self._batch: Optional[geometry.BatchPrimitives] = None

    def __len__(self) -> int:
        return len(self.specs)

    def reset_slot(self, i: int, spec: EpisodeSpec) -> None:
        self.specs[i] = spec
        self.clocks[i] = EpisodeClock.start(spec)
        self.poses[i] = spec.start
        self.goals[i] = spec.goal
        self.steps[i] = 0
        self.limits[i] = timeout_steps(spec.timeout, self.params.dt)
        self.done[i] = False
        self._static[i] = spec.scene.static_primitives()
        self._batch = None

    @property
    def elapsed(self) -> np.ndarray:
        return self.steps * self.params.dt

    def geometry(self) -> geometry.BatchPrimitives:
        if self._batch is None:
            prims = []
            for st, clock in zip(self._static, self.clocks):
                prims.append(st.concat(clock.scene.dynamic_primitives()) if clock.scene.dynamics else st)
            self._batch = geometry.stack(prims)
        return self._batch

    def goal_distance(self) -> np.ndarray:
        return np.linalg.norm(self.poses[:, :2] - self.goals, axis=1)

    def step(self, actions: np.ndarray):
        """Step all live slots; finished slots are frozen.

        Returns ``(velocity, collided, reached, timed_out)`` arrays.
        """
        actions = np.asarray(actions, float)
        v = clip_action(actions)
        live = ~self.done
        moved = integrate_poses(self.poses, v, self.params.dt)
        self.poses = np.where(live[:, None], moved, self.poses)
        dynamic = False
        for i in np.flatnonzero(live):
            clock = self.clocks[i]
            if clock.scene.dynamics:
                clock.scene = step_dynamics(clock.scene, self.params.dt, clock.rng)
                dynamic = True
        if dynamic:
            self._batch = None
        self.steps = self.steps + live
        collided = geometry.collide_batch(self.poses, self.geometry(), ROBOT_HALF_EXTENTS, self.params.collision_margin)
        collided &= live
        reached = live & ~collided & (self.goal_distance() <= self.params.goal_radius)
        timed_out = live & ~collided & ~reached & (self.steps >= self.limits)
        self.done = self.done | collided | reached | timed_out
        for i in np.flatnonzero(collided | reached | timed_out):
            self.clocks[i].terminated = True
            self.clocks[i].steps = int(self.steps[i])
        return v, collided, reached, timed_out
