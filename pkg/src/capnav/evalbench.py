"""Frozen benchmark suites, the batched episode runner and SR/CR/WTT metrics."""
from __future__ import annotations

import base64
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from capnav import sensing
from capnav.config import Config
from capnav.rlexpert import ExpertPolicy
from capnav.simkernel import V_MAX, BatchSim
from capnav.student import StudentPolicy
from capnav.world import Capability, EpisodeSpec, GenerationError, Scene, generate_scene, sample_episode

MANIFEST = "benchmark_manifest.json"
PRIVILEGED = "privileged"
STUDENT = "student"

REACHED, COLLIDED, TIMEOUT = "reached", "collided", "timeout"


# ---------------------------------------------------------------------------
# observation batches handed to adapters


@dataclass(frozen=True)
class ExpertBatch:
    depth: np.ndarray  # (E, 4, R) clean
    last_action: np.ndarray  # (E, 3)
    goal_rel: np.ndarray  # (E, 2)


@dataclass(frozen=True)
class StudentBatch:
    fine: np.ndarray  # (E, 4R) degraded
    coarse: np.ndarray  # (E, window-1, R) degraded, zero-padded
    goal_rel: np.ndarray  # (E, 2)


class ExpertAdapter:
    kind = PRIVILEGED

    def __init__(self, policy: ExpertPolicy):
        self.policy = policy
        self.history = None

    def begin(self, n: int) -> None:
        self.history = self.policy.zero_history(n)

    def reset(self, i: int) -> None:
        self.history[i] = 0.0

    def act(self, obs: ExpertBatch) -> np.ndarray:
        if not isinstance(obs, ExpertBatch):
            raise TypeError("expert adapter needs an ExpertBatch")
        mean, _, hidden = self.policy.act(
            {"depth": obs.depth, "last_action": obs.last_action, "goal": obs.goal_rel, "history": self.history}
        )
        self.history = hidden
        return mean


class StudentAdapter:
    kind = STUDENT

    def __init__(self, policy: StudentPolicy):
        self.policy = policy

    def begin(self, n: int) -> None:
        pass

    def reset(self, i: int) -> None:
        pass

    def act(self, obs: StudentBatch) -> np.ndarray:
        if not isinstance(obs, StudentBatch):
            raise TypeError("student adapter needs a StudentBatch")
        return self.policy.act(obs.fine, obs.coarse, obs.goal_rel)


class ScriptedAdapter:
    """Wraps ``fn(ExpertBatch) -> actions`` for baselines and tests."""

    kind = PRIVILEGED

    def __init__(self, fn: Callable[[ExpertBatch], np.ndarray]):
        self.fn = fn

    def begin(self, n: int) -> None:
        pass

    def reset(self, i: int) -> None:
        pass

    def act(self, obs: ExpertBatch) -> np.ndarray:
        return np.asarray(self.fn(obs), float)


def zero_policy() -> ScriptedAdapter:
    return ScriptedAdapter(lambda obs: np.zeros((len(obs.goal_rel), 3)))


def straight_to_goal() -> ScriptedAdapter:
    """Drive along the body-frame goal direction at 1 m/s."""

    def fn(obs: ExpertBatch) -> np.ndarray:
        g = obs.goal_rel
        n = np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-9)
        v = np.concatenate([g / n, np.zeros((len(g), 1))], axis=1)
        return v / V_MAX

    return ScriptedAdapter(fn)


def adapter_for(policy) -> object:
    if isinstance(policy, ExpertPolicy) or hasattr(policy, "zero_history"):
        return ExpertAdapter(policy)
    if isinstance(policy, StudentPolicy):
        return StudentAdapter(policy)
    if hasattr(policy, "kind") and hasattr(policy, "act"):
        return policy
    raise TypeError(f"no adapter for {type(policy).__name__}")


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class EpisodeRecord:
    outcome: str
    duration: float
    path: Optional[np.ndarray] = field(default=None, compare=False)  # (T+1, 3) poses

    @property
    def reached(self) -> bool:
        return self.outcome == REACHED


def compute_wtt(outcomes) -> float:
    """Mean duration of successful episodes divided by success rate; ``inf`` with no success.

    ``outcomes`` holds :class:`EpisodeRecord` items or ``(reached, duration)`` pairs.
    """
    pairs = [(o.reached, o.duration) if isinstance(o, EpisodeRecord) else (bool(o[0]), float(o[1])) for o in outcomes]
    if not pairs:
        raise ValueError("weighted travel time of an empty episode set is undefined")
    times = [d for ok, d in pairs if ok]
    if not times:
        return math.inf
    sr = len(times) / len(pairs)
    return (sum(times) / len(times)) / sr


@dataclass(frozen=True)
class Metrics:
    sr: float
    cr: float
    wtt: float
    episodes: tuple[EpisodeRecord, ...]

    @classmethod
    def from_records(cls, records: Sequence[EpisodeRecord]) -> "Metrics":
        records = tuple(records)
        n = len(records)
        if n == 0:
            raise ValueError("no episodes")
        sr = sum(r.outcome == REACHED for r in records) / n
        cr = sum(r.outcome == COLLIDED for r in records) / n
        return cls(sr, cr, compute_wtt(records), records)

    @property
    def timeout_rate(self) -> float:
        return sum(r.outcome == TIMEOUT for r in self.episodes) / len(self.episodes)

    @property
    def counts(self) -> dict[str, int]:
        out = {REACHED: 0, COLLIDED: 0, TIMEOUT: 0}
        for r in self.episodes:
            out[r.outcome] += 1
        return out

    @property
    def mean_success_time(self) -> float:
        t = [r.duration for r in self.episodes if r.reached]
        return sum(t) / len(t) if t else math.inf


# ---------------------------------------------------------------------------
# suites


@dataclass(frozen=True)
class SuiteEntry:
    name: str
    capability: Capability
    timeout: float
    scenes: tuple[Scene, ...]
    episodes: tuple[tuple[int, int], ...]  # (scene index, episode seed)

    def specs(self, cfg: Config) -> list[EpisodeSpec]:
        params = cfg.scene[self.capability]
        out = []
        for k, seed in self.episodes:
            spec = sample_episode(self.scenes[k], seed, params)
            out.append(dataclasses.replace(spec, timeout=self.timeout))
        return out


@dataclass(frozen=True)
class BenchmarkSuite:
    entries: tuple[SuiteEntry, ...]

    def __getitem__(self, name: str) -> SuiteEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]


def build_entry(name: str, capability, cfg: Config, n_scenes: int, n_episodes: int, seed: int) -> SuiteEntry:
    """Generate scenes and episode seeds that sample successfully."""
    cap = Capability(capability)
    params = cfg.scene[cap]
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, cap.code, 5])
    scenes = []
    while len(scenes) < n_scenes:
        try:
            scenes.append(generate_scene(cap, int(rng.integers(0, 2**62)), params))
        except GenerationError:
            continue
    episodes = []
    attempts = 0
    while len(episodes) < n_episodes:
        k = len(episodes) % n_scenes
        ep_seed = int(rng.integers(0, 2**62))
        attempts += 1
        if attempts > 100 * n_episodes:
            raise GenerationError(f"{name}: cannot sample {n_episodes} episodes")
        try:
            sample_episode(scenes[k], ep_seed, params)
        except GenerationError:
            continue
        episodes.append((k, ep_seed))
    return SuiteEntry(name, cap, params.timeout, tuple(scenes), tuple(episodes))


def default_suite(cfg: Config, episodes: Optional[int] = None) -> BenchmarkSuite:
    """One fixed scene per capability, including the mixed scene."""
    n = episodes or cfg.bench.episodes
    return BenchmarkSuite(tuple(
        build_entry(c.value, c, cfg, 1, n, cfg.bench.scene_seed + c.code) for c in Capability
    ))


def training_suite(cfg: Config, capabilities, episodes: int, scenes: int, seed: int) -> BenchmarkSuite:
    return BenchmarkSuite(tuple(build_entry(Capability(c).value, c, cfg, scenes, episodes, seed) for c in capabilities))


def suite_to_json(suite: BenchmarkSuite) -> dict:
    return {
        "version": 1,
        "entries": [
            {
                "name": e.name,
                "capability": e.capability.value,
                "timeout": e.timeout,
                "scenes": [{"seed": s.seed, "blob": base64.b64encode(s.to_bytes()).decode("ascii")} for s in e.scenes],
                "episodes": [list(p) for p in e.episodes],
            }
            for e in suite.entries
        ],
    }


def suite_from_json(data: dict) -> BenchmarkSuite:
    entries = []
    for e in data["entries"]:
        scenes = tuple(Scene.from_bytes(base64.b64decode(s["blob"])) for s in e["scenes"])
        episodes = tuple((int(k), int(s)) for k, s in e["episodes"])
        entries.append(SuiteEntry(e["name"], Capability(e["capability"]), float(e["timeout"]), scenes, episodes))
    return BenchmarkSuite(tuple(entries))


def save_suite(directory, suite: BenchmarkSuite) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / MANIFEST
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(suite_to_json(suite), indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def load_suite(directory) -> BenchmarkSuite:
    path = Path(directory)
    if path.is_dir():
        path = path / MANIFEST
    return suite_from_json(json.loads(path.read_text()))


def ensure_suite(directory, cfg: Config, regenerate: bool = False) -> BenchmarkSuite:
    """Load the frozen suite, generating it only if absent or when asked to."""
    path = Path(directory) / MANIFEST
    if path.exists() and not regenerate:
        return load_suite(directory)
    suite = default_suite(cfg)
    save_suite(directory, suite)
    return suite


# ---------------------------------------------------------------------------
# runner


def run_episodes(adapter, specs: Sequence[EpisodeSpec], cfg: Config, seed: int,
                 record_paths: bool = False) -> list[EpisodeRecord]:
    """Roll every spec to termination in lock-step; evaluation uses the nominal FOV."""
    n = len(specs)
    if n == 0:
        return []
    sp = cfg.sensing
    sim = BatchSim(specs, cfg.sim)
    nominal = sensing.EpisodeSensors.nominal(sp)
    fovs = np.full(n, nominal.fov)
    jitters = np.zeros((n, 2))
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 404])
    history = sensing.FrameHistory(n, sp.rays, sp.window) if adapter.kind == STUDENT else None
    last = np.zeros((n, 3))
    adapter.begin(n)
    outcome = np.array([""] * n, dtype=object)
    paths = [[sim.poses[i].copy()] for i in range(n)] if record_paths else None
    while not sim.done.all():
        live = ~sim.done
        depth = sensing.raycast_batch(sim.poses, sim.geometry(), fovs, jitters, sp.rays)
        goal = sensing.goal_in_body(sim.poses, sim.goals)
        if adapter.kind == STUDENT:
            history.push(depth, live)
            fine, coarse = history.student_arrays(rng, sp)
            a = adapter.act(StudentBatch(fine, coarse, goal))
        elif adapter.kind == PRIVILEGED:
            a = adapter.act(ExpertBatch(depth, last.copy(), goal))
        else:
            raise TypeError(f"adapter declares unknown observation kind {adapter.kind!r}")
        _, col, reach, tout = sim.step(a)
        last = np.where(live[:, None], np.clip(a, -1.0, 1.0), last)
        outcome[col] = COLLIDED
        outcome[reach] = REACHED
        outcome[tout] = TIMEOUT
        if record_paths:
            for i in np.flatnonzero(live):
                paths[i].append(sim.poses[i].copy())
    elapsed = sim.elapsed
    return [
        EpisodeRecord(str(outcome[i]), float(elapsed[i]), np.array(paths[i]) if record_paths else None)
        for i in range(n)
    ]


def run_benchmark(policy, suite: BenchmarkSuite, cfg: Config, seed: int = 0,
                  record_paths: bool = False, names: Optional[Sequence[str]] = None) -> dict[str, Metrics]:
    adapter = adapter_for(policy)
    out = {}
    for entry in suite.entries:
        if names is not None and entry.name not in names:
            continue
        records = run_episodes(adapter, entry.specs(cfg), cfg, seed, record_paths)
        out[entry.name] = Metrics.from_records(records)
    return out
