"""Expert-to-student distillation: success-filtered offline data, DAgger and
the capability-balanced aggregation loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from capnav import sensing
from capnav.config import Config
from capnav.dataset import REACHED, TERMINAL, TrajectoryDataset
from capnav.evalbench import BenchmarkSuite, Metrics, run_benchmark, training_suite
from capnav.rlexpert import ExpertPolicy
from capnav.simkernel import BatchSim, timeout_steps
from capnav.student import StudentPolicy, finetune
from capnav.world import Capability, GenerationError, generate_scene, sample_episode

log = logging.getLogger(__name__)

G_MAX = 1e6


class ExpertUnusableError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# gaps and proportions


def compute_gap(w_vla: float, w_rl: float, epsilon: float = 0.1) -> float:
    """Relative travel-time gap of student over expert, floored at ``epsilon``."""
    if not (w_rl > 0 and math.isfinite(w_rl)):
        raise ValueError(f"expert travel time must be positive and finite, got {w_rl}")
    if math.isnan(w_vla) or not w_vla > 0:
        raise ValueError(f"student travel time must be positive, got {w_vla}")
    if math.isinf(w_vla):
        return G_MAX + epsilon
    return max(0.0, (w_vla - w_rl) / w_rl) + epsilon


def capability_gap(w_vla: float, w_rl: float, epsilon: float = 0.1) -> float:
    """:func:`compute_gap`, except an expert that never succeeds leaves only the floor."""
    if math.isinf(w_rl):
        return epsilon
    return compute_gap(w_vla, w_rl, epsilon)


@dataclass(frozen=True)
class MixPlan:
    proportions: dict[str, float]
    alpha: float
    budget: int = 0


def compute_proportions(gaps: Mapping[str, float], alpha: float = 0.3, budget: int = 0) -> MixPlan:
    """Power-smoothed normalization ``g^alpha / sum g^alpha``."""
    if not gaps:
        raise ValueError("no gaps")
    keys = list(gaps)
    g = np.array([float(gaps[k]) for k in keys])
    if np.any(~np.isfinite(g)) or np.any(g <= 0):
        raise ValueError(f"gaps must be positive and finite, got {dict(gaps)}")
    # divide by the largest gap first so large sentinels stay well conditioned
    w = (g / g.max()) ** alpha
    p = w / w.sum()
    return MixPlan({Capability(k).value: float(v) for k, v in zip(keys, p)}, alpha, budget)


def uniform_plan(capabilities, budget: int = 0) -> MixPlan:
    caps = [Capability(c).value for c in capabilities]
    return MixPlan({c: 1.0 / len(caps) for c in caps}, 0.0, budget)


# ---------------------------------------------------------------------------
# collection


def _episode_stream(capability: Capability, cfg: Config, rng: np.random.Generator):
    """Endless fresh (scene, episode) specs for one capability."""
    params = cfg.scene[capability]
    while True:
        try:
            scene = generate_scene(capability, int(rng.integers(0, 2**62)), params)
            yield sample_episode(scene, int(rng.integers(0, 2**62)), params)
        except GenerationError:
            continue


class _Collector:
    """Lock-step episodes of one capability with per-slot buffers.

    ``driver(fine, coarse, goal, labels)`` returns the executed action; the
    expert always labels every visited state.
    """

    def __init__(self, capability: Capability, expert: ExpertPolicy, cfg: Config, n_slots: int,
                 rng: np.random.Generator):
        self.cap = capability
        self.expert = expert
        self.cfg = cfg
        self.rng = rng
        self.specs = _episode_stream(capability, cfg, rng)
        self.n = n_slots
        self.sp = cfg.sensing

    def run(self, driver: Callable, keep: Callable[[bool], bool], want_more: Callable[[], bool],
            on_episode: Callable[[dict], None], trace: Optional[list] = None) -> None:
        n, sp = self.n, self.sp
        sim = BatchSim([next(self.specs) for _ in range(n)], self.cfg.sim)
        fovs, jitters = np.zeros(n), np.zeros((n, 2))
        for i in range(n):
            self._sensors(i, fovs, jitters)
        frames = sensing.FrameHistory(n, sp.rays, sp.window)
        hist = self.expert.zero_history(n)
        last = np.zeros((n, 3))
        bufs: list[list] = [[] for _ in range(n)]
        retired = np.zeros(n, bool)
        while not retired.all():
            live = ~sim.done
            depth = sensing.raycast_batch(sim.poses, sim.geometry(), fovs, jitters, sp.rays)
            goal = sensing.goal_in_body(sim.poses, sim.goals)
            frames.push(depth, live)
            fine, coarse = frames.student_arrays(self.rng, sp)
            labels, _, hidden = self.expert.act({"depth": depth, "last_action": last, "goal": goal, "history": hist})
            executed = driver(fine, coarse, goal, labels)
            t = sim.elapsed.copy()
            steps = sim.steps.copy()
            _, col, reach, tout = sim.step(executed)
            for i in np.flatnonzero(live):
                bufs[i].append((int(steps[i]), float(t[i]), goal[i], labels[i], fine[i], coarse[i]))
                if trace is not None:
                    trace.append({"slot": i, "fine": fine[i].copy(), "coarse": coarse[i].copy(), "goal": goal[i].copy(),
                                  "executed": np.array(executed[i], float), "label": labels[i].copy(),
                                  "depth": depth[i].copy(), "last_action": last[i].copy(),
                                  "history": hist[i].copy()})
            last = np.where(live[:, None], np.clip(executed, -1.0, 1.0), last)
            hist = np.where(live[:, None], hidden, hist)
            for i in np.flatnonzero(col | reach | tout):
                ok = bool(reach[i])
                if keep(ok):
                    on_episode({"steps": bufs[i], "reached": ok, "fov_deg": math.degrees(fovs[i])})
                bufs[i] = []
                if want_more():
                    sim.reset_slot(i, next(self.specs))
                    self._sensors(i, fovs, jitters)
                    frames.reset(i)
                    hist[i] = 0.0
                    last[i] = 0.0
                else:
                    retired[i] = True

    def _sensors(self, i: int, fovs: np.ndarray, jitters: np.ndarray) -> None:
        s = sensing.EpisodeSensors.sample(self.rng, self.sp)
        fovs[i] = s.fov
        jitters[i] = s.jitter


class _Sink:
    """Turns finished episodes into dataset records with fresh episode ids."""

    def __init__(self, capability: Capability, cfg: Config, first_id: int):
        self.cap = capability
        self.cfg = cfg
        self.next_id = first_id
        self.parts: list[TrajectoryDataset] = []
        self.steps = 0
        self.episodes = 0

    def __call__(self, ep: dict) -> None:
        rows = ep["steps"]
        k = len(rows)
        flags = np.zeros(k, np.uint8)
        flags[-1] = TERMINAL | (REACHED if ep["reached"] else 0)
        sp = self.cfg.sensing
        part = TrajectoryDataset.from_arrays(
            np.full(k, self.next_id, np.uint64), [r[0] for r in rows], np.full(k, self.cap.code, np.uint8),
            [r[1] for r in rows], np.array([r[2] for r in rows]), np.array([r[3] for r in rows]),
            np.array([r[4] for r in rows]), np.array([r[5] for r in rows]), flags, sp.rays, sp.window,
        )
        part.fovs[self.next_id] = ep["fov_deg"]
        self.parts.append(part)
        self.next_id += 1
        self.steps += k
        self.episodes += 1

    def dataset(self) -> TrajectoryDataset:
        sp = self.cfg.sensing
        return TrajectoryDataset.empty(sp.rays, sp.window).concat(*self.parts)


def collect_offline(experts: Mapping, cfg: Config, seed: int, total_steps: Optional[int] = None,
                    first_episode_id: int = 0) -> TrajectoryDataset:
    """Roll greedy experts in fresh scenes and keep only goal-reaching episodes.

    The step budget is split evenly over the given capabilities; a budget is
    met once the kept steps reach it, and in-flight episodes are dropped.
    """
    d = cfg.distill
    total = d.offline_steps if total_steps is None else int(total_steps)
    caps = [Capability(c) for c in experts]
    per_cap = math.ceil(total / len(caps))
    parts = []
    next_id = first_episode_id
    for cap in caps:
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 61, cap.code])
        sink = _Sink(cap, cfg, next_id)
        finished = [0, 0]  # episodes, successes

        def keep(ok: bool, finished=finished, cap=cap) -> bool:
            finished[0] += 1
            finished[1] += ok
            if finished[0] == d.expert_check_episodes and finished[1] < d.min_expert_sr * finished[0]:
                raise ExpertUnusableError(
                    f"{cap.value} expert succeeded in {finished[1]}/{finished[0]} episodes "
                    f"(< {d.min_expert_sr:.0%}); retrain it before collecting"
                )
            return ok and sink.steps < per_cap

        coll = _Collector(cap, experts[cap], cfg, d.collect_envs, rng)
        coll.run(lambda f, c, g, labels: labels, keep, lambda: sink.steps < per_cap, sink)
        log.info("offline %s: %d steps in %d successful episodes", cap.value, sink.steps, sink.episodes)
        parts.append(sink.dataset())
        next_id = sink.next_id
    return parts[0].concat(*parts[1:])


def dagger_collect(student: StudentPolicy, experts: Mapping, plan: MixPlan, cfg: Config, seed: int,
                   budget: Optional[int] = None, mean_lengths: Optional[Mapping[str, float]] = None,
                   first_episode_id: int = 0, trace: Optional[list] = None) -> TrajectoryDataset:
    """Student drives, expert labels every visited state; no success filtering.

    Each capability runs ``ceil(p * budget / mean_len)`` episodes, where
    ``mean_len`` is the student's mean episode length in steps.
    """
    d = cfg.distill
    budget = d.iter_steps if budget is None else int(budget)
    parts = []
    next_id = first_episode_id
    for name, p in plan.proportions.items():
        cap = Capability(name)
        if p <= 0:
            continue
        mean_len = (mean_lengths or {}).get(cap.value)
        if not mean_len or mean_len <= 0:
            mean_len = timeout_steps(cfg.timeout(cap), cfg.sim.dt) / 2
        quota = math.ceil(p * budget / mean_len)
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 71, cap.code])
        sink = _Sink(cap, cfg, next_id)
        launched = [min(quota, d.collect_envs)]

        def want_more(launched=launched, quota=quota) -> bool:
            if launched[0] < quota:
                launched[0] += 1
                return True
            return False

        coll = _Collector(cap, experts[cap], cfg, launched[0], rng)
        coll.run(lambda f, c, g, labels: student.act(f, c, g), lambda ok: True, want_more, sink, trace)
        log.info("dagger %s: %d episodes, %d steps", cap.value, sink.episodes, sink.steps)
        parts.append(sink.dataset())
        next_id = sink.next_id
    if not parts:
        sp = cfg.sensing
        return TrajectoryDataset.empty(sp.rays, sp.window)
    return parts[0].concat(*parts[1:])


# ---------------------------------------------------------------------------
# aggregation loop


def _metric_row(m: Metrics) -> dict:
    return {"sr": m.sr, "cr": m.cr, "wtt": m.wtt}


@dataclass
class IterationReport:
    iteration: int
    student_before: dict[str, dict]
    student_after: dict[str, dict]
    experts: dict[str, dict]
    gaps: dict[str, float]
    proportions: dict[str, float]
    new_steps: dict[str, int]
    train_steps: int
    dataset_size: int
    sr_improvement: float  # percentage points, max over capabilities
    converged: bool
    loss: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(_finite(asdict(self)), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "IterationReport":
        return cls(**_unfinite(json.loads(line)))


def _finite(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_finite(v) for v in x]
    return x


def _unfinite(x):
    if x in ("inf", "-inf"):
        return float(x)
    if isinstance(x, dict):
        return {k: _unfinite(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_unfinite(v) for v in x]
    return x


def make_student(cfg: Config, seed: int) -> StudentPolicy:
    n = cfg.net
    return StudentPolicy(cfg.sensing.rays, cfg.sensing.window, n.student_fine, n.student_coarse, n.student_hidden, seed)


def pretrain_student(data: TrajectoryDataset, cfg: Config, seed: int,
                     student: Optional[StudentPolicy] = None) -> tuple[StudentPolicy, list[float]]:
    student = student or make_student(cfg, seed)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 83])
    d = cfg.distill
    curve = finetune(student, data.training_arrays(), d.pretrain_epochs, d.lr, d.batch_size, rng)
    return student, curve


def evaluation_suite(cfg: Config, capabilities, seed: int) -> BenchmarkSuite:
    d = cfg.distill
    return training_suite(cfg, capabilities, d.eval_episodes, d.eval_scenes, seed)


def _evaluate(policy, suite: BenchmarkSuite, cfg: Config, seed: int) -> dict[str, Metrics]:
    return run_benchmark(policy, suite, cfg, seed)


def iterate(student: StudentPolicy, experts: Mapping, cfg: Config, seed: int, data: TrajectoryDataset,
            out_dir=None, balanced: Optional[bool] = None, max_iterations: Optional[int] = None,
            suite: Optional[BenchmarkSuite] = None,
            expert_metrics: Optional[dict[str, Metrics]] = None) -> tuple[StudentPolicy, list[IterationReport], TrajectoryDataset]:
    """Evaluate, allocate by travel-time gaps, collect with DAgger and fine-tune until stalled.

    ``data`` is the aggregate so far (usually the offline set). Returns the
    student, one report per iteration and the final aggregate.
    """
    d = cfg.distill
    balanced = d.balanced if balanced is None else balanced
    cap_iters = d.max_iterations if max_iterations is None else max_iterations
    caps = [Capability(c) for c in experts]
    suite = suite or evaluation_suite(cfg, caps, seed)
    eval_seed = int(seed) + 1
    if expert_metrics is None:
        expert_metrics = {c.value: _evaluate(experts[c], suite, cfg, eval_seed)[c.value] for c in caps}
    jsonl = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jsonl = out / "iterations.jsonl"
        jsonl.write_text("")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 97])
    before = _evaluate(student, suite, cfg, eval_seed)
    slices = [data]
    reports: list[IterationReport] = []
    stall = 0
    for it in range(1, cap_iters + 1):
        gaps = {c.value: capability_gap(before[c.value].wtt, expert_metrics[c.value].wtt, d.epsilon) for c in caps}
        plan = compute_proportions(gaps, d.alpha, d.iter_steps) if balanced else uniform_plan(caps, d.iter_steps)
        mean_len = {
            c.value: float(np.mean([e.duration for e in before[c.value].episodes])) / cfg.sim.dt for c in caps
        }
        first_id = max(s.next_episode_id() for s in slices)
        new = dagger_collect(student, experts, plan, cfg, seed * 1000 + it, d.iter_steps, mean_len, first_id)
        old = slices[0].concat(*slices[1:])
        n_replay = min(len(old), int(round(len(new) * d.replay / (1.0 - d.replay)))) if d.replay > 0 else 0
        replay_idx = np.sort(rng.choice(len(old), size=n_replay, replace=False)) if n_replay else np.zeros(0, int)
        train = new.concat(old.subset(replay_idx))
        slices.append(new)
        loss = finetune(student, train.training_arrays(), d.finetune_epochs, d.lr, d.batch_size, rng)
        after = _evaluate(student, suite, cfg, eval_seed)
        improvement = 100.0 * max(after[c.value].sr - before[c.value].sr for c in caps)
        stall = stall + 1 if improvement < d.min_delta else 0
        converged = stall >= d.patience
        caps_codes = new.capabilities()
        report = IterationReport(
            iteration=it,
            student_before={c.value: _metric_row(before[c.value]) for c in caps},
            student_after={c.value: _metric_row(after[c.value]) for c in caps},
            experts={c.value: _metric_row(expert_metrics[c.value]) for c in caps},
            gaps=gaps,
            proportions=dict(plan.proportions),
            new_steps={c.value: int(np.sum(caps_codes == c.code)) for c in caps},
            train_steps=len(train),
            dataset_size=sum(len(s) for s in slices),
            sr_improvement=improvement,
            converged=converged,
            loss=loss,
        )
        reports.append(report)
        log.info("iteration %d: proportions %s, SR %s", it, plan.proportions,
                 {k: round(v["sr"], 3) for k, v in report.student_after.items()})
        if jsonl is not None:
            with open(jsonl, "a") as fh:
                fh.write(report.to_json() + "\n")
        before = after
        if converged:
            break
    return student, reports, slices[0].concat(*slices[1:])


def read_reports(path) -> list[IterationReport]:
    return [IterationReport.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]
