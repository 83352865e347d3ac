"""Run configuration: defaults, presets, TOML loading and the effective-config sidecar."""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import tomli

from capnav.sensing import SensorParams
from capnav.simkernel import SimParams
from capnav.world import Capability, SceneParams, default_scene_params


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config: " + "; ".join(problems))
        self.problems = problems


@dataclass
class RewardWeights:
    alpha: float  # goal progress
    beta: float  # per-step
    gamma: float  # regularizer
    delta: float  # collision

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.gamma, self.delta)


REFERENCE_REWARDS = {
    Capability.REACHING: RewardWeights(1.2, -0.05, 0.05, -15.0),
    Capability.SQUEEZING: RewardWeights(1.5, -0.05, 0.02, -15.0),
    Capability.AVOIDING: RewardWeights(1.2, -0.05, 0.0, -15.0),
}


@dataclass
class NetConfig:
    encoder_width: int = 64
    trunk: list[int] = field(default_factory=lambda: [128, 64, 64])
    student_fine: int = 128
    student_coarse: int = 32
    student_hidden: list[int] = field(default_factory=lambda: [128])

    def validate(self) -> list[str]:
        bad = []
        if self.encoder_width <= 0:
            bad.append("encoder_width")
        if not self.trunk or any(w <= 0 for w in self.trunk):
            bad.append("trunk")
        if self.student_fine <= 0 or self.student_coarse <= 0:
            bad.append("student_fine")
        if not self.student_hidden or any(w <= 0 for w in self.student_hidden):
            bad.append("student_hidden")
        return bad


@dataclass
class PPOConfig:
    n_envs: int = 16
    horizon: int = 64
    epochs: int = 4
    minibatches: int = 4
    clip: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    gamma: float = 0.99
    lam: float = 0.95
    lr: float = 1e-3
    max_grad_norm: float = 1.0
    updates: int = 500
    regen_every: int = 10
    init_std: float = 0.2
    time_budget_s: float = 0.0

    def validate(self) -> list[str]:
        bad = []
        for name in ("n_envs", "horizon", "epochs", "minibatches", "updates", "regen_every"):
            if getattr(self, name) < 1:
                bad.append(name)
        for name in ("clip", "lr", "init_std"):
            if not getattr(self, name) > 0:
                bad.append(name)
        if not (0 < self.gamma <= 1):
            bad.append("gamma")
        if not (0 <= self.lam <= 1):
            bad.append("lam")
        for name in ("vf_coef", "ent_coef", "max_grad_norm", "time_budget_s"):
            if getattr(self, name) < 0:
                bad.append(name)
        return bad


@dataclass
class DistillConfig:
    offline_steps: int = 100_000
    iter_steps: int = 20_000
    max_iterations: int = 6
    min_delta: float = 2.0  # SR percentage points
    patience: int = 2
    replay: float = 0.25
    balanced: bool = True
    epsilon: float = 0.1
    alpha: float = 0.3
    pretrain_epochs: int = 20
    finetune_epochs: int = 8
    batch_size: int = 256
    lr: float = 1e-3
    eval_episodes: int = 50
    eval_scenes: int = 5
    collect_envs: int = 32
    min_expert_sr: float = 0.05
    expert_check_episodes: int = 200

    def validate(self) -> list[str]:
        bad = []
        for name in ("offline_steps", "iter_steps", "max_iterations", "patience", "pretrain_epochs", "finetune_epochs",
                     "batch_size", "eval_episodes", "eval_scenes", "collect_envs", "expert_check_episodes"):
            if getattr(self, name) < 1:
                bad.append(name)
        if not (0 <= self.replay < 1):
            bad.append("replay")
        for name in ("epsilon", "alpha", "lr"):
            if not getattr(self, name) > 0:
                bad.append(name)
        if self.min_delta < 0:
            bad.append("min_delta")
        if not (0 <= self.min_expert_sr <= 1):
            bad.append("min_expert_sr")
        return bad


@dataclass
class BenchConfig:
    episodes: int = 100
    scene_seed: int = 20250101
    episode_seed: int = 7

    def validate(self) -> list[str]:
        return ["episodes"] if self.episodes < 1 else []


@dataclass
class Config:
    seed: int = 0
    preset: str = "desk"
    sim: SimParams = field(default_factory=SimParams)
    sensing: SensorParams = field(default_factory=SensorParams)
    scene: dict[Capability, SceneParams] = field(
        default_factory=lambda: {c: default_scene_params(c) for c in Capability}
    )
    net: NetConfig = field(default_factory=NetConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    reward: dict[Capability, RewardWeights] = field(
        default_factory=lambda: {c: dataclasses.replace(w) for c, w in REFERENCE_REWARDS.items()}
    )
    distill: DistillConfig = field(default_factory=DistillConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @classmethod
    def for_preset(cls, preset: str = "desk") -> "Config":
        cfg = cls(preset=preset)
        if preset == "paper":
            cfg.net.trunk = [512, 256, 128]
            cfg.ppo.n_envs = 128
            cfg.distill.offline_steps = 500_000
            cfg.distill.iter_steps = 200_000
        elif preset != "desk":
            raise ConfigError([f"preset: unknown preset {preset!r}"])
        return cfg

    def validate(self) -> list[str]:
        bad = []
        if self.sim.dt <= 0:
            bad.append("sim.dt")
        if self.sim.goal_radius <= 0:
            bad.append("sim.goal_radius")
        if self.sim.collision_margin < 0:
            bad.append("sim.collision_margin")
        bad += [f"sensing.{k}" for k in self.sensing.validate()]
        for cap, sp in self.scene.items():
            bad += [f"scene.{cap.value}.{k}" for k in sp.validate()]
        bad += [f"net.{k}" for k in self.net.validate()]
        bad += [f"ppo.{k}" for k in self.ppo.validate()]
        bad += [f"distill.{k}" for k in self.distill.validate()]
        bad += [f"bench.{k}" for k in self.bench.validate()]
        for cap, w in self.reward.items():
            if not all(math.isfinite(v) for v in w.as_tuple()):
                bad.append(f"reward.{cap.value}")
        return bad

    def timeout(self, capability: Capability) -> float:
        return self.scene[Capability(capability)].timeout


# ---------------------------------------------------------------------------
# loading

_SECTIONS = {"sim": "sim", "sensing": "sensing", "net": "net", "ppo": "ppo", "distill": "distill", "bench": "bench"}


def _coerce(current: Any, value: Any, key: str, problems: list[str]) -> Any:
    if isinstance(current, bool):
        if not isinstance(value, bool):
            problems.append(f"{key}: expected a boolean")
            return current
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{key}: expected an integer")
            return current
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{key}: expected a number")
            return current
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            problems.append(f"{key}: expected a list")
            return current
        return list(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            problems.append(f"{key}: expected a string")
            return current
        return value
    return value


def _apply(obj: Any, table: dict, prefix: str, problems: list[str]) -> None:
    if not isinstance(table, dict):
        problems.append(f"{prefix}: expected a table")
        return
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in table.items():
        full = f"{prefix}.{key}"
        if key not in names:
            problems.append(f"{full}: unknown key")
            continue
        setattr(obj, key, _coerce(getattr(obj, key), value, full, problems))


def config_from_dict(data: dict) -> Config:
    problems: list[str] = []
    preset = data.get("preset", "desk")
    if preset not in ("desk", "paper"):
        raise ConfigError([f"preset: unknown preset {preset!r}"])
    cfg = Config.for_preset(preset)
    for key, value in data.items():
        if key == "preset":
            continue
        if key == "seed":
            cfg.seed = _coerce(cfg.seed, value, "seed", problems)
        elif key in _SECTIONS:
            _apply(getattr(cfg, key), value, key, problems)
        elif key in ("scene", "reward"):
            if not isinstance(value, dict):
                problems.append(f"{key}: expected a table")
                continue
            target = getattr(cfg, key)
            for cap_name, sub in value.items():
                try:
                    cap = Capability(cap_name)
                except ValueError:
                    problems.append(f"{key}.{cap_name}: unknown capability")
                    continue
                if cap not in target:
                    problems.append(f"{key}.{cap_name}: unknown key")
                    continue
                _apply(target[cap], sub, f"{key}.{cap_name}", problems)
        else:
            problems.append(f"{key}: unknown key")
    problems += cfg.validate()
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path, sidecar: Optional[os.PathLike] = None) -> Config:
    """Parse, default and validate a TOML config; echo the effective config to ``sidecar``.

    The sidecar defaults to ``<path>.effective.toml``; pass ``sidecar=False`` to skip.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"syntax: {exc}"]) from None
    cfg = config_from_dict(data)
    if sidecar is not False:
        out = Path(sidecar) if sidecar else Path(f"{path}.effective.toml")
        out.write_text(dump_config(cfg), encoding="utf-8")
    return cfg


# ---------------------------------------------------------------------------
# emitting

_REFERENCE_NOTES = {
    "fov_min_deg": "camera FOV lower bound",
    "fov_max_deg": "camera FOV upper bound",
    "window": "sliding window length",
    "epsilon": "gap floor",
    "alpha": "proportion smoothing exponent",
    "init_std": "initial action noise std",
}


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot format {value!r}")


def _table(lines: list[str], header: str, obj: Any, notes: dict[str, str]) -> None:
    lines.append("")
    lines.append(f"[{header}]")
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        note = notes.get(f.name)
        lines.append(f"{f.name} = {_fmt(value)}" + (f"  # reference: {note}" if note else ""))


def dump_config(cfg: Config) -> str:
    """Effective config as TOML; values mirroring published settings carry a ``# reference`` note."""
    lines = ["# effective configuration (re-loadable)", f"seed = {cfg.seed}", f"preset = {_fmt(cfg.preset)}"]
    trunk_note = "actor/critic hidden widths" if cfg.net.trunk == [512, 256, 128] else None
    envs_note = "parallel robots" if cfg.ppo.n_envs == 128 else None
    ref_notes = _REFERENCE_NOTES
    _table(lines, "sim", cfg.sim, {})
    _table(lines, "sensing", cfg.sensing, {k: ref_notes[k] for k in ("fov_min_deg", "fov_max_deg", "window")})
    for cap, sp in cfg.scene.items():
        notes = {"timeout": "episode time limit"} if sp.timeout in (90.0, 120.0) else {}
        if cap is Capability.AVOIDING:
            notes.update(speed_min="dynamic obstacle speed range", speed_max="dynamic obstacle speed range")
        if cap in (Capability.REACHING, Capability.AVOIDING) and sp.max_goal_dist in (30.0, 10.0):
            notes["max_goal_dist"] = "start-goal distance cap"
        _table(lines, f"scene.{cap.value}", sp, notes)
    _table(lines, "net", cfg.net, {"trunk": trunk_note} if trunk_note else {})
    ppo_notes = {"init_std": ref_notes["init_std"]}
    if envs_note:
        ppo_notes["n_envs"] = envs_note
    _table(lines, "ppo", cfg.ppo, ppo_notes)
    for cap, w in cfg.reward.items():
        ref = REFERENCE_REWARDS[cap]
        notes = {k: "reward coefficient" for k in ("alpha", "beta", "gamma", "delta") if getattr(w, k) == getattr(ref, k)}
        _table(lines, f"reward.{cap.value}", w, notes)
    _table(lines, "distill", cfg.distill, {"epsilon": ref_notes["epsilon"], "alpha": ref_notes["alpha"]})
    _table(lines, "bench", cfg.bench, {})
    return "\n".join(lines) + "\n"

