"""Privileged experts: capability rewards, the history-token actor-critic and PPO."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from capnav import sensing
from capnav.config import Config, PPOConfig, RewardWeights
from capnav.simkernel import V_MAX, BatchSim, RobotState, StepOutcome
from capnav.tensornn import (
    MLP,
    Adam,
    GaussianPolicyHead,
    Linear,
    MlpSpec,
    Module,
    Tensor,
    concat,
    gaussian_log_prob,
    load_checkpoint,
    minimum,
    no_grad,
    save_checkpoint,
)
from capnav.world import Capability, EpisodeSpec, generate_scene, sample_episode

log = logging.getLogger(__name__)

GOAL_BONUS = 10.0
N_VIEWS = 4
ACTION_DIM = 3
# The token is the previous step's last hidden layer and so nearly encodes the
# previous action mean; fed back at full scale, PPO latches onto it and stalls.
HISTORY_GAIN = 0.1


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# reward


def reward_terms(dist_prev, dist_cur, reached, collided, v) -> np.ndarray:
    """Base terms ``(r_goal, r_step, r_reg, r_col)`` stacked on the last axis."""
    dist_prev = np.asarray(dist_prev, float)
    v = np.asarray(v, float)
    r_goal = (dist_prev - np.asarray(dist_cur, float)) + GOAL_BONUS * np.asarray(reached, float)
    r_step = np.ones_like(dist_prev)
    r_reg = -(np.maximum(0.0, -v[..., 0]) / V_MAX[0] + (np.abs(v[..., 2]) / V_MAX[2]) ** 2)
    r_col = np.asarray(collided, float) * np.ones_like(dist_prev)
    return np.stack([r_goal, r_step, r_reg, r_col], axis=-1)


def compute_reward(prev: RobotState, cur: RobotState, outcome: StepOutcome, v, w: RewardWeights, goal) -> float:
    gx, gy = goal
    d0 = math.hypot(prev.x - gx, prev.y - gy)
    d1 = math.hypot(cur.x - gx, cur.y - gy)
    terms = reward_terms(d0, d1, outcome.reached, outcome.collided, v)
    return float(terms @ np.array(w.as_tuple()))


# ---------------------------------------------------------------------------
# policy


class ExpertPolicy(Module):
    """Per-view ray encoders feeding an actor trunk whose last hidden layer is
    carried to the next step as the history token; separate critic MLP."""

    def __init__(self, rays: int = sensing.RAYS, encoder_width: int = 64, trunk=(128, 64, 64),
                 init_std: float = 0.2, seed: int = 0, capability: Optional[str] = None):
        rng = np.random.default_rng(seed)
        trunk = [int(w) for w in trunk]
        self.meta = {"kind": "expert", "capability": capability, "rays": rays, "encoder_width": encoder_width,
                     "trunk": trunk, "init_std": init_std, "seed": seed}
        self.rays = rays
        self.history_width = trunk[-1]
        self.encoders = [Linear(rays, encoder_width, rng) for _ in range(N_VIEWS)]
        n_in = N_VIEWS * encoder_width + ACTION_DIM + 2 + self.history_width
        self.actor = MLP(MlpSpec([n_in, *trunk, ACTION_DIM], seed=seed, out_gain=0.01), rng)
        self.head = GaussianPolicyHead(ACTION_DIM, init_std)
        n_crit = N_VIEWS * rays + ACTION_DIM + 2 + self.history_width
        self.critic = MLP(MlpSpec([n_crit, *trunk, 1], seed=seed), rng)

    @classmethod
    def from_meta(cls, meta: dict) -> "ExpertPolicy":
        return cls(meta["rays"], meta["encoder_width"], meta["trunk"], meta["init_std"], meta["seed"], meta["capability"])

    def actor_parameters(self) -> list[Tensor]:
        return [p for n, p in self.named_parameters() if not n.startswith("critic.")]

    def critic_parameters(self) -> list[Tensor]:
        return self.critic.parameters()

    def zero_history(self, n: int) -> np.ndarray:
        return np.zeros((n, self.history_width))

    def evaluate(self, obs: dict) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Taped pass: action mean, log-std, value and new history token."""
        depth = np.asarray(obs["depth"], float) / sensing.MAX_DEPTH
        b = depth.shape[0]
        if depth.shape[1:] != (N_VIEWS, self.rays):
            raise ValueError(f"expert expects depth (B, 4, {self.rays}), got {depth.shape}")
        goal = sensing.goal_features(np.asarray(obs["goal"], float))
        last = np.asarray(obs["last_action"], float)
        hist = np.asarray(obs["history"], float)
        feats = [enc(Tensor(depth[:, i])).elu() for i, enc in enumerate(self.encoders)]
        x = concat(feats + [Tensor(last), Tensor(goal), Tensor(HISTORY_GAIN * hist)], axis=-1)
        mean, hidden = self.actor.forward_hidden(x)
        crit_in = Tensor(np.concatenate([depth.reshape(b, -1), last, goal, hist], axis=-1))
        value = self.critic(crit_in).reshape(b)
        return mean, self.head.log_std, value, hidden

    def act(self, obs: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        with no_grad():
            mean, _, value, hidden = self.evaluate(obs)
        return mean.data, value.data, hidden.data

    def spec(self) -> dict:
        return dict(self.meta)


def expert_forward(policy: ExpertPolicy, obs: sensing.ExpertObservation, history_token):
    """Single-observation inference: ``(action mean, value, new history token)``."""
    batch = {
        "depth": obs.depth[None],
        "last_action": obs.last_action[None],
        "goal": obs.goal_rel[None],
        "history": np.asarray(history_token, float)[None],
    }
    mean, value, hidden = policy.act(batch)
    return mean[0], float(value[0]), hidden[0]


def save_expert(path, policy: ExpertPolicy) -> None:
    save_checkpoint(path, policy.spec(), policy.state_dict())


def load_expert(path) -> ExpertPolicy:
    spec, state = load_checkpoint(path)
    if spec.get("kind") != "expert":
        raise ValueError(f"{path}: not an expert checkpoint (kind={spec.get('kind')!r})")
    policy = ExpertPolicy.from_meta(spec)
    policy.load_state_dict(state)
    return policy


# ---------------------------------------------------------------------------
# PPO machinery


def gae(rewards, values, dones, gamma: float, lam: float, last_value=None):
    """Generalized advantage estimation over ``(H, ...)`` sequences.

    ``dones[t]`` marks that the episode ended at step ``t``; no value is
    bootstrapped across that boundary.
    """
    rewards = np.asarray(rewards, float)
    values = np.asarray(values, float)
    dones = np.asarray(dones, bool)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("rewards, values and dones must align")
    nxt_value = np.zeros(rewards.shape[1:]) if last_value is None else np.asarray(last_value, float)
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in range(rewards.shape[0] - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * nxt_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        nxt_value = values[t]
    return adv, adv + values


@dataclass
class RolloutBatch:
    obs: dict  # name -> (H, N, ...)
    actions: np.ndarray  # (H, N, A)
    log_probs: np.ndarray  # (H, N)
    values: np.ndarray  # (H, N)
    rewards: np.ndarray  # (H, N)
    dones: np.ndarray  # (H, N)
    last_value: np.ndarray  # (N,)
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def finish(self, gamma: float, lam: float) -> "RolloutBatch":
        self.advantages, self.returns = gae(self.rewards, self.values, self.dones, gamma, lam, self.last_value)
        return self

    def flat(self) -> dict:
        h, n = self.rewards.shape
        out = {k: v.reshape((h * n,) + v.shape[2:]) for k, v in self.obs.items()}
        out.update(
            actions=self.actions.reshape(h * n, -1),
            log_probs=self.log_probs.reshape(-1),
            advantages=self.advantages.reshape(-1),
            returns=self.returns.reshape(-1),
        )
        return out


def ppo_loss(policy, mb: dict, clip: float, vf_coef: float, ent_coef: float = 0.0):
    mean, log_std, value, _ = policy.evaluate(mb)
    logp = gaussian_log_prob(mean, log_std, mb["actions"])
    ratio = (logp - mb["log_probs"]).exp()
    adv = mb["advantages"]
    surr = minimum(ratio * adv, ratio.clip(1.0 - clip, 1.0 + clip) * adv)
    policy_loss = -surr.mean()
    value_loss = (value - mb["returns"]).square().mean()
    loss = policy_loss + value_loss * vf_coef
    if ent_coef:
        loss = loss - log_std.sum() * ent_coef
    return loss, policy_loss, value_loss, ratio


class PPOOptimizers:
    def __init__(self, policy, cfg: PPOConfig):
        self.actor = Adam(policy.actor_parameters(), lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
        self.critic = Adam(policy.critic_parameters(), lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)

    def step(self) -> None:
        self.actor.step()
        self.critic.step()

    def zero_grad(self) -> None:
        self.actor.zero_grad()
        self.critic.zero_grad()


def ppo_update(policy, batch: RolloutBatch, cfg: PPOConfig, opt: PPOOptimizers, rng: np.random.Generator) -> dict:
    """Clipped-surrogate PPO over several epochs of shuffled minibatches."""
    if batch.advantages is None:
        batch.finish(cfg.gamma, cfg.lam)
    data = batch.flat()
    adv = data["advantages"]
    data["advantages"] = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = adv.shape[0]
    size = max(1, n // cfg.minibatches)
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "clip_frac": 0.0, "first_ratio_dev": None}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n - size + 1, size):
            idx = perm[start:start + size]
            mb = {k: v[idx] for k, v in data.items()}
            opt.zero_grad()
            loss, pl, vl, ratio = ppo_loss(policy, mb, cfg.clip, cfg.vf_coef, cfg.ent_coef)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(
                    f"non-finite PPO loss (policy={pl.data}, value={vl.data}, "
                    f"ratio range=[{np.min(ratio.data)}, {np.max(ratio.data)}])"
                )
            if stats["first_ratio_dev"] is None:
                stats["first_ratio_dev"] = float(np.max(np.abs(ratio.data - 1.0)))
            loss.backward()
            opt.step()
            stats["policy_loss"] += float(pl.data)
            stats["value_loss"] += float(vl.data)
            stats["clip_frac"] += float(np.mean(np.abs(ratio.data - 1.0) > cfg.clip))
            count += 1
    for k in ("policy_loss", "value_loss", "clip_frac"):
        stats[k] /= max(count, 1)
    return stats


# ---------------------------------------------------------------------------
# vectorized expert environments


class ExpertEnvs:
    """``n`` auto-resetting episodes of one capability on a refreshed scene pool."""

    def __init__(self, capability, cfg: Config, n_envs: int, seed: int, training: bool = True):
        self.capability = Capability(capability)
        self.cfg = cfg
        self.training = training
        self.rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 101, self.capability.code])
        self.params = cfg.scene[self.capability]
        self.scenes = self._scene_pool(n_envs)
        self.sim = BatchSim([self._spec(i) for i in range(n_envs)], cfg.sim)
        self.fovs = np.zeros(n_envs)
        self.jitters = np.zeros((n_envs, 2))
        for i in range(n_envs):
            self._sample_sensors(i)
        self.last = np.zeros((n_envs, ACTION_DIM))
        self.ep_return = np.zeros(n_envs)

    def __len__(self) -> int:
        return len(self.sim)

    def _scene_pool(self, n: int):
        seeds = self.rng.integers(0, 2**62, size=n)
        return [generate_scene(self.capability, int(s), self.params) for s in seeds]

    def regenerate(self) -> None:
        self.scenes = self._scene_pool(len(self.scenes))

    def _spec(self, i: int) -> EpisodeSpec:
        return sample_episode(self.scenes[i], int(self.rng.integers(0, 2**62)), self.params)

    def _sample_sensors(self, i: int) -> None:
        s = sensing.EpisodeSensors.sample(self.rng, self.cfg.sensing)
        self.fovs[i] = s.fov
        self.jitters[i] = s.jitter

    def depth(self) -> np.ndarray:
        return sensing.raycast_batch(self.sim.poses, self.sim.geometry(), self.fovs, self.jitters, self.cfg.sensing.rays)

    def goal_rel(self) -> np.ndarray:
        return sensing.goal_in_body(self.sim.poses, self.sim.goals)

    def reset(self, i: int) -> None:
        self.sim.reset_slot(i, self._spec(i))
        self._sample_sensors(i)
        self.last[i] = 0.0
        self.ep_return[i] = 0.0


def collect_rollout(policy: ExpertPolicy, envs: ExpertEnvs, history: np.ndarray, weights: RewardWeights,
                    cfg: Config, rng: np.random.Generator, episodes: list) -> tuple[RolloutBatch, np.ndarray]:
    """Roll the stochastic policy ``horizon`` steps; finished episodes are appended to ``episodes``."""
    h, n = cfg.ppo.horizon, len(envs)
    rays = cfg.sensing.rays
    w = np.array(weights.as_tuple())
    obs = {
        "depth": np.zeros((h, n, N_VIEWS, rays)),
        "last_action": np.zeros((h, n, ACTION_DIM)),
        "goal": np.zeros((h, n, 2)),
        "history": np.zeros((h, n, policy.history_width)),
    }
    actions = np.zeros((h, n, ACTION_DIM))
    logps = np.zeros((h, n))
    values = np.zeros((h, n))
    rewards = np.zeros((h, n))
    dones = np.zeros((h, n), bool)
    std = policy.head.std
    for t in range(h):
        step_obs = {
            "depth": envs.depth(),
            "last_action": sensing.perturb(envs.last, cfg.sensing.proprio_sigma, rng),
            "goal": envs.goal_rel(),
            "history": history,
        }
        mean, value, hidden = policy.act(step_obs)
        a = mean + std * rng.standard_normal(mean.shape)
        with no_grad():
            logp = gaussian_log_prob(Tensor(mean), policy.head.log_std, a).data
        d0 = envs.sim.goal_distance()
        v, col, reach, tout = envs.sim.step(a)
        r = reward_terms(d0, envs.sim.goal_distance(), reach, col, v) @ w
        done = col | reach | tout
        for k in obs:
            obs[k][t] = step_obs[k]
        actions[t], logps[t], values[t], rewards[t], dones[t] = a, logp, value, r, done
        envs.last = np.clip(a, -1.0, 1.0)
        history = hidden
        envs.ep_return += r
        for i in np.flatnonzero(done):
            episodes.append((float(envs.ep_return[i]), bool(reach[i]), bool(col[i]), float(envs.sim.elapsed[i])))
            envs.reset(i)
            history[i] = 0.0
    final = {
        "depth": envs.depth(),
        "last_action": envs.last,
        "goal": envs.goal_rel(),
        "history": history,
    }
    _, last_value, _ = policy.act(final)
    batch = RolloutBatch(obs, actions, logps, values, rewards, dones, last_value)
    return batch.finish(cfg.ppo.gamma, cfg.ppo.lam), history


CURVE_FIELDS = ("update", "mean_return", "sr", "cr", "mean_episode_time", "episodes", "policy_loss", "value_loss")


def train_expert(capability, cfg: Config, seed: int, out_dir=None,
                 progress: Optional[Callable[[dict], None]] = None) -> tuple[ExpertPolicy, list[dict]]:
    """PPO-train the privileged expert for one capability.

    Writes ``expert_<capability>.ckpt`` and ``expert_<capability>_curve.csv``
    into ``out_dir`` when given.
    """
    cap = Capability(capability)
    if cap not in cfg.reward:
        raise ValueError(f"no reward weights for {cap.value}")
    ppo = cfg.ppo
    policy = ExpertPolicy(cfg.sensing.rays, cfg.net.encoder_width, cfg.net.trunk, ppo.init_std, seed, cap.value)
    opt = PPOOptimizers(policy, ppo)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 202])
    envs = ExpertEnvs(cap, cfg, ppo.n_envs, seed)
    history = policy.zero_history(len(envs))
    curve: list[dict] = []
    t0 = time.monotonic()
    for update in range(ppo.updates):
        if update and update % ppo.regen_every == 0:
            envs.regenerate()
        episodes: list = []
        batch, history = collect_rollout(policy, envs, history, cfg.reward[cap], cfg, rng, episodes)
        stats = ppo_update(policy, batch, ppo, opt, rng)
        row = _curve_row(update, episodes, stats)
        curve.append(row)
        if progress is not None:
            progress(row)
        if ppo.time_budget_s and time.monotonic() - t0 > ppo.time_budget_s:
            log.info("time budget reached after %d updates", update + 1)
            break
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_expert(out / f"expert_{cap.value}.ckpt", policy)
        write_curve(out / f"expert_{cap.value}_curve.csv", curve)
    return policy, curve


def _curve_row(update: int, episodes: list, stats: dict) -> dict:
    if episodes:
        arr = np.array(episodes, float)
        mean_ret, sr, cr, t = arr[:, 0].mean(), arr[:, 1].mean(), arr[:, 2].mean(), arr[:, 3].mean()
    else:
        mean_ret = sr = cr = t = float("nan")
    return {
        "update": update,
        "mean_return": float(mean_ret),
        "sr": float(sr),
        "cr": float(cr),
        "mean_episode_time": float(t),
        "episodes": len(episodes),
        "policy_loss": stats["policy_loss"],
        "value_loss": stats["value_loss"],
    }


def write_curve(path, curve: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in curve:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# 1-D sanity task


class ToyPolicy(Module):
    def __init__(self, hidden: int = 32, init_std: float = 0.2, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.actor = MLP(MlpSpec([1, hidden, hidden, 1], seed=seed, out_gain=0.01), rng)
        self.head = GaussianPolicyHead(1, init_std)
        self.critic = MLP(MlpSpec([1, hidden, hidden, 1], seed=seed), rng)

    def actor_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("critic.")]

    def critic_parameters(self):
        return self.critic.parameters()

    def evaluate(self, obs: dict):
        x = Tensor(np.asarray(obs["s"], float).reshape(-1, 1) / ToyReach.SPAN)
        mean = self.actor(x)
        value = self.critic(x).reshape(x.shape[0])
        return mean, self.head.log_std, value, None


class ToyReach:
    """Point on a line: reach |s| <= 0.5 from a start in [1, 5] on either side."""

    SPAN = 5.0
    SPEED = 1.5
    RADIUS = 0.5
    LIMIT = 60

    def __init__(self, n: int, rng: np.random.Generator):
        self.rng = rng
        self.s = self._start(n)
        self.t = np.zeros(n, int)

    def _start(self, n: int) -> np.ndarray:
        return self.rng.uniform(1.0, self.SPAN, n) * self.rng.choice([-1.0, 1.0], n)

    def step(self, a: np.ndarray):
        prev = np.abs(self.s)
        self.s = self.s + np.clip(a, -1.0, 1.0) * self.SPEED * 0.1
        self.t += 1
        reached = np.abs(self.s) <= self.RADIUS
        out = np.abs(self.s) > 2 * self.SPAN
        timeout = self.t >= self.LIMIT
        r = (prev - np.abs(self.s)) + GOAL_BONUS * reached - 0.05 - 1.0 * out
        done = reached | out | timeout
        return r, done, reached

    def reset(self, mask: np.ndarray) -> None:
        k = int(mask.sum())
        if k:
            self.s[mask] = self._start(k)
            self.t[mask] = 0


def train_toy(updates: int = 200, seed: int = 0, cfg: Optional[PPOConfig] = None) -> tuple[ToyPolicy, float]:
    """PPO on :class:`ToyReach`; returns the policy and its greedy success rate."""
    cfg = cfg or PPOConfig(n_envs=16, horizon=64, lr=1e-3)
    policy = ToyPolicy(seed=seed, init_std=cfg.init_std)
    opt = PPOOptimizers(policy, cfg)
    rng = np.random.default_rng(seed)
    env = ToyReach(cfg.n_envs, rng)
    for _ in range(updates):
        h, n = cfg.horizon, cfg.n_envs
        s_buf, a_buf = np.zeros((h, n)), np.zeros((h, n, 1))
        lp, val, rew, dn = np.zeros((h, n)), np.zeros((h, n)), np.zeros((h, n)), np.zeros((h, n), bool)
        for t in range(h):
            with no_grad():
                mean, log_std, value, _ = policy.evaluate({"s": env.s})
                a = mean.data + np.exp(log_std.data) * rng.standard_normal(mean.shape)
                lp[t] = gaussian_log_prob(mean, log_std, a).data
            s_buf[t], a_buf[t], val[t] = env.s, a, value.data
            rew[t], dn[t], _ = env.step(a[:, 0])
            env.reset(dn[t])
        with no_grad():
            last = policy.evaluate({"s": env.s})[2].data
        batch = RolloutBatch({"s": s_buf}, a_buf, lp, val, rew, dn, last).finish(cfg.gamma, cfg.lam)
        ppo_update(policy, batch, cfg, opt, rng)
    return policy, toy_success_rate(policy, seed=seed + 1)


def toy_success_rate(policy: ToyPolicy, episodes: int = 200, seed: int = 1) -> float:
    env = ToyReach(episodes, np.random.default_rng(seed))
    live = np.ones(episodes, bool)
    success = np.zeros(episodes, bool)
    for _ in range(ToyReach.LIMIT):
        with no_grad():
            mean = policy.evaluate({"s": env.s})[0].data[:, 0]
        frozen = env.s.copy()
        _, done, reached = env.step(mean)
        env.s = np.where(live, env.s, frozen)
        success |= live & reached
        live &= ~done
        if not live.any():
            break
    return float(success.mean())
