"""The non-privileged student: windowed degraded rays to a velocity command."""
from __future__ import annotations

import logging

import numpy as np

from capnav import sensing
from capnav.sensing import StudentObservation
from capnav.tensornn import (
    MLP,
    Adam,
    Linear,
    MlpSpec,
    Module,
    Tensor,
    concat,
    load_checkpoint,
    no_grad,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class StudentPolicy(Module):
    """Fine encoder on the newest frame, a shared coarse encoder averaged over
    the history slots, and a two-layer action head."""

    def __init__(self, rays: int = sensing.RAYS, window: int = sensing.WINDOW, fine_width: int = 128,
                 coarse_width: int = 32, hidden=(128,), seed: int = 0):
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 17])
        self.meta = {"kind": "student", "rays": rays, "window": window, "fine_width": fine_width,
                     "coarse_width": coarse_width, "hidden": [int(h) for h in hidden], "seed": seed}
        self.rays = rays
        self.window = window
        self.fine_in = 4 * rays
        self.coarse_in = 4 * (rays // sensing.POOL)
        self.fine = Linear(self.fine_in, fine_width, rng)
        self.coarse = Linear(self.coarse_in, coarse_width, rng)
        self.head = MLP(MlpSpec([fine_width + coarse_width + 2, *self.meta["hidden"], 3], seed=seed), rng)

    @classmethod
    def from_meta(cls, meta: dict) -> "StudentPolicy":
        return cls(meta["rays"], meta["window"], meta["fine_width"], meta["coarse_width"], meta["hidden"], meta["seed"])

    def spec(self) -> dict:
        return dict(self.meta)

    def predict(self, fine, coarse, goal) -> Tensor:
        """Batched forward on ``fine (B, 4R)``, ``coarse (B, window-1, R)``, ``goal (B, 2)``."""
        fine = np.asarray(fine, float)
        coarse = np.asarray(coarse, float)
        goal = np.asarray(goal, float)
        b = fine.shape[0]
        if fine.shape != (b, self.fine_in):
            raise ValueError(f"fine rays must be (B, {self.fine_in}), got {fine.shape}")
        if coarse.shape != (b, self.window - 1, self.coarse_in):
            raise ValueError(f"coarse history must be (B, {self.window - 1}, {self.coarse_in}), got {coarse.shape}")
        if goal.shape != (b, 2):
            raise ValueError(f"goal must be (B, 2), got {goal.shape}")
        f = self.fine(Tensor(fine / sensing.MAX_DEPTH)).elu()
        c = self.coarse(Tensor(coarse / sensing.MAX_DEPTH)).elu().mean(axis=1)
        x = concat([f, c, Tensor(sensing.goal_features(goal))], axis=-1)
        return self.head(x)

    def act(self, fine, coarse, goal) -> np.ndarray:
        with no_grad():
            return self.predict(fine, coarse, goal).data


def student_forward(policy: StudentPolicy, obs: StudentObservation) -> np.ndarray:
    """Deterministic pre-clip action for one observation."""
    if not isinstance(obs, StudentObservation):
        raise TypeError(f"student policies accept StudentObservation only, got {type(obs).__name__}")
    fine, coarse = obs.arrays(policy.window)
    return policy.act(fine[None], coarse[None], obs.goal_rel[None])[0]


def bc_loss(policy: StudentPolicy, batch: dict) -> Tensor:
    """Mean squared error over batch and action channels."""
    labels = np.asarray(batch["expert_action"], float)
    if labels.shape[0] == 0:
        raise ValueError("empty batch")
    pred = policy.predict(batch["fine"], batch["coarse"], batch["goal"])
    return (pred - labels).square().mean()


def finetune(policy: StudentPolicy, data: dict, epochs: int, lr: float, batch_size: int,
             rng: np.random.Generator, max_grad_norm: float = 1.0) -> list[float]:
    """Shuffled minibatch Adam on the behavior-cloning loss; returns per-epoch mean loss."""
    n = len(data["expert_action"])
    if n == 0:
        raise ValueError("cannot fine-tune on an empty dataset")
    opt = Adam(policy.parameters(), lr=lr, max_grad_norm=max_grad_norm)
    curve = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            opt.zero_grad()
            loss = bc_loss(policy, {k: v[idx] for k, v in data.items()})
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite behavior-cloning loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        curve.append(total / n)
        log.debug("epoch %d loss %.6f", epoch, curve[-1])
    return curve


def evaluate_loss(policy: StudentPolicy, data: dict, batch_size: int = 4096) -> float:
    n = len(data["expert_action"])
    total = 0.0
    with no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            total += float(bc_loss(policy, {k: v[sl] for k, v in data.items()}).data) * len(data["expert_action"][sl])
    return total / n


def save_student(path, policy: StudentPolicy) -> None:
    save_checkpoint(path, policy.spec(), policy.state_dict())


def load_student(path) -> StudentPolicy:
    spec, state = load_checkpoint(path)
    if spec.get("kind") != "student":
        raise ValueError(f"{path}: not a student checkpoint (kind={spec.get('kind')!r})")
    policy = StudentPolicy.from_meta(spec)
    policy.load_state_dict(state)
    return policy
