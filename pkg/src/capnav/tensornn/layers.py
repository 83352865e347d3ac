"""Dense layers, MLPs and the Gaussian policy head."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from capnav.tensornn.autograd import ShapeError, Tensor, as_tensor

LOG_2PI = math.log(2.0 * math.pi)


class Module:
    """Minimal parameter container; subclasses register children in order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise KeyError(f"state dict keys mismatch: {missing}")
        for k, p in params.items():
            arr = np.asarray(state[k], float)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 1.0):
        bound = gain / math.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"linear layer expects width {self.n_in}, got {x.shape[-1]}")
        return x @ self.weight + self.bias


@dataclass
class MlpSpec:
    widths: list[int]  # input, hidden..., output
    activation: str = "elu"
    seed: int = 0
    out_gain: float = 1.0

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError("MLP needs >= 1 layer with positive widths")
        if self.activation not in ("elu", "identity"):
            raise ValueError(f"unknown activation {self.activation}")


class MLP(Module):
    """Affine layers with ELU between them and an identity output layer."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(spec.seed)
        n = len(spec.widths) - 1
        self.layers = [
            Linear(a, b, rng, gain=spec.out_gain if i == n - 1 else 1.0)
            for i, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:]))
        ]

    def forward_hidden(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Output and the activations of the last hidden layer (input if none)."""
        h = as_tensor(x)
        for layer in self.layers[:-1]:
            h = layer(h)
            if self.spec.activation == "elu":
                h = h.elu()
        return self.layers[-1](h), h

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward_hidden(x)[0]


def forward(net: MLP, x) -> Tensor:
    return net(as_tensor(x))


def elu(x) -> Tensor:
    return as_tensor(x).elu()


class GaussianPolicyHead(Module):
    def __init__(self, n_actions: int, init_std: float = 0.2):
        self.log_std = Tensor(np.full(n_actions, math.log(init_std)), requires_grad=True)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)


def gaussian_log_prob(mean: Tensor, log_std: Tensor, action) -> Tensor:
    """Sum over the last axis of independent normal log-densities."""
    mean = as_tensor(mean)
    log_std = as_tensor(log_std)
    z = (as_tensor(action) - mean) * (-log_std).exp()
    per = z.square() * -0.5 - log_std - 0.5 * LOG_2PI
    return per.sum(axis=-1)


def mse(pred: Tensor, target) -> Tensor:
    return (as_tensor(pred) - as_tensor(target)).square().mean()
