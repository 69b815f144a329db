"""Optimizer settings and in-place first-order optimizers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ParameterError


@dataclass
class OptimizerSettings:
    kind: str = "adam"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # "constant" or "cosine" (decays to zero over the run)
    schedule: str = "constant"
    # reconstruction fitting
    steps: int = 2000
    restarts: list[str] = field(default_factory=lambda: ["svd_ones", "random", "random"])
    # mini-batch training
    batch_size: int = 64
    epochs: int = 1
    eval_every: int = 50

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ParameterError(f"optimizer kind must be 'adam' or 'sgd', got {self.kind!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ParameterError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.lr < 0:
            raise ParameterError(f"learning rate must be non-negative, got {self.lr}")
        if self.steps < 0 or self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ParameterError("steps/epochs must be >= 0, batch_size and eval_every >= 1")
        self.restarts = list(self.restarts)

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, step: int, total: int) -> float:
        if self.schedule == "cosine" and total > 0:
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
        return self.lr


class Sgd:
    def __init__(self, settings: OptimizerSettings):
        self.settings = settings

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.settings.lr if lr is None else lr
        for name, p in params.items():
            p -= lr * grads[name]


class Adam:
    """Adam with bias correction; updates the arrays in ``params`` in place."""

    def __init__(self, settings: OptimizerSettings):
        self.settings = settings
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        s = self.settings
        lr = s.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - s.beta1**self.t
        c2 = 1.0 - s.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + s.eps)


def make_optimizer(settings: OptimizerSettings):
    return Adam(settings) if settings.kind == "adam" else Sgd(settings)
