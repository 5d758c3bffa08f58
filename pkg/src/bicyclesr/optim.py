"""Adam with L2 weight decay and the step-halving learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .tensor import Tensor


@dataclass
class LrSchedule:
    """Piecewise-constant schedule: lr halves every `halve_every` steps."""

    base_lr: float = 1e-4
    halve_every: int = 200_000
    total_steps: int = 1_000_000

    def lr_at(self, t: int) -> float:
        if t < 0:
            raise ValueError(f"step must be non-negative, got {t}")
        return self.base_lr * 2.0 ** (-(t // self.halve_every))


class Adam:
    """Bias-corrected Adam. Weight decay is the classic L2-on-gradient form
    (a `decoupled=True` flag switches to decoupled decay) and is never applied
    to parameters whose name ends in 'bias'."""

    def __init__(
        self,
        params: "Dict[str, Tensor]",
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decoupled: bool = False,
    ):
        self.params = dict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def _decays(self, name: str) -> bool:
        return self.weight_decay > 0 and not name.endswith("bias")

    def step(self, lr: float):
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"Adam.step: parameter {name!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if self._decays(name) and not self.decoupled:
                g = g + self.weight_decay * p.data
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self._decays(name) and self.decoupled:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict:
        """Serializable optimizer state (moment buffers live as tensors)."""
        return {
            "t": self.t,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "decoupled": self.decoupled,
        }

    def load_state(self, state: dict, m: "Dict[str, np.ndarray]", v: "Dict[str, np.ndarray]"):
        self.t = int(state["t"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        self.weight_decay = float(state["weight_decay"])
        self.decoupled = bool(state["decoupled"])
        for k in self.params:
            if k not in m or k not in v:
                raise ValueError(f"optimizer state missing moments for {k!r}")
            if m[k].shape != self.params[k].data.shape:
                raise ValueError(
                    f"optimizer moment shape mismatch for {k!r}: "
                    f"{m[k].shape} vs {self.params[k].data.shape}"
                )
            self.m[k] = m[k].astype(np.float32)
            self.v[k] = v[k].astype(np.float32)
