"""Adam optimizer and step learning-rate schedule."""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


class Adam:
    """Adam with bias correction (Kingma & Ba)."""

    def __init__(
        self,
        params: Union[Mapping[str, Tensor], Iterable[Tensor]],
        lr: float = 1e-3,
        betas: Sequence[float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if isinstance(params, Mapping):
            self.params = dict(params)
        else:
            self.params = {str(i): p for i, p in enumerate(params)}
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}


def adam_step(params, state: Adam, lr=None) -> None:
    """Functional entry point: optionally override the lr, then take one Adam step."""
    if lr is not None:
        state.lr = float(lr)
    state.step()


class StepSchedule:
    """Multiply the base lr by ``gamma`` at each milestone epoch."""

    def __init__(self, base_lr: float, milestones: Sequence[int] = (25, 125), gamma: float = 0.1):
        self.base_lr = float(base_lr)
        self.milestones = sorted(int(m) for m in milestones)
        self.gamma = float(gamma)

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.base_lr * self.gamma ** drops
