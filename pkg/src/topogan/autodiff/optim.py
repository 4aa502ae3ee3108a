"""Adam with bias-corrected moment estimates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List

import numpy as np

from .tensor import Parameter


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class Adam:
    """Adam optimizer over a fixed list of parameters.

    ``beta1``, ``beta2`` and ``eps`` default to the usual 0.9 / 0.999 / 1e-8.
    """

    params: List[Parameter]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: List[AdamState] = field(init=False)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        self.params = list(self.params)
        self.states = [AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            adam_step(p, s, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(param: Parameter, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Apply one in-place Adam update to ``param`` using its current ``grad``."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    g = param.grad
    state.t += 1
    state.m *= beta1
    state.m += (1 - beta1) * g
    state.v *= beta2
    state.v += (1 - beta2) * g * g
    m_hat = state.m / (1 - beta1**state.t)
    v_hat = state.v / (1 - beta2**state.t)
    param.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


def parameters_of(*modules) -> Iterable[Parameter]:
    for module in modules:
        yield from module.parameters()
