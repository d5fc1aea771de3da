"""Adam with step-decayed learning rate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Parameter


class MissingGradientError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class StepDecay:
    """lr = base * factor ** (step // interval); 0 disables decay."""

    def __init__(self, base_lr: float, interval: int = 0, factor: float = 0.1):
        self.base_lr = base_lr
        self.interval = interval
        self.factor = factor

    def __call__(self, step: int) -> float:
        if self.interval <= 0:
            return self.base_lr
        return self.base_lr * self.factor ** (step // self.interval)


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 schedule: StepDecay | None = None):
        self.params = [p for p in params if p.trainable]
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                               m=[np.zeros_like(p.data) for p in self.params],
                               v=[np.zeros_like(p.data) for p in self.params])
        self.schedule = schedule or StepDecay(lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        s = self.state
        for p in self.params:
            if p.grad is None:
                raise MissingGradientError(f"parameter '{p.name}' has no gradient")
        s.lr = self.schedule(s.step)
        s.step += 1
        bc1 = 1.0 - s.beta1 ** s.step
        bc2 = 1.0 - s.beta2 ** s.step
        for p, m, v in zip(self.params, s.m, s.v):
            g = p.grad
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            p.data -= (s.lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)).astype(p.dtype)


def adam_step(params: list[Parameter], state: AdamState) -> None:
    """Functional form: one bias-corrected Adam update using ``state.lr``."""
    opt = Adam.__new__(Adam)
    opt.params = [p for p in params if p.trainable]
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in opt.params]
        state.v = [np.zeros_like(p.data) for p in opt.params]
    opt.state = state
    opt.schedule = StepDecay(state.lr)
    opt.step()
