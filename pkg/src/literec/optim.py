"""AdamW with decoupled weight decay and linear warmup."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Parameter


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def warmup_lr(base_lr: float, global_step: int, total_steps: int, warmup_fraction: float) -> float:
    """Linear ramp from 0 to ``base_lr`` over the warmup steps, then constant."""
    warmup_steps = int(math.ceil(warmup_fraction * total_steps))
    if warmup_steps <= 0 or global_step >= warmup_steps:
        return base_lr
    return base_lr * global_step / warmup_steps


def adamw_step(
    params: dict[str, Parameter],
    opt: OptimizerState,
    global_step: int,
    total_steps: int,
) -> float:
    """Apply one AdamW update in place and return the learning rate used."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    lr = warmup_lr(opt.lr, global_step, total_steps, opt.warmup_fraction)
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for name, p in params.items():
        g = p.grad
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if opt.weight_decay:
            p.data -= (lr * opt.weight_decay) * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return lr


class AdamW:
    """Thin stateful wrapper around :func:`adamw_step`."""

    def __init__(self, params: dict[str, Parameter], **hyper):
        self.params = dict(params)
        self.state = OptimizerState(**hyper)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, global_step: int, total_steps: int) -> float:
        return adamw_step(self.params, self.state, global_step, total_steps)
