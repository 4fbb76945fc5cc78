"""Adam with per-group learning rates and post-step projection."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np

from ..errors import UsageError
from .nn import Parameter


@dataclass
class AdamState:
    """Moment estimates keyed by parameter identity plus the shared step count."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: Dict[int, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[Parameter], state: AdamState, lr: Optional[float] = None) -> AdamState:
    """Apply one bias-corrected Adam update in place.

    Gradients are read but not cleared. Parameters carrying a ``lower``
    bound are clamped after the update.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise UsageError("adam_step called on a parameter without a gradient")
    state.step_count += 1
    _update(params, state, state.lr if lr is None else lr)
    return state


def _update(params: List[Parameter], state: AdamState, lr: float) -> None:
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = p.grad
        key = id(p)
        m = state.first_moment.get(key)
        if m is None:
            m = state.first_moment[key] = np.zeros_like(p.data)
            state.second_moment[key] = np.zeros_like(p.data)
        v = state.second_moment[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)
        p.project()


class Adam:
    """Adam over named parameter groups, each with its own learning rate.

    >>> opt = Adam({"w1": enc_params, "w3": fusion_params}, lr=1e-3)
    >>> opt.set_lr("w1", 1e-5)
    """

    def __init__(self, groups, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if not isinstance(groups, dict):
            groups = {"default": list(groups)}
        self.groups = {name: list(ps) for name, ps in groups.items()}
        if not any(self.groups.values()):
            raise UsageError("optimizer has no parameters")
        self.lrs = {name: float(lr) for name in self.groups}
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def set_lr(self, group: str, lr: float) -> None:
        if group not in self.groups:
            raise UsageError(f"unknown parameter group {group!r}")
        self.lrs[group] = float(lr)

    def parameters(self) -> list:
        return [p for ps in self.groups.values() for p in ps]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def step(self) -> None:
        for p in self.parameters():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        self.state.step_count += 1
        for name, ps in self.groups.items():
            _update(ps, self.state, self.lrs[name])
