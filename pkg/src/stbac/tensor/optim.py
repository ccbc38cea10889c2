"""AdamW with decoupled weight decay and bias-corrected moments."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import Tensor


@dataclass
class AdamWState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamWState) -> list[np.ndarray]:
    """One AdamW update on plain arrays; returns the new parameter arrays.

    ``None`` gradients are treated as zeros so that parameters outside the
    current loss still decay and keep their moment history aligned.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter, gradient and moment lists differ in length")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"shape mismatch at parameter {i}: {p.shape} vs grad {g.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p = p * (1.0 - state.lr * state.weight_decay)
        p = p - state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        out.append(p)
    return out


class AdamW:
    """Stateful wrapper that updates :class:`Tensor` parameters in place."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.params = list(params)
        self.state = AdamWState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def step(self) -> None:
        new = adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state)
        for p, d in zip(self.params, new):
            p.data = d

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
