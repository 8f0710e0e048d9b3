from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from magrec.autograd.tensor import Tensor
from magrec.errors import ContractError, DimensionError


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: list[np.ndarray] | None = field(default=None, repr=False)
    second_moment: list[np.ndarray] | None = field(default=None, repr=False)
    decay_masks: list[np.ndarray | float] | None = field(default=None, repr=False)

    @classmethod
    def init(cls, params: Sequence[Tensor], learning_rate: float = 1e-3, **kwargs) -> "AdamState":
        state = cls(learning_rate=learning_rate, **kwargs)
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
        if state.decay_masks is None:
            state.decay_masks = [1.0] * len(params)
        return state


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update in place; parameter grads are cleared afterwards.

    A ``None`` gradient is treated as zero (the moments still decay).
    ``weight_decay`` adds an L2 term ``weight_decay * mask * p`` to each
    gradient before the moment updates.
    """
    if state.first_moment is None or state.second_moment is None:
        raise ContractError("AdamState is not initialized; use AdamState.init(params)")
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise DimensionError("params, grads and optimizer state differ in length")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    masks = state.decay_masks or [1.0] * len(params)
    for p, g, m, v, mask in zip(params, grads, state.first_moment, state.second_moment, masks):
        if g is None:
            g = 0.0
        elif g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * mask * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        p.grad = None


class Adam:
    """Convenience wrapper holding a parameter list and its :class:`AdamState`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decay_masks: Sequence[np.ndarray | float] | None = None):
        self.params = list(params)
        if decay_masks is not None and len(decay_masks) != len(self.params):
            raise DimensionError("decay_masks must have one entry per parameter")
        self.state = AdamState.init(self.params, learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps,
                                    weight_decay=weight_decay,
                                    decay_masks=None if decay_masks is None else list(decay_masks))

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
