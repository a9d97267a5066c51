"""Adam optimizer over a list of parameter tensors"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dkd_workbench.core.tensor import Tensor
from dkd_workbench.errors import GradientError


@dataclass
class AdamState:
    """First and second moment estimates, one pair per parameter"""

    step: int = 0
    first_moments: list[np.ndarray] = field(default_factory=list)
    second_moments: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[Tensor],
    lr: float,
    state: AdamState,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Apply one Adam update in place and zero the gradients

    Parameters without a gradient (not reached by the last backward pass) are
    treated as having a zero gradient.

    Args:
        params (Sequence[Tensor]): The parameters, in a fixed order
        lr (float): Learning rate
        state (AdamState): Moments from earlier steps, updated in place
        beta1 (float): Decay of the first moment
        beta2 (float): Decay of the second moment
        eps (float): Denominator guard

    Returns:
        AdamState: The updated state

    Raises:
        GradientError: If any gradient holds NaN
    """
    if not state.first_moments:
        state.first_moments = [np.zeros_like(p.data) for p in params]
        state.second_moments = [np.zeros_like(p.data) for p in params]
    if len(state.first_moments) != len(params):
        raise ValueError(
            f"optimizer state tracks {len(state.first_moments)} parameters, got {len(params)}"
        )
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for index, g in enumerate(grads):
        if np.isnan(g).any():
            raise GradientError(f"NaN gradient in parameter {index} {params[index].shape}")

    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.first_moments, state.second_moments):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
        p.grad = None
    return state


class Adam:
    """Adam bound to a parameter list"""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step(self.params, self.lr, self.state, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
