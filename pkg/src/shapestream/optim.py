"""Adam optimizer over named parameter dicts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Per-parameter first/second moment stores plus hyperparameters.

    ``step_count`` increases by exactly 1 per applied update; an update
    rejected for non-finite gradients leaves it (and the moments) untouched.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, params: dict[str, Tensor]):
        for name, p in params.items():
            if name not in self.first_moment:
                self.first_moment[name] = np.zeros_like(p.data)
                self.second_moment[name] = np.zeros_like(p.data)


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                state: AdamState) -> bool:
    """One bias-corrected Adam step, in place on ``params``.

    Returns True if the step was applied. A non-finite gradient anywhere
    rejects the whole step: parameters, moments and step_count are left
    unchanged and a diagnostic is logged.
    """
    state.ensure(params)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"'{name}' shape {p.data.shape}"
            )
        if not np.all(np.isfinite(g)):
            logger.warning("non-finite gradient for '%s'; update rejected", name)
            return False

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return True


def gradients_of(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Collect accumulated gradients (zeros for parameters never reached)."""
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def zero_gradients(params: dict[str, Tensor]):
    for p in params.values():
        p.zero_grad()
