"""
AdamW with decoupled weight decay.

    m_t = β1 m_{t-1} + (1 - β1) g_t
    v_t = β2 v_{t-1} + (1 - β2) g_t²
    θ_t = θ_{t-1} - lr·λ·θ_{t-1} - lr · m̂_t / (√v̂_t + eps)

with bias-corrected moments m̂_t = m_t / (1 - β1^t), v̂_t = v_t / (1 - β2^t).
"""
import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ..utils.exceptions import ConfigurationError, NumericalError
from .layers import MlpParams, check_finite_gradients

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    """Moment accumulators and hyperparameters for one parameter set."""
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0.0:
            raise ConfigurationError(f"Invalid learning rate: {self.lr}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigurationError(f"Invalid betas: ({self.beta1}, {self.beta2})")
        if self.eps <= 0.0:
            raise ConfigurationError(f"Invalid epsilon: {self.eps}")
        if self.weight_decay < 0.0:
            raise ConfigurationError(f"Invalid weight decay: {self.weight_decay}")

    @classmethod
    def create(cls, params: MlpParams, lr: float = 1e-3, weight_decay: float = 1e-4,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamWState":
        """Zero moments shaped like ``params``."""
        state = cls(lr=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps)
        for name, t in params.named_tensors():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def adamw_step(params: MlpParams, grads: Dict[str, np.ndarray], state: AdamWState) -> MlpParams:
    """
    Apply one AdamW update.

    Args:
        params: Current parameters (left untouched)
        grads: Gradient per parameter name
        state: Optimizer state; moments and step count are updated in place

    Returns:
        MlpParams: Updated parameters

    Raises:
        NumericalError: If any gradient is NaN or infinite
        ConfigurationError: If a gradient shape does not match its parameter
    """
    check_finite_gradients(grads)
    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step

    updated = {}
    for name, t in params.named_tensors():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        if g.shape != t.shape:
            raise ConfigurationError(f"gradient for {name} has shape {g.shape}, expected {t.shape}")
        m = state.m.get(name, np.zeros_like(t.data))
        v = state.v.get(name, np.zeros_like(t.data))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v

        theta = t.data * (1.0 - state.lr * state.weight_decay)
        theta = theta - state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        if not np.all(np.isfinite(theta)):
            raise NumericalError(f"non-finite parameter after update: {name}", quantity=name)
        updated[name] = theta

    return params.replace(updated)


@dataclass(frozen=True)
class OptimizerConfig:
    """AdamW hyperparameters as read from a run config."""
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def create_state(self, params: MlpParams) -> AdamWState:
        return AdamWState.create(params, lr=self.lr, weight_decay=self.weight_decay,
                                 beta1=self.beta1, beta2=self.beta2, eps=self.eps)
