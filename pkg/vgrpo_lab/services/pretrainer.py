"""
Base-model pretraining on the synthetic mixture.
"""
import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from ..core.layers import gradients_by_name
from ..core.optim import OptimizerConfig, adamw_step
from ..core.tensor import backward, private_tape
from ..models.data import GaussianMixture, LabelMode, pretrain_labels, sample_mixture
from ..models.denoiser import Denoiser, pretrain_loss
from ..models.schedule import WeightFunction
from ..utils.exceptions import ConfigurationError, NumericalError
from ..utils.seeding import Stream, derive_rng, derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    """
    Attributes:
        steps: Optimizer steps
        batch_size: Points per step
        label_mode: How pretraining points are labelled
        weight_fn: Timestep weighting of the regression loss
        optimizer: AdamW settings
        log_every: Progress logging period in steps
    """
    steps: int = 8000
    batch_size: int = 256
    label_mode: LabelMode = LabelMode.RANDOM
    weight_fn: WeightFunction = WeightFunction.UNIFORM
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=2e-3, weight_decay=0.0))
    log_every: int = 500

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError(f"invalid pretraining budget: {self.steps} steps of {self.batch_size}")


@dataclass
class PretrainResult:
    denoiser: Denoiser
    losses: List[float]


def pretrain(denoiser: Denoiser, mixture: GaussianMixture, config: PretrainConfig, seed: int) -> PretrainResult:
    """
    Fit the denoiser to the mixture by minimizing the regression loss with AdamW.

    Args:
        denoiser: Initial model
        mixture: Target distribution
        config: Pretraining settings
        seed: Run seed; step k draws from stream (PRETRAIN, k)

    Returns:
        PretrainResult: Trained denoiser and per-step losses

    Raises:
        NumericalError: If the loss becomes non-finite
    """
    if mixture.dim != denoiser.dim:
        raise ConfigurationError(f"mixture dimension {mixture.dim} != model dimension {denoiser.dim}")
    state = config.optimizer.create_state(denoiser.params)
    losses: List[float] = []
    logger.info(f"Pretraining for {config.steps} steps, batch {config.batch_size}, "
                f"{denoiser.params.parameter_count()} parameters")

    for step in range(config.steps):
        rng = derive_rng(seed, Stream.PRETRAIN, step)
        points, components = sample_mixture(mixture, config.batch_size, rng)
        labels = pretrain_labels(config.label_mode, components, denoiser.n_labels, rng)
        with private_tape():
            loss = pretrain_loss(denoiser, points, derive_seed(seed, Stream.PRETRAIN, step, 1), labels,
                                 weight_fn=config.weight_fn)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite pretraining loss at step {step}", quantity="pretrain_loss")
            grads = gradients_by_name(denoiser.params, backward(loss))
        denoiser = denoiser.with_params(adamw_step(denoiser.params, grads, state))
        losses.append(value)
        if config.log_every and (step + 1) % config.log_every == 0:
            window = losses[-config.log_every:]
            logger.info(f"Pretrain step {step + 1}/{config.steps}: loss {np.mean(window):.4f}")

    return PretrainResult(denoiser, losses)
