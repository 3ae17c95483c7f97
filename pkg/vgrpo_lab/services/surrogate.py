"""
Likelihood surrogates built from the denoising loss.

For an output o and a set of timestep-noise pairs {(t_j, eps_j)}, the surrogate
L̂(θ | o, c) is the mean per-pair loss; -L̂ stands in for log π_θ(o | c). The
ratio between two policies is exp(L̂_old - L̂_new).
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np

from ..core import tensor as T
from ..core.layers import gradients_by_name, global_norm
from ..core.tensor import Tensor, backward, no_grad, private_tape
from ..models.denoiser import Denoiser
from ..models.schedule import (PredictionKind, WeightFunction, convert_prediction, interpolate,
                               loss_weight, regression_target, training_grid)
from ..utils.exceptions import ConfigurationError, NumericalError, UsageError

logger = logging.getLogger(__name__)

RATIO_FLOOR = 1e-6
RATIO_CEILING = 1e6


class Weighting(Enum):
    GENERIC_W = "generic"
    ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class SurrogateConfig:
    """
    Attributes:
        n_mc: Timestep-noise pairs per output
        weighting: GENERIC_W (weighted regression loss) or ADAPTIVE (self-normalized)
        weight_fn: Timestep weighting used by GENERIC_W
        adaptive_space: Prediction space of the ADAPTIVE residual
        kl_space: Prediction space of the KL penalty
        shared_pairs: One pair set per prompt instead of one per output
        stratified: One timestep per equal block of the grid instead of i.i.d. grid points
        grid_size: Points in the discretized timestep grid
    """
    n_mc: int = 4
    weighting: Weighting = Weighting.ADAPTIVE
    weight_fn: WeightFunction = WeightFunction.UNIFORM
    adaptive_space: PredictionKind = PredictionKind.X_PRED
    kl_space: PredictionKind = PredictionKind.X_PRED
    shared_pairs: bool = True
    stratified: bool = True
    grid_size: int = 40

    def __post_init__(self):
        if self.n_mc < 1:
            raise ConfigurationError(f"n_mc must be at least 1, got {self.n_mc}")
        if self.kl_space not in (PredictionKind.X_PRED, PredictionKind.V_PRED):
            raise ConfigurationError(f"KL space must be x or v, got {self.kl_space.value}")

    def grid(self) -> np.ndarray:
        return training_grid(self.grid_size)


@dataclass(frozen=True)
class TimestepNoiseSet:
    """Timestep-noise pairs for one prompt (or one output when pairs are not shared)."""
    times: np.ndarray
    grid_indices: np.ndarray
    noises: np.ndarray
    prompt_id: int
    iteration: int

    def __post_init__(self):
        for name in ("times", "grid_indices", "noises"):
            value = np.array(getattr(self, name))
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if self.times.shape[0] == 0 or self.noises.shape[0] != self.times.shape[0]:
            raise UsageError(f"{self.times.shape[0]} times for {self.noises.shape[0]} noises")

    @property
    def n_pairs(self) -> int:
        return int(self.times.shape[0])


@dataclass(frozen=True)
class StoredOldSurrogate:
    """
    Old-policy quantities kept for the gradient steps of one iteration.

    Attributes:
        pair_losses: (G, n_mc) per-pair losses under θ_old
        surrogates: (G,) mean over pairs
        kl_predictions: (G, n_mc, d) θ_old predictions in the KL space
        degenerate: Count of pairs with zero adaptive denominator
    """
    pair_losses: np.ndarray
    surrogates: np.ndarray
    kl_predictions: np.ndarray
    degenerate: int = 0

    def to_dict(self) -> dict:
        return {
            "pair_losses": self.pair_losses.tolist(),
            "surrogates": self.surrogates.tolist(),
            "degenerate": self.degenerate,
        }


@dataclass
class PairEvaluation:
    """Per-pair losses (B, n) and KL-space predictions (B·n, d), on the tape."""
    losses: Tensor
    kl_predictions: Tensor
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def draw_stratified_pairs(grid: np.ndarray, n_mc: int, dim: int, seed: int,
                          prompt_id: int = 0, iteration: int = 0) -> TimestepNoiseSet:
    """
    One grid point from each of n_mc contiguous equal blocks, one fresh eps per pair.

    Raises:
        ConfigurationError: If the grid length is not divisible by n_mc
    """
    grid = np.asarray(grid, dtype=np.float64)
    if n_mc < 1 or grid.shape[0] % n_mc != 0:
        raise ConfigurationError(
            f"grid of {grid.shape[0]} points cannot be split into {n_mc} equal strata")
    rng = np.random.default_rng(seed)
    block = grid.shape[0] // n_mc
    indices = np.arange(n_mc) * block + rng.integers(0, block, size=n_mc)
    noises = rng.standard_normal((n_mc, dim))
    return TimestepNoiseSet(grid[indices], indices, noises, prompt_id, iteration)


def draw_uniform_pairs(grid: np.ndarray, n_mc: int, dim: int, seed: int,
                       prompt_id: int = 0, iteration: int = 0) -> TimestepNoiseSet:
    """n_mc i.i.d. uniform grid points."""
    grid = np.asarray(grid, dtype=np.float64)
    rng = np.random.default_rng(seed)
    indices = rng.integers(0, grid.shape[0], size=n_mc)
    noises = rng.standard_normal((n_mc, dim))
    return TimestepNoiseSet(grid[indices], indices, noises, prompt_id, iteration)


def draw_pairs(config: SurrogateConfig, dim: int, seed: int, prompt_id: int = 0,
               iteration: int = 0) -> TimestepNoiseSet:
    draw = draw_stratified_pairs if config.stratified else draw_uniform_pairs
    return draw(config.grid(), config.n_mc, dim, seed, prompt_id, iteration)


def _residual(denoiser: Denoiser, out: Tensor, z: np.ndarray, column: np.ndarray,
              o: np.ndarray, eps: np.ndarray, space: PredictionKind) -> Tensor:
    prediction = convert_prediction(out, z, column, denoiser.head, space, denoiser.schedule)
    return prediction - regression_target(o, eps, column, space, denoiser.schedule)


def adaptive_loss(residual: Tensor) -> Tuple[Tensor, np.ndarray]:
    """
    Self-normalized loss ||r||² / sg(mean |r|) per row of a (B, d) residual.

    Rows whose residual is exactly zero get loss 0 and a True degenerate flag.
    """
    residual = T.as_tensor(residual)
    scale = T.stop_gradient(T.mean(T.abs_(residual), axis=1))
    degenerate = scale.data == 0.0
    denominator = np.where(degenerate, 1.0, scale.data)
    losses = T.sum_(T.square(residual), axis=1) / denominator * (~degenerate).astype(np.float64)
    return losses, degenerate


def pair_losses(denoiser: Denoiser, outputs: np.ndarray, labels, pair_sets: Sequence[TimestepNoiseSet],
                config: SurrogateConfig) -> PairEvaluation:
    """
    Per-pair losses for B outputs, each with its own pair set (sets may be shared objects).

    GENERIC_W: w_t ||NN(z_t) - r_t||² in the weighting's space.
    ADAPTIVE:  ||r||² / sg(mean |r|) with r the residual in ``adaptive_space``;
               a zero denominator gives loss 0 and sets the degenerate flag.
    """
    outputs = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
    batch, dim = outputs.shape
    if len(pair_sets) != batch:
        raise UsageError(f"{len(pair_sets)} pair sets for {batch} outputs")
    n_pairs = pair_sets[0].n_pairs
    if any(s.n_pairs != n_pairs for s in pair_sets):
        raise UsageError("all outputs in one evaluation need the same pair count")

    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64).reshape(-1), (batch,))
    times = np.concatenate([s.times for s in pair_sets])
    noises = np.concatenate([s.noises for s in pair_sets], axis=0)
    o = np.repeat(outputs, n_pairs, axis=0)
    row_labels = np.repeat(labels, n_pairs)
    column = times.reshape(-1, 1)

    z = interpolate(o, noises, column, denoiser.schedule)
    out = denoiser.head_output(z, times, row_labels)

    degenerate = np.zeros(batch * n_pairs, dtype=bool)
    if config.weighting is Weighting.GENERIC_W:
        weight, space = loss_weight(times, config.weight_fn, denoiser.head, denoiser.schedule)
        residual = _residual(denoiser, out, z, column, o, noises, space)
        losses = T.sum_(T.square(residual), axis=1) * weight
    else:
        residual = _residual(denoiser, out, z, column, o, noises, config.adaptive_space)
        losses, degenerate = adaptive_loss(residual)
        if np.any(degenerate):
            logger.debug(f"{int(degenerate.sum())} degenerate residuals evaluated as zero loss")

    kl_predictions = convert_prediction(out, z, column, denoiser.head, config.kl_space, denoiser.schedule)
    return PairEvaluation(losses.reshape(batch, n_pairs), kl_predictions, degenerate.reshape(batch, n_pairs))


def per_sample_loss(denoiser: Denoiser, o: np.ndarray, label: int, t: float, eps: np.ndarray,
                    config: SurrogateConfig) -> Tensor:
    """Loss of a single (output, t, eps) triple."""
    pair_set = TimestepNoiseSet(np.array([t]), np.array([-1]), np.atleast_2d(eps), 0, 0)
    return pair_losses(denoiser, np.atleast_2d(o), [label], [pair_set], config).losses.reshape(())


def estimate_surrogate(denoiser: Denoiser, outputs: np.ndarray, labels,
                       pair_sets: Sequence[TimestepNoiseSet], config: SurrogateConfig) -> Tuple[Tensor, PairEvaluation]:
    """Monte Carlo surrogate L̂ per output (B,), plus the underlying pair evaluation."""
    evaluation = pair_losses(denoiser, outputs, labels, pair_sets, config)
    return T.mean(evaluation.losses, axis=1), evaluation


def store_old_surrogate(denoiser: Denoiser, outputs: np.ndarray, labels,
                        pair_sets: Sequence[TimestepNoiseSet], config: SurrogateConfig) -> StoredOldSurrogate:
    """Evaluate and freeze θ_old quantities for one prompt group."""
    with no_grad():
        surrogates, evaluation = estimate_surrogate(denoiser, outputs, labels, pair_sets, config)
    batch, n_pairs = evaluation.losses.shape
    stored = StoredOldSurrogate(
        pair_losses=evaluation.losses.data.copy(),
        surrogates=surrogates.data.copy(),
        kl_predictions=evaluation.kl_predictions.data.reshape(batch, n_pairs, -1).copy(),
        degenerate=int(evaluation.degenerate.sum()),
    )
    if not np.all(np.isfinite(stored.surrogates)):
        raise NumericalError("non-finite old-policy surrogate", quantity="surrogate_old")
    return stored


def importance_ratio(surrogate_new, surrogate_old) -> Tensor:
    """
    ρ = exp(L̂_old - L̂_new), clamped to [1e-6, 1e6].

    Raises:
        NumericalError: If either surrogate is non-finite
    """
    new = T.as_tensor(surrogate_new)
    old = T.as_tensor(surrogate_old)
    if not np.all(np.isfinite(new.data)) or not np.all(np.isfinite(old.data)):
        raise NumericalError("non-finite surrogate in importance ratio", quantity="importance_ratio")
    log_ratio = T.clip(old - new, np.log(RATIO_FLOOR), np.log(RATIO_CEILING))
    return T.exp(log_ratio)


def kl_simple(predictions_new, predictions_old) -> Tensor:
    """
    Mean over pairs of ||pred_new - pred_old||²; the last axis is the data dimension.

    Inputs are (n_pairs, d) or (B, n_pairs, d); the result is a scalar or (B,).

    Raises:
        UsageError: If the pair counts differ
    """
    new = T.as_tensor(predictions_new)
    old = T.as_tensor(predictions_old)
    if new.shape != old.shape:
        raise UsageError(f"prediction shapes differ: {new.shape} vs {old.shape}")
    squared = T.sum_(T.square(new - old), axis=new.ndim - 1)
    return T.mean(squared, axis=squared.ndim - 1)


def surrogate_gradient_norms(denoiser: Denoiser, outputs: np.ndarray, labels,
                             pair_sets: Sequence[TimestepNoiseSet], old_surrogates: np.ndarray,
                             config: SurrogateConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-output ||∇_θ ρ_i|| without clipping or advantage scaling.

    Each output is differentiated on its own private tape.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (surrogate magnitudes L̂_i, gradient norms)
    """
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64).reshape(-1), (len(pair_sets),))
    magnitudes: List[float] = []
    norms: List[float] = []
    for i, pair_set in enumerate(pair_sets):
        with private_tape():
            surrogate, _ = estimate_surrogate(denoiser, outputs[i:i + 1], labels[i:i + 1], [pair_set], config)
            ratio = T.exp(T.as_tensor(old_surrogates[i]) - surrogate.reshape(()))
            grads = gradients_by_name(denoiser.params, backward(ratio))
        magnitudes.append(float(surrogate.data[0]))
        norms.append(global_norm(grads))
    return np.array(magnitudes), np.array(norms)
