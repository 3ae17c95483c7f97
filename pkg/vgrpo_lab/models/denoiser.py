"""
Conditional MLP denoiser.

The network sees [z, condition embedding, time embedding] and emits its head
prediction (x, eps or v). Embeddings are sinusoidal features
[sin(π 2^k u), cos(π 2^k u)] for k < n_freq.
"""
import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ..core import tensor as T
from ..core.layers import Activation, MlpParams, forward, init_mlp
from ..core.tensor import Tensor, no_grad
from ..utils.exceptions import ConfigurationError, UsageError
from ..utils.seeding import Stream, derive_rng
from .schedule import (PredictionKind, Schedule, WeightFunction, convert_prediction,
                       interpolate, loss_weight, regression_target)

logger = logging.getLogger(__name__)

TIME_MARGIN = 1e-5


def sinusoidal_features(u: np.ndarray, n_freq: int) -> np.ndarray:
    """(B,) values in [0, 1] → (B, 2·n_freq) features."""
    u = np.asarray(u, dtype=np.float64).reshape(-1, 1)
    freqs = np.pi * (2.0 ** np.arange(n_freq, dtype=np.float64))
    angles = u * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def time_embedding(t, n_freq: int) -> np.ndarray:
    return sinusoidal_features(t, n_freq)


def condition_embedding(labels, n_labels: int, n_freq: int) -> np.ndarray:
    """Labels map to u = (label + ½)/n_labels; negative labels embed as zeros."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if np.any(labels >= n_labels):
        raise ConfigurationError(f"condition label out of range [0, {n_labels}): {labels.max()}")
    u = (labels.astype(np.float64) + 0.5) / max(n_labels, 1)
    features = sinusoidal_features(u, n_freq)
    features[labels < 0] = 0.0
    return features


@dataclass(frozen=True)
class Denoiser:
    """
    Network parameters plus the schedule and head kind that give them meaning.

    Attributes:
        params: MLP parameters; output width equals ``dim``
        schedule: Interpolation schedule
        head: What the network predicts
        dim: Data dimension
        n_labels: Number of condition labels
        n_freq: Sinusoidal frequencies per embedding
    """
    params: MlpParams
    schedule: Schedule
    head: PredictionKind
    dim: int
    n_labels: int
    n_freq: int

    def __post_init__(self):
        if self.params.output_width != self.dim:
            raise ConfigurationError(
                f"network output width {self.params.output_width} != data dimension {self.dim}")
        expected = input_width(self.dim, self.n_freq)
        if self.params.input_width != expected:
            raise ConfigurationError(
                f"network input width {self.params.input_width} != {expected} "
                f"(data {self.dim} + 2 embeddings of {2 * self.n_freq})")

    def with_params(self, params: MlpParams) -> "Denoiser":
        return replace(self, params=params)

    def features(self, z: np.ndarray, t, labels) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ConfigurationError(f"latent of shape {z.shape} does not match dimension {self.dim}")
        batch = z.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (batch,))
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64).reshape(-1), (batch,))
        return np.concatenate([
            z,
            condition_embedding(labels, self.n_labels, self.n_freq),
            time_embedding(t, self.n_freq),
        ], axis=1)

    def head_output(self, z: np.ndarray, t, labels) -> Tensor:
        """Raw head prediction, recorded on the tape when parameters require gradients."""
        return forward(self.params, T.constant(self.features(z, t, labels)))

    def predict(self, z: np.ndarray, t, labels, kind: PredictionKind) -> Tensor:
        """Head output converted to ``kind``; ``t`` broadcast per row."""
        z = np.asarray(z, dtype=np.float64)
        column = _time_column(t, z.shape[0])
        return convert_prediction(self.head_output(z, t, labels), z, column, self.head, kind, self.schedule)

    def predict_x(self, z: np.ndarray, t, labels) -> np.ndarray:
        with no_grad():
            return self.predict(z, t, labels, PredictionKind.X_PRED).data

    def predict_velocity(self, z: np.ndarray, t, labels) -> np.ndarray:
        with no_grad():
            return self.predict(z, t, labels, PredictionKind.V_PRED).data


def _time_column(t, batch: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (batch,)).reshape(-1, 1)


def input_width(dim: int, n_freq: int) -> int:
    return dim + 4 * n_freq


def build_denoiser(dim: int, n_labels: int, hidden: list, activation: Activation,
                   head: PredictionKind, n_freq: int, seed: int,
                   schedule: Optional[Schedule] = None) -> Denoiser:
    """Freshly initialized denoiser with the given hidden widths."""
    widths = [input_width(dim, n_freq)] + list(hidden) + [dim]
    params = init_mlp(widths, activation, derive_rng(seed, Stream.INIT))
    return Denoiser(params, schedule or Schedule(), head, dim, n_labels, n_freq)


def pretrain_loss(denoiser: Denoiser, x: np.ndarray, seed: int, labels=None,
                  t: Optional[np.ndarray] = None, eps: Optional[np.ndarray] = None,
                  weight_fn: WeightFunction = WeightFunction.UNIFORM) -> Tensor:
    """
    Weighted denoising regression loss, averaged over the batch.

    Args:
        denoiser: Model being trained
        x: Data batch (B, d)
        seed: Seed for the t ~ U(0, 1) and eps ~ N(0, I) draws; t is kept inside
            [TIME_MARGIN, 1 - TIME_MARGIN]
        labels: Condition labels per row (default: all -1, unconditional)
        t: Optional fixed times (B,), overriding the draw
        eps: Optional fixed noise (B, d), overriding the draw
        weight_fn: Timestep weighting

    Returns:
        Tensor: Scalar loss mean_b w_t ||NN(z_t) - r_t||²

    Raises:
        UsageError: If the batch is empty
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise UsageError(f"pretraining needs a nonempty (B, d) batch, got shape {x.shape}")
    batch = x.shape[0]
    rng = np.random.default_rng(seed)
    if t is None:
        t = np.clip(rng.uniform(0.0, 1.0, size=batch), TIME_MARGIN, 1.0 - TIME_MARGIN)
    if eps is None:
        eps = rng.standard_normal(x.shape)
    if labels is None:
        labels = -np.ones(batch, dtype=np.int64)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    column = t.reshape(-1, 1)

    z = interpolate(x, eps, column, denoiser.schedule)
    weight, space = loss_weight(t, weight_fn, denoiser.head, denoiser.schedule)
    out = denoiser.head_output(z, t, labels)
    prediction = convert_prediction(out, z, column, denoiser.head, space, denoiser.schedule)
    residual = prediction - regression_target(x, eps, column, space, denoiser.schedule)
    per_sample = T.sum_(T.square(residual), axis=1) * weight
    return T.mean(per_sample)
