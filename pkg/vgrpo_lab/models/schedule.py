"""
Interpolation schedule and prediction parameterizations.

The forward process mixes data and noise as z_t = a(t) x + b(t) eps. A
denoiser head predicts one of x, eps or the velocity v = a'(t) x + b'(t) eps;
any one of them together with z_t determines the other two. Functions here
accept numpy arrays or ``Tensor`` values so the same conversions run on and
off the autodiff tape.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Tuple, Union

import numpy as np

from ..core.tensor import Tensor
from ..utils.exceptions import ConfigurationError, SingularityError, UsageError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Tensor, float]


class ScheduleKind(Enum):
    RECTIFIED_FLOW = "rectified_flow"


class PredictionKind(Enum):
    """What the network head regresses onto."""
    X_PRED = "x"
    EPS_PRED = "eps"
    V_PRED = "v"


class WeightFunction(Enum):
    """Timestep weighting of the generic regression loss."""
    UNIFORM = "uniform"
    ELBO = "elbo"


@dataclass(frozen=True)
class Schedule:
    """Interpolation coefficients a(t), b(t) and their time derivatives."""
    kind: ScheduleKind = ScheduleKind.RECTIFIED_FLOW

    def a(self, t):
        return 1.0 - t

    def b(self, t):
        return t

    def da_dt(self, t):
        return -1.0 + 0.0 * t

    def db_dt(self, t):
        return 1.0 + 0.0 * t

    def det(self, t):
        """a b' - b a', identically one for rectified flow."""
        return 1.0

    def coefficients(self, t) -> Tuple:
        """(a, b, a', b') at ``t``."""
        return self.a(t), self.b(t), self.da_dt(t), self.db_dt(t)


def _check_unit_interval(t):
    values = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    if np.any(values < 0.0) or np.any(values > 1.0) or not np.all(np.isfinite(values)):
        raise UsageError(f"time outside [0, 1]: {values}")


def interpolate(x: ArrayLike, eps: ArrayLike, t, schedule: Schedule):
    """
    Latent z_t = a(t) x + b(t) eps.

    Raises:
        UsageError: If x and eps differ in shape or t lies outside [0, 1]
    """
    x_shape = x.shape if hasattr(x, "shape") else np.shape(x)
    eps_shape = eps.shape if hasattr(eps, "shape") else np.shape(eps)
    if x_shape != eps_shape:
        raise UsageError(f"data shape {x_shape} does not match noise shape {eps_shape}")
    _check_unit_interval(t)
    return schedule.a(t) * x + schedule.b(t) * eps


def regression_target(x: ArrayLike, eps: ArrayLike, t, kind: PredictionKind,
                      schedule: Schedule = Schedule()):
    """Target r_t the head regresses onto."""
    if kind is PredictionKind.X_PRED:
        return x
    if kind is PredictionKind.EPS_PRED:
        return eps
    return schedule.da_dt(t) * x + schedule.db_dt(t) * eps


def _any_zero(value) -> bool:
    data = value.data if isinstance(value, Tensor) else value
    return bool(np.any(np.asarray(data) == 0.0))


def to_x_prediction(nn_out: ArrayLike, z: ArrayLike, t, head: PredictionKind,
                    schedule: Schedule = Schedule()):
    """
    Reparameterize a head output as an x-prediction.

    Raises:
        SingularityError: For an EPS head where a(t) = 0
    """
    a, b, da, db = schedule.coefficients(t)
    if head is PredictionKind.X_PRED:
        return nn_out
    if head is PredictionKind.EPS_PRED:
        if _any_zero(a):
            raise SingularityError("eps-prediction has no x-reparameterization at a(t) = 0")
        return (z - b * nn_out) / a
    det = schedule.det(t)
    return (db * z - b * nn_out) / det


def to_eps_prediction(nn_out: ArrayLike, z: ArrayLike, t, head: PredictionKind,
                      schedule: Schedule = Schedule()):
    """
    Reparameterize a head output as an eps-prediction.

    Raises:
        SingularityError: For an X head where b(t) = 0
    """
    a, b, da, db = schedule.coefficients(t)
    if head is PredictionKind.EPS_PRED:
        return nn_out
    if head is PredictionKind.X_PRED:
        if _any_zero(b):
            raise SingularityError("x-prediction has no eps-reparameterization at b(t) = 0")
        return (z - a * nn_out) / b
    det = schedule.det(t)
    return (a * nn_out - da * z) / det


def to_v_prediction(nn_out: ArrayLike, z: ArrayLike, t, head: PredictionKind,
                    schedule: Schedule = Schedule()):
    """Reparameterize a head output as a velocity v = a' x + b' eps."""
    if head is PredictionKind.V_PRED:
        return nn_out
    _, _, da, db = schedule.coefficients(t)
    x_hat = to_x_prediction(nn_out, z, t, head, schedule)
    eps_hat = to_eps_prediction(nn_out, z, t, head, schedule)
    return da * x_hat + db * eps_hat


def convert_prediction(nn_out: ArrayLike, z: ArrayLike, t, head: PredictionKind,
                       target: PredictionKind, schedule: Schedule = Schedule()):
    """Express a head output in the ``target`` parameterization."""
    if target is PredictionKind.X_PRED:
        return to_x_prediction(nn_out, z, t, head, schedule)
    if target is PredictionKind.EPS_PRED:
        return to_eps_prediction(nn_out, z, t, head, schedule)
    return to_v_prediction(nn_out, z, t, head, schedule)


def log_snr(t, schedule: Schedule = Schedule()):
    """
    Log signal-to-noise ratio log(a(t)² / b(t)²).

    Raises:
        SingularityError: At t = 0 or t = 1
    """
    values = np.asarray(t, dtype=np.float64)
    if np.any(values <= 0.0) or np.any(values >= 1.0):
        raise SingularityError(f"log-SNR is undefined at t = {t}")
    a, b = schedule.a(values), schedule.b(values)
    return np.log(a * a / (b * b))


def log_snr_derivative(t, schedule: Schedule = Schedule()):
    """dλ/dt = 2 (a'/a - b'/b); equals -2 / (t (1 - t)) for rectified flow."""
    values = np.asarray(t, dtype=np.float64)
    if np.any(values <= 0.0) or np.any(values >= 1.0):
        raise SingularityError(f"log-SNR derivative is undefined at t = {t}")
    a, b, da, db = schedule.coefficients(values)
    return 2.0 * (da / a - db / b)


def loss_weight(t, weight_fn: WeightFunction, head: PredictionKind,
                schedule: Schedule = Schedule()) -> Tuple[np.ndarray, PredictionKind]:
    """
    Per-timestep weight and the space the weighted residual is measured in.

    UNIFORM weights every timestep by one in the head's own space. ELBO uses
    -½ dλ/dt on the eps residual, the simplified evidence lower bound.
    """
    t = np.asarray(t, dtype=np.float64)
    if weight_fn is WeightFunction.UNIFORM:
        return np.ones_like(t), head
    return -0.5 * log_snr_derivative(t, schedule), PredictionKind.EPS_PRED


def training_grid(steps: int) -> np.ndarray:
    """Midpoint grid (k + ½)/T, k = 0..T-1, ascending; excludes both endpoints."""
    if steps < 1:
        raise ConfigurationError(f"grid needs at least one point, got {steps}")
    return (np.arange(steps, dtype=np.float64) + 0.5) / steps
