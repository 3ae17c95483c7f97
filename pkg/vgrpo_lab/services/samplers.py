"""
Rollout generation.

Time runs backwards on a strictly decreasing grid t_0 = t_max > ... > t_T = t_min.
The rectified-flow ODE is dz/dt = v(z, t). Three steppers are provided:

* EULER_ODE: z' = z - h v̂
* SDE_FIRST_ORDER: the Euler mean plus σ_i ε̃ with σ_i = noise_level · sqrt(h_i t_i)
* SECOND_ORDER_ODE: exponential integrator in t with the x-prediction
  extrapolated linearly from the last two grid times

Any model exposing ``predict_x``, ``predict_velocity`` and ``dim`` can be
sampled, which is how the analytic oracle field is plugged in.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from ..utils.exceptions import ConfigurationError, UsageError

logger = logging.getLogger(__name__)


class VelocityModel(Protocol):
    dim: int

    def predict_x(self, z: np.ndarray, t, labels) -> np.ndarray: ...

    def predict_velocity(self, z: np.ndarray, t, labels) -> np.ndarray: ...


class SamplerKind(Enum):
    EULER_ODE = "euler_ode"
    SDE_FIRST_ORDER = "sde_first_order"
    SECOND_ORDER_ODE = "second_order_ode"


@dataclass(frozen=True)
class SamplerConfig:
    """
    Attributes:
        kind: Stepping rule
        steps: Number of steps T
        t_max: First grid time
        t_min: Last grid time
        noise_level: SDE noise scale; ignored by the ODE kinds
        p_mix: Fraction of steps driven by the current policy in mixed rollouts
    """
    kind: SamplerKind = SamplerKind.EULER_ODE
    steps: int = 16
    t_max: float = 1.0
    t_min: float = 0.0
    noise_level: float = 0.0
    p_mix: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError(f"sampler needs at least one step, got {self.steps}")
        if not 0.0 <= self.t_min < self.t_max <= 1.0:
            raise ConfigurationError(f"grid must satisfy 0 <= t_min < t_max <= 1, got [{self.t_min}, {self.t_max}]")
        if self.noise_level < 0.0:
            raise ConfigurationError(f"noise level must be nonnegative, got {self.noise_level}")
        if not 0.0 <= self.p_mix <= 1.0:
            raise ConfigurationError(f"p_mix must lie in [0, 1], got {self.p_mix}")
        if abs(self.p_mix * self.steps - round(self.p_mix * self.steps)) > 1e-9:
            raise ConfigurationError(f"p_mix·T = {self.p_mix * self.steps} is not an integer step index")

    @property
    def is_stochastic(self) -> bool:
        return self.kind is SamplerKind.SDE_FIRST_ORDER

    @property
    def switch_step(self) -> int:
        """Steps before this index use the current policy in mixed rollouts."""
        return int(round(self.p_mix * self.steps))

    def grid(self) -> np.ndarray:
        return np.linspace(self.t_max, self.t_min, self.steps + 1)

    def sigmas(self) -> np.ndarray:
        """Per-step injected noise scale; identically zero for ODE kinds."""
        if not self.is_stochastic:
            return np.zeros(self.steps)
        grid = self.grid()
        h = grid[:-1] - grid[1:]
        return self.noise_level * np.sqrt(h * grid[:-1])


@dataclass(frozen=True)
class RolloutRecord:
    """
    One generated output and its trajectory.

    Attributes:
        label: Condition label
        seed: Per-rollout seed
        initial_noise: z at t_max, shape (d,)
        states: (T+1, d) trajectory, states[0] = initial_noise
        noises: (T, d) injected noises for SDE rollouts, else None
        output: Final state
        nfe: Network evaluations spent on the rollout
        times: (T+1,) grid
    """
    label: int
    seed: int
    initial_noise: np.ndarray
    states: np.ndarray
    noises: Optional[np.ndarray]
    output: np.ndarray
    nfe: int
    times: np.ndarray

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "seed": self.seed,
            "nfe": self.nfe,
            "times": self.times.tolist(),
            "states": self.states.tolist(),
            "noises": None if self.noises is None else self.noises.tolist(),
            "output": self.output.tolist(),
        }


def _check_times(t_cur: float, t_next: float):
    if not t_next < t_cur:
        raise UsageError(f"sampler times must decrease, got {t_cur} -> {t_next}")


def sde_step(model: VelocityModel, x: np.ndarray, t_cur: float, t_next: float,
             noise: Optional[np.ndarray], labels, sigma: float = 0.0) -> np.ndarray:
    """
    First-order step x' = x - (t_cur - t_next) v̂ + σ ε̃.

    With σ = 0 (or no noise) this is the Euler ODE update.
    """
    _check_times(t_cur, t_next)
    velocity = model.predict_velocity(x, t_cur, labels)
    mean = x - (t_cur - t_next) * velocity
    if noise is None or sigma == 0.0:
        return mean
    return mean + sigma * noise


def second_order_step(model: VelocityModel, x: np.ndarray, t_cur: float, t_next: float,
                      labels, history: Optional[Tuple[float, np.ndarray]] = None
                      ) -> Tuple[np.ndarray, Tuple[float, np.ndarray]]:
    """
    Multistep update with a linearly extrapolated x-prediction.

    With x̂(τ) = A + kτ on [t_next, t_cur], the rectified-flow ODE
    dz/dτ = (z - x̂)/τ integrates exactly to
    z' = (t'/t) z + A (1 - t'/t) - t' k log(t'/t).
    Without history k = 0, which is the Euler step.

    Args:
        history: (t_prev, x̂_prev) from the previous step, or None

    Returns:
        Tuple: (next state, (t_cur, x̂ at t_cur)) to pass as the next history
    """
    _check_times(t_cur, t_next)
    x_hat = model.predict_x(x, t_cur, labels)
    if history is None:
        slope = np.zeros_like(x_hat)
    else:
        t_prev, x_hat_prev = history
        slope = (x_hat - x_hat_prev) / (t_cur - t_prev)
    intercept = x_hat - t_cur * slope
    ratio = t_next / t_cur
    log_term = 0.0 if t_next == 0.0 else t_next * np.log(ratio) * slope
    x_next = ratio * x + intercept * (1.0 - ratio) - log_term
    return x_next, (t_cur, x_hat)


def _rollout(models: Sequence[VelocityModel], labels: np.ndarray, seeds: Sequence[int],
             config: SamplerConfig) -> List[RolloutRecord]:
    """Run one rollout per (label, seed); ``models[i]`` drives step i."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(seeds) != labels.shape[0]:
        raise UsageError(f"{len(seeds)} seeds for {labels.shape[0]} conditions")
    dim = models[0].dim
    batch = labels.shape[0]
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    grid = config.grid()
    sigmas = config.sigmas()

    x = np.stack([rng.standard_normal(dim) for rng in rngs]) if batch else np.zeros((0, dim))
    states = [x]
    noises = []
    history = None
    for i in range(config.steps):
        t_cur, t_next = float(grid[i]), float(grid[i + 1])
        model = models[i]
        if config.kind is SamplerKind.SECOND_ORDER_ODE:
            x, history = second_order_step(model, x, t_cur, t_next, labels, history)
        elif config.kind is SamplerKind.SDE_FIRST_ORDER:
            noise = np.stack([rng.standard_normal(dim) for rng in rngs])
            noises.append(noise)
            x = sde_step(model, x, t_cur, t_next, noise, labels, float(sigmas[i]))
        else:
            x = sde_step(model, x, t_cur, t_next, None, labels)
        states.append(x)

    trajectory = np.stack(states, axis=1)
    injected = np.stack(noises, axis=1) if noises else None
    records = []
    for b in range(batch):
        record_states = trajectory[b].copy()
        record_states.setflags(write=False)
        record_noises = None
        if injected is not None:
            record_noises = injected[b].copy()
            record_noises.setflags(write=False)
        records.append(RolloutRecord(
            label=int(labels[b]),
            seed=int(seeds[b]),
            initial_noise=record_states[0],
            states=record_states,
            noises=record_noises,
            output=record_states[-1],
            nfe=config.steps,
            times=grid,
        ))
    return records


def sample_batch(model: VelocityModel, labels, seeds: Sequence[int],
                 config: SamplerConfig) -> List[RolloutRecord]:
    """Rollouts for several conditions, evaluated as one batch per step."""
    return _rollout([model] * config.steps, labels, seeds, config)


def sample(model: VelocityModel, label: int, config: SamplerConfig, seed: int) -> RolloutRecord:
    """One rollout; deterministic in (seed, label, params)."""
    return sample_batch(model, [label], [seed], config)[0]


def mixed_policy_sample(current: VelocityModel, reference: VelocityModel, labels,
                        seeds: Sequence[int], config: SamplerConfig) -> List[RolloutRecord]:
    """
    Rollouts whose first p_mix·T steps use ``current`` and the rest ``reference``.

    Raises:
        ConfigurationError: If the two models differ in data dimension
    """
    if current.dim != reference.dim:
        raise ConfigurationError(f"mixed sampling needs equal dimensions, got {current.dim} and {reference.dim}")
    switch = config.switch_step
    models = [current if i < switch else reference for i in range(config.steps)]
    return _rollout(models, labels, seeds, config)


def final_outputs(records: Sequence[RolloutRecord]) -> np.ndarray:
    return np.stack([r.output for r in records]) if records else np.zeros((0, 0))
