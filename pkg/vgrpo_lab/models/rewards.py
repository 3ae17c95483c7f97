"""
Analytic reward functions.

Each condition fixes a target point (and a target region for the coarse
indicator reward). Rewards are pure functions of (output, condition).
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from ..utils.exceptions import ConfigurationError

logger = logging.getLogger(__name__)


class ConditionKind(Enum):
    TARGET_MODE = "target_mode"
    TARGET_ANGLE = "target_angle"
    UNCONDITIONAL = "unconditional"


class RewardKind(Enum):
    NEG_DISTANCE = "neg_distance"
    GAUSSIAN_BUMP = "gaussian_bump"
    RING_RADIUS = "ring_radius"
    REGION_INDICATOR = "region_indicator"


@dataclass(frozen=True)
class Condition:
    """A prompt: integer label plus the target point it stands for."""
    kind: ConditionKind
    label: int
    target: Tuple[float, ...]

    @property
    def target_array(self) -> np.ndarray:
        return np.asarray(self.target, dtype=np.float64)


@dataclass(frozen=True)
class RewardTerm:
    """One reward function with its aggregation weight and normalization constants."""
    kind: RewardKind
    weight: float = 1.0
    center: float = 0.0
    scale: float = 1.0

    @property
    def name(self) -> str:
        return self.kind.value


@dataclass(frozen=True)
class RewardSpec:
    """
    Reward functions and their shared constants.

    Attributes:
        terms: Reward functions, at least one
        bump_width: Width s of GAUSSIAN_BUMP
        ring_radius: Radius r0 of RING_RADIUS (also the TARGET_ANGLE target radius)
        floor: Reward assigned to non-finite outputs
        n_angle_bins: Sectors for TARGET_ANGLE conditions
    """
    terms: Tuple[RewardTerm, ...] = field(default_factory=lambda: (RewardTerm(RewardKind.GAUSSIAN_BUMP),))
    bump_width: float = 1.0
    ring_radius: float = 2.0
    floor: float = 0.0
    n_angle_bins: int = 8

    def __post_init__(self):
        if not self.terms:
            raise ConfigurationError("reward spec needs at least one term")
        for term in self.terms:
            if not np.isfinite(term.weight):
                raise ConfigurationError(f"reward weight for {term.name} is not finite")
        if self.bump_width <= 0.0:
            raise ConfigurationError(f"bump width must be positive, got {self.bump_width}")

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(term.name for term in self.terms)

    @property
    def weights(self) -> np.ndarray:
        return np.array([term.weight for term in self.terms], dtype=np.float64)


def make_condition(kind: ConditionKind, label: int, mode_means: np.ndarray,
                   spec: RewardSpec) -> Condition:
    """
    Resolve a label into a condition.

    TARGET_MODE targets the label's mixture mean, TARGET_ANGLE the point at
    radius r0 and angle 2π·label/n_bins, UNCONDITIONAL the origin.
    """
    mode_means = np.atleast_2d(mode_means)
    dim = mode_means.shape[1]
    if kind is ConditionKind.TARGET_MODE:
        if not 0 <= label < mode_means.shape[0]:
            raise ConfigurationError(f"mode label {label} outside [0, {mode_means.shape[0]})")
        target = mode_means[label]
    elif kind is ConditionKind.TARGET_ANGLE:
        if not 0 <= label < spec.n_angle_bins:
            raise ConfigurationError(f"angle label {label} outside [0, {spec.n_angle_bins})")
        angle = 2.0 * np.pi * label / spec.n_angle_bins
        target = np.zeros(dim)
        target[0], target[1] = spec.ring_radius * np.cos(angle), spec.ring_radius * np.sin(angle)
    else:
        target = np.zeros(dim)
    return Condition(kind, int(label), tuple(float(v) for v in target))


def _in_region(o: np.ndarray, condition: Condition, spec: RewardSpec) -> bool:
    target = condition.target_array
    if condition.kind is ConditionKind.TARGET_ANGLE:
        angle = np.arctan2(o[1], o[0])
        center = 2.0 * np.pi * condition.label / spec.n_angle_bins
        offset = np.angle(np.exp(1j * (angle - center)))
        return bool(abs(offset) < np.pi / spec.n_angle_bins)
    if condition.kind is ConditionKind.TARGET_MODE and np.any(target != 0.0):
        return bool(np.dot(o, target) > 0.0)
    return bool(o[0] > 0.0)


def _term_value(kind: RewardKind, o: np.ndarray, condition: Condition, spec: RewardSpec) -> float:
    distance = float(np.linalg.norm(o - condition.target_array))
    if kind is RewardKind.NEG_DISTANCE:
        return -distance
    if kind is RewardKind.GAUSSIAN_BUMP:
        return float(np.exp(-distance ** 2 / (2.0 * spec.bump_width ** 2)))
    if kind is RewardKind.RING_RADIUS:
        return -abs(float(np.linalg.norm(o)) - spec.ring_radius)
    return 1.0 if _in_region(o, condition, spec) else 0.0


def evaluate(o: np.ndarray, condition: Condition, spec: RewardSpec) -> Tuple[np.ndarray, bool]:
    """
    Raw reward per term.

    Returns:
        Tuple[np.ndarray, bool]: (rewards per term, True when the output was
        non-finite and every term fell back to the floor)
    """
    o = np.asarray(o, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(o)):
        logger.warning(f"Non-finite output for condition {condition.label}; assigning reward floor")
        return np.full(len(spec.terms), spec.floor), True
    return np.array([_term_value(term.kind, o, condition, spec) for term in spec.terms]), False


def evaluate_batch(outputs: np.ndarray, conditions: Sequence[Condition],
                   spec: RewardSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Rewards (n_terms, B) and non-finite flags (B,) for a batch of outputs."""
    outputs = np.atleast_2d(outputs)
    results = [evaluate(o, c, spec) for o, c in zip(outputs, conditions)]
    rewards = np.stack([r for r, _ in results], axis=1) if results else np.zeros((len(spec.terms), 0))
    flags = np.array([f for _, f in results], dtype=bool)
    return rewards, flags


def normalize(raw: np.ndarray, spec: RewardSpec) -> np.ndarray:
    """
    Affine per-term map (R - center) / scale; ``raw`` has terms on axis 0.

    Raises:
        ConfigurationError: If any term has scale 0
    """
    raw = np.asarray(raw, dtype=np.float64)
    centers = np.array([term.center for term in spec.terms])
    scales = np.array([term.scale for term in spec.terms])
    if np.any(scales == 0.0):
        zero = [term.name for term in spec.terms if term.scale == 0.0]
        raise ConfigurationError(f"reward normalization scale is zero for {zero}")
    shape = (-1,) + (1,) * (raw.ndim - 1)
    return (raw - centers.reshape(shape)) / scales.reshape(shape)


def total_reward(raw: np.ndarray, spec: RewardSpec, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Weighted average over terms of raw rewards (terms on axis 0)."""
    weights = spec.weights if weights is None else weights
    shape = (-1,) + (1,) * (np.ndim(raw) - 1)
    return np.sum(np.asarray(raw) * weights.reshape(shape), axis=0) / weights.sum()
