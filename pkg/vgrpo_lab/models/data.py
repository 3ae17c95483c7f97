"""
Synthetic target distributions and sample-quality distances.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np
from scipy import special, stats
from scipy.spatial.distance import cdist

from ..utils.exceptions import ConfigurationError
from ..utils.seeding import Stream, derive_rng

logger = logging.getLogger(__name__)


class LabelMode(Enum):
    """How pretraining batches are labelled."""
    COMPONENT = "component"
    RANDOM = "random"
    NULL = "null"


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of axis-aligned Gaussians; ``means`` and ``stds`` are (K, d)."""
    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.array(self.means, dtype=np.float64))
        stds = np.broadcast_to(np.asarray(self.stds, dtype=np.float64), means.shape).copy()
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if weights.shape[0] != means.shape[0]:
            raise ConfigurationError(f"{weights.shape[0]} weights for {means.shape[0]} components")
        if np.any(stds <= 0.0) or np.any(weights < 0.0) or weights.sum() <= 0.0:
            raise ConfigurationError("mixture needs positive stds and nonnegative weights")
        for name, value in (("means", means), ("stds", stds), ("weights", weights / weights.sum())):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @classmethod
    def two_modes(cls, separation: float = 2.0, std: float = 0.5) -> "GaussianMixture":
        """Equal-weight components at (±separation, 0)."""
        return cls(np.array([[-separation, 0.0], [separation, 0.0]]),
                   np.full((2, 2), std), np.array([0.5, 0.5]))


def sample_mixture(mixture: GaussianMixture, n: int,
                   rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` points; returns (points (n, d), component index per point)."""
    components = rng.choice(mixture.n_components, size=n, p=mixture.weights)
    noise = rng.standard_normal((n, mixture.dim))
    points = mixture.means[components] + mixture.stds[components] * noise
    return points, components


def mixture_logpdf(mixture: GaussianMixture, points: np.ndarray) -> np.ndarray:
    """Exact log-density of each row of ``points`` (B, d) under the mixture."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    per_component = np.sum(stats.norm.logpdf(points[:, None, :], loc=mixture.means, scale=mixture.stds), axis=-1)
    return special.logsumexp(per_component + np.log(mixture.weights), axis=1)


def pretrain_labels(mode: LabelMode, components: np.ndarray, n_labels: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Condition labels attached to pretraining points."""
    components = np.asarray(components, dtype=np.int64)
    if mode is LabelMode.COMPONENT:
        return components % n_labels
    if mode is LabelMode.RANDOM:
        return rng.integers(0, n_labels, size=components.shape[0])
    return np.zeros(components.shape[0], dtype=np.int64)


def heldout_conditions(n_labels: int, count: int, seed: int) -> np.ndarray:
    """Evaluation labels drawn from their own seed stream."""
    return derive_rng(seed, Stream.HELDOUT).integers(0, n_labels, size=count)


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """
    V-statistic energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'|.

    Zero iff the two empirical distributions coincide.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ConfigurationError("energy distance needs nonempty samples")
    xy = cdist(x, y).mean()
    xx = cdist(x, x).mean()
    yy = cdist(y, y).mean()
    return float(2.0 * xy - xx - yy)
