"""
Diagnostic statistics and the per-iteration metrics table.
"""
import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import UsageError

logger = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1

_BASE_COLUMNS = (
    "stage", "iteration",
    "train_reward_mean", "train_reward_min", "train_reward_max",
    "heldout_reward_mean", "heldout_reward_min", "heldout_reward_max",
)
_TAIL_COLUMNS = (
    "surrogate_mean", "surrogate_cv", "within_group_cv",
    "grad_norm", "clip_fraction", "kl",
    "nfe_old", "nfe_new", "incidents", "degenerate_pairs",
)


def metrics_header(reward_names: Sequence[str]) -> List[str]:
    """Column order of metrics.csv for a run with the given reward terms."""
    per_term = []
    for name in reward_names:
        for split in ("train", "heldout"):
            per_term.extend(f"{split}_{name}_{stat}" for stat in ("mean", "min", "max"))
    return list(_BASE_COLUMNS) + per_term + list(_TAIL_COLUMNS)


def format_value(value) -> str:
    """Locale-free rendering; missing values are empty."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "nan"
    return f"{value:.12g}"


@dataclass
class MetricsRow:
    """One iteration's entry in metrics.csv; keys of ``values`` follow ``metrics_header``."""
    stage: int
    iteration: int
    values: Dict[str, Optional[float]] = field(default_factory=dict)

    def as_list(self, header: Sequence[str]) -> List[str]:
        cells = []
        for column in header:
            if column == "stage":
                cells.append(str(self.stage))
            elif column == "iteration":
                cells.append(str(self.iteration))
            else:
                cells.append(format_value(self.values.get(column)))
        return cells


class MetricsWriter:
    """Append-only CSV with a fixed header, flushed after every row."""

    def __init__(self, path: str, header: Sequence[str]):
        self.path = path
        self.header = list(header)
        with open(self.path, "w", newline="") as f:
            f.write(_csv_line(self.header))

    def append(self, row: MetricsRow):
        with open(self.path, "a", newline="") as f:
            f.write(_csv_line(row.as_list(self.header)))


def _csv_line(cells: Sequence[str]) -> str:
    buffer = io.StringIO()
    csv.writer(buffer, lineterminator="\n").writerow(cells)
    return buffer.getvalue()


def summarize(values: np.ndarray) -> Tuple[float, float, float]:
    """(mean, min, max); NaNs when empty."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return float("nan"), float("nan"), float("nan")
    return float(values.mean()), float(values.min()), float(values.max())


def coefficient_of_variation(values: np.ndarray) -> Optional[float]:
    """Population std over mean; None when the mean is zero."""
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean()
    if mean == 0.0:
        return None
    return float(values.std() / abs(mean))


def surrogate_statistics(groups: Sequence[np.ndarray]) -> Dict[str, Optional[float]]:
    """
    Overall CV of all surrogate values and the mean within-group CV.

    Args:
        groups: Surrogate values per prompt group

    Returns:
        Dict: ``mean``, ``cv`` and ``within_group_cv``; CVs are None where a mean is zero

    Raises:
        UsageError: With fewer than two groups or a group of fewer than two values
    """
    if len(groups) < 2 or any(len(g) < 2 for g in groups):
        raise UsageError("surrogate statistics need at least 2 groups of at least 2 values")
    pooled = np.concatenate([np.asarray(g, dtype=np.float64) for g in groups])
    within = [coefficient_of_variation(g) for g in groups]
    defined = [cv for cv in within if cv is not None]
    return {
        "mean": float(pooled.mean()),
        "cv": coefficient_of_variation(pooled),
        "within_group_cv": float(np.mean(defined)) if defined else None,
    }


def gradnorm_fit(magnitudes: np.ndarray, norms: np.ndarray) -> float:
    """
    R² of the least-squares quadratic fit of gradient norm on surrogate magnitude.

    Raises:
        UsageError: With fewer than 3 points or when every magnitude is equal
    """
    x = np.asarray(magnitudes, dtype=np.float64)
    y = np.asarray(norms, dtype=np.float64)
    if x.size < 3 or x.size != y.size:
        raise UsageError(f"quadratic fit needs at least 3 paired points, got {x.size}/{y.size}")
    if np.all(x == x[0]):
        raise UsageError("quadratic fit is degenerate: all magnitudes are equal")
    coefficients = np.polyfit(x, y, deg=2)
    residuals = y - np.polyval(coefficients, x)
    ss_res = float(np.sum(residuals ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 0.0
    return 1.0 - ss_res / ss_tot


def collapse_events(curve: Sequence[float], fraction: float = 0.5) -> List[int]:
    """Indices where the value falls below ``fraction`` of the running maximum so far."""
    events = []
    running = -math.inf
    for i, value in enumerate(curve):
        if value is None or math.isnan(value):
            continue
        if running > 0.0 and value < fraction * running:
            events.append(i)
        running = max(running, value)
    return events


def steps_to_threshold(curve: Sequence[float], steps: Sequence[int], threshold: float) -> Optional[int]:
    """Cumulative gradient steps at the first point where ``curve`` reaches ``threshold``."""
    for value, step in zip(curve, steps):
        if value is not None and not math.isnan(value) and value >= threshold:
            return int(step)
    return None
