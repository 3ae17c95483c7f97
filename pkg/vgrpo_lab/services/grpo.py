"""
Group-relative policy optimization over whole generations.

One iteration snapshots θ_old, rolls out G outputs per prompt, scores them,
turns rewards into group-normalized advantages, stores θ_old surrogates on a
fixed set of timestep-noise pairs and then takes N gradient steps on the clipped
ratio objective, each step on its own slice of the prompt pool.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..core import tensor as T
from ..core.layers import check_finite_gradients, gradients_by_name, global_norm
from ..core.optim import AdamWState, OptimizerConfig, adamw_step
from ..core.tensor import Tensor, backward, private_tape
from ..models.denoiser import Denoiser
from ..models.rewards import Condition, RewardSpec, evaluate_batch, normalize
from ..utils.exceptions import ConfigurationError, NumericalError
from ..utils.seeding import Stream, derive_rng, derive_seed
from .samplers import RolloutRecord, SamplerConfig, sample_batch
from .surrogate import (StoredOldSurrogate, SurrogateConfig, TimestepNoiseSet, draw_pairs,
                        estimate_surrogate, importance_ratio, kl_simple, store_old_surrogate,
                        surrogate_gradient_norms)

logger = logging.getLogger(__name__)

ADVANTAGE_STD_GUARD = 1e-6


class AggregationMode(Enum):
    """How several reward functions become one advantage."""
    ADV_THEN_AVG = "adv_then_avg"
    AVG_THEN_ADV = "avg_then_adv"


class RegulationPreset(Enum):
    RATIO_CLIP = "ratio_clip"
    KL_PENALTY = "kl_penalty"
    ADV_SOFT_CLIP = "adv_soft_clip"


class Algorithm(Enum):
    VGRPO = "vgrpo"
    MDP = "mdp"


@dataclass(frozen=True)
class Regulation:
    """Resolved gradient-step controls; ``clip_eps`` is inf and ``soft_clip_eta`` 0 when off."""
    clip_eps: float
    kl_beta: float
    soft_clip_eta: float

    @property
    def enabled(self) -> List[str]:
        names = []
        if np.isfinite(self.clip_eps):
            names.append("ratio_clip")
        if self.kl_beta > 0.0:
            names.append("kl_penalty")
        if self.soft_clip_eta > 0.0:
            names.append("adv_soft_clip")
        return names


PRESET_DEFAULTS = {
    RegulationPreset.RATIO_CLIP: Regulation(clip_eps=0.05, kl_beta=0.0, soft_clip_eta=0.0),
    RegulationPreset.KL_PENALTY: Regulation(clip_eps=float("inf"), kl_beta=0.3, soft_clip_eta=0.0),
    RegulationPreset.ADV_SOFT_CLIP: Regulation(clip_eps=float("inf"), kl_beta=0.0, soft_clip_eta=2.0),
}


def resolve_regulation(preset: RegulationPreset, clip_eps: Optional[float] = None,
                       kl_beta: Optional[float] = None,
                       soft_clip_eta: Optional[float] = None) -> Regulation:
    """
    Preset defaults with explicit overrides.

    Raises:
        ConfigurationError: If the preset's own technique is switched off or a value is invalid
    """
    base = PRESET_DEFAULTS[preset]
    resolved = Regulation(
        clip_eps=base.clip_eps if clip_eps is None else float(clip_eps),
        kl_beta=base.kl_beta if kl_beta is None else float(kl_beta),
        soft_clip_eta=base.soft_clip_eta if soft_clip_eta is None else float(soft_clip_eta),
    )
    if resolved.clip_eps <= 0.0:
        raise ConfigurationError(f"ratio clip range must be positive, got {resolved.clip_eps}")
    if resolved.kl_beta < 0.0:
        raise ConfigurationError(f"KL coefficient must be nonnegative, got {resolved.kl_beta}")
    if resolved.soft_clip_eta < 0.0:
        raise ConfigurationError(f"soft-clip range must be nonnegative, got {resolved.soft_clip_eta}")
    if preset is RegulationPreset.KL_PENALTY and resolved.kl_beta <= 0.0:
        raise ConfigurationError("KL_PENALTY preset needs kl_beta > 0")
    if preset is RegulationPreset.ADV_SOFT_CLIP and resolved.soft_clip_eta <= 0.0:
        raise ConfigurationError("ADV_SOFT_CLIP preset needs soft_clip_eta > 0")
    if len(resolved.enabled) > 1:
        logger.warning(f"Preset {preset.value} runs with mixed regulation: {', '.join(resolved.enabled)}")
    return resolved


@dataclass(frozen=True)
class TrainConfig:
    """
    Post-training hyperparameters.

    Attributes:
        iterations: Iterations M
        steps_per_iteration: Gradient steps N per iteration
        prompts_per_step: Prompts per gradient step; an iteration rolls out N times as many
        group_size: Outputs G per prompt
        preset: Regulation preset
        clip_eps: Ratio clip range override
        kl_beta: KL coefficient override
        soft_clip_eta: Advantage soft-clip range override
        aggregation: Multi-reward aggregation mode
        sampler: Rollout sampler
        surrogate: Surrogate settings (including n_mc)
        optimizer: AdamW settings
        seed: Run seed
        abort_on_nonfinite: Raise instead of skipping non-finite steps
        algorithm: V-GRPO or the per-step MDP baseline
        mdp_timesteps: Timesteps optimized per trajectory by the MDP baseline (None = all)
        diagnostics_every: Gradient-norm diagnostics period in iterations (0 = off)
    """
    iterations: int = 100
    steps_per_iteration: int = 2
    prompts_per_step: int = 4
    group_size: int = 12
    preset: RegulationPreset = RegulationPreset.RATIO_CLIP
    clip_eps: Optional[float] = None
    kl_beta: Optional[float] = None
    soft_clip_eta: Optional[float] = None
    aggregation: AggregationMode = AggregationMode.ADV_THEN_AVG
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=3e-4))
    seed: int = 0
    abort_on_nonfinite: bool = False
    algorithm: Algorithm = Algorithm.VGRPO
    mdp_timesteps: Optional[int] = None
    diagnostics_every: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigurationError(f"iterations must be nonnegative, got {self.iterations}")
        if self.steps_per_iteration < 1:
            raise ConfigurationError(f"need N >= 1 gradient steps per iteration, got {self.steps_per_iteration}")
        if self.group_size < 2:
            raise ConfigurationError(f"need group size G >= 2, got {self.group_size}")
        if self.prompts_per_step < 1:
            raise ConfigurationError(f"need at least one prompt per step, got {self.prompts_per_step}")

    @property
    def prompts_per_iteration(self) -> int:
        return self.steps_per_iteration * self.prompts_per_step

    def regulation(self) -> Regulation:
        return resolve_regulation(self.preset, self.clip_eps, self.kl_beta, self.soft_clip_eta)


@dataclass(frozen=True)
class GroupBatch:
    """
    G rollouts for one prompt and everything derived from them.

    Attributes:
        prompt_index: Position in the iteration's prompt pool
        condition: The prompt
        rollouts: G rollout records
        rewards: (K, G) raw rewards per function
        advantages: (G,) aggregated advantages
        soft_advantages: (G,) soft-clipped advantages (equal to ``advantages`` when off)
        pair_sets: G pair sets; one shared object when pairs are group-shared
        old: θ_old surrogates on ``pair_sets``
    """
    prompt_index: int
    condition: Condition
    rollouts: Tuple[RolloutRecord, ...]
    rewards: np.ndarray
    advantages: np.ndarray
    soft_advantages: np.ndarray
    pair_sets: Tuple[TimestepNoiseSet, ...] = ()
    old: Optional[StoredOldSurrogate] = None

    @property
    def outputs(self) -> np.ndarray:
        return np.stack([r.output for r in self.rollouts])

    @property
    def labels(self) -> np.ndarray:
        return np.full(len(self.rollouts), self.condition.label, dtype=np.int64)

    @property
    def size(self) -> int:
        return len(self.rollouts)


@dataclass(frozen=True)
class StepIncident:
    """A gradient step that was skipped."""
    iteration: int
    step: int
    reason: str


@dataclass
class StepStats:
    loss: float = float("nan")
    clip_fraction: float = 0.0
    kl: float = 0.0
    grad_norm: float = float("nan")
    ratio_mean: float = 1.0


@dataclass
class IterationResult:
    """Updated policy and everything the metrics layer reports for one iteration."""
    policy: Denoiser
    groups: List[GroupBatch]
    steps: List[StepStats]
    incidents: List[StepIncident]
    nfe_old: int
    nfe_new: int
    gradnorm_pairs: Optional[Tuple[np.ndarray, np.ndarray]] = None

    @property
    def train_rewards(self) -> np.ndarray:
        """(K, total outputs) raw rewards over all groups."""
        return np.concatenate([g.rewards for g in self.groups], axis=1)

    @property
    def old_surrogates(self) -> List[np.ndarray]:
        return [g.old.surrogates for g in self.groups if g.old is not None]

    @property
    def degenerate_pairs(self) -> int:
        return sum(g.old.degenerate for g in self.groups if g.old is not None)


def group_advantages(rewards: np.ndarray, mode: AggregationMode,
                     weights: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Group-normalized advantages from (K, G) rewards.

    Normalization is (R - mean) / max(std, 1e-6) with the population std, so a
    constant group yields zero advantages.

    Raises:
        ConfigurationError: If G < 2
    """
    rewards = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    if rewards.shape[1] < 2:
        raise ConfigurationError(f"advantages need a group of at least 2, got {rewards.shape[1]}")
    weights = np.ones(rewards.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    weights = weights / weights.sum()

    def standardize(values: np.ndarray) -> np.ndarray:
        centered = values - values.mean(axis=-1, keepdims=True)
        std = values.std(axis=-1, keepdims=True)
        return centered / np.maximum(std, ADVANTAGE_STD_GUARD)

    if mode is AggregationMode.ADV_THEN_AVG:
        return weights @ standardize(rewards)
    return standardize(weights @ rewards)


def soft_clip(advantages, eta: float) -> np.ndarray:
    """
    η·tanh(A/η).

    Raises:
        ConfigurationError: If η <= 0
    """
    if eta <= 0.0:
        raise ConfigurationError(f"soft-clip range must be positive, got {eta}")
    return eta * np.tanh(np.asarray(advantages, dtype=np.float64) / eta)


def grpo_objective(ratio, advantages, clip_eps: float) -> Tensor:
    """Per-output min(ρA, clip(ρ, 1-ε, 1+ε)A)."""
    ratio = T.as_tensor(ratio)
    advantages = np.asarray(advantages, dtype=np.float64)
    unclipped = ratio * advantages
    clipped = T.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    return T.minimum(unclipped, clipped)


def clip_fraction(ratio: np.ndarray, advantages: np.ndarray, clip_eps: float) -> float:
    """Share of outputs whose objective took the clipped branch."""
    ratio = np.asarray(ratio)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    active = clipped * advantages < ratio * advantages
    return float(np.mean(active)) if active.size else 0.0


def iteration_conditions(conditions: Sequence[Condition], config: TrainConfig, iteration: int) -> List[Condition]:
    """The iteration's prompt pool, drawn with replacement from ``conditions``."""
    rng = derive_rng(config.seed, Stream.PROMPTS, iteration)
    picks = rng.integers(0, len(conditions), size=config.prompts_per_iteration)
    return [conditions[i] for i in picks]


def step_partition(config: TrainConfig, iteration: int) -> np.ndarray:
    """(N, P) prompt indices: the seeded sub-batch of each gradient step."""
    rng = derive_rng(config.seed, Stream.PARTITION, iteration)
    order = rng.permutation(config.prompts_per_iteration)
    return order.reshape(config.steps_per_iteration, config.prompts_per_step)


def collect_groups(policy: Denoiser, config: TrainConfig, regulation: Regulation,
                   conditions: Sequence[Condition], iteration: int,
                   reward_spec: RewardSpec) -> List[GroupBatch]:
    """Roll out, score and compute advantages for every prompt of the iteration."""
    groups = []
    for p, condition in enumerate(conditions):
        seeds = [derive_seed(config.seed, Stream.ROLLOUT, iteration, p, g) for g in range(config.group_size)]
        labels = np.full(config.group_size, condition.label, dtype=np.int64)
        rollouts = tuple(sample_batch(policy, labels, seeds, config.sampler))
        raw, flags = evaluate_batch(np.stack([r.output for r in rollouts]), [condition] * config.group_size,
                                    reward_spec)
        if np.any(flags):
            logger.warning(f"Iteration {iteration} prompt {p}: {int(flags.sum())} non-finite outputs")
        advantages = group_advantages(normalize(raw, reward_spec), config.aggregation, reward_spec.weights)
        soft = soft_clip(advantages, regulation.soft_clip_eta) if regulation.soft_clip_eta > 0.0 else advantages
        groups.append(GroupBatch(p, condition, rollouts, raw, advantages, soft))
    return groups


def attach_old_surrogates(policy: Denoiser, groups: List[GroupBatch], config: TrainConfig,
                          iteration: int) -> List[GroupBatch]:
    """Draw the pair sets and store θ_old surrogates for every group."""
    attached = []
    for group in groups:
        p = group.prompt_index
        if config.surrogate.shared_pairs:
            shared = draw_pairs(config.surrogate, policy.dim, derive_seed(config.seed, Stream.PAIRS, iteration, p),
                                prompt_id=p, iteration=iteration)
            pair_sets = (shared,) * group.size
        else:
            pair_sets = tuple(
                draw_pairs(config.surrogate, policy.dim, derive_seed(config.seed, Stream.PAIRS, iteration, p, g + 1),
                           prompt_id=p, iteration=iteration)
                for g in range(group.size))
        old = store_old_surrogate(policy, group.outputs, group.labels, pair_sets, config.surrogate)
        attached.append(replace(group, pair_sets=pair_sets, old=old))
    return attached


def vgrpo_step_loss(policy: Denoiser, groups: Sequence[GroupBatch], regulation: Regulation,
                    config: TrainConfig) -> Tuple[Tensor, StepStats]:
    """
    Negated objective -mean_i (J_i - β KL_i) over the outputs of ``groups``.

    Each group is evaluated with the same layout as its stored θ_old values, so
    ρ is exactly 1 while the parameters equal θ_old.
    """
    objectives = []
    ratios, advantages, kls = [], [], []
    for group in groups:
        surrogate, evaluation = estimate_surrogate(policy, group.outputs, group.labels, group.pair_sets,
                                                   config.surrogate)
        ratio = importance_ratio(surrogate, group.old.surrogates)
        objective = grpo_objective(ratio, group.soft_advantages, regulation.clip_eps)
        n_pairs = group.old.kl_predictions.shape[1]
        kl = kl_simple(evaluation.kl_predictions.reshape(group.size, n_pairs, policy.dim), group.old.kl_predictions)
        if regulation.kl_beta > 0.0:
            objective = objective - regulation.kl_beta * kl
        objectives.append(objective)
        ratios.append(ratio.data)
        advantages.append(group.soft_advantages)
        kls.append(kl.data)

    loss = -T.mean(T.concat(objectives, axis=0))
    ratios = np.concatenate(ratios)
    stats = StepStats(
        loss=float(loss.data),
        clip_fraction=clip_fraction(ratios, np.concatenate(advantages), regulation.clip_eps),
        kl=float(np.mean(np.concatenate(kls))),
        ratio_mean=float(np.mean(ratios)),
    )
    return loss, stats


def apply_gradient_step(policy: Denoiser, opt_state: AdamWState, loss_fn, iteration: int, step: int,
                        abort_on_nonfinite: bool) -> Tuple[Denoiser, StepStats, Optional[StepIncident]]:
    """
    Evaluate ``loss_fn(policy)`` on a private tape and apply one AdamW update.

    A non-finite loss or gradient skips the update and returns an incident,
    or raises when ``abort_on_nonfinite`` is set.
    """
    with private_tape():
        try:
            loss, stats = loss_fn(policy)
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite loss {float(loss.data)}", quantity="loss")
            grads = gradients_by_name(policy.params, backward(loss))
            check_finite_gradients(grads)
        except NumericalError as e:
            if abort_on_nonfinite:
                logger.error(f"Iteration {iteration} step {step}: {e.message}; aborting")
                raise
            logger.warning(f"Iteration {iteration} step {step}: {e.message}; step skipped")
            return policy, StepStats(), StepIncident(iteration, step, e.message)

    stats.grad_norm = global_norm(grads)
    params = adamw_step(policy.params, grads, opt_state)
    return policy.with_params(params), stats, None


def vgrpo_iteration(policy: Denoiser, opt_state: AdamWState, config: TrainConfig,
                    conditions: Sequence[Condition], iteration: int,
                    reward_spec: RewardSpec) -> IterationResult:
    """
    One full iteration: rollouts, advantages, stored θ_old surrogates and N gradient steps.

    Args:
        policy: Current policy, which is also θ_old for this iteration
        opt_state: Optimizer state, updated in place
        config: Training configuration
        conditions: Prompt pool of N·P conditions
        iteration: Iteration index (seeds every draw)
        reward_spec: Reward functions

    Returns:
        IterationResult: New policy, groups, per-step stats and incidents
    """
    if len(conditions) != config.prompts_per_iteration:
        raise ConfigurationError(
            f"iteration needs {config.prompts_per_iteration} prompts, got {len(conditions)}")
    regulation = config.regulation()
    old_policy = policy
    groups = collect_groups(old_policy, config, regulation, conditions, iteration, reward_spec)
    groups = attach_old_surrogates(old_policy, groups, config, iteration)

    gradnorm_pairs = None
    if config.diagnostics_every and iteration % config.diagnostics_every == 0:
        magnitudes, norms = [], []
        for group in groups:
            m, n = surrogate_gradient_norms(old_policy, group.outputs, group.labels, group.pair_sets,
                                            group.old.surrogates, config.surrogate)
            magnitudes.append(m)
            norms.append(n)
        gradnorm_pairs = (np.concatenate(magnitudes), np.concatenate(norms))

    partition = step_partition(config, iteration)
    steps, incidents = [], []
    for n, indices in enumerate(partition):
        sub_batch = [groups[i] for i in indices]
        policy, stats, incident = apply_gradient_step(
            policy, opt_state, lambda p: vgrpo_step_loss(p, sub_batch, regulation, config),
            iteration, n, config.abort_on_nonfinite)
        steps.append(stats)
        if incident is not None:
            incidents.append(incident)

    n_outputs = sum(g.size for g in groups)
    nfe_old = sum(r.nfe for g in groups for r in g.rollouts) + n_outputs * config.surrogate.n_mc
    taken = len(steps) - len(incidents)
    nfe_new = taken * config.prompts_per_step * config.group_size * config.surrogate.n_mc
    logger.debug(f"Iteration {iteration}: {taken}/{len(steps)} steps, "
                 f"clip fraction {np.mean([s.clip_fraction for s in steps]):.3f}")
    return IterationResult(policy, groups, steps, incidents, nfe_old, nfe_new, gradnorm_pairs)
