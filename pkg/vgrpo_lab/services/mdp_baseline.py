"""
Per-step GRPO baseline.

Each stochastic sampler transition is an action with Gaussian kernel
N(x'; x - h v̂_θ(x, t), σ² I). Ratios are taken per transition, clipped, and
averaged over the optimized timesteps of each trajectory.
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from ..core import tensor as T
from ..core.optim import AdamWState
from ..core.tensor import Tensor, no_grad
from ..models.denoiser import Denoiser
from ..models.rewards import Condition, RewardSpec
from ..models.schedule import PredictionKind
from ..utils.exceptions import ConfigurationError
from ..utils.seeding import Stream, derive_rng
from .grpo import (GroupBatch, IterationResult, Regulation, StepStats, TrainConfig, apply_gradient_step,
                   clip_fraction, collect_groups, grpo_objective, step_partition)
from .samplers import SamplerKind
from .surrogate import importance_ratio

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MdpGroup:
    """
    A group plus its optimized transitions and their θ_old statistics.

    Attributes:
        batch: Rollouts, rewards and advantages
        step_indices: (K,) sorted sampler steps optimized for this group
        old_log_probs: (G, K) transition log-densities under θ_old
        old_means: (G·K, d) θ_old transition means
    """
    batch: GroupBatch
    step_indices: np.ndarray
    old_log_probs: np.ndarray
    old_means: np.ndarray


def check_stochastic(config: TrainConfig):
    """
    Raises:
        ConfigurationError: If rollouts have no stochastic kernel
    """
    if config.sampler.kind is not SamplerKind.SDE_FIRST_ORDER or config.sampler.noise_level <= 0.0:
        raise ConfigurationError(
            "the per-step baseline needs an SDE sampler with noise_level > 0; "
            "transition likelihoods are undefined for ODE rollouts")


def _transition_inputs(group: GroupBatch, steps: np.ndarray, config: TrainConfig):
    grid = config.sampler.grid()
    sigmas = config.sampler.sigmas()
    states = np.stack([r.states for r in group.rollouts])
    size, k = group.size, steps.shape[0]
    current = states[:, steps].reshape(size * k, -1)
    following = states[:, steps + 1].reshape(size * k, -1)
    t_cur = np.tile(grid[steps], size)
    h = np.tile(grid[steps] - grid[steps + 1], size)
    sigma = np.tile(sigmas[steps], size)
    labels = np.repeat(group.labels, k)
    return current, following, t_cur, h, sigma, labels


def transition_log_probs(policy: Denoiser, current: np.ndarray, following: np.ndarray, t_cur: np.ndarray,
                         h: np.ndarray, sigma: np.ndarray, labels) -> Tuple[Tensor, Tensor]:
    """
    Gaussian log-density of each stored transition and the kernel means.

    Returns:
        Tuple[Tensor, Tensor]: (log-probs (R,), means (R, d))
    """
    velocity = policy.predict(current, t_cur, labels, PredictionKind.V_PRED)
    means = current - h.reshape(-1, 1) * velocity
    dim = current.shape[1]
    variance = sigma * sigma
    squared = T.sum_(T.square(following - means), axis=1)
    log_probs = -0.5 * dim * np.log(2.0 * np.pi * variance) - squared / (2.0 * variance)
    return log_probs, means


def attach_old_log_probs(policy: Denoiser, groups: Sequence[GroupBatch], config: TrainConfig,
                         iteration: int) -> List[MdpGroup]:
    """Pick each group's optimized timesteps and store θ_old transition statistics."""
    total = config.sampler.steps
    k = total if config.mdp_timesteps is None else int(config.mdp_timesteps)
    if not 1 <= k <= total:
        raise ConfigurationError(f"mdp_timesteps must lie in [1, {total}], got {k}")
    attached = []
    for group in groups:
        rng = derive_rng(config.seed, Stream.MDP_SUBSET, iteration, group.prompt_index)
        steps = np.sort(rng.choice(total, size=k, replace=False))
        current, following, t_cur, h, sigma, labels = _transition_inputs(group, steps, config)
        with no_grad():
            log_probs, means = transition_log_probs(policy, current, following, t_cur, h, sigma, labels)
        attached.append(MdpGroup(group, steps, log_probs.data.reshape(group.size, k).copy(), means.data.copy()))
    return attached


def mdp_step_loss(policy: Denoiser, groups: Sequence[MdpGroup], regulation: Regulation,
                  config: TrainConfig) -> Tuple[Tensor, StepStats]:
    """Negated per-step clipped objective averaged over transitions, then over outputs."""
    objectives = []
    ratios, advantages, kls = [], [], []
    for group in groups:
        batch = group.batch
        k = group.step_indices.shape[0]
        current, following, t_cur, h, sigma, labels = _transition_inputs(batch, group.step_indices, config)
        log_probs, means = transition_log_probs(policy, current, following, t_cur, h, sigma, labels)
        ratio = importance_ratio(-log_probs, -group.old_log_probs.reshape(-1))
        step_advantages = np.repeat(batch.soft_advantages, k)
        per_step = grpo_objective(ratio, step_advantages, regulation.clip_eps)
        kl = T.sum_(T.square(means - group.old_means), axis=1) / (2.0 * sigma * sigma)
        if regulation.kl_beta > 0.0:
            per_step = per_step - regulation.kl_beta * kl
        objectives.append(T.mean(per_step.reshape(batch.size, k), axis=1))
        ratios.append(ratio.data)
        advantages.append(step_advantages)
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


def mdp_grpo_iteration(policy: Denoiser, opt_state: AdamWState, config: TrainConfig,
                       conditions: Sequence[Condition], iteration: int,
                       reward_spec: RewardSpec) -> IterationResult:
    """
    One iteration of the per-step baseline, sharing rollouts and advantages with V-GRPO.

    Raises:
        ConfigurationError: If the sampler is an ODE
    """
    check_stochastic(config)
    if len(conditions) != config.prompts_per_iteration:
        raise ConfigurationError(
            f"iteration needs {config.prompts_per_iteration} prompts, got {len(conditions)}")
    regulation = config.regulation()
    groups = collect_groups(policy, config, regulation, conditions, iteration, reward_spec)
    mdp_groups = attach_old_log_probs(policy, groups, config, iteration)

    steps, incidents = [], []
    for n, indices in enumerate(step_partition(config, iteration)):
        sub_batch = [mdp_groups[i] for i in indices]
        policy, stats, incident = apply_gradient_step(
            policy, opt_state, lambda p: mdp_step_loss(p, sub_batch, regulation, config),
            iteration, n, config.abort_on_nonfinite)
        steps.append(stats)
        if incident is not None:
            incidents.append(incident)

    k = mdp_groups[0].step_indices.shape[0] if mdp_groups else 0
    n_outputs = sum(g.size for g in groups)
    nfe_old = sum(r.nfe for g in groups for r in g.rollouts) + n_outputs * k
    taken = len(steps) - len(incidents)
    nfe_new = taken * config.prompts_per_step * config.group_size * k
    return IterationResult(policy, groups, steps, incidents, nfe_old, nfe_new)
