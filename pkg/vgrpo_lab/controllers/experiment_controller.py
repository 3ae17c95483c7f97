"""
Experiment orchestration: pretraining, staged post-training and evaluation.

Every run directory holds the resolved ``config.json``, ``metrics.csv``, a
``timing.csv`` sidecar with wall-clock per iteration, checkpoints under
``checkpoints/`` and a ``summary.json``.
"""
import json
import logging
import math
import os
import time
from dataclasses import asdict
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config import ConfigManager, RunConfig
from ..core.checkpoint import load_params, save_params
from ..models.data import energy_distance, heldout_conditions, sample_mixture
from ..models.denoiser import Denoiser, build_denoiser
from ..models.rewards import Condition, ConditionKind, RewardSpec, evaluate_batch, make_condition, total_reward
from ..oracle import (GaussianProblem, check_surrogate_fidelity, pretrain_loss_floor, sampler_order_ratios,
                      trained_surrogate_fidelity)
from ..services.grpo import Algorithm, IterationResult, iteration_conditions, vgrpo_iteration
from ..services.mdp_baseline import mdp_grpo_iteration
from ..services.pretrainer import pretrain
from ..services.samplers import SamplerConfig, SamplerKind, final_outputs, mixed_policy_sample, sample_batch
from ..utils.exceptions import ConfigurationError, UsageError
from ..utils.metrics import (METRICS_SCHEMA_VERSION, MetricsRow, MetricsWriter, collapse_events, gradnorm_fit,
                             metrics_header, steps_to_threshold, summarize, surrogate_statistics)
from ..utils.seeding import Stream, derive_rng, derive_seed

logger = logging.getLogger(__name__)

TIMING_HEADER = ("stage", "iteration", "seconds")
ENERGY_SAMPLES = 2048
ENERGY_STEPS = 32
DEFAULT_RELATIVE_IMPROVEMENT = 0.3


def _jsonable(value):
    """Replace non-finite floats so summaries stay strict JSON."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_json(path: str, payload: Dict):
    with open(path, "w") as f:
        json.dump(_jsonable(payload), f, indent=2, sort_keys=True)
        f.write("\n")


def _finite_mean(values: Sequence[float]) -> Optional[float]:
    finite = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(finite)) if finite else None


def resolve_threshold(configured: Optional[float], initial: float) -> float:
    """Configured steps-to-threshold target, or a 30% relative improvement over ``initial``."""
    if configured is not None:
        return float(configured)
    return initial + DEFAULT_RELATIVE_IMPROVEMENT * abs(initial)


class ExperimentController:
    """
    Runs the pretrain, posttrain and eval commands for one run directory.
    """

    def __init__(self, config_manager: ConfigManager):
        """
        Args:
            config_manager: Validated configuration; its typed view drives the run
        """
        self.config_manager = config_manager
        self.config: RunConfig = config_manager.run_config()
        self.run_dir = self.config.output_dir
        self.checkpoint_dir = os.path.join(self.run_dir, "checkpoints")
        self.callbacks: List[Callable[[int, IterationResult, MetricsRow], None]] = []

    def register_callback(self, callback: Callable[[int, IterationResult, MetricsRow], None]):
        """
        Register a callback invoked after every post-training iteration.

        Args:
            callback: Function taking (global iteration, iteration result, metrics row)
        """
        self.callbacks.append(callback)
        logger.debug(f"Registered iteration callback: {getattr(callback, '__name__', callback)}")

    def _notify_callbacks(self, iteration: int, result: IterationResult, row: MetricsRow):
        for callback in self.callbacks:
            try:
                callback(iteration, result, row)
            except Exception as e:
                logger.error(f"Error in iteration callback: {str(e)}")

    def _prepare_run_dir(self):
        os.makedirs(self.checkpoint_dir, exist_ok=True)
        self.config_manager.save(os.path.join(self.run_dir, "config.json"))

    # Models and checkpoints

    def build_model(self) -> Denoiser:
        """Freshly initialized denoiser for the configured architecture."""
        model = self.config.model
        return build_denoiser(self.config.data.dim, model.n_labels, list(model.hidden), model.activation,
                              model.head, model.n_freq, self.config.seed)

    def load_model(self, path: str) -> Denoiser:
        """
        Raises:
            ConfigurationError: If the checkpoint is missing or does not fit the architecture
        """
        params = load_params(path, self.config.model.activation)
        return self.build_model().with_params(params)

    def save_model(self, model: Denoiser, path: str):
        save_params(path, model.params)

    # Evaluation

    def label_pool(self, reward_spec: RewardSpec) -> List[Condition]:
        """One condition per label; prompts are drawn from this pool."""
        return [make_condition(self.config.condition_kind, label, self.config.data.means, reward_spec)
                for label in range(self.config.model.n_labels)]

    def heldout_samples(self, policy: Denoiser, reference: Denoiser) -> Tuple[np.ndarray, np.ndarray]:
        """
        (labels, outputs) of the held-out generations in condition-major order.

        The label set and per-sample seeds come from the HELDOUT stream, disjoint
        from every training draw; the same samples are produced for every policy.
        """
        evaluation = self.config.eval
        labels = heldout_conditions(self.config.model.n_labels, evaluation.conditions, self.config.seed)
        repeated = np.repeat(labels, evaluation.samples_per_condition)
        seeds = [derive_seed(self.config.seed, Stream.HELDOUT, i, j)
                 for i in range(evaluation.conditions) for j in range(evaluation.samples_per_condition)]
        sampler = evaluation.sampler()
        if sampler.p_mix < 1.0:
            records = mixed_policy_sample(policy, reference, repeated, seeds, sampler)
        else:
            records = sample_batch(policy, repeated, seeds, sampler)
        return repeated, final_outputs(records)

    def evaluate_heldout(self, policy: Denoiser, reference: Denoiser,
                         reward_spec: RewardSpec) -> np.ndarray:
        """Raw held-out rewards (terms, samples)."""
        labels, outputs = self.heldout_samples(policy, reference)
        pool = self.label_pool(reward_spec)
        raw, flags = evaluate_batch(outputs, [pool[int(label)] for label in labels], reward_spec)
        if np.any(flags):
            logger.warning(f"Held-out evaluation: {int(flags.sum())} non-finite generations")
        return raw

    def sample_quality(self, policy: Denoiser) -> float:
        """Energy distance between Euler generations and fresh target samples."""
        rng = derive_rng(self.config.seed, Stream.DIAGNOSTICS, 2)
        target, components = sample_mixture(self.config.data, ENERGY_SAMPLES, rng)
        if self.config.condition_kind is ConditionKind.TARGET_MODE:
            labels = components % self.config.model.n_labels
        else:
            labels = rng.integers(0, self.config.model.n_labels, size=ENERGY_SAMPLES)
        seeds = [derive_seed(self.config.seed, Stream.DIAGNOSTICS, 3, i) for i in range(ENERGY_SAMPLES)]
        records = sample_batch(policy, labels, seeds, SamplerConfig(kind=SamplerKind.EULER_ODE, steps=ENERGY_STEPS))
        return energy_distance(final_outputs(records), target)

    # Commands

    def run_pretrain(self) -> Denoiser:
        """
        Train the base model and write it to the base checkpoint.

        Returns:
            Denoiser: The pretrained model
        """
        self._prepare_run_dir()
        logger.info(f"Starting pretraining in {self.run_dir}")
        result = pretrain(self.build_model(), self.config.data, self.config.pretrain, self.config.seed)
        self.save_model(result.denoiser, self.config.base_checkpoint)

        with open(os.path.join(self.run_dir, "pretrain_losses.csv"), "w") as f:
            f.write("step,loss\n")
            for step, loss in enumerate(result.losses):
                f.write(f"{step},{loss:.12g}\n")
        MetricsWriter(os.path.join(self.run_dir, "metrics.csv"), metrics_header(self.config.stages[0].reward_spec.names))

        quality = self.sample_quality(result.denoiser)
        tail = result.losses[-min(len(result.losses), 100):]
        write_json(os.path.join(self.run_dir, "summary.json"), {
            "metrics_schema": METRICS_SCHEMA_VERSION,
            "command": "pretrain",
            "seed": self.config.seed,
            "parameters": result.denoiser.params.parameter_count(),
            "steps": self.config.pretrain.steps,
            "final_loss": _finite_mean(tail),
            "energy_distance": quality,
            "checkpoint": self.config.base_checkpoint,
        })
        logger.info(f"Pretraining finished: energy distance {quality:.4f}")
        return result.denoiser

    def _starting_models(self):
        """(policy, reference): resume or base checkpoint, pretraining first if neither exists."""
        if os.path.exists(self.config.base_checkpoint):
            base = self.load_model(self.config.base_checkpoint)
        elif self.config.resume is None:
            logger.info(f"No base checkpoint at {self.config.base_checkpoint}; pretraining first")
            base = self.run_pretrain()
        else:
            base = None
        policy = self.load_model(self.config.resume) if self.config.resume else base
        return policy, base if base is not None else policy

    def _reward_columns(self, split: str, raw: np.ndarray, spec: RewardSpec) -> Dict[str, float]:
        values = {}
        mean, low, high = summarize(total_reward(raw, spec))
        values.update({f"{split}_reward_mean": mean, f"{split}_reward_min": low, f"{split}_reward_max": high})
        for k, name in enumerate(spec.names):
            mean, low, high = summarize(raw[k])
            values.update({f"{split}_{name}_mean": mean, f"{split}_{name}_min": low, f"{split}_{name}_max": high})
        return values

    def _iteration_row(self, stage_index: int, iteration: int, result: IterationResult,
                       spec: RewardSpec) -> MetricsRow:
        values = self._reward_columns("train", result.train_rewards, spec)
        surrogates = result.old_surrogates
        if len(surrogates) >= 2:
            try:
                statistics = surrogate_statistics(surrogates)
                values.update({"surrogate_mean": statistics["mean"], "surrogate_cv": statistics["cv"],
                               "within_group_cv": statistics["within_group_cv"]})
            except UsageError as e:
                logger.debug(f"Surrogate statistics skipped: {e.message}")
        taken = [s for s in result.steps if math.isfinite(s.grad_norm)]
        values.update({
            "grad_norm": _finite_mean([s.grad_norm for s in taken]),
            "clip_fraction": _finite_mean([s.clip_fraction for s in taken]),
            "kl": _finite_mean([s.kl for s in taken]),
            "nfe_old": result.nfe_old,
            "nfe_new": result.nfe_new,
            "incidents": len(result.incidents),
            "degenerate_pairs": result.degenerate_pairs,
        })
        return MetricsRow(stage_index, iteration, values)

    def _dump_diagnostics(self, iteration: int, result: IterationResult):
        diagnostics = self.config.diagnostics
        if diagnostics.dump_rollouts:
            directory = os.path.join(self.run_dir, "rollouts")
            os.makedirs(directory, exist_ok=True)
            write_json(os.path.join(directory, f"iter_{iteration:04d}.json"), {
                "iteration": iteration,
                "groups": [{"prompt": g.prompt_index, "label": g.condition.label,
                            "rewards": g.rewards.tolist(), "advantages": g.advantages.tolist(),
                            "rollouts": [r.to_dict() for r in g.rollouts]} for g in result.groups],
            })
        if diagnostics.dump_old_surrogates and result.old_surrogates:
            directory = os.path.join(self.run_dir, "old_surrogates")
            os.makedirs(directory, exist_ok=True)
            write_json(os.path.join(directory, f"iter_{iteration:04d}.json"), {
                "iteration": iteration,
                "groups": [dict(g.old.to_dict(), prompt=g.prompt_index) for g in result.groups if g.old is not None],
            })

    def run_posttrain(self) -> Dict:
        """
        Execute every stage, writing metrics, timing, per-stage checkpoints and the summary.

        Returns:
            Dict: The summary written to summary.json
        """
        self._prepare_run_dir()
        policy, reference = self._starting_models()
        stages = self.config.stages
        names: List[str] = []
        for stage in stages:
            names.extend(n for n in stage.reward_spec.names if n not in names)
        metrics = MetricsWriter(os.path.join(self.run_dir, "metrics.csv"), metrics_header(names))
        timing = MetricsWriter(os.path.join(self.run_dir, "timing.csv"), TIMING_HEADER)
        gradnorm_path = os.path.join(self.run_dir, "gradnorm_pairs.csv")

        initial = float(np.mean(total_reward(self.evaluate_heldout(policy, reference, stages[0].reward_spec),
                                             stages[0].reward_spec)))
        logger.info(f"Held-out reward before post-training: {initial:.4f}")
        curve, curve_steps = [initial], [0]
        incidents, within_cvs, magnitudes, norms = [], [], [], []
        nfe_old = nfe_new = 0
        gradient_steps = 0
        stage_summaries = []
        iteration = 0

        for stage_index, stage in enumerate(stages):
            train = stage.train
            logger.info(f"Stage {stage_index} ({stage.name}): {train.iterations} iterations, "
                        f"{train.algorithm.value}, preset {train.preset.value}")
            opt_state = train.optimizer.create_state(policy.params)
            pool = self.label_pool(stage.reward_spec)
            for m in range(train.iterations):
                started = time.perf_counter()
                prompts = iteration_conditions(pool, train, iteration)
                if train.algorithm is Algorithm.MDP:
                    result = mdp_grpo_iteration(policy, opt_state, train, prompts, iteration, stage.reward_spec)
                else:
                    result = vgrpo_iteration(policy, opt_state, train, prompts, iteration, stage.reward_spec)
                policy = result.policy
                gradient_steps += len(result.steps) - len(result.incidents)
                nfe_old += result.nfe_old
                nfe_new += result.nfe_new
                incidents.extend(asdict(i) for i in result.incidents)

                row = self._iteration_row(stage_index, iteration, result, stage.reward_spec)
                every = self.config.eval.every
                if (every and (m + 1) % every == 0) or m == train.iterations - 1:
                    raw = self.evaluate_heldout(policy, reference, stage.reward_spec)
                    row.values.update(self._reward_columns("heldout", raw, stage.reward_spec))
                    curve.append(row.values["heldout_reward_mean"])
                    curve_steps.append(gradient_steps)
                if row.values.get("within_group_cv") is not None:
                    within_cvs.append(row.values["within_group_cv"])
                metrics.append(row)
                timing.append(MetricsRow(stage_index, iteration, {"seconds": time.perf_counter() - started}))

                if result.gradnorm_pairs is not None:
                    new_file = not os.path.exists(gradnorm_path)
                    with open(gradnorm_path, "a") as f:
                        if new_file:
                            f.write("stage,iteration,surrogate,grad_norm\n")
                        for x, y in zip(*result.gradnorm_pairs):
                            f.write(f"{stage_index},{iteration},{x:.12g},{y:.12g}\n")
                    magnitudes.append(result.gradnorm_pairs[0])
                    norms.append(result.gradnorm_pairs[1])
                self._dump_diagnostics(iteration, result)
                self._notify_callbacks(iteration, result, row)
                logger.info(f"Iteration {iteration}: train reward {row.values['train_reward_mean']:.4f}, "
                            f"{len(result.incidents)} incidents")
                iteration += 1

            path = os.path.join(self.checkpoint_dir, f"stage{stage_index}_{stage.name}.ckpt")
            self.save_model(policy, path)
            stage_summaries.append({"name": stage.name, "iterations": train.iterations, "checkpoint": path})

        final_path = os.path.join(self.checkpoint_dir, "final.ckpt")
        self.save_model(policy, final_path)

        gradnorm_r2 = None
        if magnitudes:
            try:
                gradnorm_r2 = gradnorm_fit(np.concatenate(magnitudes), np.concatenate(norms))
            except UsageError as e:
                logger.warning(f"Gradient-norm fit skipped: {e.message}")
        threshold = resolve_threshold(self.config.eval.reward_threshold, initial)
        final = curve[-1]
        summary = {
            "metrics_schema": METRICS_SCHEMA_VERSION,
            "command": "posttrain",
            "seed": self.config.seed,
            "algorithm": [stage.train.algorithm.value for stage in stages],
            "stages": stage_summaries,
            "iterations": iteration,
            "gradient_steps": gradient_steps,
            "initial_heldout_reward": initial,
            "final_heldout_reward": final,
            "relative_improvement": (final - initial) / abs(initial) if initial else None,
            "heldout_curve": curve,
            "heldout_curve_steps": curve_steps,
            "collapse_events": collapse_events(curve),
            "reward_threshold": threshold,
            "steps_to_threshold": steps_to_threshold(curve, curve_steps, threshold),
            "mean_within_group_cv": _finite_mean(within_cvs),
            "incidents": incidents,
            "nfe_old_total": nfe_old,
            "nfe_new_total": nfe_new,
            "gradnorm_r2": gradnorm_r2,
            "checkpoint": final_path,
        }
        write_json(os.path.join(self.run_dir, "summary.json"), summary)
        logger.info(f"Post-training finished: held-out reward {initial:.4f} -> {final:.4f}")
        return summary

    def run_eval(self, oracle: bool = False) -> Dict:
        """
        Held-out rewards of the resumed, final or base checkpoint; optionally the analytic oracle checks.

        Raises:
            ConfigurationError: If no checkpoint is available
        """
        os.makedirs(self.run_dir, exist_ok=True)
        final_path = os.path.join(self.checkpoint_dir, "final.ckpt")
        candidates = [self.config.resume, final_path, self.config.base_checkpoint]
        path = next((p for p in candidates if p and os.path.exists(p)), None)
        if path is None:
            raise ConfigurationError(f"nothing to evaluate: no checkpoint among {[p for p in candidates if p]}")
        policy = self.load_model(path)
        reference = self.load_model(self.config.base_checkpoint) if os.path.exists(
            self.config.base_checkpoint) else policy

        results = {"metrics_schema": METRICS_SCHEMA_VERSION, "command": "eval", "checkpoint": path, "stages": []}
        for stage in self.config.stages:
            raw = self.evaluate_heldout(policy, reference, stage.reward_spec)
            results["stages"].append(dict(self._reward_columns("heldout", raw, stage.reward_spec), name=stage.name))
        results["energy_distance"] = self.sample_quality(policy)
        write_json(os.path.join(self.run_dir, "eval.json"), results)

        if oracle:
            results["oracle"] = self.run_oracle(policy)
        logger.info(f"Evaluation of {path} finished")
        return results

    def run_oracle(self, policy: Optional[Denoiser] = None) -> Dict:
        """
        Analytic checks on a Gaussian shaped like the first mixture component; writes oracle.json.

        With a policy, also reports its surrogate/log-density ranking correlation on the full mixture.
        """
        problem = GaussianProblem(self.config.data.means[0], self.config.data.stds[0])
        report = {
            "problem": {"mean": problem.mean.tolist(), "std": problem.std.tolist()},
            "surrogate_fidelity_spearman": check_surrogate_fidelity(problem, seed=self.config.seed),
            "pretrain_loss_floor": pretrain_loss_floor(problem, self.config.model.head),
            "sampler_order_ratios": {kind.value: sampler_order_ratios(kind, seed=self.config.seed)
                                     for kind in (SamplerKind.EULER_ODE, SamplerKind.SECOND_ORDER_ODE)},
        }
        if policy is not None:
            report["trained_fidelity"] = trained_surrogate_fidelity(policy, self.config.data, seed=self.config.seed)
        write_json(os.path.join(self.run_dir, "oracle.json"), report)
        return report
