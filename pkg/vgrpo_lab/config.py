"""
Run configuration for vgrpo_lab.

A JSON file is merged over ``DEFAULT_CONFIG``, environment and command-line
overrides are applied, the result is validated field by field and finally
turned into the frozen dataclasses the services consume.
"""
import copy
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .core.layers import Activation
from .core.optim import OptimizerConfig
from .models.data import GaussianMixture, LabelMode
from .models.rewards import ConditionKind, RewardKind, RewardSpec, RewardTerm
from .models.schedule import PredictionKind, WeightFunction
from .services.grpo import AggregationMode, Algorithm, RegulationPreset, TrainConfig
from .services.pretrainer import PretrainConfig
from .services.samplers import SamplerConfig, SamplerKind
from .services.surrogate import SurrogateConfig, Weighting
from .utils.exceptions import ConfigValidationError, ConfigurationError
from .utils.validators import ConfigValidator

logger = logging.getLogger(__name__)

# Sections a stage may override; everything else is run-wide.
STAGE_SECTIONS = ("rewards", "grpo", "sampler", "surrogate")


class ConfigManager:
    """
    Loads, validates and exposes one run configuration.
    """

    DEFAULT_CONFIG = {
        'run': {
            'output_dir': 'runs/default',
            'seed': 0,
            'resume': None,
        },
        'data': {
            'means': [[-2.0, 0.0], [2.0, 0.0]],
            'stds': [[0.5, 0.5], [0.5, 0.5]],
            'weights': [0.5, 0.5],
        },
        'condition': {
            'kind': 'target_mode',
        },
        'model': {
            'schedule': 'rectified_flow',
            'head': 'v',
            'hidden': [64, 64, 64, 64],
            'activation': 'silu',
            'n_freq': 6,
            'n_labels': None,
        },
        'pretrain': {
            'steps': 8000,
            'batch_size': 256,
            'lr': 2e-3,
            'weight_decay': 0.0,
            'label_mode': 'random',
            'weight_fn': 'uniform',
            'log_every': 500,
            'checkpoint': None,
        },
        'sampler': {
            'kind': 'euler_ode',
            'steps': 16,
            't_max': 1.0,
            't_min': 0.0,
            'noise_level': 0.0,
        },
        'surrogate': {
            'n_mc': 4,
            'weighting': 'adaptive',
            'weight_fn': 'uniform',
            'adaptive_space': 'x',
            'kl_space': 'x',
            'shared_pairs': True,
            'stratified': True,
            'grid_size': 40,
        },
        'grpo': {
            'iterations': 100,
            'steps_per_iteration': 2,
            'prompts_per_step': 4,
            'group_size': 12,
            'preset': 'ratio_clip',
            'clip_eps': None,
            'kl_beta': None,
            'soft_clip_eta': None,
            'aggregation': 'adv_then_avg',
            'lr': 3e-4,
            'weight_decay': 1e-4,
            'abort_on_nonfinite': False,
            'algorithm': 'vgrpo',
            'mdp_timesteps': None,
            'diagnostics_every': 0,
        },
        'rewards': {
            'terms': [{'kind': 'gaussian_bump', 'weight': 1.0, 'center': 0.0, 'scale': 1.0}],
            'bump_width': 1.0,
            'ring_radius': 2.0,
            'floor': 0.0,
            'n_angle_bins': 8,
        },
        'stages': [{'name': 'stage0'}],
        'eval': {
            'conditions': 64,
            'samples_per_condition': 16,
            'steps': 32,
            'p_mix': 1.0,
            'every': 1,
            'reward_threshold': None,
        },
        'diagnostics': {
            'dump_rollouts': False,
            'dump_old_surrogates': False,
        },
    }

    def __init__(self, config_file: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None):
        """
        Args:
            config_file: JSON file merged over the defaults
            overrides: Dot-notation values applied after the file and environment

        Raises:
            ConfigurationError: If the file is missing or is not valid JSON
            ConfigValidationError: If a field fails validation
        """
        self.config_file = config_file
        self._config = copy.deepcopy(self.DEFAULT_CONFIG)
        self._load_config()
        for key, value in (overrides or {}).items():
            if value is not None:
                self.set(key, value)
        self._validate_config()

    def _load_config(self):
        """Load configuration from file and environment variables."""
        if self.config_file:
            if not os.path.exists(self.config_file):
                raise ConfigurationError(f"config file not found: {self.config_file}")
            try:
                with open(self.config_file, 'r') as f:
                    file_config = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"config file {self.config_file} is not valid JSON: {e}")
            if not isinstance(file_config, dict):
                raise ConfigValidationError("top level must be an object", field="<root>")
            self._merge_config(self._config, file_config)
            logger.info(f"Loaded configuration from {self.config_file}")

        self._load_env_config()

    def _load_env_config(self):
        """Only the output directory may come from the environment."""
        env_mappings = {
            'VGRPO_LAB_OUT': ('run', 'output_dir'),
        }

        for env_var, (section, key) in env_mappings.items():
            value = os.getenv(env_var)
            if value:
                self._config[section][key] = self._convert_env_value(value)
                logger.debug(f"Set {section}.{key} = {value} from {env_var}")

    def _convert_env_value(self, value: str) -> Any:
        value = value.strip()
        if value.lower() in ('true', 'false'):
            return value.lower() == 'true'
        return value

    def _merge_config(self, base: Dict, override: Dict):
        """Recursively merge configuration dictionaries; lists are replaced."""
        for key, value in override.items():
            if key in base and isinstance(base[key], dict) and isinstance(value, dict):
                self._merge_config(base[key], value)
            else:
                base[key] = value

    def _stage_sections(self, index: int) -> Dict[str, Dict]:
        """Run-wide sections with stage ``index``'s overrides merged in."""
        stage = self._config['stages'][index]
        merged = {}
        for section in STAGE_SECTIONS:
            merged[section] = copy.deepcopy(self._config[section])
            if isinstance(stage.get(section), dict):
                self._merge_config(merged[section], stage[section])
        return merged

    def _validate_config(self):
        """
        Validate every section, stage overrides included.

        Raises:
            ConfigValidationError: Naming the first offending field
        """
        errors: List[str] = []
        unknown = sorted(set(self._config) - set(self.DEFAULT_CONFIG))
        errors.extend(f"{key}: unknown section" for key in unknown)

        seed = self._config['run'].get('seed')
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            errors.append(f"run.seed: must be a nonnegative integer, got {seed!r}")
        if not isinstance(self._config['run'].get('output_dir'), str):
            errors.append("run.output_dir: must be a path")
        resume = self._config['run'].get('resume')
        if resume is not None and not os.path.exists(str(resume)):
            errors.append(f"run.resume: checkpoint {resume} does not exist")
        if self._config['condition'].get('kind') not in ConfigValidator.CONDITION_KINDS:
            errors.append(f"condition.kind: must be one of {list(ConfigValidator.CONDITION_KINDS)}")

        checks = (
            ConfigValidator.validate_data(self._config['data']),
            ConfigValidator.validate_model(self._config['model']),
            ConfigValidator.validate_pretrain(self._config['pretrain']),
            ConfigValidator.validate_eval(self._config['eval']),
        )
        for _, section_errors in checks:
            errors.extend(section_errors)

        stages = self._config['stages']
        if not isinstance(stages, list) or not stages:
            errors.append("stages: need at least one stage")
        else:
            for i, stage in enumerate(stages):
                if not isinstance(stage, dict):
                    errors.append(f"stages[{i}]: must be an object")
                    continue
                extra = sorted(set(stage) - set(STAGE_SECTIONS) - {'name'})
                errors.extend(f"stages[{i}].{key}: not overridable per stage" for key in extra)
                merged = self._stage_sections(i)
                prefix = f"stages[{i}]"
                for _, section_errors in (
                        ConfigValidator.validate_rewards(merged['rewards'], f"{prefix}.rewards"),
                        ConfigValidator.validate_grpo(merged['grpo'], f"{prefix}.grpo"),
                        ConfigValidator.validate_sampler(merged['sampler'], f"{prefix}.sampler"),
                        ConfigValidator.validate_surrogate(merged['surrogate'], f"{prefix}.surrogate")):
                    errors.extend(section_errors)

        if errors:
            for error in errors:
                logger.error(f"Configuration validation failed: {error}")
            path, _, message = errors[0].partition(": ")
            raise ConfigValidationError(message, field=path)
        logger.info("Configuration validation passed")

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get configuration value using dot notation.

        Args:
            key: Configuration key in dot notation (e.g., 'grpo.group_size')
            default: Default value if key not found
        """
        value = self._config
        try:
            for k in key.split('.'):
                value = value[k]
            return value
        except (KeyError, TypeError):
            return default

    def set(self, key: str, value: Any):
        """Set configuration value using dot notation; call before validation."""
        keys = key.split('.')
        config = self._config
        for k in keys[:-1]:
            if k not in config:
                config[k] = {}
            config = config[k]
        config[keys[-1]] = value
        logger.debug(f"Set configuration {key} = {value}")

    def save(self, file_path: str):
        """Write the resolved configuration as indented JSON with sorted keys."""
        directory = os.path.dirname(file_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(file_path, 'w') as f:
            json.dump(self._config, f, indent=2, sort_keys=True)
            f.write('\n')
        logger.info(f"Configuration saved to {file_path}")

    def get_all(self) -> Dict[str, Any]:
        """Deep copy of the resolved configuration."""
        return copy.deepcopy(self._config)

    def run_config(self) -> "RunConfig":
        """Typed view of the validated configuration."""
        return build_run_config(self._config, [self._stage_sections(i) for i in range(len(self._config['stages']))])


@dataclass(frozen=True)
class ModelConfig:
    hidden: Tuple[int, ...] = (64, 64, 64, 64)
    activation: Activation = Activation.SILU
    head: PredictionKind = PredictionKind.V_PRED
    n_freq: int = 6
    n_labels: int = 2
    schedule: str = "rectified_flow"


@dataclass(frozen=True)
class EvalConfig:
    """
    Held-out evaluation settings.

    Attributes:
        conditions: Held-out condition labels drawn from their own seed stream
        samples_per_condition: Generations per condition
        steps: Euler steps of the evaluation sampler
        p_mix: Share of steps taken by the trained policy; the base model finishes the rest
        every: Evaluate every this many iterations (0 = only before and after each stage)
        reward_threshold: Held-out mean reward for the steps-to-threshold statistic
            (None = 30% relative improvement over the pre-training held-out reward)
    """
    conditions: int = 64
    samples_per_condition: int = 16
    steps: int = 32
    p_mix: float = 1.0
    every: int = 1
    reward_threshold: Optional[float] = None

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(kind=SamplerKind.EULER_ODE, steps=self.steps, p_mix=self.p_mix)


@dataclass(frozen=True)
class DiagnosticsConfig:
    dump_rollouts: bool = False
    dump_old_surrogates: bool = False


@dataclass(frozen=True)
class StageConfig:
    """One curriculum stage: its reward functions and training settings."""
    name: str
    reward_spec: RewardSpec
    train: TrainConfig


@dataclass(frozen=True)
class RunConfig:
    """
    Everything a pretrain / posttrain / eval run needs.

    Attributes:
        output_dir: Run directory
        seed: Global seed
        resume: Policy checkpoint to start post-training from
        base_checkpoint: Where the pretrained model is read from and written to
        data: Target mixture
        condition_kind: How labels map to reward targets
        model: Denoiser architecture
        pretrain: Pretraining settings
        stages: Post-training curriculum, at least one stage
        eval: Held-out evaluation settings
        diagnostics: Optional dumps
    """
    output_dir: str
    seed: int
    resume: Optional[str]
    base_checkpoint: str
    data: GaussianMixture
    condition_kind: ConditionKind
    model: ModelConfig
    pretrain: PretrainConfig
    stages: Tuple[StageConfig, ...]
    eval: EvalConfig = field(default_factory=EvalConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)

    def __post_init__(self):
        if not self.stages:
            raise ConfigurationError("a run needs at least one stage")
        if self.resume is not None and not os.path.exists(self.resume):
            raise ConfigurationError(f"resume checkpoint {self.resume} does not exist")


def reward_spec_from_dict(section: Dict) -> RewardSpec:
    terms = tuple(
        RewardTerm(RewardKind(term['kind']), weight=float(term.get('weight', 1.0)),
                   center=float(term.get('center', 0.0)), scale=float(term.get('scale', 1.0)))
        for term in section['terms'])
    return RewardSpec(terms=terms, bump_width=float(section['bump_width']),
                      ring_radius=float(section['ring_radius']), floor=float(section['floor']),
                      n_angle_bins=int(section['n_angle_bins']))


def sampler_from_dict(section: Dict) -> SamplerConfig:
    return SamplerConfig(kind=SamplerKind(section['kind']), steps=int(section['steps']),
                         t_max=float(section['t_max']), t_min=float(section['t_min']),
                         noise_level=float(section['noise_level']))


def surrogate_from_dict(section: Dict) -> SurrogateConfig:
    return SurrogateConfig(n_mc=int(section['n_mc']), weighting=Weighting(section['weighting']),
                           weight_fn=WeightFunction(section['weight_fn']),
                           adaptive_space=PredictionKind(section['adaptive_space']),
                           kl_space=PredictionKind(section['kl_space']),
                           shared_pairs=bool(section['shared_pairs']), stratified=bool(section['stratified']),
                           grid_size=int(section['grid_size']))


def train_from_sections(sections: Dict[str, Dict], seed: int) -> TrainConfig:
    grpo = sections['grpo']
    return TrainConfig(
        iterations=int(grpo['iterations']),
        steps_per_iteration=int(grpo['steps_per_iteration']),
        prompts_per_step=int(grpo['prompts_per_step']),
        group_size=int(grpo['group_size']),
        preset=RegulationPreset(grpo['preset']),
        clip_eps=grpo.get('clip_eps'),
        kl_beta=grpo.get('kl_beta'),
        soft_clip_eta=grpo.get('soft_clip_eta'),
        aggregation=AggregationMode(grpo['aggregation']),
        sampler=sampler_from_dict(sections['sampler']),
        surrogate=surrogate_from_dict(sections['surrogate']),
        optimizer=OptimizerConfig(lr=float(grpo['lr']), weight_decay=float(grpo['weight_decay'])),
        seed=seed,
        abort_on_nonfinite=bool(grpo['abort_on_nonfinite']),
        algorithm=Algorithm(grpo['algorithm']),
        mdp_timesteps=grpo.get('mdp_timesteps'),
        diagnostics_every=int(grpo['diagnostics_every']),
    )


def label_count(kind: ConditionKind, mixture: GaussianMixture, reward_spec: RewardSpec) -> int:
    """Size of the label vocabulary implied by the condition kind."""
    if kind is ConditionKind.TARGET_MODE:
        return mixture.n_components
    if kind is ConditionKind.TARGET_ANGLE:
        return reward_spec.n_angle_bins
    return 1


def build_run_config(raw: Dict[str, Any], stage_sections: List[Dict[str, Dict]]) -> RunConfig:
    """
    Typed run configuration from a validated raw dict.

    Raises:
        ConfigValidationError: If ``model.n_labels`` disagrees with the condition kind
    """
    run = raw['run']
    seed = int(run['seed'])
    data = raw['data']
    mixture = GaussianMixture(np.asarray(data['means'], dtype=np.float64),
                              np.asarray(data['stds'], dtype=np.float64),
                              np.asarray(data['weights'], dtype=np.float64))
    condition_kind = ConditionKind(raw['condition']['kind'])

    stages = []
    for i, sections in enumerate(stage_sections):
        name = raw['stages'][i].get('name') or f"stage{i}"
        stages.append(StageConfig(str(name), reward_spec_from_dict(sections['rewards']),
                                  train_from_sections(sections, seed)))

    expected = label_count(condition_kind, mixture, stages[0].reward_spec)
    model = raw['model']
    n_labels = expected if model.get('n_labels') is None else int(model['n_labels'])
    if n_labels != expected:
        raise ConfigValidationError(f"{condition_kind.value} conditions need {expected} labels, got {n_labels}",
                                    field="model.n_labels")

    pretrain = raw['pretrain']
    output_dir = str(run['output_dir'])
    return RunConfig(
        output_dir=output_dir,
        seed=seed,
        resume=run.get('resume'),
        base_checkpoint=pretrain.get('checkpoint') or os.path.join(output_dir, 'checkpoints', 'base.ckpt'),
        data=mixture,
        condition_kind=condition_kind,
        model=ModelConfig(hidden=tuple(int(w) for w in model['hidden']), activation=Activation(model['activation']),
                          head=PredictionKind(model['head']), n_freq=int(model['n_freq']), n_labels=n_labels,
                          schedule=str(model['schedule'])),
        pretrain=PretrainConfig(
            steps=int(pretrain['steps']), batch_size=int(pretrain['batch_size']),
            label_mode=LabelMode(pretrain['label_mode']), weight_fn=WeightFunction(pretrain['weight_fn']),
            optimizer=OptimizerConfig(lr=float(pretrain['lr']), weight_decay=float(pretrain['weight_decay'])),
            log_every=int(pretrain['log_every'])),
        stages=tuple(stages),
        eval=EvalConfig(**{k: raw['eval'][k] for k in ('conditions', 'samples_per_condition', 'steps', 'p_mix',
                                                        'every', 'reward_threshold')}),
        diagnostics=DiagnosticsConfig(dump_rollouts=bool(raw['diagnostics']['dump_rollouts']),
                                      dump_old_surrogates=bool(raw['diagnostics']['dump_old_surrogates'])),
    )
