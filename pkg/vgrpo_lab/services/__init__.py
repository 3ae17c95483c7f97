from .samplers import RolloutRecord, SamplerConfig, SamplerKind, mixed_policy_sample, sample, sample_batch
from .surrogate import SurrogateConfig, Weighting, estimate_surrogate, importance_ratio, kl_simple
from .grpo import RegulationPreset, TrainConfig, group_advantages, soft_clip, vgrpo_iteration
from .mdp_baseline import mdp_grpo_iteration
from .pretrainer import PretrainConfig, pretrain

__all__ = [
    'RolloutRecord',
    'SamplerConfig',
    'SamplerKind',
    'mixed_policy_sample',
    'sample',
    'sample_batch',
    'SurrogateConfig',
    'Weighting',
    'estimate_surrogate',
    'importance_ratio',
    'kl_simple',
    'RegulationPreset',
    'TrainConfig',
    'group_advantages',
    'soft_clip',
    'vgrpo_iteration',
    'mdp_grpo_iteration',
    'PretrainConfig',
    'pretrain'
]
