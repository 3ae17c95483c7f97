from .schedule import PredictionKind, Schedule, WeightFunction, convert_prediction, interpolate
from .denoiser import Denoiser, build_denoiser, pretrain_loss
from .data import GaussianMixture, LabelMode, energy_distance, sample_mixture
from .rewards import Condition, ConditionKind, RewardKind, RewardSpec, RewardTerm, evaluate, make_condition

__all__ = [
    'PredictionKind',
    'Schedule',
    'WeightFunction',
    'convert_prediction',
    'interpolate',
    'Denoiser',
    'build_denoiser',
    'pretrain_loss',
    'GaussianMixture',
    'LabelMode',
    'energy_distance',
    'sample_mixture',
    'Condition',
    'ConditionKind',
    'RewardKind',
    'RewardSpec',
    'RewardTerm',
    'evaluate',
    'make_condition'
]
