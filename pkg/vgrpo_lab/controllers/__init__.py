from .experiment_controller import ExperimentController
from .ablation_controller import AblationController, GRIDS

__all__ = [
    'ExperimentController',
    'AblationController',
    'GRIDS'
]
