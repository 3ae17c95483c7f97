from .tensor import Tensor, backward, no_grad, private_tape, stop_gradient
from .layers import Activation, MlpParams, forward, init_mlp
from .optim import AdamWState, OptimizerConfig, adamw_step
from .checkpoint import load_params, save_params

__all__ = [
    'Tensor',
    'backward',
    'no_grad',
    'private_tape',
    'stop_gradient',
    'Activation',
    'MlpParams',
    'forward',
    'init_mlp',
    'AdamWState',
    'OptimizerConfig',
    'adamw_step',
    'load_params',
    'save_params'
]
