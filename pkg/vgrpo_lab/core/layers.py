"""
Multilayer perceptron parameters and forward pass.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..utils.exceptions import ConfigurationError, NumericalError
from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)


class Activation(Enum):
    """Hidden-layer nonlinearity."""
    TANH = "tanh"
    SILU = "silu"


@dataclass(frozen=True)
class MlpParams:
    """
    Weights and biases of a fully connected network.

    ``widths`` lists every layer width including input and output, so layer k maps
    ``widths[k]`` to ``widths[k + 1]``.
    """
    weights: Tuple[Tensor, ...]
    biases: Tuple[Tensor, ...]
    widths: Tuple[int, ...]
    activation: Activation = Activation.SILU

    def __post_init__(self):
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(self.weights):
            raise ConfigurationError(
                f"{len(self.weights)} weight tensors do not match widths {self.widths}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.widths[k], self.widths[k + 1])
            if w.shape != expected or b.shape != (self.widths[k + 1],):
                raise ConfigurationError(
                    f"layer {k} has weight {w.shape} / bias {b.shape}, expected {expected}")

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    def named_tensors(self) -> List[Tuple[str, Tensor]]:
        """Parameters in a fixed order, named ``layers.<k>.weight|bias``."""
        named = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            named.append((f"layers.{k}.weight", w))
            named.append((f"layers.{k}.bias", b))
        return named

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_tensors())

    def replace(self, arrays: Dict[str, np.ndarray]) -> "MlpParams":
        """New parameters built from named arrays (missing names keep their values)."""
        weights, biases = [], []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            weights.append(Tensor(arrays.get(f"layers.{k}.weight", w.data), requires_grad=True))
            biases.append(Tensor(arrays.get(f"layers.{k}.bias", b.data), requires_grad=True))
        return MlpParams(tuple(weights), tuple(biases), self.widths, self.activation)

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], activation: Activation) -> "MlpParams":
        """Rebuild parameters from ``layers.<k>.weight|bias`` arrays."""
        n_layers = len([name for name in arrays if name.endswith(".weight")])
        if n_layers == 0:
            raise ConfigurationError("no weight tensors supplied")
        weights, biases = [], []
        widths = [int(np.shape(arrays["layers.0.weight"])[0])]
        for k in range(n_layers):
            try:
                w = arrays[f"layers.{k}.weight"]
                b = arrays[f"layers.{k}.bias"]
            except KeyError as e:
                raise ConfigurationError(f"missing parameter {e}")
            weights.append(Tensor(w, requires_grad=True))
            biases.append(Tensor(b, requires_grad=True))
            widths.append(int(np.shape(w)[1]))
        return cls(tuple(weights), tuple(biases), tuple(widths), activation)


def init_mlp(widths: Sequence[int], activation: Activation, rng: np.random.Generator,
             output_scale: float = 1.0) -> MlpParams:
    """
    Glorot-normal initialization with zero biases.

    Args:
        widths: Layer widths including input and output
        activation: Hidden nonlinearity
        rng: Random generator
        output_scale: Multiplier on the last layer's weights

    Returns:
        MlpParams: Freshly initialized parameters
    """
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or any(w <= 0 for w in widths):
        raise ConfigurationError(f"invalid layer widths {widths}")
    weights, biases = [], []
    for k in range(len(widths) - 1):
        fan_in, fan_out = widths[k], widths[k + 1]
        std = np.sqrt(2.0 / (fan_in + fan_out))
        w = rng.standard_normal((fan_in, fan_out)) * std
        if k == len(widths) - 2:
            w = w * output_scale
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    params = MlpParams(tuple(weights), tuple(biases), widths, activation)
    logger.debug(f"Initialized MLP {widths} with {params.parameter_count()} parameters")
    return params


def _activate(x: Tensor, activation: Activation) -> Tensor:
    if activation is Activation.TANH:
        return T.tanh(x)
    return T.silu(x)


def forward(params: MlpParams, inputs: Tensor) -> Tensor:
    """
    Evaluate the network on a batch.

    Args:
        params: Network parameters
        inputs: Tensor of shape (batch, input_width)

    Returns:
        Tensor: Output of shape (batch, output_width); recorded on the tape when
        any parameter or input requires gradients

    Raises:
        ConfigurationError: If the input width does not match the first layer
    """
    inputs = T.as_tensor(inputs)
    if inputs.ndim != 2 or inputs.shape[1] != params.input_width:
        raise ConfigurationError(
            f"input of shape {inputs.shape} does not match first layer width {params.input_width}")
    h = inputs
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if k < last:
            h = _activate(h, params.activation)
    return h


def gradients_by_name(params: MlpParams, grads: Dict[Tensor, np.ndarray]) -> Dict[str, np.ndarray]:
    """Name the gradient map returned by ``backward``; unreached tensors get zeros."""
    named = {}
    for name, t in params.named_tensors():
        g = grads.get(t)
        named[name] = np.zeros_like(t.data) if g is None else g
    return named


def global_norm(named_grads: Dict[str, np.ndarray]) -> float:
    """L2 norm over all gradient entries."""
    total = sum(float(np.sum(g * g)) for g in named_grads.values())
    return float(np.sqrt(total))


def check_finite_gradients(named_grads: Dict[str, np.ndarray]):
    """Raise ``NumericalError`` naming the first non-finite gradient."""
    for name, g in named_grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {name}", quantity=name)
