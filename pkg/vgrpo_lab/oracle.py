"""
Ground-truth machinery for validating the rest of the package.

Everything here is a straight-line re-derivation: closed-form Gaussian
rectified-flow quantities, analytic ODE solutions, central finite differences
and exact per-step log-densities. None of it records on the autodiff tape.

For a Gaussian target x ~ N(μ, diag σ0²) and eps ~ N(0, I), the latent
z_t = (1-t) x + t eps has mean m_t = (1-t) μ and variance
s_t² = (1-t)² σ0² + t² per coordinate, and
    E[x | z_t]   = μ + (1-t) σ0² / s_t² · (z_t - m_t)
    E[eps | z_t] = t / s_t² · (z_t - m_t)
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from scipy import integrate, linalg, stats

from .core import tensor as T
from .core.tensor import Tensor, no_grad
from .models.data import GaussianMixture, mixture_logpdf
from .models.schedule import PredictionKind, Schedule, WeightFunction
from .services.samplers import RolloutRecord, SamplerConfig, SamplerKind, sde_step, second_order_step
from .services.surrogate import SurrogateConfig, Weighting, draw_uniform_pairs, estimate_surrogate
from .utils.exceptions import ConfigurationError, NumericalError, SingularityError
from .utils.seeding import Stream, derive_rng, derive_seed

logger = logging.getLogger(__name__)

ParamsLike = Union[np.ndarray, Dict[str, np.ndarray]]


def finite_diff_gradient(function: Callable[[ParamsLike], float], params: ParamsLike,
                         step: float = 1e-5) -> ParamsLike:
    """
    Central differences (f(p + h e_k) - f(p - h e_k)) / 2h for every coordinate.

    ``params`` is an array or a dict of arrays; the result has the same structure.
    """
    if isinstance(params, dict):
        base = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
        gradient = {}
        for name in base:
            def partial(value, name=name):
                shifted = dict(base)
                shifted[name] = value
                return function(shifted)
            gradient[name] = finite_diff_gradient(partial, base[name], step)
        return gradient

    point = np.array(params, dtype=np.float64)
    gradient = np.zeros_like(point)
    flat = point.reshape(-1)
    grad_flat = gradient.reshape(-1)
    for k in range(flat.size):
        original = flat[k]
        flat[k] = original + step
        upper = function(point.copy())
        flat[k] = original - step
        lower = function(point.copy())
        flat[k] = original
        grad_flat[k] = (upper - lower) / (2.0 * step)
    return gradient


@dataclass(frozen=True)
class GaussianProblem:
    """Diagonal Gaussian target with a standard-normal prior."""
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        std = np.broadcast_to(np.asarray(self.std, dtype=np.float64), mean.shape).copy()
        if np.any(std <= 0.0):
            raise ConfigurationError("Gaussian target needs positive standard deviations")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def marginal_mean(self, t) -> np.ndarray:
        return (1.0 - np.asarray(t, dtype=np.float64)) * self.mean

    def marginal_var(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return (1.0 - t) ** 2 * self.std ** 2 + t ** 2

    def posterior_x(self, z: np.ndarray, t) -> np.ndarray:
        t = _column(t, z)
        gain = (1.0 - t) * self.std ** 2 / self.marginal_var(t)
        return self.mean + gain * (z - self.marginal_mean(t))

    def posterior_eps(self, z: np.ndarray, t) -> np.ndarray:
        t = _column(t, z)
        return t / self.marginal_var(t) * (z - self.marginal_mean(t))


def _column(t, z: np.ndarray):
    """Broadcast per-row times against a (B, d) array."""
    t = np.asarray(t, dtype=np.float64)
    z = np.asarray(z)
    if t.ndim == 1 and z.ndim == 2 and t.shape[0] == z.shape[0] and t.shape[0] != 1:
        return t.reshape(-1, 1)
    if t.ndim == 1 and t.shape[0] == 1:
        return t[0]
    return t


def optimal_field(problem: GaussianProblem, z: np.ndarray, t) -> np.ndarray:
    """
    Optimal velocity E[eps - x | z_t].

    Raises:
        SingularityError: At t = 0 or t = 1
    """
    values = np.asarray(t, dtype=np.float64)
    if np.any(values <= 0.0) or np.any(values >= 1.0):
        raise SingularityError(f"optimal field is evaluated on the open interval only, got t = {t}")
    z = np.asarray(z, dtype=np.float64)
    return problem.posterior_eps(z, t) - problem.posterior_x(z, t)


class AnalyticDenoiser:
    """
    The Gaussian problem's optimal denoiser behind the denoiser interface.

    ``head_output`` returns constants, so surrogates evaluated with it carry no
    gradient; labels are ignored.
    """

    def __init__(self, problem: GaussianProblem, head: PredictionKind = PredictionKind.X_PRED):
        self.problem = problem
        self.head = head
        self.schedule = Schedule()
        self.dim = problem.dim

    def predict_x(self, z: np.ndarray, t, labels=None) -> np.ndarray:
        return self.problem.posterior_x(np.asarray(z, dtype=np.float64), t)

    def predict_eps(self, z: np.ndarray, t, labels=None) -> np.ndarray:
        return self.problem.posterior_eps(np.asarray(z, dtype=np.float64), t)

    def predict_velocity(self, z: np.ndarray, t, labels=None) -> np.ndarray:
        return self.predict_eps(z, t) - self.predict_x(z, t)

    def head_output(self, z: np.ndarray, t, labels=None) -> Tensor:
        if self.head is PredictionKind.X_PRED:
            return T.constant(self.predict_x(z, t))
        if self.head is PredictionKind.EPS_PRED:
            return T.constant(self.predict_eps(z, t))
        return T.constant(self.predict_velocity(z, t))


class LinearField:
    """Time-independent affine velocity dz/dt = M z + b, usable as a sampler model."""

    def __init__(self, matrix: np.ndarray, offset: Optional[np.ndarray] = None):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        self.dim = self.matrix.shape[0]
        self.offset = np.zeros(self.dim) if offset is None else np.asarray(offset, dtype=np.float64)

    def predict_velocity(self, z: np.ndarray, t, labels=None) -> np.ndarray:
        return np.asarray(z) @ self.matrix.T + self.offset

    def predict_x(self, z: np.ndarray, t, labels=None) -> np.ndarray:
        return np.asarray(z) - _column(t, z) * self.predict_velocity(z, t)


class LinearPrediction:
    """A model whose x-prediction is A + k t regardless of z."""

    def __init__(self, intercept: np.ndarray, slope: np.ndarray):
        self.intercept = np.asarray(intercept, dtype=np.float64)
        self.slope = np.asarray(slope, dtype=np.float64)
        self.dim = self.intercept.shape[0]

    def predict_x(self, z: np.ndarray, t, labels=None) -> np.ndarray:
        return np.broadcast_to(self.intercept + _column(t, z) * self.slope, np.shape(z)).copy()

    def predict_velocity(self, z: np.ndarray, t, labels=None) -> np.ndarray:
        return (np.asarray(z) - self.predict_x(z, t)) / _column(t, z)

    def solution(self, z_start: np.ndarray, t_start: float, t_end: float) -> np.ndarray:
        """Exact flow of dz/dt = (z - A - k t)/t."""
        ratio = t_end / t_start
        log_term = 0.0 if t_end == 0.0 else t_end * np.log(ratio) * self.slope
        return ratio * z_start + self.intercept * (1.0 - ratio) - log_term


def exact_logpdf(problem: GaussianProblem, o: np.ndarray) -> np.ndarray:
    """log π0(o), summed over coordinates; accepts (d,) or (B, d)."""
    return np.sum(stats.norm.logpdf(np.asarray(o, dtype=np.float64), loc=problem.mean, scale=problem.std), axis=-1)


def analytic_ode_solution(matrix: np.ndarray, offset: Optional[np.ndarray], x_start: np.ndarray,
                          t_start: float, t_end: float) -> np.ndarray:
    """
    Solution of dx/dt = M x + b via the exponential of the augmented matrix [[M, b], [0, 0]].
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    dim = matrix.shape[0]
    offset = np.zeros(dim) if offset is None else np.asarray(offset, dtype=np.float64)
    augmented = np.zeros((dim + 1, dim + 1))
    augmented[:dim, :dim] = matrix
    augmented[:dim, dim] = offset
    propagator = linalg.expm(augmented * (t_end - t_start))
    x = np.atleast_2d(np.asarray(x_start, dtype=np.float64))
    lifted = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    result = lifted @ propagator.T
    return result[:, :dim].reshape(np.shape(x_start))


def flow_solution(problem: GaussianProblem, z_start: np.ndarray, t_start: float, t_end: float) -> np.ndarray:
    """The optimal probability-flow ODE keeps (z - m_t)/s_t constant along trajectories."""
    scale = np.sqrt(problem.marginal_var(t_end) / problem.marginal_var(t_start))
    return problem.marginal_mean(t_end) + scale * (np.asarray(z_start) - problem.marginal_mean(t_start))


def mdp_joint_logprob(policy, rollout: RolloutRecord, sigmas: Sequence[float]) -> float:
    """
    Σ_i log N(x_{i+1}; x_i - h_i v(x_i, t_i), σ_i² I) over a stored trajectory.

    Raises:
        ConfigurationError: If any σ_i is zero or the rollout has no stored noises
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if rollout.noises is None:
        raise ConfigurationError("joint log-probability needs an SDE rollout with stored noises")
    if np.any(sigmas <= 0.0):
        raise ConfigurationError("joint log-probability is undefined where σ = 0")
    total = 0.0
    for i in range(len(rollout.times) - 1):
        t_cur, t_next = rollout.times[i], rollout.times[i + 1]
        state = rollout.states[i].reshape(1, -1)
        velocity = policy.predict_velocity(state, t_cur, [rollout.label]).reshape(-1)
        mean = rollout.states[i] - (t_cur - t_next) * velocity
        total += float(np.sum(stats.norm.logpdf(rollout.states[i + 1], loc=mean, scale=sigmas[i])))
    return total


_SPACE_FACTORS = {
    PredictionKind.X_PRED: lambda t: 1.0,
    PredictionKind.V_PRED: lambda t: -1.0 / t,
    PredictionKind.EPS_PRED: lambda t: -(1.0 - t) / t,
}


def residual_coefficients(problem: GaussianProblem, t: float):
    """
    x̂ - o = a δ + b eps for the analytic denoiser, with δ = o - μ.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (a, b) per coordinate
    """
    var = problem.marginal_var(t)
    return -t ** 2 / var, t * (1.0 - t) * problem.std ** 2 / var


def expected_generic_loss(problem: GaussianProblem, o: np.ndarray, t: float,
                          space: PredictionKind = PredictionKind.X_PRED, weight: float = 1.0) -> float:
    """E_eps w ||pred - target||² in ``space`` for the analytic denoiser at a fixed t."""
    a, b = residual_coefficients(problem, t)
    delta = np.asarray(o, dtype=np.float64) - problem.mean
    k = _SPACE_FACTORS[space](t)
    return float(weight * np.sum(k ** 2 * (a ** 2 * delta ** 2 + b ** 2)))


def expected_grid_loss(problem: GaussianProblem, o: np.ndarray, grid: np.ndarray,
                       space: PredictionKind = PredictionKind.X_PRED,
                       weight_fn: WeightFunction = WeightFunction.UNIFORM) -> float:
    """Average of ``expected_generic_loss`` over a uniform draw from ``grid``."""
    values = []
    for t in grid:
        weight = 1.0 if weight_fn is WeightFunction.UNIFORM else 1.0 / (t * (1.0 - t))
        values.append(expected_generic_loss(problem, o, t, space, weight))
    return float(np.mean(values))


_CONDITIONAL_FACTORS = {
    PredictionKind.X_PRED: lambda t: t ** 2,
    PredictionKind.V_PRED: lambda t: 1.0,
    PredictionKind.EPS_PRED: lambda t: (1.0 - t) ** 2,
}


def pretrain_loss_floor(problem: GaussianProblem, space: PredictionKind = PredictionKind.V_PRED) -> float:
    """
    E_t Σ Var(target | z_t) for t ~ U(0, 1): the irreducible unweighted regression loss.

    The conditional variance is σ0² f(t) / s_t² with f = t² (x), 1 (v) or
    (1-t)² (eps); for σ0 = 1, μ = 0 in v-space the floor is π/2 per coordinate.
    """
    factor = _CONDITIONAL_FACTORS[space]

    def integrand(t: float) -> float:
        return float(np.sum(problem.std ** 2 * factor(t) / problem.marginal_var(t)))

    value, _ = integrate.quad(integrand, 0.0, 1.0, limit=200)
    return float(value)


def analytic_surrogates(problem: GaussianProblem, points: np.ndarray, times: np.ndarray,
                        noises: np.ndarray) -> np.ndarray:
    """
    ELBO-weighted eps-space surrogate of each point on one shared pair set.

    A point's value is the mean over pairs of ||epŝ - eps||² / (t (1 - t)).
    """
    points = np.atleast_2d(points)
    column = times.reshape(-1, 1)
    a, b = residual_coefficients(problem, column)
    scale = (1.0 - column) ** 2 / (column ** 2 * column * (1.0 - column))
    surrogates = np.empty(points.shape[0])
    for n, o in enumerate(points):
        residual = a * (o - problem.mean) + b * noises
        surrogates[n] = np.mean(np.sum(scale * residual ** 2, axis=1))
    return surrogates


def check_surrogate_fidelity(problem: GaussianProblem, n_points: int = 200, n_mc: int = 10_000,
                             seed: int = 0) -> float:
    """
    Spearman correlation between -L̂ and the exact log-density over random test points.

    Pairs are drawn once and shared by all points.
    """
    rng = derive_rng(seed, Stream.DIAGNOSTICS, 0)
    points = problem.mean + 1.5 * problem.std * rng.standard_normal((n_points, problem.dim))
    times = np.clip(rng.uniform(0.0, 1.0, size=n_mc), 1e-6, 1.0 - 1e-6)
    noises = rng.standard_normal((n_mc, problem.dim))
    surrogates = analytic_surrogates(problem, points, times, noises)
    correlation = stats.spearmanr(-surrogates, exact_logpdf(problem, points)).correlation
    logger.info(f"Surrogate fidelity: Spearman {correlation:.4f} over {n_points} points, N_MC={n_mc}")
    return float(correlation)


def trained_surrogate_fidelity(denoiser, mixture: GaussianMixture, n_points: int = 200, n_mc: int = 1000,
                               grid_size: int = 1000, seed: int = 0, chunk: int = 20) -> float:
    """
    Spearman correlation between a trained denoiser's -L̂ and the exact mixture log-density.

    Unconditional ELBO-weighted surrogate; one uniform pair set on the training grid is shared
    by all points, which are drawn from the mixture with stds widened by half.
    """
    rng = derive_rng(seed, Stream.DIAGNOSTICS, 4)
    components = rng.choice(mixture.n_components, size=n_points, p=mixture.weights)
    points = mixture.means[components] + 1.5 * mixture.stds[components] * rng.standard_normal(
        (n_points, mixture.dim))
    config = SurrogateConfig(n_mc=n_mc, weighting=Weighting.GENERIC_W, weight_fn=WeightFunction.ELBO,
                             stratified=False, grid_size=grid_size)
    pairs = draw_uniform_pairs(config.grid(), n_mc, mixture.dim, derive_seed(seed, Stream.DIAGNOSTICS, 5))
    surrogates = np.empty(n_points)
    with no_grad():
        for start in range(0, n_points, chunk):
            block = points[start:start + chunk]
            values, _ = estimate_surrogate(denoiser, block, -1, [pairs] * block.shape[0], config)
            surrogates[start:start + chunk] = values.data
    if not np.all(np.isfinite(surrogates)):
        raise NumericalError("non-finite surrogate in the fidelity check", quantity="trained_fidelity")
    correlation = stats.spearmanr(-surrogates, mixture_logpdf(mixture, points)).correlation
    logger.info(f"Trained surrogate fidelity: Spearman {correlation:.4f} over {n_points} points, N_MC={n_mc}")
    return float(correlation)


def terminal_errors(model, exact: Callable[[np.ndarray], np.ndarray], kind: SamplerKind,
                    steps: Iterable[int], starts: np.ndarray) -> List[float]:
    """Max-norm terminal error of the package's ``kind`` stepper from t = 1 to t = 0."""
    errors = []
    target = exact(starts)
    for count in steps:
        grid = SamplerConfig(kind=kind, steps=int(count)).grid()
        x = np.array(starts, dtype=np.float64)
        history = None
        for i in range(int(count)):
            if kind is SamplerKind.SECOND_ORDER_ODE:
                x, history = second_order_step(model, x, grid[i], grid[i + 1], None, history)
            else:
                x = sde_step(model, x, grid[i], grid[i + 1], None, None)
        errors.append(float(np.max(np.abs(x - target))))
    return errors


def sampler_order_ratios(kind: SamplerKind, steps: Sequence[int] = (16, 32, 64),
                         matrix: Optional[np.ndarray] = None, seed: int = 0) -> List[float]:
    """Error ratios err(T)/err(2T) on an affine field: about 2 for first order, 4 for second."""
    matrix = np.array([[-1.0, 0.5], [-0.5, -1.0]]) if matrix is None else np.atleast_2d(matrix)
    field = LinearField(matrix, np.full(matrix.shape[0], 0.3))
    starts = derive_rng(seed, Stream.DIAGNOSTICS, 1).standard_normal((8, field.dim))
    errors = terminal_errors(field, lambda x: analytic_ode_solution(field.matrix, field.offset, x, 1.0, 0.0),
                             kind, steps, starts)
    return [errors[i] / errors[i + 1] for i in range(len(errors) - 1)]
