"""
Validation of raw run-configuration sections.

Every validator returns ``(is_valid, errors)`` where each error reads
``"<dotted.field.path>: <problem>"`` so the CLI can point at the offending field.
"""
import logging
from typing import Any, Dict, Iterable, List, Tuple

logger = logging.getLogger(__name__)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


class ConfigValidator:
    """Field checks for each section of the run configuration."""

    SCHEDULES = ("rectified_flow",)
    HEADS = ("x", "eps", "v")
    ACTIVATIONS = ("tanh", "silu")
    LABEL_MODES = ("component", "random", "null")
    WEIGHT_FUNCTIONS = ("uniform", "elbo")
    SAMPLERS = ("euler_ode", "sde_first_order", "second_order_ode")
    WEIGHTINGS = ("generic", "adaptive")
    PRESETS = ("ratio_clip", "kl_penalty", "adv_soft_clip")
    AGGREGATIONS = ("adv_then_avg", "avg_then_adv")
    ALGORITHMS = ("vgrpo", "mdp")
    REWARD_KINDS = ("neg_distance", "gaussian_bump", "ring_radius", "region_indicator")
    CONDITION_KINDS = ("target_mode", "target_angle", "unconditional")

    @staticmethod
    def _int_at_least(section: Dict, key: str, minimum: int, prefix: str, errors: List[str]):
        value = section.get(key)
        if not _is_int(value) or value < minimum:
            errors.append(f"{prefix}.{key}: must be an integer >= {minimum}, got {value!r}")

    @staticmethod
    def _number_in(section: Dict, key: str, low: float, high: float, prefix: str, errors: List[str],
                   optional: bool = False, open_low: bool = False):
        value = section.get(key)
        if value is None and optional:
            return
        if not _is_number(value) or value > high or value < low or (open_low and value == low):
            bound = "(" if open_low else "["
            errors.append(f"{prefix}.{key}: must be a number in {bound}{low}, {high}], got {value!r}")

    @staticmethod
    def _choice(section: Dict, key: str, choices: Iterable[str], prefix: str, errors: List[str]):
        value = section.get(key)
        if value not in choices:
            errors.append(f"{prefix}.{key}: must be one of {list(choices)}, got {value!r}")

    @staticmethod
    def _bool(section: Dict, key: str, prefix: str, errors: List[str]):
        if not isinstance(section.get(key), bool):
            errors.append(f"{prefix}.{key}: must be true or false, got {section.get(key)!r}")

    @staticmethod
    def validate_data(section: Dict, prefix: str = "data") -> Tuple[bool, List[str]]:
        errors: List[str] = []
        means, stds, weights = section.get("means"), section.get("stds"), section.get("weights")
        if not isinstance(means, list) or not means or not all(isinstance(m, list) and m for m in means):
            errors.append(f"{prefix}.means: must be a nonempty list of points")
            return False, errors
        dim = len(means[0])
        if any(len(m) != dim for m in means):
            errors.append(f"{prefix}.means: all components need the same dimension")
        if dim < 2:
            errors.append(f"{prefix}.means: data dimension must be at least 2, got {dim}")
        if not isinstance(stds, list) or len(stds) != len(means):
            errors.append(f"{prefix}.stds: need one entry per component")
        elif any((_is_number(s) and s <= 0) or (isinstance(s, list) and any(v <= 0 for v in s)) for s in stds):
            errors.append(f"{prefix}.stds: standard deviations must be positive")
        if not isinstance(weights, list) or len(weights) != len(means) or any(
                not _is_number(w) or w < 0 for w in weights) or not sum(weights) > 0:
            errors.append(f"{prefix}.weights: need one nonnegative weight per component with positive sum")
        return len(errors) == 0, errors

    @staticmethod
    def validate_model(section: Dict, prefix: str = "model") -> Tuple[bool, List[str]]:
        errors: List[str] = []
        ConfigValidator._choice(section, "schedule", ConfigValidator.SCHEDULES, prefix, errors)
        ConfigValidator._choice(section, "head", ConfigValidator.HEADS, prefix, errors)
        ConfigValidator._choice(section, "activation", ConfigValidator.ACTIVATIONS, prefix, errors)
        ConfigValidator._int_at_least(section, "n_freq", 1, prefix, errors)
        if section.get("n_labels") is not None:
            ConfigValidator._int_at_least(section, "n_labels", 1, prefix, errors)
        hidden = section.get("hidden")
        if not isinstance(hidden, list) or not all(_is_int(w) and w > 0 for w in hidden):
            errors.append(f"{prefix}.hidden: must be a list of positive layer widths, got {hidden!r}")
        return len(errors) == 0, errors

    @staticmethod
    def validate_pretrain(section: Dict, prefix: str = "pretrain") -> Tuple[bool, List[str]]:
        errors: List[str] = []
        ConfigValidator._int_at_least(section, "steps", 0, prefix, errors)
        ConfigValidator._int_at_least(section, "batch_size", 1, prefix, errors)
        ConfigValidator._int_at_least(section, "log_every", 0, prefix, errors)
        ConfigValidator._number_in(section, "lr", 0.0, 1.0, prefix, errors, open_low=True)
        ConfigValidator._number_in(section, "weight_decay", 0.0, 1.0, prefix, errors)
        ConfigValidator._choice(section, "label_mode", ConfigValidator.LABEL_MODES, prefix, errors)
        ConfigValidator._choice(section, "weight_fn", ConfigValidator.WEIGHT_FUNCTIONS, prefix, errors)
        return len(errors) == 0, errors

    @staticmethod
    def validate_sampler(section: Dict, prefix: str = "sampler") -> Tuple[bool, List[str]]:
        errors: List[str] = []
        ConfigValidator._choice(section, "kind", ConfigValidator.SAMPLERS, prefix, errors)
        ConfigValidator._int_at_least(section, "steps", 1, prefix, errors)
        ConfigValidator._number_in(section, "t_max", 0.0, 1.0, prefix, errors)
        ConfigValidator._number_in(section, "t_min", 0.0, 1.0, prefix, errors)
        ConfigValidator._number_in(section, "noise_level", 0.0, float("inf"), prefix, errors)
        if _is_number(section.get("t_max")) and _is_number(section.get("t_min")) \
                and not section["t_min"] < section["t_max"]:
            errors.append(f"{prefix}.t_min: must be below t_max so the grid strictly decreases")
        if section.get("kind") == "sde_first_order" and section.get("noise_level") == 0:
            logger.warning(f"{prefix}: SDE sampler with noise_level 0 behaves as the Euler ODE")
        return len(errors) == 0, errors

    @staticmethod
    def validate_surrogate(section: Dict, prefix: str = "surrogate") -> Tuple[bool, List[str]]:
        errors: List[str] = []
        ConfigValidator._int_at_least(section, "n_mc", 1, prefix, errors)
        ConfigValidator._int_at_least(section, "grid_size", 1, prefix, errors)
        ConfigValidator._choice(section, "weighting", ConfigValidator.WEIGHTINGS, prefix, errors)
        ConfigValidator._choice(section, "weight_fn", ConfigValidator.WEIGHT_FUNCTIONS, prefix, errors)
        ConfigValidator._choice(section, "adaptive_space", ConfigValidator.HEADS, prefix, errors)
        ConfigValidator._choice(section, "kl_space", ("x", "v"), prefix, errors)
        ConfigValidator._bool(section, "shared_pairs", prefix, errors)
        ConfigValidator._bool(section, "stratified", prefix, errors)
        n_mc, grid = section.get("n_mc"), section.get("grid_size")
        if section.get("stratified") and _is_int(n_mc) and _is_int(grid) and n_mc > 0 and grid % n_mc:
            errors.append(f"{prefix}.grid_size: {grid} grid points cannot be split into {n_mc} equal strata")
        return len(errors) == 0, errors

    @staticmethod
    def validate_grpo(section: Dict, prefix: str = "grpo") -> Tuple[bool, List[str]]:
        errors: List[str] = []
        ConfigValidator._int_at_least(section, "iterations", 0, prefix, errors)
        ConfigValidator._int_at_least(section, "steps_per_iteration", 1, prefix, errors)
        ConfigValidator._int_at_least(section, "prompts_per_step", 1, prefix, errors)
        ConfigValidator._int_at_least(section, "group_size", 2, prefix, errors)
        ConfigValidator._int_at_least(section, "diagnostics_every", 0, prefix, errors)
        ConfigValidator._choice(section, "preset", ConfigValidator.PRESETS, prefix, errors)
        ConfigValidator._choice(section, "aggregation", ConfigValidator.AGGREGATIONS, prefix, errors)
        ConfigValidator._choice(section, "algorithm", ConfigValidator.ALGORITHMS, prefix, errors)
        ConfigValidator._number_in(section, "clip_eps", 0.0, float("inf"), prefix, errors, optional=True, open_low=True)
        ConfigValidator._number_in(section, "kl_beta", 0.0, float("inf"), prefix, errors, optional=True)
        ConfigValidator._number_in(section, "soft_clip_eta", 0.0, float("inf"), prefix, errors, optional=True)
        ConfigValidator._number_in(section, "lr", 0.0, 1.0, prefix, errors, open_low=True)
        ConfigValidator._number_in(section, "weight_decay", 0.0, 1.0, prefix, errors)
        ConfigValidator._bool(section, "abort_on_nonfinite", prefix, errors)
        if section.get("mdp_timesteps") is not None:
            ConfigValidator._int_at_least(section, "mdp_timesteps", 1, prefix, errors)
        return len(errors) == 0, errors

    @staticmethod
    def validate_rewards(section: Dict, prefix: str = "rewards") -> Tuple[bool, List[str]]:
        errors: List[str] = []
        terms = section.get("terms")
        if not isinstance(terms, list) or not terms:
            errors.append(f"{prefix}.terms: need at least one reward term")
        else:
            for i, term in enumerate(terms):
                path = f"{prefix}.terms[{i}]"
                if not isinstance(term, dict):
                    errors.append(f"{path}: must be an object")
                    continue
                ConfigValidator._choice(term, "kind", ConfigValidator.REWARD_KINDS, path, errors)
                for key in ("weight", "center"):
                    if key in term and not _is_number(term[key]):
                        errors.append(f"{path}.{key}: must be a finite number, got {term[key]!r}")
                if "scale" in term and (not _is_number(term["scale"]) or term["scale"] == 0):
                    errors.append(f"{path}.scale: must be a nonzero number, got {term['scale']!r}")
        ConfigValidator._number_in(section, "bump_width", 0.0, float("inf"), prefix, errors, open_low=True)
        ConfigValidator._number_in(section, "ring_radius", 0.0, float("inf"), prefix, errors)
        ConfigValidator._int_at_least(section, "n_angle_bins", 2, prefix, errors)
        if not _is_number(section.get("floor")):
            errors.append(f"{prefix}.floor: must be a number, got {section.get('floor')!r}")
        return len(errors) == 0, errors

    @staticmethod
    def validate_eval(section: Dict, prefix: str = "eval") -> Tuple[bool, List[str]]:
        errors: List[str] = []
        ConfigValidator._int_at_least(section, "conditions", 1, prefix, errors)
        ConfigValidator._int_at_least(section, "samples_per_condition", 1, prefix, errors)
        ConfigValidator._int_at_least(section, "steps", 1, prefix, errors)
        ConfigValidator._int_at_least(section, "every", 0, prefix, errors)
        ConfigValidator._number_in(section, "p_mix", 0.0, 1.0, prefix, errors)
        p_mix, eval_steps = section.get("p_mix"), section.get("steps")
        if _is_number(p_mix) and _is_int(eval_steps) and abs(p_mix * eval_steps - round(p_mix * eval_steps)) > 1e-9:
            errors.append(f"{prefix}.p_mix: p_mix·steps = {p_mix * eval_steps} is not an integer")
        return len(errors) == 0, errors
