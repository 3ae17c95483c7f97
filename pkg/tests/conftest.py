"""Shared fixtures: tiny models and configurations that keep the suite fast."""
import json

import numpy as np
import pytest

from vgrpo_lab.core.layers import Activation
from vgrpo_lab.models.data import GaussianMixture
from vgrpo_lab.models.denoiser import build_denoiser
from vgrpo_lab.models.schedule import PredictionKind


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mixture():
    return GaussianMixture.two_modes()


@pytest.fixture
def tiny_denoiser():
    """Two-label, 2-D denoiser with a v head."""
    return build_denoiser(dim=2, n_labels=2, hidden=[16, 16], activation=Activation.TANH,
                          head=PredictionKind.V_PRED, n_freq=2, seed=3)


def tiny_config(tmp_path, **sections):
    """Write a configuration small enough for an end-to-end run in seconds."""
    config = {
        "run": {"output_dir": str(tmp_path / "run"), "seed": 7},
        "model": {"hidden": [16, 16], "n_freq": 2, "activation": "tanh"},
        "pretrain": {"steps": 20, "batch_size": 32, "log_every": 0},
        "sampler": {"steps": 4},
        "surrogate": {"n_mc": 2, "grid_size": 8},
        "grpo": {"iterations": 2, "steps_per_iteration": 2, "prompts_per_step": 2, "group_size": 4},
        "eval": {"conditions": 4, "samples_per_condition": 4, "steps": 4, "every": 1},
    }
    for name, values in sections.items():
        if isinstance(values, dict):
            config.setdefault(name, {}).update(values)
        else:
            config[name] = values
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return str(path)


@pytest.fixture
def tiny_config_file(tmp_path):
    return tiny_config(tmp_path)
