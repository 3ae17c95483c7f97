"""Configuration loading, validation and the typed run view."""
import json

import pytest

from tests.conftest import tiny_config
from vgrpo_lab.config import ConfigManager
from vgrpo_lab.models.rewards import ConditionKind, RewardKind
from vgrpo_lab.services.grpo import RegulationPreset
from vgrpo_lab.services.samplers import SamplerKind
from vgrpo_lab.utils.exceptions import ConfigValidationError, ConfigurationError


def _field_of(tmp_path, **sections) -> str:
    with pytest.raises(ConfigValidationError) as info:
        ConfigManager(tiny_config(tmp_path, **sections))
    return info.value.field


class TestLoading:
    def test_defaults_are_valid(self):
        config = ConfigManager().run_config()
        assert config.condition_kind is ConditionKind.TARGET_MODE
        assert config.model.n_labels == 2
        assert config.model.hidden == (64, 64, 64, 64)
        assert config.stages[0].train.group_size == 12

    def test_file_is_merged_over_defaults(self, tiny_config_file):
        manager = ConfigManager(tiny_config_file)
        assert manager.get("grpo.group_size") == 4
        assert manager.get("grpo.preset") == "ratio_clip"
        assert manager.get("model.head") == "v"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            ConfigManager(str(tmp_path / "absent.json"))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigurationError):
            ConfigManager(str(path))

    def test_overrides_win_and_none_is_ignored(self, tiny_config_file):
        manager = ConfigManager(tiny_config_file, {"run.seed": 11, "run.output_dir": None})
        assert manager.get("run.seed") == 11
        assert manager.get("run.output_dir").endswith("run")

    def test_output_dir_from_environment(self, tiny_config_file, tmp_path, monkeypatch):
        monkeypatch.setenv("VGRPO_LAB_OUT", str(tmp_path / "elsewhere"))
        assert ConfigManager(tiny_config_file).run_config().output_dir == str(tmp_path / "elsewhere")

    def test_save_round_trip(self, tiny_config_file, tmp_path):
        manager = ConfigManager(tiny_config_file)
        manager.save(str(tmp_path / "out" / "config.json"))
        with open(tmp_path / "out" / "config.json") as f:
            assert json.load(f) == manager.get_all()


class TestValidation:
    def test_group_of_one_names_the_field(self, tmp_path):
        assert _field_of(tmp_path, grpo={"group_size": 1}) == "stages[0].grpo.group_size"

    def test_uneven_strata(self, tmp_path):
        assert _field_of(tmp_path, surrogate={"n_mc": 3, "grid_size": 8}) == "stages[0].surrogate.grid_size"

    def test_uniform_draws_ignore_strata(self, tmp_path):
        ConfigManager(tiny_config(tmp_path, surrogate={"n_mc": 3, "grid_size": 8, "stratified": False}))

    def test_unknown_sampler(self, tmp_path):
        assert _field_of(tmp_path, sampler={"kind": "heun"}) == "stages[0].sampler.kind"

    def test_negative_seed(self, tmp_path):
        assert _field_of(tmp_path, run={"seed": -1}) == "run.seed"

    def test_unknown_section(self, tmp_path):
        assert _field_of(tmp_path, telemetry={"enabled": True}) == "telemetry"

    def test_eval_mix_must_hit_a_step(self, tmp_path):
        assert _field_of(tmp_path, eval={"p_mix": 0.3}) == "eval.p_mix"

    def test_label_count_must_match_conditions(self, tmp_path):
        manager = ConfigManager(tiny_config(tmp_path, model={"n_labels": 5}))
        with pytest.raises(ConfigValidationError) as info:
            manager.run_config()
        assert info.value.field == "model.n_labels"

    def test_angle_conditions_use_bins(self, tmp_path):
        config = ConfigManager(tiny_config(tmp_path, condition={"kind": "target_angle"})).run_config()
        assert config.model.n_labels == 8


class TestStages:
    def test_stage_overrides(self, tmp_path):
        path = tiny_config(tmp_path, stages=[
            {"name": "bump"},
            {"name": "region", "rewards": {"terms": [{"kind": "region_indicator"}]},
             "grpo": {"preset": "adv_soft_clip"}, "sampler": {"kind": "sde_first_order", "noise_level": 0.5}},
        ])
        first, second = ConfigManager(path).run_config().stages
        assert first.reward_spec.terms[0].kind is RewardKind.GAUSSIAN_BUMP
        assert second.reward_spec.terms[0].kind is RewardKind.REGION_INDICATOR
        assert second.train.preset is RegulationPreset.ADV_SOFT_CLIP
        assert second.train.sampler.kind is SamplerKind.SDE_FIRST_ORDER
        assert second.train.group_size == first.train.group_size == 4

    def test_stage_errors_carry_the_stage_index(self, tmp_path):
        path = tiny_config(tmp_path, stages=[{"name": "a"}, {"name": "b", "grpo": {"group_size": 1}}])
        with pytest.raises(ConfigValidationError) as info:
            ConfigManager(path)
        assert info.value.field == "stages[1].grpo.group_size"

    def test_only_training_sections_per_stage(self, tmp_path):
        path = tiny_config(tmp_path, stages=[{"name": "a", "model": {"hidden": [8]}}])
        with pytest.raises(ConfigValidationError) as info:
            ConfigManager(path)
        assert info.value.field == "stages[0].model"
