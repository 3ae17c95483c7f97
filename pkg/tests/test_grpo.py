"""Advantages, the clipped objective and full V-GRPO iterations."""
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vgrpo_lab.core import tensor as T
from vgrpo_lab.core.layers import gradients_by_name
from vgrpo_lab.core.tensor import backward
from vgrpo_lab.models.rewards import ConditionKind, RewardSpec, make_condition
from vgrpo_lab.services.grpo import (AggregationMode, Regulation, RegulationPreset, StepStats, TrainConfig,
                                     apply_gradient_step, attach_old_surrogates, clip_fraction, collect_groups,
                                     group_advantages, grpo_objective, iteration_conditions, resolve_regulation,
                                     soft_clip, step_partition, vgrpo_iteration, vgrpo_step_loss)
from vgrpo_lab.services.samplers import SamplerConfig
from vgrpo_lab.services.surrogate import SurrogateConfig, estimate_surrogate
from vgrpo_lab.utils.exceptions import ConfigurationError, NumericalError

MEANS = np.array([[-2.0, 0.0], [2.0, 0.0]])
SPEC = RewardSpec()
UNREGULATED = Regulation(clip_eps=float("inf"), kl_beta=0.0, soft_clip_eta=0.0)

reward_groups = st.lists(st.floats(min_value=-100.0, max_value=100.0, allow_nan=False), min_size=2, max_size=12)


def small_config(**overrides) -> TrainConfig:
    values = dict(iterations=1, steps_per_iteration=2, prompts_per_step=2, group_size=4,
                  sampler=SamplerConfig(steps=4), surrogate=SurrogateConfig(n_mc=2, grid_size=8), seed=3)
    values.update(overrides)
    return TrainConfig(**values)


def prompts(config: TrainConfig, iteration: int = 0):
    pool = [make_condition(ConditionKind.TARGET_MODE, label, MEANS, SPEC) for label in (0, 1)]
    return iteration_conditions(pool, config, iteration)


def prepared_groups(policy, config, iteration=0, regulation=UNREGULATED):
    groups = collect_groups(policy, config, regulation, prompts(config, iteration), iteration, SPEC)
    return attach_old_surrogates(policy, groups, config, iteration)


class TestAdvantages:
    def test_hand_computed(self):
        advantages = group_advantages(np.array([[1.0, 2.0, 3.0]]), AggregationMode.ADV_THEN_AVG)
        np.testing.assert_allclose(advantages, [-1.2247449, 0.0, 1.2247449], atol=1e-6)

    @pytest.mark.parametrize("mode", list(AggregationMode))
    def test_constant_rewards(self, mode):
        np.testing.assert_array_equal(group_advantages(np.full((2, 5), 0.7), mode), np.zeros(5))

    def test_identical_functions_average_to_single(self, rng):
        single = rng.standard_normal(6)
        np.testing.assert_allclose(group_advantages(np.stack([single, single]), AggregationMode.ADV_THEN_AVG),
                                   group_advantages(single[None, :], AggregationMode.ADV_THEN_AVG))

    def test_group_of_one_rejected(self):
        with pytest.raises(ConfigurationError):
            group_advantages(np.array([[1.0]]), AggregationMode.AVG_THEN_ADV)

    def test_modes_differ_on_scaled_functions(self):
        rewards = np.array([[0.0, 1.0, 2.0], [0.0, 100.0, 0.0]])
        a = group_advantages(rewards, AggregationMode.ADV_THEN_AVG)
        b = group_advantages(rewards, AggregationMode.AVG_THEN_ADV)
        assert not np.allclose(a, b)

    @given(values=reward_groups)
    @settings(max_examples=80, deadline=None)
    def test_zero_mean_unit_variance(self, values):
        rewards = np.array([values])
        advantages = group_advantages(rewards, AggregationMode.AVG_THEN_ADV)
        if rewards.std() > 1e-3:
            assert abs(advantages.sum()) < 1e-9
            assert advantages.var() == pytest.approx(1.0, abs=1e-6)
        else:
            assert np.all(np.isfinite(advantages))

    @given(values=reward_groups, scale=st.floats(min_value=0.1, max_value=100.0),
           shift=st.floats(min_value=-100.0, max_value=100.0))
    @settings(max_examples=80, deadline=None)
    def test_affine_invariance(self, values, scale, shift):
        rewards = np.array([values])
        if rewards.std() < 0.1:
            return
        for mode in AggregationMode:
            np.testing.assert_allclose(group_advantages(scale * rewards + shift, mode),
                                       group_advantages(rewards, mode), atol=1e-9)


class TestObjective:
    def test_soft_clip_values(self):
        assert soft_clip(0.0, 2.0) == 0.0
        assert soft_clip(2.0, 2.0) == pytest.approx(2.0 * np.tanh(1.0))
        assert soft_clip(2.0, 2.0) == pytest.approx(1.52318, abs=1e-5)
        big = soft_clip(np.array([-1e6, 1e6]), 2.0)
        assert np.all(np.abs(big) <= 2.0)
        with pytest.raises(ConfigurationError):
            soft_clip(1.0, 0.0)

    def test_unit_ratio_returns_advantage(self):
        advantages = np.array([-1.5, 0.0, 2.0])
        for eps in (0.01, 0.2, 10.0):
            np.testing.assert_array_equal(grpo_objective(np.ones(3), advantages, eps).data, advantages)

    def test_clip_branches(self):
        eps = 0.1
        objective = grpo_objective(np.array([1.2, 1.2]), np.array([1.0, -1.0]), eps).data
        np.testing.assert_allclose(objective, [1.1, -1.2])
        assert clip_fraction(np.array([1.2, 1.2]), np.array([1.0, -1.0]), eps) == 0.5
        assert clip_fraction(np.ones(4), np.array([1.0, -1.0, 2.0, 0.0]), eps) == 0.0

    def test_presets(self):
        assert resolve_regulation(RegulationPreset.RATIO_CLIP).enabled == ["ratio_clip"]
        assert resolve_regulation(RegulationPreset.KL_PENALTY).enabled == ["kl_penalty"]
        assert resolve_regulation(RegulationPreset.ADV_SOFT_CLIP).enabled == ["adv_soft_clip"]
        mixed = resolve_regulation(RegulationPreset.RATIO_CLIP, kl_beta=0.1)
        assert mixed.enabled == ["ratio_clip", "kl_penalty"]

    @pytest.mark.parametrize("preset,overrides", [
        (RegulationPreset.KL_PENALTY, {"kl_beta": 0.0}),
        (RegulationPreset.ADV_SOFT_CLIP, {"soft_clip_eta": 0.0}),
        (RegulationPreset.RATIO_CLIP, {"clip_eps": 0.0}),
    ])
    def test_preset_needs_its_technique(self, preset, overrides):
        with pytest.raises(ConfigurationError):
            resolve_regulation(preset, **overrides)

    def test_train_config_bounds(self):
        with pytest.raises(ConfigurationError):
            small_config(steps_per_iteration=0)
        with pytest.raises(ConfigurationError):
            small_config(group_size=1)


class TestIterationPieces:
    def test_partition_covers_pool_once(self):
        config = small_config(steps_per_iteration=3, prompts_per_step=4)
        partition = step_partition(config, 5)
        assert partition.shape == (3, 4)
        assert sorted(partition.ravel()) == list(range(12))
        np.testing.assert_array_equal(partition, step_partition(config, 5))

    def test_prompt_pool_size(self):
        config = small_config()
        assert len(prompts(config)) == config.prompts_per_iteration

    def test_group_members_share_one_pair_set(self, tiny_denoiser):
        for group in prepared_groups(tiny_denoiser, small_config()):
            assert all(pairs is group.pair_sets[0] for pairs in group.pair_sets)
            assert group.pair_sets[0].prompt_id == group.prompt_index

    def test_independent_pairs_when_not_shared(self, tiny_denoiser):
        config = small_config(surrogate=SurrogateConfig(n_mc=2, grid_size=8, shared_pairs=False))
        group = prepared_groups(tiny_denoiser, config)[0]
        assert len({id(pairs) for pairs in group.pair_sets}) == group.size

    def test_first_step_ratio_is_one(self, tiny_denoiser):
        config = small_config()
        groups = prepared_groups(tiny_denoiser, config, regulation=config.regulation())
        with T.private_tape():
            _, stats = vgrpo_step_loss(tiny_denoiser, groups, config.regulation(), config)
        assert stats.ratio_mean == 1.0
        assert stats.clip_fraction == 0.0
        assert stats.kl == 0.0

    def test_gradient_matches_surrogate_reinforce(self, tiny_denoiser):
        config = small_config()
        groups = prepared_groups(tiny_denoiser, config)
        with T.private_tape():
            loss, _ = vgrpo_step_loss(tiny_denoiser, groups, UNREGULATED, config)
            grads = gradients_by_name(tiny_denoiser.params, backward(loss))
        with T.private_tape():
            terms = []
            for group in groups:
                surrogate, _ = estimate_surrogate(tiny_denoiser, group.outputs, group.labels, group.pair_sets,
                                                  config.surrogate)
                terms.append(surrogate * group.soft_advantages)
            reference = T.mean(T.concat(terms, axis=0))
            expected = gradients_by_name(tiny_denoiser.params, backward(reference))
        for name in grads:
            np.testing.assert_allclose(grads[name], expected[name], atol=1e-9, err_msg=name)

    def test_zero_advantages_give_zero_gradient(self, tiny_denoiser):
        config = small_config()
        groups = [replace(g, advantages=np.zeros(g.size), soft_advantages=np.zeros(g.size))
                  for g in prepared_groups(tiny_denoiser, config)]
        with T.private_tape():
            loss, _ = vgrpo_step_loss(tiny_denoiser, groups, config.regulation(), config)
            grads = gradients_by_name(tiny_denoiser.params, backward(loss))
        for g in grads.values():
            np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_non_finite_loss_skips_step(self, tiny_denoiser):
        config = small_config()
        opt_state = config.optimizer.create_state(tiny_denoiser.params)

        def broken(policy):
            return T.sum_(T.constant([np.nan])), StepStats()

        policy, _, incident = apply_gradient_step(tiny_denoiser, opt_state, broken, 0, 1, False)
        assert policy is tiny_denoiser
        assert incident.step == 1 and "non-finite" in incident.reason
        with pytest.raises(NumericalError):
            apply_gradient_step(tiny_denoiser, opt_state, broken, 0, 1, True)


class TestIteration:
    def _run(self, policy, config, iteration=0):
        opt_state = config.optimizer.create_state(policy.params)
        return vgrpo_iteration(policy, opt_state, config, prompts(config, iteration), iteration, SPEC)

    def test_updates_policy_and_counts_nfe(self, tiny_denoiser):
        config = small_config()
        result = self._run(tiny_denoiser, config)
        assert len(result.steps) == 2 and not result.incidents
        assert result.train_rewards.shape == (1, 4 * 4)
        n_outputs = config.prompts_per_iteration * config.group_size
        assert result.nfe_old == n_outputs * (config.sampler.steps + config.surrogate.n_mc)
        assert result.nfe_new == 2 * config.prompts_per_step * config.group_size * config.surrogate.n_mc
        before = tiny_denoiser.params.weights[0].data
        assert not np.array_equal(before, result.policy.params.weights[0].data)

    def test_bitwise_deterministic(self, tiny_denoiser):
        config = small_config(diagnostics_every=1)
        first, second = self._run(tiny_denoiser, config), self._run(tiny_denoiser, config)
        for (_, a), (_, b) in zip(first.policy.params.named_tensors(), second.policy.params.named_tensors()):
            np.testing.assert_array_equal(a.data, b.data)
        assert [s.loss for s in first.steps] == [s.loss for s in second.steps]
        np.testing.assert_array_equal(first.gradnorm_pairs[1], second.gradnorm_pairs[1])

    def test_first_step_never_clips(self, tiny_denoiser):
        result = self._run(tiny_denoiser, small_config(steps_per_iteration=3, prompts_per_step=1))
        assert result.steps[0].clip_fraction == 0.0
        assert result.steps[0].ratio_mean == 1.0

    def test_kl_preset_runs(self, tiny_denoiser):
        result = self._run(tiny_denoiser, small_config(preset=RegulationPreset.KL_PENALTY))
        assert result.steps[0].kl == 0.0
        assert result.steps[1].kl > 0.0

    def test_soft_clip_bounds_advantages(self, tiny_denoiser):
        result = self._run(tiny_denoiser, small_config(preset=RegulationPreset.ADV_SOFT_CLIP, soft_clip_eta=0.5))
        for group in result.groups:
            assert np.all(np.abs(group.soft_advantages) < 0.5)

    def test_wrong_pool_size(self, tiny_denoiser):
        config = small_config()
        opt_state = config.optimizer.create_state(tiny_denoiser.params)
        with pytest.raises(ConfigurationError):
            vgrpo_iteration(tiny_denoiser, opt_state, config, prompts(config)[:1], 0, SPEC)
