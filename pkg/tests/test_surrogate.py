"""Timestep-noise pairs, per-pair losses, surrogates, ratios and the KL penalty."""
import numpy as np
import pytest
from scipy import stats

from vgrpo_lab.core import tensor as T
from vgrpo_lab.core.tensor import Tensor, backward, no_grad
from vgrpo_lab.models.schedule import PredictionKind, WeightFunction, training_grid
from vgrpo_lab.oracle import AnalyticDenoiser, GaussianProblem, expected_grid_loss
from vgrpo_lab.services.surrogate import (SurrogateConfig, TimestepNoiseSet, Weighting, adaptive_loss,
                                          draw_pairs, draw_stratified_pairs, draw_uniform_pairs,
                                          estimate_surrogate, importance_ratio, kl_simple, pair_losses,
                                          per_sample_loss, store_old_surrogate, surrogate_gradient_norms)
from vgrpo_lab.utils.exceptions import ConfigurationError, NumericalError, UsageError
from vgrpo_lab.utils.metrics import surrogate_statistics

ADAPTIVE = SurrogateConfig(n_mc=4, grid_size=8)


class TestPairs:
    def test_one_point_per_stratum(self):
        grid = training_grid(8)
        for seed in range(20):
            pairs = draw_stratified_pairs(grid, 4, 2, seed)
            np.testing.assert_array_equal(pairs.grid_indices // 2, [0, 1, 2, 3])
            np.testing.assert_array_equal(pairs.times, grid[pairs.grid_indices])
            assert pairs.noises.shape == (4, 2)

    def test_full_grid_when_n_mc_equals_length(self):
        grid = training_grid(6)
        np.testing.assert_array_equal(draw_stratified_pairs(grid, 6, 1, seed=3).times, grid)

    def test_uneven_strata_rejected(self):
        with pytest.raises(ConfigurationError):
            draw_stratified_pairs(training_grid(10), 4, 2, seed=0)

    def test_selection_uniform_within_strata(self):
        counts = np.zeros((4, 10))
        for seed in range(10_000):
            indices = draw_stratified_pairs(training_grid(40), 4, 1, seed).grid_indices
            counts[np.arange(4), indices % 10] += 1
        for stratum in counts:
            assert stats.chisquare(stratum).pvalue > 1e-4

    def test_uniform_pairs_stay_on_grid(self):
        grid = training_grid(40)
        pairs = draw_uniform_pairs(grid, 16, 2, seed=5)
        assert set(pairs.times) <= set(grid)

    def test_draw_follows_config(self):
        config = SurrogateConfig(n_mc=4, grid_size=8, stratified=False)
        a = draw_pairs(config, 2, seed=1)
        b = draw_uniform_pairs(training_grid(8), 4, 2, seed=1)
        np.testing.assert_array_equal(a.times, b.times)

    def test_pair_set_is_frozen(self):
        pairs = draw_stratified_pairs(training_grid(8), 4, 2, seed=0)
        with pytest.raises(ValueError):
            pairs.noises[0, 0] = 1.0

    def test_mismatched_pair_set(self):
        with pytest.raises(UsageError):
            TimestepNoiseSet(np.array([0.5]), np.array([0]), np.zeros((2, 2)), 0, 0)


class TestAdaptiveLoss:
    def test_constant_residual(self):
        losses, degenerate = adaptive_loss(T.constant(np.full((1, 3), 0.4)))
        assert losses.data[0] == pytest.approx(3 * 0.4)
        assert not degenerate[0]

    @pytest.mark.parametrize("k", [0.1, 2.0, 37.0])
    def test_scales_linearly(self, k, rng):
        residual = rng.standard_normal((5, 3))
        base, _ = adaptive_loss(T.constant(residual))
        scaled, _ = adaptive_loss(T.constant(k * residual))
        np.testing.assert_allclose(scaled.data, k * base.data)

    def test_zero_residual_is_degenerate(self):
        r = Tensor(np.array([[0.0, 0.0], [1.0, -1.0]]), requires_grad=True)
        losses, degenerate = adaptive_loss(r)
        np.testing.assert_array_equal(degenerate, [True, False])
        assert losses.data[0] == 0.0
        grad = backward(T.sum_(losses))[r]
        np.testing.assert_array_equal(grad[0], [0.0, 0.0])
        np.testing.assert_allclose(grad[1], [2.0, -2.0])

    def test_stopped_denominator_changes_gradient_not_value(self, rng):
        values = rng.standard_normal((4, 3))
        scale = np.mean(np.abs(values), axis=1, keepdims=True)

        stopped = Tensor(values.copy(), requires_grad=True)
        losses, _ = adaptive_loss(stopped)
        stopped_value = losses.data.copy()
        stopped_grad = backward(T.sum_(losses))[stopped]

        live = Tensor(values.copy(), requires_grad=True)
        live_losses = T.sum_(T.square(live), axis=1) / T.mean(T.abs_(live), axis=1)
        live_value = live_losses.data.copy()
        live_grad = backward(T.sum_(live_losses))[live]

        np.testing.assert_allclose(stopped_value, live_value, rtol=1e-12)
        np.testing.assert_allclose(stopped_grad, 2.0 * values / scale, rtol=1e-10)
        squared = np.sum(values ** 2, axis=1, keepdims=True)
        expected_live = 2.0 * values / scale - squared / scale ** 2 * np.sign(values) / values.shape[1]
        np.testing.assert_allclose(live_grad, expected_live, rtol=1e-10)
        assert not np.allclose(stopped_grad, live_grad)


class TestSurrogate:
    def test_single_pair_equals_per_sample_loss(self, tiny_denoiser, rng):
        o, eps = rng.standard_normal(2), rng.standard_normal(2)
        config = SurrogateConfig(n_mc=1, grid_size=8)
        pair_set = TimestepNoiseSet(np.array([0.3125]), np.array([2]), eps.reshape(1, 2), 0, 0)
        surrogate, _ = estimate_surrogate(tiny_denoiser, o.reshape(1, 2), [1], [pair_set], config)
        single = per_sample_loss(tiny_denoiser, o, 1, 0.3125, eps, config)
        assert surrogate.data[0] == pytest.approx(single.item(), rel=1e-12)

    @pytest.mark.parametrize("weighting", list(Weighting))
    def test_pair_order_does_not_matter(self, tiny_denoiser, rng, weighting):
        config = SurrogateConfig(n_mc=4, grid_size=8, weighting=weighting, weight_fn=WeightFunction.ELBO)
        pairs = draw_stratified_pairs(config.grid(), 4, 2, seed=0)
        order = np.array([2, 0, 3, 1])
        shuffled = TimestepNoiseSet(pairs.times[order], pairs.grid_indices[order], pairs.noises[order], 0, 0)
        outputs = rng.standard_normal((3, 2))
        a, _ = estimate_surrogate(tiny_denoiser, outputs, [0, 1, 0], [pairs] * 3, config)
        b, _ = estimate_surrogate(tiny_denoiser, outputs, [0, 1, 0], [shuffled] * 3, config)
        np.testing.assert_allclose(a.data, b.data, rtol=1e-12)

    def test_matches_analytic_expectation(self):
        problem = GaussianProblem(np.array([0.5, -0.5]), np.array([0.7, 1.2]))
        denoiser = AnalyticDenoiser(problem, PredictionKind.X_PRED)
        config = SurrogateConfig(n_mc=100_000, weighting=Weighting.GENERIC_W, stratified=False)
        o = np.array([[1.0, 0.3]])
        pairs = draw_pairs(config, 2, seed=17)
        surrogate, evaluation = estimate_surrogate(denoiser, o, [0], [pairs], config)
        standard_error = evaluation.losses.data.std() / np.sqrt(config.n_mc)
        expected = expected_grid_loss(problem, o[0], config.grid(), PredictionKind.X_PRED)
        assert abs(surrogate.data[0] - expected) < 3 * standard_error

    def test_error_shrinks_with_pair_count(self):
        problem = GaussianProblem(np.zeros(2), np.full(2, 0.5))
        denoiser = AnalyticDenoiser(problem, PredictionKind.X_PRED)
        config = SurrogateConfig(n_mc=32_000, stratified=False)
        pairs = draw_pairs(config, 2, seed=4)
        with no_grad():
            losses = pair_losses(denoiser, np.array([[0.4, -0.2]]), [0], [pairs], config).losses.data[0]
        scaled = []
        for n in (2, 4, 8, 16):
            estimates = losses.reshape(-1, n).mean(axis=1)
            scaled.append(estimates.std() * np.sqrt(n))
        assert max(scaled) / min(scaled) < 1.5

    def test_group_shared_pairs_reduce_within_group_spread(self):
        problem = GaussianProblem(np.zeros(2), np.full(2, 0.5))
        denoiser = AnalyticDenoiser(problem, PredictionKind.X_PRED)
        rng = np.random.default_rng(0)
        shared, independent = [], []
        with no_grad():
            for group in range(64):
                outputs = problem.mean + problem.std * rng.standard_normal((8, 2))
                pairs = draw_stratified_pairs(training_grid(40), 4, 2, seed=group)
                surrogate, _ = estimate_surrogate(denoiser, outputs, 0, [pairs] * 8, ADAPTIVE)
                shared.append(surrogate.data)
                own = [draw_uniform_pairs(training_grid(40), 4, 2, seed=10_000 + 8 * group + i) for i in range(8)]
                surrogate, _ = estimate_surrogate(denoiser, outputs, 0, own, ADAPTIVE)
                independent.append(surrogate.data)
        assert surrogate_statistics(shared)["within_group_cv"] < surrogate_statistics(independent)["within_group_cv"]

    def test_pair_set_count_must_match(self, tiny_denoiser, rng):
        pairs = draw_stratified_pairs(training_grid(8), 4, 2, seed=0)
        with pytest.raises(UsageError):
            pair_losses(tiny_denoiser, rng.standard_normal((2, 2)), [0, 1], [pairs], ADAPTIVE)

    def test_old_surrogate_frozen_values(self, tiny_denoiser, rng):
        pairs = draw_stratified_pairs(training_grid(8), 4, 2, seed=0)
        outputs = rng.standard_normal((3, 2))
        recorded = len(T.get_tape())
        stored = store_old_surrogate(tiny_denoiser, outputs, [0, 0, 0], [pairs] * 3, ADAPTIVE)
        assert stored.pair_losses.shape == (3, 4)
        assert stored.kl_predictions.shape == (3, 4, 2)
        np.testing.assert_allclose(stored.surrogates, stored.pair_losses.mean(axis=1))
        assert len(T.get_tape()) == recorded

    def test_gradient_norms_per_output(self, tiny_denoiser, rng):
        pairs = draw_stratified_pairs(training_grid(8), 4, 2, seed=0)
        outputs = rng.standard_normal((3, 2))
        stored = store_old_surrogate(tiny_denoiser, outputs, [1, 1, 1], [pairs] * 3, ADAPTIVE)
        magnitudes, norms = surrogate_gradient_norms(tiny_denoiser, outputs, [1, 1, 1], [pairs] * 3,
                                                     stored.surrogates, ADAPTIVE)
        np.testing.assert_allclose(magnitudes, stored.surrogates)
        assert norms.shape == (3,) and np.all(norms > 0.0)


class TestRatio:
    def test_same_policy_gives_exactly_one(self, tiny_denoiser, rng):
        pairs = draw_stratified_pairs(training_grid(8), 4, 2, seed=0)
        outputs = rng.standard_normal((4, 2))
        stored = store_old_surrogate(tiny_denoiser, outputs, [0, 1, 0, 1], [pairs] * 4, ADAPTIVE)
        new, _ = estimate_surrogate(tiny_denoiser, outputs, [0, 1, 0, 1], [pairs] * 4, ADAPTIVE)
        np.testing.assert_array_equal(importance_ratio(new, stored.surrogates).data, np.ones(4))

    def test_known_value_and_swap(self):
        forward = importance_ratio(np.array([1.0]), np.array([1.1])).data[0]
        assert forward == pytest.approx(np.exp(0.1), rel=1e-12)
        assert forward == pytest.approx(1.10517, abs=1e-5)
        swapped = importance_ratio(np.array([1.1]), np.array([1.0])).data[0]
        assert forward * swapped == pytest.approx(1.0)

    def test_clamped(self):
        ratio = importance_ratio(np.array([0.0, 100.0]), np.array([100.0, 0.0])).data
        np.testing.assert_allclose(ratio, [1e6, 1e-6])

    def test_non_finite_rejected(self):
        with pytest.raises(NumericalError):
            importance_ratio(np.array([np.nan]), np.array([1.0]))


class TestKl:
    def test_identical_predictions(self, rng):
        p = rng.standard_normal((4, 2))
        assert kl_simple(p, p).item() == 0.0

    def test_constant_shift(self, rng):
        p, u = rng.standard_normal((5, 3)), np.array([1.0, -2.0, 0.5])
        assert kl_simple(p + u, p).item() == pytest.approx(float(u @ u))

    def test_batched_and_nonnegative(self, rng):
        a, b = rng.standard_normal((6, 4, 2)), rng.standard_normal((6, 4, 2))
        kl = kl_simple(a, b).data
        assert kl.shape == (6,) and np.all(kl >= 0.0)

    def test_pair_count_mismatch(self, rng):
        with pytest.raises(UsageError):
            kl_simple(rng.standard_normal((4, 2)), rng.standard_normal((3, 2)))
