"""Diagnostic statistics and the metrics table."""
import csv

import numpy as np
import pytest

from vgrpo_lab.utils.exceptions import UsageError
from vgrpo_lab.utils.metrics import (MetricsRow, MetricsWriter, coefficient_of_variation, collapse_events,
                                     format_value, gradnorm_fit, metrics_header, steps_to_threshold,
                                     summarize, surrogate_statistics)


class TestSurrogateStatistics:
    def test_within_group_cv(self):
        stats = surrogate_statistics([np.array([1.0, 3.0]), np.array([1.0, 3.0])])
        assert stats["within_group_cv"] == pytest.approx(0.5)
        assert stats["mean"] == pytest.approx(2.0)
        assert stats["cv"] == pytest.approx(0.5)

    def test_group_offsets_raise_pooled_cv_only(self):
        stats = surrogate_statistics([np.array([1.0, 1.0]), np.array([3.0, 3.0])])
        assert stats["within_group_cv"] == 0.0
        assert stats["cv"] == pytest.approx(0.5)

    def test_zero_mean_group_is_skipped(self):
        stats = surrogate_statistics([np.array([-1.0, 1.0]), np.array([1.0, 3.0])])
        assert stats["within_group_cv"] == pytest.approx(0.5)

    @pytest.mark.parametrize("groups", [[np.array([1.0, 2.0])], [np.array([1.0]), np.array([1.0, 2.0])]])
    def test_too_little_data(self, groups):
        with pytest.raises(UsageError):
            surrogate_statistics(groups)

    def test_cv_of_zero_mean(self):
        assert coefficient_of_variation(np.array([-2.0, 2.0])) is None


class TestGradnormFit:
    def test_exact_quadratic(self):
        x = np.linspace(0.0, 3.0, 10)
        assert gradnorm_fit(x, 2.0 * x ** 2 + 1.0) == pytest.approx(1.0)

    def test_noise_lowers_fit(self, rng):
        x = np.linspace(0.0, 3.0, 200)
        assert gradnorm_fit(x, rng.standard_normal(200)) < 0.2

    def test_degenerate_inputs(self):
        with pytest.raises(UsageError):
            gradnorm_fit(np.ones(5), np.arange(5.0))
        with pytest.raises(UsageError):
            gradnorm_fit(np.arange(2.0), np.arange(2.0))


class TestCurves:
    def test_collapse_events(self):
        assert collapse_events([0.2, 0.8, 0.5, 0.3, 0.9, 0.1]) == [3, 5]

    def test_no_collapse_on_monotone_curve(self):
        assert collapse_events([0.1, 0.2, 0.3]) == []

    def test_nan_is_skipped(self):
        assert collapse_events([1.0, float("nan"), 0.4]) == [2]

    def test_steps_to_threshold(self):
        assert steps_to_threshold([0.1, 0.5, 0.7], [4, 8, 12], 0.5) == 8
        assert steps_to_threshold([0.1, 0.2], [4, 8], 0.5) is None

    def test_summarize(self):
        assert summarize(np.array([1.0, 2.0, 6.0])) == (3.0, 1.0, 6.0)
        assert all(np.isnan(v) for v in summarize(np.array([])))


class TestMetricsWriter:
    def test_header_layout(self):
        header = metrics_header(["region_indicator"])
        assert header[:2] == ["stage", "iteration"]
        assert "train_region_indicator_mean" in header
        assert "heldout_region_indicator_max" in header
        assert header[-1] == "degenerate_pairs"
        assert len(header) == len(set(header))

    def test_rows(self, tmp_path):
        path = tmp_path / "metrics.csv"
        header = metrics_header(["bump"])
        writer = MetricsWriter(str(path), header)
        writer.append(MetricsRow(stage=0, iteration=1, values={"train_reward_mean": 0.25, "incidents": 0}))
        with open(path) as f:
            rows = list(csv.reader(f))
        assert rows[0] == header
        row = dict(zip(header, rows[1]))
        assert row["iteration"] == "1"
        assert row["train_reward_mean"] == "0.25"
        assert row["incidents"] == "0"
        assert row["kl"] == ""

    def test_value_formatting(self):
        assert format_value(None) == ""
        assert format_value(True) == "1"
        assert format_value(float("nan")) == "nan"
        assert format_value(np.int64(7)) == "7"
        assert format_value(0.1) == "0.1"
