"""Unit tests for attribute-based series and question generation."""

import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from datagen import (
    QUESTION_TEMPLATES,
    AttributeSpec,
    LocalEvent,
    Seasonality,
    TimeSeriesInstance,
    Trend,
    generate_samples,
    make_pair_qa,
    make_qa,
    read_dataset,
    recompute_label,
    recompute_pair_label,
    sample_spec,
    series_stats,
    synthesize,
    write_dataset,
)
from errors import ConfigurationError, ContractViolation, DatasetFormatError, TemplateNotApplicable


class TestSampleSpec:
    """Drawing attributes from the configured ranges."""

    def test_collapsed_ranges_give_those_values(self):
        ranges = {
            "length": [100, 100],
            "trend_directions": [1],
            "slope_magnitude": [0.05, 0.05],
            "period": [25, 25],
            "amplitude": [2.0, 2.0],
            "noise_sigma": [0.1, 0.1],
            "base_level": [3.0, 3.0],
            "event_count": [0, 0],
        }

        spec = sample_spec(7, ranges)

        assert spec.length == 100
        assert spec.trend == Trend("linear", 0.05)
        assert spec.seasonality == Seasonality(25, 2.0)
        assert spec.noise_sigma == 0.1
        assert spec.base_level == 3.0
        assert spec.local_events == ()
        assert spec.seed == 7

    def test_same_seed_same_spec(self):
        assert sample_spec(42) == sample_spec(42)

    def test_every_period_value_appears(self):
        periods = {sample_spec(seed).seasonality.period for seed in range(1000)}
        assert periods == set(range(20, 31))

    def test_empty_range_is_configuration_error(self):
        with pytest.raises(ConfigurationError):
            sample_spec(0, {"amplitude": [2.0, 1.0]})

    def test_unknown_range_key_rejected(self):
        with pytest.raises(ConfigurationError):
            sample_spec(0, {"wiggle": [0, 1]})

    def test_period_must_fit_shortest_series(self):
        with pytest.raises(ConfigurationError):
            sample_spec(0, {"length": [16, 64], "period": [20, 30]})

    def test_event_positions_within_series(self):
        ranges = {"length": [64, 64], "event_count": [2, 2]}
        for seed in range(50):
            spec = sample_spec(seed, ranges)
            spec.validate()
            positions = [e.position for e in spec.local_events]
            assert positions == sorted(positions)
            assert all(1 <= p <= 64 - 6 for p in positions)


class TestSynthesize:
    """Series construction from attributes."""

    def test_all_components_off(self):
        instance = synthesize(AttributeSpec(length=4, base_level=5.0))
        np.testing.assert_array_equal(instance.values, [5.0, 5.0, 5.0, 5.0])

    def test_lag_of_period_is_autocorrelation_peak(self):
        values = synthesize(AttributeSpec(length=100, seasonality=Seasonality(25, 1.0))).values
        scores = {lag: float(np.corrcoef(values[:-lag], values[lag:])[0, 1]) for lag in range(2, 51)}

        assert scores[25] == pytest.approx(1.0)
        # lag 50 is the second full period
        assert all(score < scores[25] - 1e-3 for lag, score in scores.items() if lag not in (25, 50))

    def test_level_shift_raises_mean(self):
        spec = AttributeSpec(length=100, local_events=(LocalEvent("level_shift", 50, 10.0),))
        values = synthesize(spec).values
        assert values[50:].mean() - values[:50].mean() == pytest.approx(10.0)

    def test_spike_is_triangular(self):
        spec = AttributeSpec(length=10, local_events=(LocalEvent("spike", 4, 2.0),))
        np.testing.assert_array_equal(synthesize(spec).values, [0, 0, 0, 1, 2, 1, 0, 0, 0, 0])

    def test_dip_at_series_start_is_clipped(self):
        spec = AttributeSpec(length=4, local_events=(LocalEvent("dip", 0, 2.0),))
        np.testing.assert_array_equal(synthesize(spec).values, [-2, -1, 0, 0])

    def test_shake_alternates_over_six_steps(self):
        spec = AttributeSpec(length=9, local_events=(LocalEvent("shake", 1, 1.5),))
        np.testing.assert_array_equal(synthesize(spec).values, [0, 1.5, -1.5, 1.5, -1.5, 1.5, -1.5, 0, 0])

    def test_pure(self):
        spec = sample_spec(3)
        np.testing.assert_array_equal(synthesize(spec).values, synthesize(spec).values)

    def test_periodic_series_repeats_after_trend_correction(self):
        spec = AttributeSpec(length=120, trend=Trend("linear", 0.03), seasonality=Seasonality(24, 1.7), base_level=2.0)
        values = synthesize(spec).values
        period = 24
        np.testing.assert_allclose(values[:-period], values[period:] - 0.03 * period, atol=1e-9)

    def test_invalid_spec_rejected(self):
        with pytest.raises(ContractViolation):
            synthesize(AttributeSpec(length=10, seasonality=Seasonality(8, 1.0)))
        with pytest.raises(ContractViolation):
            synthesize(AttributeSpec(length=10, local_events=(LocalEvent("spike", 10, 1.0),)))
        with pytest.raises(ContractViolation):
            synthesize(AttributeSpec(length=10, noise_sigma=-1.0))

    def test_stats_match_values(self):
        instance = synthesize(sample_spec(11))
        recomputed = series_stats(instance.values)
        for key, value in instance.stats.items():
            assert recomputed[key] == pytest.approx(value, abs=1e-9)

    def test_instance_length_must_match_spec(self):
        with pytest.raises(ContractViolation):
            TimeSeriesInstance(values=np.zeros(3), spec=AttributeSpec(length=4))


class TestMakeQa:
    """Question templates and ground-truth labels."""

    def test_increasing_trend(self):
        spec = AttributeSpec(length=256, trend=Trend("linear", 0.5))
        sample = make_qa(spec, "trend_class")
        assert sample.label == "increasing"
        assert sample.answer == "increasing"
        assert sample.task == "trend_class"

    def test_trend_threshold_bands(self):
        steady = AttributeSpec(length=100, trend=Trend("linear", 0.005))
        falling = AttributeSpec(length=100, trend=Trend("linear", -0.02))
        assert recompute_label(steady, "trend_class") == ("categorical", "steady")
        assert recompute_label(falling, "trend_class") == ("categorical", "decreasing")
        assert recompute_label(steady, "trend_class", trend_threshold=0.1) == ("categorical", "increasing")

    def test_period_answer(self):
        sample = make_qa(AttributeSpec(length=100, seasonality=Seasonality(25, 1.0)), "period_value")
        assert sample.answer == "25"
        assert sample.label_kind == "numeric"
        assert sample.question == QUESTION_TEMPLATES["period_value"]
        assert sample.context == "this is a time series with 100 points : <ts> ."

    def test_no_events(self):
        assert make_qa(AttributeSpec(length=20), "event_presence").label == "no"

    def test_event_position_is_first_event(self):
        spec = AttributeSpec(length=40, local_events=(LocalEvent("dip", 12, 1.0), LocalEvent("spike", 30, 1.0)))
        sample = make_qa(spec, "event_position")
        assert sample.label == 12
        assert sample.answer == "12"

    def test_amplitude_is_rendered_with_one_decimal(self):
        sample = make_qa(AttributeSpec(length=100, seasonality=Seasonality(20, 1.26)), "amplitude_value")
        assert sample.answer == "1.3"

    def test_noise_class(self):
        assert make_qa(AttributeSpec(length=10, noise_sigma=0.2), "noise_class").label == "high"
        assert make_qa(AttributeSpec(length=10, noise_sigma=0.05), "noise_class").label == "low"

    def test_period_question_on_aperiodic_series_is_skipped(self):
        with pytest.raises(TemplateNotApplicable):
            make_qa(AttributeSpec(length=50), "period_value")

    def test_unknown_template(self):
        with pytest.raises(ContractViolation):
            make_qa(AttributeSpec(length=50), "seasonal_vibes")

    def test_labels_recompute_from_specs(self):
        samples = generate_samples(30, 100, templates=("trend_class", "period_value", "event_presence"))
        for sample in samples:
            _, label = recompute_label(sample.series[0].spec, sample.task)
            assert label == sample.label

    def test_generate_cycles_templates(self):
        samples = generate_samples(4, 0, templates=("trend_class", "period_value"))
        assert [s.task for s in samples] == ["trend_class", "period_value", "trend_class", "period_value"]

    def test_generate_rejects_unknown_template(self):
        with pytest.raises(ConfigurationError):
            generate_samples(1, 0, templates=("bogus",))


class TestPairQuestions:
    """Questions asked over two series."""

    def test_larger_amplitude_wins(self):
        small = AttributeSpec(length=60, seasonality=Seasonality(10, 0.8))
        large = AttributeSpec(length=80, seasonality=Seasonality(12, 2.0))

        sample = make_pair_qa(small, large)

        assert sample.label == "second"
        assert sample.answer == "second"
        assert sample.task == "amplitude_compare"
        assert [s.spec for s in sample.series] == [small, large]
        assert sample.context.count("<ts>") == 2
        assert "60 points" in sample.context and "80 points" in sample.context
        assert make_pair_qa(large, small).label == "first"

    def test_close_or_aperiodic_pairs_are_skipped(self):
        periodic = AttributeSpec(length=60, seasonality=Seasonality(10, 1.0))
        close = AttributeSpec(length=60, seasonality=Seasonality(10, 1.2))
        flat = AttributeSpec(length=60)
        with pytest.raises(TemplateNotApplicable):
            make_pair_qa(periodic, close)
        with pytest.raises(TemplateNotApplicable):
            make_pair_qa(periodic, flat)

    def test_single_series_label_refuses_comparison(self):
        with pytest.raises(ContractViolation):
            recompute_label(AttributeSpec(length=60), "amplitude_compare")

    def test_generated_pairs_have_two_series_and_consistent_labels(self):
        samples = generate_samples(12, 40, templates=("trend_class", "amplitude_compare"))

        pairs = [s for s in samples if s.task == "amplitude_compare"]
        assert len(pairs) == 6
        for sample in pairs:
            first, second = (inst.spec for inst in sample.series)
            assert first.seed != second.seed
            assert recompute_pair_label(first, second, "amplitude_compare")[1] == sample.label
        assert all(len(s.series) == 1 for s in samples if s.task == "trend_class")

    def test_generation_is_reproducible(self):
        first = generate_samples(4, 7, templates=("amplitude_compare",))
        second = generate_samples(4, 7, templates=("amplitude_compare",))
        assert [s.answer for s in first] == [s.answer for s in second]
        for a, b in zip(first, second):
            for x, y in zip(a.series, b.series):
                np.testing.assert_array_equal(x.values, y.values)

    def test_pairs_survive_the_dataset_file(self, temp_directory):
        path = os.path.join(temp_directory, "pairs.jsonl")
        samples = generate_samples(3, 0, templates=("amplitude_compare",))

        write_dataset(samples, path)
        restored = read_dataset(path)

        assert [len(s.series) for s in restored] == [2, 2, 2]
        assert [s.label for s in restored] == [s.label for s in samples]


class TestDatasetFiles:
    """Line-oriented dataset round trips."""

    def test_round_trip(self, temp_directory):
        path = os.path.join(temp_directory, "data.jsonl")
        samples = generate_samples(100, 500)

        write_dataset(samples, path)
        loaded = read_dataset(path)

        assert len(loaded) == 100
        for original, restored in zip(samples, loaded):
            assert restored.context == original.context
            assert restored.question == original.question
            assert restored.answer == original.answer
            assert restored.label == original.label
            assert restored.label_kind == original.label_kind
            assert restored.series[0].spec == original.series[0].spec
            np.testing.assert_array_equal(restored.series[0].values, original.series[0].values)

    def test_record_field_names(self, temp_directory):
        path = os.path.join(temp_directory, "data.jsonl")
        write_dataset(generate_samples(1, 0), path)
        with open(path, encoding="utf-8") as f:
            record = json.loads(f.readline())
        assert set(record) == {"context", "question", "answer", "label_kind", "label", "series", "spec"}

    def test_empty_file(self, temp_directory):
        path = os.path.join(temp_directory, "empty.jsonl")
        open(path, "w").close()
        assert read_dataset(path) == []

    def test_truncated_final_line_names_line(self, temp_directory):
        path = os.path.join(temp_directory, "data.jsonl")
        write_dataset(generate_samples(3, 0), path)
        with open(path, encoding="utf-8") as f:
            content = f.read()
        with open(path, "w", encoding="utf-8") as f:
            f.write(content[: len(content) - 40])

        with pytest.raises(DatasetFormatError) as excinfo:
            read_dataset(path)

        assert excinfo.value.line_number == 3
        assert "line 3" in str(excinfo.value)
