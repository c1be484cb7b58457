"""Forecast datasets and heuristic-k selection on small sequence-labeling records."""
import numpy as np
import pytest

from helpers import tagging_records
from pipelines.calibration_pipeline import (
    build_forecast_dataset,
    decode_records,
    positive_coverage,
    select_heuristic_k,
)
from services.feature_service import FeatureSchema
from utils.errors import MissingGoldError


@pytest.fixture
def records(rng, tag_labels):
    return tagging_records(rng, tag_labels)


class TestForecastDataset:
    def test_one_row_per_event(self, records, tag_labels):
        dataset = build_forecast_dataset(records, tag_labels, 2, FeatureSchema.preset("rank"))
        # 81 distinct sequences of length 4, so every instance yields exactly k events
        assert len(dataset) == 2 * len(records)
        assert dataset.k == 2
        assert dataset.X.shape == (2 * len(records), 2)
        assert set(np.unique(dataset.labels)) <= {0, 1}

    def test_at_most_one_positive_per_instance(self, records, tag_labels):
        dataset = build_forecast_dataset(records, tag_labels, 3, FeatureSchema.preset("mean"))
        assert 0 < dataset.positives <= len(records)

    def test_missing_gold_rejected(self, rng, tag_labels):
        unlabeled = tagging_records(rng, tag_labels, n=3, with_gold=False)
        with pytest.raises(MissingGoldError):
            build_forecast_dataset(unlabeled, tag_labels, 1, FeatureSchema.preset("mean"))

    def test_shared_decodes_match_fresh_ones(self, records, tag_labels):
        schema = FeatureSchema.preset("rank_var")
        decodes = decode_records(records, 3, n_jobs=1)
        shared = build_forecast_dataset(records, tag_labels, 2, schema, decodes=decodes)
        fresh = build_forecast_dataset(records, tag_labels, 2, schema)
        np.testing.assert_allclose(shared.X, fresh.X)
        np.testing.assert_array_equal(shared.labels, fresh.labels)


class TestHeuristicK:
    def test_selects_lowest_validation_ece(self, records, tag_labels):
        selected = select_heuristic_k(
            records, tag_labels, k_max=3, schema=FeatureSchema.preset("mean"), kind="platt",
            candidates=[1, 2, 3], n_jobs=1,
        )
        assert set(selected.candidate_eces) == {1, 2, 3}
        best = min(selected.candidate_eces.values())
        assert selected.val_ece == best
        assert selected.chosen_k == min(k for k, ece in selected.candidate_eces.items() if ece == best)

    def test_candidates_clipped_to_k_max(self, records, tag_labels):
        selected = select_heuristic_k(
            records, tag_labels, k_max=2, schema=FeatureSchema.preset("mean"), kind="platt",
            candidates=[2, 3, 5], n_jobs=1,
        )
        assert set(selected.candidate_eces) == {2}
        assert selected.chosen_k == 2

    def test_invalid_k_max(self, records, tag_labels):
        with pytest.raises(ValueError):
            select_heuristic_k(records, tag_labels, k_max=0, schema=FeatureSchema.preset("mean"))


class TestCoverage:
    def test_positive_coverage_non_decreasing(self, records, tag_labels):
        decodes = decode_records(records, 4, n_jobs=1)
        coverage = positive_coverage(records, tag_labels, decodes, 4)
        counts = [coverage[k] for k in range(1, 5)]
        assert counts == sorted(counts)
        assert counts[-1] <= len(records)
