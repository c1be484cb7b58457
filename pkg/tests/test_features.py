"""Feature rows: sample statistics, schema handling and CSV export."""
import numpy as np
import pytest

from services.decode_service import entity_sample_probabilities
from services.feature_service import (
    FEATURE_NAMES,
    SCHEMA_PRESETS,
    FeatureSchema,
    export_features_csv,
    feature_matrix,
    featurize,
    featurize_events,
    summarize_probabilities,
)
from services.language_model_service import train_lm
from utils.core_types import Entity, EntityKind, Event, McSampleSet
from utils.dump_io import read_csv
from utils.errors import ConfigError, MissingLanguageModelError

FULL = FeatureSchema(FEATURE_NAMES)


def _sequence_event(rank=1, labels=(0, 1, 2, 0)):
    return Event(Entity(EntityKind.SEQUENCE, labels, rank), positive=True)


class TestSummaries:
    def test_values(self):
        summary = summarize_probabilities(np.array([0.1, 0.2, 0.3, 0.4, 0.5]))
        assert summary["mean_prob"] == pytest.approx(0.3)
        assert summary["p10"] == pytest.approx(0.14)
        assert summary["p90"] == pytest.approx(0.46)
        assert summary["variance"] == pytest.approx(0.02)

    def test_single_sample(self):
        summary = summarize_probabilities(np.array([0.7]))
        assert summary["p10"] == summary["p90"] == summary["mean_prob"] == pytest.approx(0.7)
        assert summary["variance"] == 0.0

    def test_percentiles_ordered(self, rng):
        summary = summarize_probabilities(rng.uniform(size=25))
        assert summary["p10"] <= summary["p90"]


class TestSchema:
    def test_presets_valid(self):
        for name in SCHEMA_PRESETS:
            assert FeatureSchema.preset(name).names[0] == "mean_prob"

    def test_mean_prob_required(self):
        with pytest.raises(ConfigError):
            FeatureSchema(("rank",))

    def test_unknown_and_duplicate_names(self):
        with pytest.raises(ConfigError):
            FeatureSchema(("mean_prob", "entropy"))
        with pytest.raises(ConfigError):
            FeatureSchema(("mean_prob", "mean_prob"))
        with pytest.raises(ConfigError):
            FeatureSchema.preset("nope")

    def test_lm_flag(self):
        assert FeatureSchema.preset("rank_var_lm").needs_lm
        assert not FeatureSchema.preset("rank_var").needs_lm


class TestFeaturize:
    def test_row_follows_schema_order(self, sample_set):
        event = _sequence_event(rank=3)
        row = featurize(sample_set, event, FeatureSchema(("mean_prob", "rank", "span_len")))
        probabilities = entity_sample_probabilities(sample_set, event.entity)
        assert row.values == pytest.approx((np.mean(probabilities), 3.0, 4.0))
        assert row["rank"] == 3.0

    def test_permutation_invariant(self, sample_set):
        event = _sequence_event()
        reversed_set = McSampleSet(tuple(reversed(sample_set.samples)))
        assert featurize(sample_set, event, FULL, lm_perplexity=5.0).values == \
            featurize(reversed_set, event, FULL, lm_perplexity=5.0).values

    def test_lm_required_when_schema_asks(self, sample_set):
        with pytest.raises(MissingLanguageModelError):
            featurize(sample_set, _sequence_event(), FeatureSchema.preset("rank_var_lm"))
        with pytest.raises(MissingLanguageModelError):
            featurize_events(sample_set, [_sequence_event()], FeatureSchema.preset("rank_var_lm"))

    def test_lm_perplexity_feature(self, sample_set):
        lm = train_lm([["a", "b", "c", "d"]], n=2, alpha=1.0)
        tokens = ["a", "b", "c", "d"]
        row = featurize(sample_set, _sequence_event(), FeatureSchema.preset("rank_var_lm"), lm, tokens)
        assert row["lm_perplexity"] == pytest.approx(lm.perplexity(tokens))

    def test_featurize_events_matches_single_calls(self, sample_set):
        events = [_sequence_event(1, (0, 1, 2, 0)), _sequence_event(2, (1, 1, 1, 1))]
        schema = FeatureSchema.preset("rank_var")
        rows = featurize_events(sample_set, events, schema)
        assert [r.values for r in rows] == [featurize(sample_set, e, schema).values for e in events]

    def test_feature_matrix(self, sample_set):
        schema = FeatureSchema.preset("rank")
        rows = featurize_events(sample_set, [_sequence_event(1), _sequence_event(2, (2, 2, 2, 2))], schema)
        matrix = feature_matrix(rows, schema)
        assert matrix.shape == (2, 2)
        np.testing.assert_array_equal(matrix[:, 1], [1.0, 2.0])
        assert feature_matrix([], schema).shape == (0, 2)


class TestExport:
    def test_csv_header_and_hash(self, sample_set, tmp_path):
        schema = FeatureSchema.preset("rank_var")
        rows = featurize_events(sample_set, [_sequence_event()], schema)
        path = export_features_csv([(rows[0], 1)], schema, tmp_path / "features.csv", config_hash="abc")
        assert path.read_text().splitlines()[0] == "# config_hash=abc"
        frame = read_csv(path)
        assert list(frame.columns) == list(schema.names) + ["label"]
        assert frame["label"].tolist() == [1]
