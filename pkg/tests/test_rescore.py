"""Re-ranking and span filtering with calibrated confidence."""
import pytest

from helpers import random_lattice
from pipelines.evaluation_pipeline import inspection_table, rescore_records
from services.decode_service import ScoredSequence, kbest_viterbi
from services.event_service import build_span_events, extract_spans
from services.feature_service import FeatureSchema
from services.forecaster_service import GbdtForecaster
from services.gbdt_service import GbdtModel, RegressionTree
from services.rescore_service import (
    BEST_WINS,
    INSPECTION_COLUMNS,
    KEEP_ALL,
    RANK_SELECT,
    THRESHOLD_FILTER,
    RescoreConfig,
    inspection_frame,
    rescore_answers,
    rescore_sequences,
    rescore_spans,
)
from utils.core_types import Entity, EntityKind, Event, Instance, Lattice, McSampleSet, SampledInstance, Task
from utils.errors import ConfigError, EmptyDataError


def _span(start, end, label_class, rank=1):
    return Event(Entity(EntityKind.SPAN, (start, end, label_class), rank))


def _payloads(events):
    return [event.entity.payload for event in events]


def rank_preferring_forecaster():
    """Confidence 0.88 for rank-1 events and 0.12 for every other rank."""
    tree = RegressionTree([1, -1, -1], [1.5, 0.0, 0.0], [1, -1, -1], [2, -1, -1], [0.0, 2.0, -2.0])
    return GbdtForecaster(model=GbdtModel(0.0, 1.0, [tree]), schema=FeatureSchema(("mean_prob", "rank")))


class TestArgmax:
    def test_highest_confidence_wins(self):
        events = [Event(Entity(EntityKind.SEQUENCE, (0, 0), 1)), Event(Entity(EntityKind.SEQUENCE, (0, 1), 2))]
        assert rescore_sequences(events, [0.3, 0.7]) is events[1]

    def test_ties_go_to_lower_rank(self):
        events = [Event(Entity(EntityKind.ANSWER_SPAN, (2, 3), 2)), Event(Entity(EntityKind.ANSWER_SPAN, (0, 1), 1))]
        assert rescore_answers(events, [0.5, 0.5]).entity.rank == 1

    def test_errors(self):
        with pytest.raises(EmptyDataError):
            rescore_answers([], [])
        with pytest.raises(ConfigError):
            rescore_sequences([Event(Entity(EntityKind.SEQUENCE, (0,), 1))], [0.1, 0.2])


class TestSpans:
    def test_threshold_keep_all(self):
        events = [_span(3, 4, "LOC"), _span(0, 2, "PER"), _span(1, 3, "LOC", rank=2)]
        kept = rescore_spans(events, [0.9, 0.4, 0.6], RescoreConfig(THRESHOLD_FILTER, 0.5, KEEP_ALL))
        assert _payloads(kept) == [(1, 3, "LOC"), (3, 4, "LOC")]

    def test_threshold_is_inclusive(self):
        kept = rescore_spans([_span(0, 1, "PER")], [0.5], RescoreConfig(THRESHOLD_FILTER, 0.5))
        assert len(kept) == 1

    def test_best_wins_drops_overlapping_losers(self):
        events = [_span(0, 2, "PER"), _span(1, 3, "LOC", rank=2), _span(4, 5, "PER")]
        kept = rescore_spans(events, [0.7, 0.8, 0.6], RescoreConfig(THRESHOLD_FILTER, 0.5, BEST_WINS))
        assert _payloads(kept) == [(1, 3, "LOC"), (4, 5, "PER")]

    def test_best_wins_tie_prefers_earlier_start(self):
        events = [_span(1, 3, "LOC"), _span(0, 2, "PER")]
        kept = rescore_spans(events, [0.8, 0.8], RescoreConfig(THRESHOLD_FILTER, 0.5, BEST_WINS))
        assert _payloads(kept) == [(0, 2, "PER")]

    def test_adjacent_spans_do_not_overlap(self):
        events = [_span(0, 2, "PER"), _span(2, 4, "LOC")]
        assert len(rescore_spans(events, [0.9, 0.9], RescoreConfig(THRESHOLD_FILTER, 0.5, BEST_WINS))) == 2

    def test_rank_select_returns_whole_hypothesis(self, bio_labels):
        # B-PER I-PER O O O / B-PER I-PER O O B-LOC
        decodes = [ScoredSequence((1, 2, 0, 0, 0), -1.0, 1), ScoredSequence((1, 2, 0, 0, 3), -2.0, 2)]
        events = build_span_events(decodes, bio_labels)
        kept = rescore_spans(list(events.events), [0.9, 0.8], RescoreConfig(RANK_SELECT), events.hypotheses)
        assert _payloads(kept) == [(0, 2, "PER"), (4, 5, "LOC")]

    def test_rank_select_keeps_empty_top_hypothesis(self, bio_labels):
        # O O O O O / B-PER I-PER O O B-LOC
        decodes = [ScoredSequence((0, 0, 0, 0, 0), -1.0, 1), ScoredSequence((1, 2, 0, 0, 3), -2.0, 2)]
        events = build_span_events(decodes, bio_labels)
        assert events.hypotheses[0] == frozenset()
        scores = [0.2 for _ in events.events]
        kept = rescore_spans(list(events.events), scores, RescoreConfig(RANK_SELECT), events.hypotheses)
        assert kept == []

    def test_rank_select_promotes_confident_shorter_span(self, bio_labels):
        # B-PER I-PER O / B-PER O O
        decodes = [ScoredSequence((1, 2, 0), -1.0, 1), ScoredSequence((1, 0, 0), -2.0, 2)]
        events = build_span_events(decodes, bio_labels)
        scores = [0.45 if event.entity.payload == (0, 2, "PER") else 0.7 for event in events.events]
        kept = rescore_spans(list(events.events), scores, RescoreConfig(RANK_SELECT), events.hypotheses)
        assert _payloads(kept) == [(0, 1, "PER")]

    def test_rank_select_with_rank_preference_reproduces_baseline(self, bio_labels):
        # O B-PER I-PER O B-LOC / B-PER I-PER O O B-LOC / O O O O O
        decodes = [
            ScoredSequence((0, 1, 2, 0, 3), -1.0, 1),
            ScoredSequence((1, 2, 0, 0, 3), -2.0, 2),
            ScoredSequence((0, 0, 0, 0, 0), -3.0, 3),
        ]
        events = build_span_events(decodes, bio_labels)
        scores = [0.9 if event.entity.rank == 1 else 0.2 for event in events.events]
        kept = rescore_spans(list(events.events), scores, RescoreConfig(RANK_SELECT), events.hypotheses)
        assert set(_payloads(kept)) == extract_spans(decodes[0], bio_labels)

    def test_rank_select_agreeing_forecaster_is_baseline(self, rng, bio_labels):
        for _ in range(40):
            decodes = kbest_viterbi(random_lattice(rng, 6, bio_labels.size, scale=2.0), 4)
            events = build_span_events(decodes, bio_labels)
            scores = [
                rng.uniform(0.55, 1.0) if event.entity.rank == 1 else rng.uniform(0.0, 0.45)
                for event in events.events
            ]
            kept = rescore_spans(list(events.events), scores, RescoreConfig(RANK_SELECT), events.hypotheses)
            assert set(_payloads(kept)) == extract_spans(decodes[0], bio_labels)

    def test_rank_select_needs_hypotheses(self):
        with pytest.raises(ConfigError):
            rescore_spans([_span(0, 1, "PER")], [0.9], RescoreConfig(RANK_SELECT))

    def test_empty_and_invalid(self):
        assert rescore_spans([], []) == []
        with pytest.raises(ConfigError):
            rescore_spans([Event(Entity(EntityKind.ANSWER_SPAN, (0, 1), 1))], [0.5])
        with pytest.raises(ConfigError):
            RescoreConfig(mode="top-p")
        with pytest.raises(ConfigError):
            RescoreConfig(threshold=1.5)
        with pytest.raises(ConfigError):
            RescoreConfig(overlap_policy="merge")


class TestInspection:
    def test_columns_and_order(self):
        rows = [
            {"instance_id": "b", "entity": "x", "rank": 1, "mean_prob": 0.5, "std": 0.1,
             "confidence": 0.4, "kept": True, "positive": None},
            {"instance_id": "a", "entity": "y", "rank": 2, "mean_prob": 0.2, "std": 0.0,
             "confidence": 0.3, "kept": False, "positive": False},
            {"instance_id": "a", "entity": "z", "rank": 1, "mean_prob": 0.7, "std": 0.2,
             "confidence": 0.8, "kept": True, "positive": True},
        ]
        frame = inspection_frame(rows)
        assert list(frame.columns) == INSPECTION_COLUMNS
        assert frame["entity"].tolist() == ["z", "y", "x"]


class TestRescoreRecords:
    @pytest.fixture
    def records(self, rng, tag_labels):
        records = []
        for i in range(6):
            base = random_lattice(rng, 5, 3)
            samples = McSampleSet(tuple(
                Lattice(unary=base.unary + 0.2 * rng.normal(size=base.unary.shape), transition=base.transition)
                for _ in range(4)
            ))
            gold = tag_labels.decode(rng.integers(0, 3, size=5))
            instance = Instance(f"s{i}", tuple(f"w{j}" for j in range(5)), Task.SEQUENCE_LABELING, gold)
            records.append(SampledInstance(instance, samples))
        return records

    def test_rank_preference_keeps_baseline(self, records, tag_labels):
        result = rescore_records(records, tag_labels, rank_preferring_forecaster(), k=3, n_jobs=1)
        assert result.report["changed"] == 0
        assert all(value == 0.0 for value in result.report["delta"].values())
        assert all(p["baseline"] == p["rescored"] for p in result.predictions)

    def test_one_kept_event_per_sequence_instance(self, records, tag_labels):
        result = rescore_records(records, tag_labels, rank_preferring_forecaster(), k=3, n_jobs=1)
        frame = inspection_table(result)
        assert list(frame.columns) == INSPECTION_COLUMNS
        assert frame.groupby("instance_id")["kept"].sum().tolist() == [1] * len(records)
        assert frame.loc[frame["kept"], "rank"].eq(1).all()
        assert result.report["n_events"] == len(frame)

    def test_span_rank_select_with_rank_preference_keeps_baseline(self, rng, bio_labels):
        records = []
        for i in range(8):
            base = random_lattice(rng, 6, bio_labels.size, scale=2.0)
            samples = McSampleSet(tuple(
                Lattice(unary=base.unary + 0.2 * rng.normal(size=base.unary.shape), transition=base.transition)
                for _ in range(4)
            ))
            instance = Instance(f"n{i}", tuple(f"w{j}" for j in range(6)), Task.SPAN_NER, [(0, 2, "PER")])
            records.append(SampledInstance(instance, samples))
        config = RescoreConfig(RANK_SELECT)
        result = rescore_records(records, bio_labels, rank_preferring_forecaster(), k=3, config=config, n_jobs=1)
        assert result.report["changed"] == 0
        assert all(p["baseline"] == p["rescored"] for p in result.predictions)
