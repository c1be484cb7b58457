"""Exact inference checked against exhaustive enumeration."""
import itertools
import math

import numpy as np
import pytest
from scipy.special import softmax

from helpers import enumerate_sequences, enumerated_log_partition, random_lattice
from services.decode_service import (
    LatticeInference,
    answer_distributions,
    edge_marginals,
    entity_sample_probabilities,
    forward_backward,
    kbest_viterbi,
    log_partition,
    mean_lattice,
    normalized_confidence,
    sequence_log_prob,
    span_marginal,
    viterbi_path,
)
from utils.core_types import Entity, EntityKind, Lattice, McSampleSet
from utils.errors import DimensionMismatchError, MalformedSpanError


def _random_shapes(rng, count):
    for _ in range(count):
        yield int(rng.integers(1, 7)), int(rng.integers(1, 5))


class TestKBestViterbi:
    def test_matches_enumeration_order(self, rng):
        """Full k = C^L lists equal the sorted enumeration, labels and scores."""
        for length, n_labels in _random_shapes(rng, 200):
            lattice = random_lattice(rng, length, n_labels)
            expected = enumerate_sequences(lattice)
            decoded = kbest_viterbi(lattice, n_labels ** length)
            assert [d.labels for d in decoded] == [labels for _, labels in expected]
            np.testing.assert_allclose([d.log_score for d in decoded], [s for s, _ in expected], atol=1e-12)
            assert [d.rank for d in decoded] == list(range(1, len(expected) + 1))

    def test_scores_non_increasing(self, rng):
        lattice = random_lattice(rng, 6, 4)
        scores = [d.log_score for d in kbest_viterbi(lattice, 50)]
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_k_beyond_sequence_count(self, rng):
        lattice = random_lattice(rng, 2, 2)
        assert len(kbest_viterbi(lattice, 10)) == 4

    def test_single_label(self):
        lattice = Lattice(unary=np.zeros((3, 1)), transition=np.zeros((1, 1)))
        decoded = kbest_viterbi(lattice, 3)
        assert [d.labels for d in decoded] == [(0, 0, 0)]

    def test_ties_are_lexicographic(self):
        lattice = Lattice(unary=np.zeros((2, 2)), transition=np.zeros((2, 2)))
        assert [d.labels for d in kbest_viterbi(lattice, 4)] == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_prefix_property(self, rng):
        lattice = random_lattice(rng, 5, 3)
        full = kbest_viterbi(lattice, 6)
        for k in range(1, 6):
            assert kbest_viterbi(lattice, k) == full[:k]

    def test_invalid_k(self, rng):
        with pytest.raises(ValueError):
            kbest_viterbi(random_lattice(rng, 2, 2), 0)

    def test_viterbi_path_is_top1(self, rng):
        for length, n_labels in _random_shapes(rng, 50):
            lattice = random_lattice(rng, length, n_labels)
            assert viterbi_path(lattice) == kbest_viterbi(lattice, 1)[0].labels


class TestForwardBackward:
    def test_marginals_match_enumeration(self, rng):
        for length, n_labels in _random_shapes(rng, 200):
            lattice = random_lattice(rng, length, n_labels)
            log_z = enumerated_log_partition(lattice)
            expected = np.zeros((length, n_labels))
            for score, labels in enumerate_sequences(lattice):
                weight = math.exp(score - log_z)
                for t, label in enumerate(labels):
                    expected[t, label] += weight
            marginals, partition = forward_backward(lattice)
            np.testing.assert_allclose(marginals.probabilities, expected, atol=1e-9)
            assert partition == pytest.approx(log_z, abs=1e-9)

    def test_rows_sum_to_one(self, rng):
        marginals, _ = forward_backward(random_lattice(rng, 6, 4, scale=20.0))
        np.testing.assert_allclose(marginals.probabilities.sum(axis=1), 1.0, atol=1e-12)

    def test_large_scores_stay_finite(self):
        lattice = Lattice(unary=np.array([[1000.0, -1000.0], [500.0, 0.0]]), transition=np.zeros((2, 2)))
        marginals, partition = forward_backward(lattice)
        assert np.all(np.isfinite(marginals.probabilities)) and math.isfinite(partition)

    def test_sequence_probabilities_sum_to_one(self, rng):
        lattice = random_lattice(rng, 4, 3)
        total = sum(math.exp(sequence_log_prob(lattice, labels))
                    for labels in itertools.product(range(3), repeat=4))
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_edge_marginals_consistent(self, rng):
        lattice = random_lattice(rng, 5, 3)
        edges = edge_marginals(lattice)
        marginals, _ = forward_backward(lattice)
        np.testing.assert_allclose(edges.sum(axis=2), marginals.probabilities[:-1], atol=1e-9)
        np.testing.assert_allclose(edges.sum(axis=1), marginals.probabilities[1:], atol=1e-9)

    def test_log_partition_shortcut(self, rng):
        lattice = random_lattice(rng, 3, 2)
        assert log_partition(lattice) == pytest.approx(enumerated_log_partition(lattice), abs=1e-9)


class TestSpanMarginal:
    def test_matches_enumeration(self, rng):
        for length, n_labels in _random_shapes(rng, 200):
            lattice = random_lattice(rng, length, n_labels)
            start = int(rng.integers(0, length))
            end = int(rng.integers(start + 1, length + 1))
            labels = tuple(int(v) for v in rng.integers(0, n_labels, size=end - start))
            log_z = enumerated_log_partition(lattice)
            expected = sum(
                math.exp(score - log_z)
                for score, sequence in enumerate_sequences(lattice)
                if sequence[start:end] == labels
            )
            assert span_marginal(lattice, start, end, labels) == pytest.approx(expected, abs=1e-9)

    def test_full_span_is_sequence_probability(self, rng):
        lattice = random_lattice(rng, 4, 3)
        labels = (0, 2, 1, 1)
        assert span_marginal(lattice, 0, 4, labels) == pytest.approx(math.exp(sequence_log_prob(lattice, labels)))

    def test_bad_spans(self, rng):
        lattice = random_lattice(rng, 3, 2)
        with pytest.raises(MalformedSpanError):
            span_marginal(lattice, 2, 2, ())
        with pytest.raises(MalformedSpanError):
            span_marginal(lattice, 1, 4, (0, 0, 0))
        with pytest.raises(DimensionMismatchError):
            span_marginal(lattice, 0, 2, (0,))

    def test_inference_cache_reused(self, rng):
        inference = LatticeInference(random_lattice(rng, 4, 2))
        first = inference.tables
        inference.span_marginal(0, 2, (0, 1))
        assert inference.tables is first


class TestNormalizedConfidence:
    def test_sequence_geometric_mean(self, sample_set):
        entity = Entity(EntityKind.SEQUENCE, (0, 1, 2, 0), 1)
        expected = np.mean([
            math.exp(sequence_log_prob(lattice, entity.payload)) ** 0.25 for lattice in sample_set.samples
        ])
        assert normalized_confidence(sample_set, entity) == pytest.approx(expected)

    def test_raw_probabilities(self, sample_set):
        entity = Entity(EntityKind.SEQUENCE, (0, 1, 2, 0), 1)
        raw = entity_sample_probabilities(sample_set, entity, length_normalize=False)
        normalized = entity_sample_probabilities(sample_set, entity)
        np.testing.assert_allclose(raw ** 0.25, normalized)

    def test_span_needs_tags(self, sample_set):
        with pytest.raises(MalformedSpanError):
            normalized_confidence(sample_set, Entity(EntityKind.SPAN, (0, 2, "PER"), 1))

    def test_span_uses_marginal(self, sample_set):
        entity = Entity(EntityKind.SPAN, (1, 3, "PER"), 1, tags=(1, 2))
        expected = np.mean([span_marginal(lattice, 1, 3, (1, 2)) ** 0.5 for lattice in sample_set.samples])
        assert normalized_confidence(sample_set, entity) == pytest.approx(expected)

    def test_answer_span_uses_two_factor_root(self):
        unary = np.log(np.array([[0.7, 0.1], [0.2, 0.3], [0.1, 0.6]]))
        samples = McSampleSet((Lattice.emission_only(unary),))
        entity = Entity(EntityKind.ANSWER_SPAN, (0, 2), 1)
        start, end = softmax(unary[:, 0]), softmax(unary[:, 1])
        assert normalized_confidence(samples, entity) == pytest.approx(math.sqrt(start[0] * end[2]))

    def test_confidence_in_unit_interval(self, rng):
        lattice = random_lattice(rng, 6, 4, scale=30.0)
        samples = McSampleSet((lattice,))
        for decoded in kbest_viterbi(lattice, 5):
            value = normalized_confidence(samples, Entity(EntityKind.SEQUENCE, decoded.labels, decoded.rank))
            assert 0.0 <= value <= 1.0

    def test_mean_lattice(self, sample_set):
        mean = mean_lattice(sample_set)
        np.testing.assert_allclose(mean.unary, np.mean([s.unary for s in sample_set.samples], axis=0))
        np.testing.assert_allclose(mean.transition, np.mean([s.transition for s in sample_set.samples], axis=0))


class TestAnswerDistributions:
    def test_columns_are_softmaxed_separately(self, rng):
        unary = rng.normal(size=(7, 2))
        start, end = answer_distributions(Lattice.emission_only(unary))
        np.testing.assert_allclose(start, softmax(unary[:, 0]))
        np.testing.assert_allclose(end, softmax(unary[:, 1]))
        assert start.sum() == pytest.approx(1.0)

    def test_rejects_tagging_lattice(self, rng):
        with pytest.raises(DimensionMismatchError):
            answer_distributions(random_lattice(rng, 4, 3))
