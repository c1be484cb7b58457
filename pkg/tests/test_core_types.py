"""Domain types: label sets, instances, lattices and positivity."""
import numpy as np
import pytest

from utils.core_types import (
    Entity,
    EntityKind,
    Instance,
    LabelSet,
    Lattice,
    McSampleSet,
    Scheme,
    Task,
    answer_to_tags,
    entity_text,
    geometric_root,
    is_positive,
    spans_to_bio,
    validate_instance,
    validate_samples,
)
from utils.errors import (
    DimensionMismatchError,
    MalformedSpanError,
    NonFiniteScoreError,
    UnknownLabelError,
)


class TestLabelSet:
    def test_encode_decode(self, tag_labels):
        assert tag_labels.encode(["V", "N", "D"]) == (1, 0, 2)
        assert tag_labels.decode((2, 2, 0)) == ("D", "D", "N")

    def test_unknown_label(self, tag_labels):
        with pytest.raises(UnknownLabelError):
            tag_labels.index("X")

    def test_bio_validation(self):
        with pytest.raises(UnknownLabelError):
            LabelSet(("O", "PER"), Scheme.BIO)
        with pytest.raises(UnknownLabelError):
            LabelSet(("O", "B-"), Scheme.BIO)

    def test_duplicates_rejected(self):
        with pytest.raises(UnknownLabelError):
            LabelSet(("A", "A"))

    def test_entity_classes_first_seen_order(self, bio_labels):
        assert bio_labels.entity_classes == ("PER", "LOC")

    def test_dict_round_trip(self, bio_labels):
        assert LabelSet.from_dict(bio_labels.to_dict()) == bio_labels


class TestInstance:
    def test_span_gold_is_canonical(self):
        instance = Instance("a", ["x", "y", "z"], Task.SPAN_NER, gold=[[1, 3, "PER"], (0, 1, "LOC")])
        assert instance.gold == frozenset({(1, 3, "PER"), (0, 1, "LOC")})

    def test_to_dict_sorts_spans(self):
        instance = Instance("a", ["x", "y", "z"], Task.SPAN_NER, gold=[(1, 3, "PER"), (0, 1, "LOC")])
        assert instance.to_dict()["gold"] == [[0, 1, "LOC"], [1, 3, "PER"]]
        assert Instance.from_dict(instance.to_dict()) == instance

    def test_validate_sequence_length(self, tag_labels):
        instance = Instance("a", ["x", "y"], Task.SEQUENCE_LABELING, gold=["N"])
        with pytest.raises(DimensionMismatchError):
            validate_instance(instance, tag_labels)

    def test_validate_span_bounds(self, bio_labels):
        bad = Instance("a", ["x", "y"], Task.SPAN_NER, gold=[(1, 1, "PER")])
        with pytest.raises(MalformedSpanError):
            validate_instance(bad, bio_labels)
        unknown = Instance("b", ["x", "y"], Task.SPAN_NER, gold=[(0, 1, "ORG")])
        with pytest.raises(UnknownLabelError):
            validate_instance(unknown, bio_labels)

    def test_validate_answer_bounds(self):
        from utils.core_types import QA_LABELS
        bad = Instance("a", ["x", "y"], Task.EXTRACTIVE_QA, gold=(1, 2))
        with pytest.raises(MalformedSpanError):
            validate_instance(bad, QA_LABELS)

    def test_missing_gold_is_valid(self, tag_labels):
        instance = Instance("a", ["x"], Task.SEQUENCE_LABELING)
        assert validate_instance(instance, tag_labels) is instance


class TestLattice:
    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteScoreError):
            Lattice(unary=np.array([[0.0, np.nan]]), transition=np.zeros((2, 2)))

    def test_rejects_bad_transition_shape(self):
        with pytest.raises(DimensionMismatchError):
            Lattice(unary=np.zeros((3, 2)), transition=np.zeros((3, 3)))

    def test_is_read_only(self):
        lattice = Lattice(unary=np.zeros((2, 2)), transition=np.zeros((2, 2)))
        with pytest.raises(ValueError):
            lattice.unary[0, 0] = 1.0

    def test_emission_only_from_dict(self):
        lattice = Lattice.from_dict({"unary": [[0.0, 1.0], [2.0, 3.0]]})
        np.testing.assert_array_equal(lattice.transition, np.zeros((2, 2)))

    def test_sample_set_shapes_must_agree(self):
        a = Lattice(unary=np.zeros((2, 2)), transition=np.zeros((2, 2)))
        b = Lattice(unary=np.zeros((3, 2)), transition=np.zeros((2, 2)))
        with pytest.raises(DimensionMismatchError):
            McSampleSet((a, b))
        with pytest.raises(DimensionMismatchError):
            McSampleSet(())

    def test_declared_m_checked(self):
        data = {"m": 3, "samples": [{"unary": [[0.0]], "transition": [[0.0]]}]}
        with pytest.raises(DimensionMismatchError):
            McSampleSet.from_dict(data)

    def test_validate_samples_shape(self, tag_labels):
        instance = Instance("a", ["x", "y"], Task.SEQUENCE_LABELING)
        samples = McSampleSet((Lattice(unary=np.zeros((2, 2)), transition=np.zeros((2, 2))),))
        with pytest.raises(DimensionMismatchError):
            validate_samples(samples, instance, tag_labels.size)


class TestPositivity:
    def test_sequence(self, tag_labels):
        instance = Instance("a", ["x", "y"], Task.SEQUENCE_LABELING, gold=["V", "N"])
        assert is_positive(Entity(EntityKind.SEQUENCE, (1, 0), 1), instance, tag_labels)
        assert not is_positive(Entity(EntityKind.SEQUENCE, (1, 1), 2), instance, tag_labels)

    def test_span_requires_exact_class(self, bio_labels):
        instance = Instance("a", ["x", "y", "z"], Task.SPAN_NER, gold=[(0, 2, "PER")])
        assert is_positive(Entity(EntityKind.SPAN, (0, 2, "PER"), 1), instance, bio_labels)
        assert not is_positive(Entity(EntityKind.SPAN, (0, 2, "LOC"), 1), instance, bio_labels)
        assert not is_positive(Entity(EntityKind.SPAN, (0, 1, "PER"), 1), instance, bio_labels)

    def test_undefined_without_gold(self, tag_labels):
        instance = Instance("a", ["x"], Task.SEQUENCE_LABELING)
        assert is_positive(Entity(EntityKind.SEQUENCE, (0,), 1), instance, tag_labels) is None

    def test_tags_do_not_affect_identity(self):
        a = Entity(EntityKind.SPAN, (0, 2, "PER"), 1, tags=(1, 2))
        b = Entity(EntityKind.SPAN, (0, 2, "PER"), 1, tags=(2, 2))
        assert a == b and a.key == b.key

    def test_entity_lengths(self):
        assert Entity(EntityKind.SEQUENCE, (0, 1, 2), 1).length == 3
        assert Entity(EntityKind.SPAN, (1, 4, "X"), 1).length == 3
        assert Entity(EntityKind.ANSWER_SPAN, (2, 2), 1).length == 1

    def test_rank_must_be_positive(self):
        with pytest.raises(MalformedSpanError):
            Entity(EntityKind.SEQUENCE, (0,), 0)


class TestConversions:
    def test_spans_to_bio(self):
        assert spans_to_bio({(0, 2, "PER"), (3, 4, "LOC")}, 5) == ("B-PER", "I-PER", "O", "B-LOC", "O")

    def test_answer_to_tags(self):
        assert answer_to_tags((1, 2), 4) == ("O", "A", "A", "O")

    def test_entity_text(self, bio_labels):
        instance = Instance("a", ["Ann", "Lee", "runs"], Task.SPAN_NER)
        assert entity_text(Entity(EntityKind.SPAN, (0, 2, "PER"), 1), instance) == "Ann Lee [PER]"

    def test_geometric_root(self):
        assert geometric_root(0.25, 2) == pytest.approx(0.5)
        assert geometric_root(0.0, 3) == 0.0
