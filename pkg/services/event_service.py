# services/event_service.py
"""Entities and events of interest built from top-k decodes.

An event is positive when the gold output lies in its event set: the whole
gold sequence for sequence events, an exact (start, end, class) match for
span events, an exact (start, end) match for answer events.
"""
import logging
import os
from dataclasses import dataclass
from typing import AbstractSet, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from services.decode_service import ScoredSequence, kbest_viterbi, mean_lattice
from utils.core_types import (
    OUTSIDE_LABEL,
    AnswerSpan,
    Entity,
    EntityKind,
    Event,
    Instance,
    LabelSet,
    Lattice,
    McSampleSet,
    Scheme,
    Span,
    Task,
    is_positive,
)
from utils.errors import DimensionMismatchError, UnknownLabelError

logger = logging.getLogger(__name__)

MAX_ANSWER_TOKENS = int(os.environ.get("CALIBRATION_MAX_ANSWER_TOKENS", 30))


@dataclass(frozen=True)
class EventSet:
    instance_id: str
    events: Tuple[Event, ...]
    k_used: int
    # span tasks only: the span set of every decoded hypothesis, in rank order
    hypotheses: Tuple[FrozenSet[Span], ...] = ()

    @property
    def positive_count(self) -> int:
        return sum(1 for event in self.events if event.positive)

    def to_dict(self):
        data = {
            "instance_id": self.instance_id,
            "k_used": self.k_used,
            "events": [event.to_dict() for event in self.events],
        }
        if self.hypotheses:
            data["hypotheses"] = [[list(span) for span in sorted(spans)] for spans in self.hypotheses]
        return data


def _deduplicate(entities: Sequence[Entity]) -> List[Entity]:
    """Keep the first (smallest-rank) occurrence of every entity payload."""
    best: Dict[Tuple, Entity] = {}
    for entity in entities:
        current = best.get(entity.key)
        if current is None or entity.rank < current.rank:
            best[entity.key] = entity
    return sorted(best.values(), key=lambda e: (e.rank, e.payload))


def build_sequence_events(
    decodes: Sequence[ScoredSequence],
    gold: Optional[Sequence[int]] = None,
    instance_id: str = "",
) -> EventSet:
    """One event per distinct decoded sequence; positive iff it equals ``gold`` (label indices)."""
    entities = _deduplicate([
        Entity(kind=EntityKind.SEQUENCE, payload=tuple(decode.labels), rank=decode.rank) for decode in decodes
    ])
    gold_key = tuple(gold) if gold is not None else None
    events = tuple(
        Event(entity=entity, positive=None if gold_key is None else entity.payload == gold_key)
        for entity in entities
    )
    k_used = max((decode.rank for decode in decodes), default=0)
    return EventSet(instance_id=instance_id, events=events, k_used=k_used)


def _tag_parts(label: str) -> Tuple[str, Optional[str]]:
    if label == OUTSIDE_LABEL:
        return OUTSIDE_LABEL, None
    return label[0], label[2:]


def spans_with_tags(labels_seq: Sequence[int], labels: LabelSet) -> List[Tuple[Span, Tuple[int, ...]]]:
    """Maximal BIO spans plus the tag indices inside each one.

    A span opens at B-X, or at I-X when the previous token is not part of a
    class-X span; it extends over following I-X tags and closes before O,
    any B- tag or an I- tag of another class.
    """
    if labels.scheme is not Scheme.BIO:
        raise UnknownLabelError("Span extraction requires a BIO label set.")
    spans = []
    current_start, current_class = None, None
    names = labels.decode(labels_seq)
    for position, name in enumerate(names):
        prefix, label_class = _tag_parts(name)
        continues = prefix == "I" and current_class == label_class and current_start is not None
        if continues:
            continue
        if current_start is not None:
            spans.append(((current_start, position, current_class), tuple(labels_seq[current_start:position])))
            current_start, current_class = None, None
        if prefix in ("B", "I"):
            current_start, current_class = position, label_class
    if current_start is not None:
        spans.append(((current_start, len(names), current_class), tuple(labels_seq[current_start:])))
    return spans


def extract_spans(sequence, labels: LabelSet) -> AbstractSet[Span]:
    """Set of (start, end, class) spans of a decoded sequence (or a bare index list)."""
    labels_seq = sequence.labels if isinstance(sequence, ScoredSequence) else tuple(sequence)
    return frozenset(span for span, _ in spans_with_tags(labels_seq, labels))


def build_span_events(
    decodes: Sequence[ScoredSequence],
    labels: LabelSet,
    gold_spans: Optional[AbstractSet[Span]] = None,
    instance_id: str = "",
) -> EventSet:
    """Union of spans over all decodes, deduplicated by (start, end, class) keeping the smallest rank.

    The span set of every decode is kept alongside, empty ones included.
    """
    entities = []
    hypotheses = []
    for decode in decodes:
        spans = spans_with_tags(decode.labels, labels)
        hypotheses.append(frozenset(span for span, _ in spans))
        for span, tags in spans:
            entities.append(Entity(kind=EntityKind.SPAN, payload=span, rank=decode.rank, tags=tags))
    entities = _deduplicate(entities)
    events = tuple(
        Event(entity=entity, positive=None if gold_spans is None else entity.payload in gold_spans)
        for entity in entities
    )
    k_used = max((decode.rank for decode in decodes), default=0)
    return EventSet(instance_id=instance_id, events=events, k_used=k_used, hypotheses=tuple(hypotheses))


def top_answer_spans(
    start_scores: np.ndarray,
    end_scores: np.ndarray,
    k: int,
    max_answer_tokens: int = MAX_ANSWER_TOKENS,
) -> List[Tuple[AnswerSpan, float]]:
    """The k best (start, end) pairs by start_score + end_score.

    Valid pairs satisfy start <= end and end - start + 1 <= max_answer_tokens;
    ties are broken by (start, end) in lexicographic order.
    """
    start_scores = np.asarray(start_scores, dtype=np.float64)
    end_scores = np.asarray(end_scores, dtype=np.float64)
    if start_scores.shape != end_scores.shape or start_scores.ndim != 1:
        raise DimensionMismatchError(
            f"Start/end score vectors must have equal length, got {start_scores.shape} and {end_scores.shape}"
        )
    length = start_scores.shape[0]
    starts, ends = np.meshgrid(np.arange(length), np.arange(length), indexing="ij")
    valid = (starts <= ends) & (ends - starts + 1 <= max_answer_tokens)
    starts, ends = starts[valid], ends[valid]
    scores = start_scores[starts] + end_scores[ends]
    order = np.lexsort((ends, starts, -scores))[:k]
    return [((int(starts[i]), int(ends[i])), float(scores[i])) for i in order]


def build_qa_events(
    start_scores: np.ndarray,
    end_scores: np.ndarray,
    k: int,
    gold: Optional[AnswerSpan] = None,
    max_answer_tokens: int = MAX_ANSWER_TOKENS,
    instance_id: str = "",
) -> EventSet:
    """Top-k answer-span events from (mean) start and end scores."""
    ranked = top_answer_spans(start_scores, end_scores, k, max_answer_tokens)
    gold_key = tuple(gold) if gold is not None else None
    events = tuple(
        Event(
            entity=Entity(kind=EntityKind.ANSWER_SPAN, payload=pair, rank=rank),
            positive=None if gold_key is None else pair == gold_key,
        )
        for rank, (pair, _) in enumerate(ranked, start=1)
    )
    return EventSet(instance_id=instance_id, events=events, k_used=len(ranked))


def decode_top_k(lattice: Lattice, task: Task, k: int, max_answer_tokens: int = MAX_ANSWER_TOKENS):
    """Top-k hypotheses of the task: ScoredSequences, or (pair, score) answers for QA."""
    if task is Task.EXTRACTIVE_QA:
        return top_answer_spans(lattice.unary[:, 0], lattice.unary[:, 1], k, max_answer_tokens)
    return kbest_viterbi(lattice, k)


def events_from_decodes(instance: Instance, labels: LabelSet, decodes, k: int) -> EventSet:
    """Build the task's events from the first k entries of a top-k_max decode list.

    Top-k lists are prefixes of the top-k_max list, so one decode per
    instance serves every candidate k.
    """
    task = instance.task
    decodes = decodes[:k]
    if task is Task.SEQUENCE_LABELING:
        gold = labels.encode(instance.gold) if instance.gold is not None else None
        return build_sequence_events(decodes, gold, instance_id=instance.id)
    if task is Task.SPAN_NER:
        return build_span_events(decodes, labels, instance.gold, instance_id=instance.id)

    events = []
    for rank, (pair, _) in enumerate(decodes, start=1):
        entity = Entity(kind=EntityKind.ANSWER_SPAN, payload=pair, rank=rank)
        events.append(Event(entity=entity, positive=is_positive(entity, instance, labels)))
    return EventSet(instance_id=instance.id, events=tuple(events), k_used=len(decodes))


def build_events(
    instance: Instance,
    samples: McSampleSet,
    labels: LabelSet,
    k: int,
    max_answer_tokens: int = MAX_ANSWER_TOKENS,
) -> EventSet:
    """Candidate events of one instance: decode the mean lattice to top-k and extract entities."""
    decodes = decode_top_k(mean_lattice(samples), instance.task, k, max_answer_tokens)
    return events_from_decodes(instance, labels, decodes, k)
