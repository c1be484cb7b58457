# utils/core_types.py
"""Domain types shared by every stage of the calibration toolkit.

All types are immutable once built (frozen dataclasses, read-only numpy
arrays), so they can be handed to joblib workers without copying concerns.
Scores inside a ``Lattice`` are log-potentials; probabilities are only ever
computed in ``services.decode_service``.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, FrozenSet, Iterable, Optional, Tuple, Union

import numpy as np

from utils.errors import (
    DimensionMismatchError,
    MalformedSpanError,
    NonFiniteScoreError,
    UnknownLabelError,
)

logger = logging.getLogger(__name__)

OUTSIDE_LABEL = "O"

Span = Tuple[int, int, str]          # half-open [start, end) plus entity class
AnswerSpan = Tuple[int, int]         # inclusive (start, end) token indices
Gold = Union[Tuple[str, ...], FrozenSet[Span], AnswerSpan]


class Task(str, Enum):
    SEQUENCE_LABELING = "sequence-labeling"
    SPAN_NER = "span-ner"
    EXTRACTIVE_QA = "extractive-qa"


class Scheme(str, Enum):
    PLAIN = "plain"
    BIO = "BIO"


class EntityKind(str, Enum):
    SEQUENCE = "sequence"
    SPAN = "span"
    ANSWER_SPAN = "answer-span"


TASK_ENTITY_KIND = {
    Task.SEQUENCE_LABELING: EntityKind.SEQUENCE,
    Task.SPAN_NER: EntityKind.SPAN,
    Task.EXTRACTIVE_QA: EntityKind.ANSWER_SPAN,
}


@dataclass(frozen=True)
class LabelSet:
    labels: Tuple[str, ...]
    scheme: Scheme = Scheme.PLAIN

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not self.labels:
            raise UnknownLabelError("LabelSet must contain at least one label.")
        if len(set(self.labels)) != len(self.labels):
            raise UnknownLabelError(f"LabelSet labels must be unique, got {list(self.labels)}")
        if self.scheme is Scheme.BIO:
            for label in self.labels:
                if label != OUTSIDE_LABEL and not (label.startswith("B-") or label.startswith("I-")):
                    raise UnknownLabelError(f"Label '{label}' is not a BIO tag (expected 'O', 'B-X' or 'I-X').")
                if label != OUTSIDE_LABEL and len(label) < 3:
                    raise UnknownLabelError(f"BIO tag '{label}' has an empty entity class.")

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def entity_classes(self) -> Tuple[str, ...]:
        """Entity classes in first-seen order (BIO only; a class may appear with I- alone)."""
        seen = []
        for label in self.labels:
            if label != OUTSIDE_LABEL and label[2:] not in seen:
                seen.append(label[2:])
        return tuple(seen)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise UnknownLabelError(f"Unknown label '{label}' (known: {list(self.labels)})") from None

    def encode(self, labels: Iterable[str]) -> Tuple[int, ...]:
        return tuple(self.index(label) for label in labels)

    def decode(self, indices: Iterable[int]) -> Tuple[str, ...]:
        return tuple(self.labels[i] for i in indices)

    def to_dict(self) -> Dict[str, Any]:
        return {"labels": list(self.labels), "scheme": self.scheme.value}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LabelSet":
        return cls(labels=tuple(data["labels"]), scheme=Scheme(data.get("scheme", Scheme.PLAIN.value)))


# Two-column layout of extractive-QA lattices: answer-start and answer-end log-scores.
QA_LABELS = LabelSet(labels=("start", "end"), scheme=Scheme.PLAIN)


def _canonical_gold(task: Task, gold: Any) -> Optional[Gold]:
    if gold is None:
        return None
    if task is Task.SEQUENCE_LABELING:
        return tuple(str(label) for label in gold)
    if task is Task.SPAN_NER:
        return frozenset((int(s), int(e), str(c)) for s, e, c in gold)
    start, end = gold
    return (int(start), int(end))


@dataclass(frozen=True)
class Instance:
    id: str
    tokens: Tuple[str, ...]
    task: Task
    gold: Optional[Gold] = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "gold", _canonical_gold(self.task, self.gold))

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def has_gold(self) -> bool:
        return self.gold is not None

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"id": self.id, "tokens": list(self.tokens), "task": self.task.value}
        if self.gold is not None:
            if self.task is Task.SPAN_NER:
                data["gold"] = [list(span) for span in sorted(self.gold)]
            else:
                data["gold"] = list(self.gold)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Instance":
        return cls(id=str(data["id"]), tokens=tuple(data["tokens"]), task=Task(data["task"]), gold=data.get("gold"))


def _readonly(values: Any) -> np.ndarray:
    array = np.array(values, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Lattice:
    """Unary (L x C) and transition (C x C) log-potentials of one model sample."""

    unary: np.ndarray
    transition: np.ndarray

    def __post_init__(self):
        unary = _readonly(self.unary)
        transition = _readonly(self.transition)
        if unary.ndim != 2 or unary.shape[0] < 1 or unary.shape[1] < 1:
            raise DimensionMismatchError(f"Unary scores must be a non-empty L x C matrix, got shape {unary.shape}")
        if transition.shape != (unary.shape[1], unary.shape[1]):
            raise DimensionMismatchError(
                f"Transition scores must be {unary.shape[1]} x {unary.shape[1]}, got shape {transition.shape}"
            )
        if not (np.all(np.isfinite(unary)) and np.all(np.isfinite(transition))):
            raise NonFiniteScoreError("Lattice contains non-finite scores.")
        object.__setattr__(self, "unary", unary)
        object.__setattr__(self, "transition", transition)

    @property
    def length(self) -> int:
        return self.unary.shape[0]

    @property
    def n_labels(self) -> int:
        return self.unary.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Lattice):
            return NotImplemented
        return np.array_equal(self.unary, other.unary) and np.array_equal(self.transition, other.transition)

    __hash__ = None

    @classmethod
    def emission_only(cls, unary) -> "Lattice":
        unary = np.asarray(unary, dtype=np.float64)
        return cls(unary=unary, transition=np.zeros((unary.shape[1], unary.shape[1])))

    def to_dict(self) -> Dict[str, Any]:
        return {"unary": self.unary.tolist(), "transition": self.transition.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Lattice":
        unary = np.asarray(data["unary"], dtype=np.float64)
        transition = data.get("transition")
        if transition is None:
            return cls.emission_only(unary)
        return cls(unary=unary, transition=np.asarray(transition, dtype=np.float64))


@dataclass(frozen=True)
class McSampleSet:
    samples: Tuple[Lattice, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.samples:
            raise DimensionMismatchError("A sample set needs at least one lattice (M >= 1).")
        first = self.samples[0]
        for lattice in self.samples[1:]:
            if lattice.unary.shape != first.unary.shape:
                raise DimensionMismatchError(
                    f"All samples must share dimensions: {lattice.unary.shape} vs {first.unary.shape}"
                )

    @property
    def m(self) -> int:
        return len(self.samples)

    @property
    def length(self) -> int:
        return self.samples[0].length

    @property
    def n_labels(self) -> int:
        return self.samples[0].n_labels

    def to_dict(self) -> Dict[str, Any]:
        return {"m": self.m, "samples": [lattice.to_dict() for lattice in self.samples]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "McSampleSet":
        samples = tuple(Lattice.from_dict(item) for item in data["samples"])
        declared = data.get("m")
        if declared is not None and int(declared) != len(samples):
            raise DimensionMismatchError(f"Sample set declares m={declared} but holds {len(samples)} lattices.")
        return cls(samples=samples)


@dataclass(frozen=True)
class SampledInstance:
    """One dump record: an instance and the M lattices sampled for it."""

    instance: Instance
    samples: McSampleSet


@dataclass(frozen=True)
class Entity:
    """An entity of interest.

    payload by kind:
      sequence    -> tuple of label indices (length L)
      span        -> (start, end, class), half-open
      answer-span -> (start, end), inclusive
    ``tags`` holds the label indices the producing hypothesis put inside a
    span; it feeds the span marginal and is ignored for identity.
    """

    kind: EntityKind
    payload: Tuple
    rank: int
    tags: Optional[Tuple[int, ...]] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", EntityKind(self.kind))
        object.__setattr__(self, "payload", tuple(self.payload))
        if self.tags is not None:
            object.__setattr__(self, "tags", tuple(int(t) for t in self.tags))
        if self.rank < 1:
            raise MalformedSpanError(f"Entity rank must be >= 1, got {self.rank}")

    @property
    def key(self) -> Tuple:
        return (self.kind, self.payload)

    @property
    def length(self) -> int:
        if self.kind is EntityKind.SEQUENCE:
            return len(self.payload)
        if self.kind is EntityKind.SPAN:
            return self.payload[1] - self.payload[0]
        return self.payload[1] - self.payload[0] + 1

    def with_rank(self, rank: int) -> "Entity":
        return Entity(kind=self.kind, payload=self.payload, rank=rank, tags=self.tags)

    def to_dict(self) -> Dict[str, Any]:
        data = {"kind": self.kind.value, "payload": list(self.payload), "rank": self.rank}
        if self.tags is not None:
            data["tags"] = list(self.tags)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Entity":
        kind = EntityKind(data["kind"])
        payload = data["payload"]
        if kind is EntityKind.SPAN:
            payload = (int(payload[0]), int(payload[1]), str(payload[2]))
        else:
            payload = tuple(int(v) for v in payload)
        tags = data.get("tags")
        return cls(kind=kind, payload=payload, rank=int(data["rank"]), tags=tuple(tags) if tags is not None else None)


@dataclass(frozen=True)
class Event:
    entity: Entity
    positive: Optional[bool] = None   # undefined (None) without gold

    def to_dict(self) -> Dict[str, Any]:
        return {"entity": self.entity.to_dict(), "positive": self.positive}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Event":
        return cls(entity=Entity.from_dict(data["entity"]), positive=data.get("positive"))


def is_positive(entity: Entity, instance: Instance, labels: LabelSet) -> Optional[bool]:
    """True iff the gold output lies in the event set of ``entity``; None without gold."""
    if instance.gold is None:
        return None
    if entity.kind is EntityKind.SEQUENCE:
        return tuple(entity.payload) == labels.encode(instance.gold)
    if entity.kind is EntityKind.SPAN:
        return tuple(entity.payload) in instance.gold
    return tuple(entity.payload) == tuple(instance.gold)


def validate_instance(instance: Instance, labels: LabelSet) -> Instance:
    """Return ``instance`` unchanged if it is consistent with ``labels``; raise otherwise."""
    if instance.length < 1:
        raise DimensionMismatchError(f"Instance '{instance.id}' has no tokens.")
    if instance.gold is None:
        return instance

    if instance.task is Task.SEQUENCE_LABELING:
        if len(instance.gold) != instance.length:
            raise DimensionMismatchError(
                f"Instance '{instance.id}': gold has {len(instance.gold)} labels for {instance.length} tokens."
            )
        labels.encode(instance.gold)
    elif instance.task is Task.SPAN_NER:
        classes = set(labels.entity_classes)
        for start, end, label_class in instance.gold:
            if not (0 <= start < end <= instance.length):
                raise MalformedSpanError(
                    f"Instance '{instance.id}': span ({start}, {end}) violates 0 <= start < end <= {instance.length}."
                )
            if label_class not in classes:
                raise UnknownLabelError(f"Instance '{instance.id}': unknown entity class '{label_class}'.")
    else:
        start, end = instance.gold
        if not (0 <= start <= end < instance.length):
            raise MalformedSpanError(
                f"Instance '{instance.id}': answer ({start}, {end}) violates 0 <= start <= end < {instance.length}."
            )
    return instance


def validate_samples(samples: McSampleSet, instance: Instance, n_labels: int) -> McSampleSet:
    expected = (instance.length, n_labels)
    if samples.samples[0].unary.shape != expected:
        raise DimensionMismatchError(
            f"Instance '{instance.id}': lattices have shape {samples.samples[0].unary.shape}, expected {expected}."
        )
    return samples


def spans_to_bio(spans: Iterable[Span], length: int) -> Tuple[str, ...]:
    """BIO tags for a span set (later spans overwrite earlier ones on overlap)."""
    tags = [OUTSIDE_LABEL] * length
    for start, end, label_class in sorted(spans):
        tags[start] = f"B-{label_class}"
        for position in range(start + 1, end):
            tags[position] = f"I-{label_class}"
    return tuple(tags)


def answer_to_tags(answer: AnswerSpan, length: int, inside: str = "A") -> Tuple[str, ...]:
    start, end = answer
    return tuple(inside if start <= i <= end else OUTSIDE_LABEL for i in range(length))


def entity_text(entity: Entity, instance: Instance, labels: Optional[LabelSet] = None) -> str:
    """Human-readable rendering used in inspection tables."""
    if entity.kind is EntityKind.SEQUENCE:
        rendered = labels.decode(entity.payload) if labels is not None else entity.payload
        return " ".join(f"{tok}/{lab}" for tok, lab in zip(instance.tokens, rendered))
    if entity.kind is EntityKind.SPAN:
        start, end, label_class = entity.payload
        return f"{' '.join(instance.tokens[start:end])} [{label_class}]"
    start, end = entity.payload
    return " ".join(instance.tokens[start:end + 1])


def geometric_root(probability: float, length: int) -> float:
    if probability <= 0.0:
        return 0.0
    return math.exp(math.log(probability) / length)
