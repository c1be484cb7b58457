# utils/synthetic_corpus.py
"""Seeded HMM corpora for the three tasks.

Every hidden state owns a token bucket and emits ``<bucket>_<j>``; with
probability ``confusability`` it emits from the shared ``amb`` bucket
instead, which is what makes tags ambiguous. ``vocab_offset`` shifts the
``j`` of every token (unseen vocabulary, same buckets) and
``transition_seed`` draws a different transition structure; together they
give the out-of-domain corpus.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from utils.core_types import OUTSIDE_LABEL, QA_LABELS, Instance, LabelSet, Scheme, Task
from utils.errors import ConfigError

logger = logging.getLogger(__name__)

AMBIGUOUS_BUCKET = "amb"
CONTEXT_BUCKET = "ctx"
ANSWER_BUCKET = "ans"


@dataclass(frozen=True)
class SyntheticConfig:
    task: str = Task.SEQUENCE_LABELING.value
    n_train: int = 500
    n_dev: int = 100
    n_test: int = 100
    min_length: int = 5
    max_length: int = 15
    n_tags: int = 6
    entity_classes: Tuple[str, ...] = ("PER", "LOC", "ORG", "MISC")
    vocab_per_bucket: int = 20
    confusability: float = 0.3
    dirichlet_alpha: float = 1.0
    max_answer_length: int = 4
    vocab_offset: int = 0
    seed: int = 0
    transition_seed: Optional[int] = None
    id_prefix: str = ""

    def __post_init__(self):
        object.__setattr__(self, "entity_classes", tuple(self.entity_classes))
        Task(self.task)
        if min(self.n_train, self.n_dev, self.n_test) < 0 or self.n_train < 1:
            raise ConfigError(f"Split sizes must be non-negative with n_train >= 1: {self}")
        if not 1 <= self.min_length <= self.max_length:
            raise ConfigError(f"Need 1 <= min_length <= max_length, got {self.min_length}, {self.max_length}")
        if not 0.0 <= self.confusability <= 1.0:
            raise ConfigError(f"confusability must be in [0, 1], got {self.confusability}")
        if self.n_tags < 2 or self.vocab_per_bucket < 1 or self.dirichlet_alpha <= 0 or self.max_answer_length < 1:
            raise ConfigError(f"Invalid generator sizes: {self}")
        if not self.entity_classes:
            raise ConfigError("At least one entity class is required.")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["entity_classes"] = list(self.entity_classes)
        return data


@dataclass
class SyntheticCorpus:
    task: Task
    labels: LabelSet
    splits: Dict[str, List[Instance]] = field(default_factory=dict)

    @property
    def train(self) -> List[Instance]:
        return self.splits["train"]

    @property
    def dev(self) -> List[Instance]:
        return self.splits["dev"]

    @property
    def test(self) -> List[Instance]:
        return self.splits["test"]


class _Hmm:
    def __init__(self, states: List[str], buckets: List[str], allowed: np.ndarray, start_allowed: np.ndarray,
                 config: SyntheticConfig):
        structure_rng = np.random.default_rng(config.seed if config.transition_seed is None else config.transition_seed)
        self.states = states
        self.buckets = buckets
        self.config = config
        self.start = self._dirichlet(structure_rng, start_allowed)
        self.transition = np.vstack([self._dirichlet(structure_rng, row) for row in allowed])

    def _dirichlet(self, rng, allowed_row) -> np.ndarray:
        weights = np.zeros(len(allowed_row))
        idx = np.nonzero(allowed_row)[0]
        weights[idx] = rng.dirichlet(np.full(idx.size, self.config.dirichlet_alpha))
        return weights

    def sample(self, rng, length: int) -> Tuple[List[str], List[str]]:
        state = rng.choice(len(self.states), p=self.start)
        tags, tokens = [], []
        for position in range(length):
            if position:
                state = rng.choice(len(self.states), p=self.transition[state])
            tags.append(self.states[state])
            tokens.append(_emit(rng, self.buckets[state], self.config))
        return tags, tokens


def _emit(rng, bucket: str, config: SyntheticConfig) -> str:
    if rng.random() < config.confusability:
        bucket = AMBIGUOUS_BUCKET
    return f"{bucket}_{int(rng.integers(config.vocab_per_bucket)) + config.vocab_offset}"


def _tagging_hmm(config: SyntheticConfig) -> Tuple[LabelSet, _Hmm]:
    states = [f"T{i}" for i in range(config.n_tags)]
    buckets = [f"t{i}" for i in range(config.n_tags)]
    allowed = np.ones((config.n_tags, config.n_tags), dtype=bool)
    return LabelSet(tuple(states)), _Hmm(states, buckets, allowed, np.ones(config.n_tags, dtype=bool), config)


def _entity_hmm(config: SyntheticConfig) -> Tuple[LabelSet, _Hmm]:
    states = [OUTSIDE_LABEL]
    buckets = ["w"]
    for label_class in config.entity_classes:
        states += [f"B-{label_class}", f"I-{label_class}"]
        buckets += [label_class.lower(), label_class.lower()]
    n = len(states)
    allowed = np.zeros((n, n), dtype=bool)
    for i, source in enumerate(states):
        for j, target in enumerate(states):
            if target.startswith("I-"):
                # I-X only continues a class-X span
                allowed[i, j] = source != OUTSIDE_LABEL and source[2:] == target[2:]
            else:
                allowed[i, j] = True
    start_allowed = np.array([not s.startswith("I-") for s in states])
    return LabelSet(tuple(states), Scheme.BIO), _Hmm(states, buckets, allowed, start_allowed, config)


def _bio_spans(tags: List[str]) -> List[Tuple[int, int, str]]:
    spans, start = [], None
    for position, tag in enumerate(tags + [OUTSIDE_LABEL]):
        if start is not None and not tag.startswith("I-"):
            spans.append((start, position, tags[start][2:]))
            start = None
        if tag.startswith("B-"):
            start = position
    return spans


def _qa_passage(rng, length: int, config: SyntheticConfig) -> Tuple[List[str], Tuple[int, int]]:
    answer_length = int(rng.integers(1, min(config.max_answer_length, length) + 1))
    start = int(rng.integers(0, length - answer_length + 1))
    end = start + answer_length - 1
    tokens = [_emit(rng, ANSWER_BUCKET if start <= i <= end else CONTEXT_BUCKET, config) for i in range(length)]
    return tokens, (start, end)


def make_synthetic_corpus(config: SyntheticConfig = SyntheticConfig()) -> SyntheticCorpus:
    """Draw train/dev/test splits from one seeded generator."""
    task = Task(config.task)
    rng = np.random.default_rng(config.seed)
    hmm = None
    if task is Task.SEQUENCE_LABELING:
        labels, hmm = _tagging_hmm(config)
    elif task is Task.SPAN_NER:
        labels, hmm = _entity_hmm(config)
    else:
        labels = QA_LABELS

    corpus = SyntheticCorpus(task=task, labels=labels)
    for split, size in (("train", config.n_train), ("dev", config.n_dev), ("test", config.n_test)):
        instances = []
        for i in range(size):
            length = int(rng.integers(config.min_length, config.max_length + 1))
            instance_id = f"{config.id_prefix}{split}-{i:05d}"
            if task is Task.EXTRACTIVE_QA:
                tokens, answer = _qa_passage(rng, length, config)
                instances.append(Instance(id=instance_id, tokens=tokens, task=task, gold=answer))
                continue
            tags, tokens = hmm.sample(rng, length)
            gold = tags if task is Task.SEQUENCE_LABELING else _bio_spans(tags)
            instances.append(Instance(id=instance_id, tokens=tokens, task=task, gold=gold))
        corpus.splits[split] = instances

    logger.info(f"Generated synthetic {task.value} corpus: "
                f"{', '.join(f'{k}={len(v)}' for k, v in corpus.splits.items())} (confusability {config.confusability})")
    return corpus
