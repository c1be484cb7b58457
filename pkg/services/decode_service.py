# services/decode_service.py
"""Exact inference over linear-chain lattices.

The lattice score of a label sequence y is
    unary[0, y0] + sum_t (transition[y(t-1), y(t)] + unary[t, y(t)])
with no start/stop potentials. Every probability the toolkit reports is
computed here, in the log domain with max-shifted log-sum-exp.
"""
import heapq
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp, softmax

from utils.core_types import Entity, EntityKind, Lattice, McSampleSet
from utils.errors import DimensionMismatchError, MalformedSpanError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoredSequence:
    labels: Tuple[int, ...]
    log_score: float
    rank: int


@dataclass(frozen=True)
class MarginalTable:
    probabilities: np.ndarray   # L x C, rows sum to 1

    def __getitem__(self, item):
        return self.probabilities[item]


def sequence_score(lattice: Lattice, labels: Sequence[int]) -> float:
    """Sum of unary and transition log-potentials along ``labels``.

    Accumulates in the same order as ``kbest_viterbi`` so equal-score ties are
    reproduced bit-for-bit by enumeration.
    """
    if len(labels) != lattice.length:
        raise DimensionMismatchError(f"Label sequence has length {len(labels)}, lattice has {lattice.length}.")
    unary = lattice.unary
    transition = lattice.transition
    score = float(unary[0, labels[0]])
    for t in range(1, len(labels)):
        score = score + float(transition[labels[t - 1], labels[t]]) + float(unary[t, labels[t]])
    return score


def kbest_viterbi(lattice: Lattice, k: int) -> List[ScoredSequence]:
    """The k highest-scoring label sequences, best first.

    Each state keeps its k best prefixes ordered by (-score, prefix); prefix
    comparison makes equal-score ties resolve lexicographically, and a prefix
    outside its state's top k can never complete to a global top-k sequence.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    unary = lattice.unary
    transition = lattice.transition
    n_labels = lattice.n_labels

    # beams[j]: sorted list of (-score, prefix) for prefixes ending in label j
    beams = [[(-float(unary[0, j]), (j,))] for j in range(n_labels)]
    for t in range(1, lattice.length):
        next_beams = []
        for j in range(n_labels):
            emit = float(unary[t, j])
            candidates = []
            for i in range(n_labels):
                step = float(transition[i, j])
                for neg_score, prefix in beams[i]:
                    candidates.append((-((-neg_score) + step + emit), prefix + (j,)))
            next_beams.append(heapq.nsmallest(k, candidates))
        beams = next_beams

    finals = heapq.nsmallest(k, (item for beam in beams for item in beam))
    return [
        ScoredSequence(labels=prefix, log_score=-neg_score, rank=rank)
        for rank, (neg_score, prefix) in enumerate(finals, start=1)
    ]


def viterbi_path(lattice: Lattice) -> Tuple[int, ...]:
    """Single best sequence with numpy back-pointers (ties go to the smaller previous label)."""
    unary = lattice.unary
    delta = unary[0].copy()
    backpointers = np.zeros((lattice.length, lattice.n_labels), dtype=np.int64)
    for t in range(1, lattice.length):
        candidates = delta[:, None] + lattice.transition
        backpointers[t] = np.argmax(candidates, axis=0)
        delta = candidates[backpointers[t], np.arange(lattice.n_labels)] + unary[t]
    path = [int(np.argmax(delta))]
    for t in range(lattice.length - 1, 0, -1):
        path.append(int(backpointers[t, path[-1]]))
    return tuple(reversed(path))


def _forward_backward_tables(lattice: Lattice) -> Tuple[np.ndarray, np.ndarray, float]:
    unary = lattice.unary
    transition = lattice.transition
    length, n_labels = unary.shape

    alpha = np.empty((length, n_labels))
    beta = np.zeros((length, n_labels))
    alpha[0] = unary[0]
    for t in range(1, length):
        alpha[t] = logsumexp(alpha[t - 1][:, None] + transition, axis=0) + unary[t]
    for t in range(length - 2, -1, -1):
        beta[t] = logsumexp(transition + (unary[t + 1] + beta[t + 1])[None, :], axis=1)
    log_partition = float(logsumexp(alpha[-1]))
    return alpha, beta, log_partition


def forward_backward(lattice: Lattice) -> Tuple[MarginalTable, float]:
    """Per-position label marginals and the log partition function."""
    alpha, beta, log_partition = _forward_backward_tables(lattice)
    marginals = np.exp(alpha + beta - log_partition)
    # renormalise away rounding drift so each row sums to 1
    marginals /= marginals.sum(axis=1, keepdims=True)
    return MarginalTable(probabilities=marginals), log_partition


def log_partition(lattice: Lattice) -> float:
    return _forward_backward_tables(lattice)[2]


def edge_marginals(lattice: Lattice) -> np.ndarray:
    """(L-1) x C x C table of P(y_t = i, y_t+1 = j | x)."""
    alpha, beta, log_z = _forward_backward_tables(lattice)
    if lattice.length < 2:
        return np.zeros((0, lattice.n_labels, lattice.n_labels))
    scores = (
        alpha[:-1, :, None]
        + lattice.transition[None, :, :]
        + (lattice.unary[1:] + beta[1:])[:, None, :]
    )
    return np.exp(scores - log_z)


class LatticeInference:
    """Forward/backward tables of one lattice, computed once and reused.

    Featurizing several events of the same instance would otherwise rerun
    forward-backward for every event and every sample.
    """

    def __init__(self, lattice: Lattice):
        self.lattice = lattice
        self._tables = None

    @property
    def tables(self) -> Tuple[np.ndarray, np.ndarray, float]:
        if self._tables is None:
            self._tables = _forward_backward_tables(self.lattice)
        return self._tables

    @property
    def log_partition(self) -> float:
        return self.tables[2]

    def sequence_log_prob(self, labels: Sequence[int]) -> float:
        return sequence_score(self.lattice, labels) - self.log_partition

    def span_marginal(self, start: int, end: int, labels: Sequence[int]) -> float:
        lattice = self.lattice
        if not (0 <= start < end <= lattice.length):
            raise MalformedSpanError(f"Span ({start}, {end}) outside lattice of length {lattice.length}.")
        if len(labels) != end - start:
            raise DimensionMismatchError(f"Span ({start}, {end}) needs {end - start} labels, got {len(labels)}.")
        alpha, beta, log_z = self.tables
        log_score = alpha[start, labels[0]]
        for offset in range(1, end - start):
            t = start + offset
            log_score += lattice.transition[labels[offset - 1], labels[offset]] + lattice.unary[t, labels[offset]]
        log_score += beta[end - 1, labels[-1]]
        return float(min(1.0, max(0.0, math.exp(log_score - log_z))))


def sequence_log_prob(lattice: Lattice, labels: Sequence[int]) -> float:
    return LatticeInference(lattice).sequence_log_prob(labels)


def span_marginal(lattice: Lattice, start: int, end: int, labels: Sequence[int]) -> float:
    """P(y[start:end] = labels | x), marginalising every position outside the span."""
    return LatticeInference(lattice).span_marginal(start, end, labels)


def mean_lattice(samples: McSampleSet) -> Lattice:
    """Element-wise arithmetic mean of unary and transition scores over the M samples."""
    unary = np.mean([lattice.unary for lattice in samples.samples], axis=0)
    transition = np.mean([lattice.transition for lattice in samples.samples], axis=0)
    return Lattice(unary=unary, transition=transition)


def answer_distributions(lattice: Lattice) -> Tuple[np.ndarray, np.ndarray]:
    """Softmax answer-start and answer-end distributions of a two-column QA lattice."""
    if lattice.n_labels != 2:
        raise DimensionMismatchError(f"QA lattices have 2 columns (start, end), got {lattice.n_labels}.")
    return softmax(lattice.unary[:, 0]), softmax(lattice.unary[:, 1])


def entity_probability(lattice: Union[Lattice, LatticeInference], entity: Entity) -> float:
    """Unnormalised probability of ``entity`` under a single lattice."""
    inference = lattice if isinstance(lattice, LatticeInference) else LatticeInference(lattice)
    lattice = inference.lattice
    if entity.kind is EntityKind.SEQUENCE:
        return min(1.0, math.exp(inference.sequence_log_prob(entity.payload)))
    if entity.kind is EntityKind.SPAN:
        start, end, _ = entity.payload
        if entity.tags is None:
            raise MalformedSpanError(f"Span entity {entity.payload} carries no tag sequence for its marginal.")
        return inference.span_marginal(start, end, entity.tags)
    start, end = entity.payload
    if not (0 <= start <= end < lattice.length):
        raise MalformedSpanError(f"Answer ({start}, {end}) outside passage of length {lattice.length}.")
    start_probs, end_probs = answer_distributions(lattice)
    return float(start_probs[start] * end_probs[end])


def _normalizing_length(entity: Entity) -> int:
    # answer spans always normalise over the two predictions (start, end)
    if entity.kind is EntityKind.ANSWER_SPAN:
        return 2
    return entity.length


def prepare_samples(samples: McSampleSet) -> List[LatticeInference]:
    return [LatticeInference(lattice) for lattice in samples.samples]


def entity_sample_probabilities(
    samples: Union[McSampleSet, Sequence[LatticeInference]],
    entity: Entity,
    length_normalize: bool = True,
) -> np.ndarray:
    """One probability per MC sample, optionally raised to 1/length."""
    prepared = prepare_samples(samples) if isinstance(samples, McSampleSet) else samples
    probabilities = np.array([entity_probability(inference, entity) for inference in prepared])
    if length_normalize:
        probabilities = np.power(probabilities, 1.0 / _normalizing_length(entity))
    return probabilities


def normalized_confidence(
    samples: Union[McSampleSet, Sequence[LatticeInference]],
    entity: Entity,
    length_normalize: bool = True,
) -> float:
    """Mean over samples of the entity probability raised to 1/(entity length)."""
    return float(np.mean(entity_sample_probabilities(samples, entity, length_normalize)))
