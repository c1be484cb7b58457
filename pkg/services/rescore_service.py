# services/rescore_service.py
"""Re-ranking and filtering of top-k events with calibrated confidence."""
import logging
from dataclasses import asdict, dataclass
from typing import AbstractSet, Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.core_types import EntityKind, Event, Span
from utils.errors import ConfigError, EmptyDataError

logger = logging.getLogger(__name__)

RANK_SELECT = "rank-select"
THRESHOLD_FILTER = "threshold-filter"
KEEP_ALL = "keep-all"
BEST_WINS = "best-wins"

# keeps log-likelihoods finite for confidences of exactly 0 or 1
HYPOTHESIS_EPS = 1e-12

INSPECTION_COLUMNS = ["instance_id", "entity", "rank", "mean_prob", "std", "confidence", "kept", "positive"]


@dataclass(frozen=True)
class RescoreConfig:
    mode: str = THRESHOLD_FILTER
    threshold: float = 0.5
    overlap_policy: str = BEST_WINS

    def __post_init__(self):
        if self.mode not in (RANK_SELECT, THRESHOLD_FILTER):
            raise ConfigError(f"Unknown rescore mode '{self.mode}'")
        if self.overlap_policy not in (KEEP_ALL, BEST_WINS):
            raise ConfigError(f"Unknown overlap policy '{self.overlap_policy}'")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"Rescore threshold must be in [0, 1], got {self.threshold}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _check(events: Sequence[Event], scores: Sequence[float]) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if len(events) != scores.size:
        raise ConfigError(f"{len(events)} events but {scores.size} confidence scores")
    return scores


def _argmax_event(events: Sequence[Event], scores: Sequence[float]) -> Event:
    scores = _check(events, scores)
    if not events:
        raise EmptyDataError("Re-ranking needs at least one event.")
    # highest confidence, then lower rank
    best = min(range(len(events)), key=lambda i: (-scores[i], events[i].entity.rank))
    return events[best]


def rescore_sequences(events: Sequence[Event], scores: Sequence[float]) -> Event:
    return _argmax_event(events, scores)


def rescore_answers(events: Sequence[Event], scores: Sequence[float]) -> Event:
    return _argmax_event(events, scores)


def _overlaps(a: Tuple, b: Tuple) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def resolve_overlaps(events: Sequence[Event], scores: np.ndarray) -> List[int]:
    """Greedy best-wins: highest confidence first, ties to earlier start then shorter span."""
    order = sorted(
        range(len(events)),
        key=lambda i: (-scores[i], events[i].entity.payload[0], events[i].entity.length),
    )
    kept: List[int] = []
    for i in order:
        if all(not _overlaps(events[i].entity.payload, events[j].entity.payload) for j in kept):
            kept.append(i)
    return kept


def hypothesis_log_scores(
    events: Sequence[Event],
    scores: np.ndarray,
    hypotheses: Sequence[AbstractSet[Span]],
) -> Tuple[np.ndarray, List[List[int]]]:
    """Log-likelihood of each hypothesis' exact span set under independent event confidences.

    A hypothesis gets c for every candidate span it contains and 1 - c for
    every candidate span it leaves out, so span-free hypotheses are scored too.
    Also returns the event indices of each hypothesis.
    """
    position = {event.entity.payload: i for i, event in enumerate(events)}
    clipped = np.clip(scores, HYPOTHESIS_EPS, 1.0 - HYPOTHESIS_EPS)
    log_in, log_out = np.log(clipped), np.log1p(-clipped)
    members, totals = [], []
    for rank, spans in enumerate(hypotheses, start=1):
        missing = [span for span in spans if span not in position]
        if missing:
            raise ConfigError(f"Hypothesis {rank} holds spans without an event: {sorted(missing)}")
        indices = sorted(position[span] for span in spans)
        members.append(indices)
        totals.append(log_out.sum() + sum(log_in[i] - log_out[i] for i in indices))
    return np.asarray(totals, dtype=np.float64), members


def rescore_spans(
    events: Sequence[Event],
    scores: Sequence[float],
    config: RescoreConfig = RescoreConfig(),
    hypotheses: Optional[Sequence[AbstractSet[Span]]] = None,
) -> List[Event]:
    """Final span set, ordered by (start, end, class).

    threshold-filter drops events below the threshold and then applies the
    overlap policy. rank-select needs ``hypotheses`` (the span set of every
    decode, rank order) and returns the whole span set of the best-scoring
    hypothesis; ties go to the lower rank.
    """
    scores = _check(events, scores)
    if any(event.entity.kind is not EntityKind.SPAN for event in events):
        raise ConfigError("rescore_spans expects span events only")

    if config.mode == RANK_SELECT:
        if hypotheses is None or not len(hypotheses):
            raise ConfigError("rank-select needs the span set of every decoded hypothesis")
        totals, members = hypothesis_log_scores(events, scores, hypotheses)
        chosen = int(np.argmax(totals))
        survivors = members[chosen]
        logger.debug(f"rank-select chose hypothesis {chosen + 1} of {len(hypotheses)}")
    else:
        if not events:
            return []
        survivors = [i for i in range(len(events)) if scores[i] >= config.threshold]

    if config.overlap_policy == BEST_WINS:
        subset = [events[i] for i in survivors]
        survivors = [survivors[i] for i in resolve_overlaps(subset, scores[survivors])]

    kept = sorted((events[i] for i in survivors), key=lambda e: e.entity.payload)
    logger.debug(f"Span rescoring kept {len(kept)} of {len(events)} events ({config.mode}, {config.overlap_policy})")
    return kept


def inspection_frame(rows: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """Per-event inspection table: entity text, rank, mean/std of sample probabilities, confidence, kept flag."""
    frame = pd.DataFrame(list(rows), columns=INSPECTION_COLUMNS)
    return frame.sort_values(["instance_id", "rank", "entity"], kind="stable").reset_index(drop=True)
