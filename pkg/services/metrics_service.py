# services/metrics_service.py
"""Calibration error, reliability data and task accuracy metrics.

Bins are equal-width over [0, 1]: bin i holds confidences in
[i/N, (i+1)/N), and the last bin also takes 1.0.
"""
import logging
import os
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.dump_io import write_csv
from utils.errors import DataError, EmptyDataError

logger = logging.getLogger(__name__)

DEFAULT_N_BINS = int(os.environ.get("CALIBRATION_ECE_BINS", 20))
RELIABILITY_COLUMNS = ["bin_center", "acc_minus_conf", "count", "positive_count"]


@dataclass(frozen=True)
class BinStats:
    index: int
    lower: float
    upper: float
    count: int
    positive_count: int
    confidence: float    # mean confidence, 0 for empty bins
    accuracy: float      # positive_count / count, 0 for empty bins

    @property
    def center(self) -> float:
        return (self.lower + self.upper) / 2.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _as_arrays(confidences, labels) -> Tuple[np.ndarray, np.ndarray]:
    confidences = np.asarray(confidences, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if confidences.size == 0:
        raise EmptyDataError("Calibration error needs at least one (confidence, label) pair.")
    if confidences.shape != labels.shape:
        raise DataError(f"{confidences.size} confidences but {labels.size} labels")
    if np.any(~np.isfinite(confidences)) or np.any(confidences < 0.0) or np.any(confidences > 1.0):
        raise DataError("Confidences must lie in [0, 1].")
    return confidences, labels


def bin_edges(n_bins: int) -> np.ndarray:
    return np.arange(n_bins + 1) / n_bins


def bin_indices(confidences: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin i takes [i/N, (i+1)/N); 1.0 goes to the last bin."""
    confidences = np.asarray(confidences, dtype=np.float64)
    edges = bin_edges(n_bins)
    indices = np.clip(np.floor(confidences * n_bins).astype(np.int64), 0, n_bins - 1)
    # floor(c * N) can land one bin off when the product rounds across an edge
    indices -= (confidences < edges[indices]).astype(np.int64)
    indices += ((confidences >= edges[indices + 1]) & (indices < n_bins - 1)).astype(np.int64)
    return indices


def calibration_bins(confidences, labels, n_bins: int = DEFAULT_N_BINS) -> List[BinStats]:
    confidences, labels = _as_arrays(confidences, labels)
    edges = bin_edges(n_bins)
    indices = bin_indices(confidences, n_bins)
    bins = []
    for i in range(n_bins):
        mask = indices == i
        count = int(np.sum(mask))
        positives = int(np.sum(labels[mask])) if count else 0
        bins.append(BinStats(
            index=i,
            lower=float(edges[i]),
            upper=float(edges[i + 1]),
            count=count,
            positive_count=positives,
            confidence=float(np.mean(confidences[mask])) if count else 0.0,
            accuracy=positives / count if count else 0.0,
        ))
    return bins


def ece_from_bins(bins: Sequence[BinStats]) -> float:
    total = sum(b.count for b in bins)
    if total == 0:
        raise EmptyDataError("No populated bins.")
    return float(sum((b.count / total) * abs(b.accuracy - b.confidence) for b in bins if b.count))


def compute_ece(pairs: Iterable[Tuple[float, bool]], n_bins: int = DEFAULT_N_BINS) -> Tuple[float, List[BinStats]]:
    """ECE over (confidence, correct) pairs; empty bins contribute nothing."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyDataError("Calibration error needs at least one (confidence, label) pair.")
    confidences, labels = zip(*pairs)
    return ece_from_arrays(confidences, labels, n_bins)


def ece_from_arrays(confidences, labels, n_bins: int = DEFAULT_N_BINS) -> Tuple[float, List[BinStats]]:
    bins = calibration_bins(confidences, labels, n_bins)
    return ece_from_bins(bins), bins


def bootstrap_ece(confidences, labels, n_bins: int = DEFAULT_N_BINS, n_boot: int = 200, seed: int = 0) -> float:
    """Standard deviation of ECE over seeded bootstrap resamples of the pairs."""
    confidences, labels = _as_arrays(confidences, labels)
    if n_boot < 2:
        return 0.0
    rng = np.random.default_rng(seed)
    n = confidences.size
    values = np.empty(n_boot)
    for b in range(n_boot):
        pick = rng.integers(0, n, size=n)
        values[b] = ece_from_bins(calibration_bins(confidences[pick], labels[pick], n_bins))
    return float(np.std(values))


def reliability_frame(bins: Sequence[BinStats]) -> pd.DataFrame:
    """One row per non-empty bin: bin_center, acc_minus_conf, count, positive_count."""
    rows = [
        (b.center, b.accuracy - b.confidence, b.count, b.positive_count)
        for b in bins if b.count > 0
    ]
    frame = pd.DataFrame(rows, columns=RELIABILITY_COLUMNS)
    return frame.astype({"count": "int64", "positive_count": "int64"})


def reliability_export(bins: Sequence[BinStats], path, config_hash: Optional[str] = None):
    return write_csv(path, reliability_frame(bins), config_hash=config_hash)


def micro_f1(predicted: Iterable[Tuple], gold: Iterable[Tuple]) -> Tuple[float, float, float]:
    """Micro-averaged exact-match span scores over (instance, start, end, class) keys."""
    predicted, gold = set(predicted), set(gold)
    if not predicted and not gold:
        return 1.0, 1.0, 1.0
    true_positives = len(predicted & gold)
    precision = true_positives / len(predicted) if predicted else 0.0
    recall = true_positives / len(gold) if gold else 0.0
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def exact_match(predicted: Sequence[Tuple[int, int]], gold: Sequence[Tuple[int, int]]) -> float:
    if len(predicted) != len(gold):
        raise DataError(f"{len(predicted)} predictions for {len(gold)} questions")
    if not gold:
        raise EmptyDataError("Exact match over zero questions.")
    return float(np.mean([tuple(p) == tuple(g) for p, g in zip(predicted, gold)]))


def sequence_accuracy(predicted: Sequence[Sequence], gold: Sequence[Sequence]) -> Tuple[float, float]:
    """(sentence accuracy, token accuracy) of chosen sequences against gold."""
    if len(predicted) != len(gold):
        raise DataError(f"{len(predicted)} predictions for {len(gold)} sequences")
    if not gold:
        raise EmptyDataError("Sequence accuracy over zero sequences.")
    sentence_hits = 0
    token_hits = 0
    token_total = 0
    for p, g in zip(predicted, gold):
        p, g = tuple(p), tuple(g)
        if len(p) != len(g):
            raise DataError(f"Predicted length {len(p)} differs from gold length {len(g)}")
        sentence_hits += p == g
        token_hits += sum(a == b for a, b in zip(p, g))
        token_total += len(g)
    return sentence_hits / len(gold), token_hits / token_total


def metrics_report(
    confidences,
    labels,
    n_bins: int = DEFAULT_N_BINS,
    n_boot: int = 200,
    seed: int = 0,
    **task_metrics,
) -> Dict[str, Any]:
    """Metrics report {ece, ece_std, f1, em, accuracy, token_accuracy, n, positives, bins}.

    ``bins`` holds the BinStats themselves; serialize them with ``BinStats.to_dict``.
    """
    confidences, labels = _as_arrays(confidences, labels)
    ece, bins = ece_from_arrays(confidences, labels, n_bins)
    report = {
        "ece": ece,
        "ece_std": bootstrap_ece(confidences, labels, n_bins, n_boot, seed),
        "f1": None,
        "em": None,
        "accuracy": None,
        "token_accuracy": None,
        "n": int(confidences.size),
        "positives": int(np.sum(labels)),
        "bins": bins,
    }
    for key, value in task_metrics.items():
        if key not in report:
            raise KeyError(f"Unknown metric '{key}'")
        report[key] = value
    logger.info(f"ECE {ece:.4f} (+/- {report['ece_std']:.4f}) over {report['n']} events, {report['positives']} positive")
    return report
