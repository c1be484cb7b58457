# services/language_model_service.py
"""Additive-smoothed n-gram language model for the perplexity ("lm") feature.

Sentences are left-padded with ``<s>``; there is no end marker, so every
real token is predicted exactly once. The prediction vocabulary is the
training vocabulary plus ``<unk>``, and for every context

    P(w | ctx) = (c(ctx, w) + alpha) / (c(ctx) + alpha * (|V| + 1))

which sums to one over that vocabulary.
"""
import logging
import math
from collections import Counter
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from utils.dump_io import read_json_artifact, write_json_artifact
from utils.errors import ConfigError, EmptyDataError, SchemaVersionError

logger = logging.getLogger(__name__)

BOS = "<s>"
UNK = "<unk>"
LM_FORMAT_VERSION = 1


class LanguageModel:
    def __init__(self, order: int, alpha: float, vocabulary: Iterable[str], ngram_counts: Counter, context_counts: Counter):
        if order < 1:
            raise ConfigError(f"n-gram order must be >= 1, got {order}")
        if not alpha > 0:
            raise ConfigError(f"Smoothing constant must be > 0, got {alpha}")
        self.order = order
        self.alpha = float(alpha)
        self.vocabulary = frozenset(vocabulary)
        self.ngram_counts = ngram_counts
        self.context_counts = context_counts

    @property
    def prediction_vocab_size(self) -> int:
        # training vocabulary plus <unk>
        return len(self.vocabulary) + 1

    def normalize(self, tokens: Sequence[str]) -> List[str]:
        return [token if token in self.vocabulary else UNK for token in tokens]

    def ngrams(self, tokens: Sequence[str]) -> List[Tuple[str, ...]]:
        padded = [BOS] * (self.order - 1) + self.normalize(tokens)
        return [tuple(padded[i:i + self.order]) for i in range(len(padded) - self.order + 1)]

    def probability(self, word: str, context: Sequence[str] = ()) -> float:
        word = word if word in self.vocabulary else UNK
        context = tuple(context)[-(self.order - 1):] if self.order > 1 else ()
        numerator = self.ngram_counts[context + (word,)] + self.alpha
        denominator = self.context_counts[context] + self.alpha * self.prediction_vocab_size
        return numerator / denominator

    def log_likelihoods(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([math.log(self.probability(gram[-1], gram[:-1])) for gram in self.ngrams(tokens)])

    def perplexity(self, tokens: Sequence[str]) -> float:
        if len(tokens) == 0:
            raise EmptyDataError("Perplexity needs at least one token.")
        return float(np.exp(-np.mean(self.log_likelihoods(tokens))))

    def to_dict(self):
        return {
            "format_version": LM_FORMAT_VERSION,
            "order": self.order,
            "alpha": self.alpha,
            "vocabulary": sorted(self.vocabulary),
            "ngram_counts": [[list(gram), count] for gram, count in sorted(self.ngram_counts.items())],
        }

    @classmethod
    def from_dict(cls, data) -> "LanguageModel":
        version = data.get("format_version")
        if version != LM_FORMAT_VERSION:
            raise SchemaVersionError(f"Unsupported language model format_version {version!r}")
        ngram_counts = Counter({tuple(gram): int(count) for gram, count in data["ngram_counts"]})
        return cls(
            order=int(data["order"]),
            alpha=float(data["alpha"]),
            vocabulary=data["vocabulary"],
            ngram_counts=ngram_counts,
            context_counts=_context_counts(ngram_counts),
        )


def _context_counts(ngram_counts: Counter) -> Counter:
    context_counts = Counter()
    for gram, count in ngram_counts.items():
        context_counts[gram[:-1]] += count
    return context_counts


def train_lm(corpus: Iterable[Sequence[str]], n: int = 2, alpha: float = 1.0) -> LanguageModel:
    """Count n-grams over ``corpus`` (an iterable of token sequences)."""
    sentences = [list(sentence) for sentence in corpus if len(sentence) > 0]
    if not sentences:
        raise EmptyDataError("Cannot train a language model on an empty corpus.")

    vocabulary = set()
    for sentence in sentences:
        vocabulary.update(sentence)
    model = LanguageModel(order=n, alpha=alpha, vocabulary=vocabulary, ngram_counts=Counter(), context_counts=Counter())
    for sentence in sentences:
        model.ngram_counts.update(model.ngrams(sentence))
    model.context_counts.update(_context_counts(model.ngram_counts))

    logger.info(f"Trained {n}-gram LM: {len(sentences)} sentences, |V|={len(vocabulary)}, alpha={alpha}")
    return model


def perplexity(model: LanguageModel, tokens: Sequence[str]) -> float:
    return model.perplexity(tokens)


def save_lm(model: LanguageModel, path, config_hash: Optional[str] = None) -> None:
    write_json_artifact(path, model.to_dict(), config_hash=config_hash)
    logger.info(f"Saved {model.order}-gram language model to {path}")


def load_lm(path) -> LanguageModel:
    return LanguageModel.from_dict(read_json_artifact(path, stage_hint="calibrate"))
