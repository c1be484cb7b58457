# services/feature_service.py
"""Forecaster input rows built from MC samples, event metadata and the LM."""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from services.decode_service import LatticeInference, entity_sample_probabilities, prepare_samples
from services.language_model_service import LanguageModel
from utils.core_types import Event, McSampleSet
from utils.dump_io import write_csv
from utils.errors import ConfigError, EmptyDataError, MissingLanguageModelError

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("mean_prob", "p10", "p90", "variance", "rank", "span_len", "lm_perplexity")

# Named schemas, one per ablation row of the forecaster comparison
SCHEMA_PRESETS: Dict[str, Tuple[str, ...]] = {
    "mean": ("mean_prob",),
    "rank": ("mean_prob", "rank"),
    "rank_var": ("mean_prob", "p10", "p90", "variance", "rank"),
    "rank_pct": ("mean_prob", "p10", "p90", "rank"),
    "rank_variance": ("mean_prob", "variance", "rank"),
    "rank_var_ln": ("mean_prob", "p10", "p90", "variance", "rank", "span_len"),
    "rank_var_lm": ("mean_prob", "p10", "p90", "variance", "rank", "lm_perplexity"),
}


@dataclass(frozen=True)
class FeatureSchema:
    names: Tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if "mean_prob" not in names:
            raise ConfigError(f"Feature schema must include 'mean_prob', got {list(names)}")
        unknown = [name for name in names if name not in FEATURE_NAMES]
        if unknown:
            raise ConfigError(f"Unknown feature names {unknown}; known: {list(FEATURE_NAMES)}")
        if len(set(names)) != len(names):
            raise ConfigError(f"Duplicate feature names in schema {list(names)}")

    @classmethod
    def preset(cls, name: str) -> "FeatureSchema":
        if name not in SCHEMA_PRESETS:
            raise ConfigError(f"Unknown feature schema preset '{name}'; known: {sorted(SCHEMA_PRESETS)}")
        return cls(SCHEMA_PRESETS[name])

    @property
    def needs_lm(self) -> bool:
        return "lm_perplexity" in self.names

    def __len__(self):
        return len(self.names)


@dataclass(frozen=True)
class FeatureVector:
    schema: FeatureSchema
    values: Tuple[float, ...]

    def __getitem__(self, name: str) -> float:
        return self.values[self.schema.names.index(name)]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def to_dict(self) -> Dict[str, float]:
        return dict(zip(self.schema.names, self.values))


def summarize_probabilities(probabilities: np.ndarray) -> Dict[str, float]:
    """Mean, linear-interpolation 10th/90th percentiles and population variance of the M values."""
    probabilities = np.sort(np.asarray(probabilities, dtype=np.float64))
    return {
        "mean_prob": float(np.mean(probabilities)),
        "p10": float(np.percentile(probabilities, 10)),
        "p90": float(np.percentile(probabilities, 90)),
        "variance": float(np.var(probabilities)),
    }


def featurize(
    samples,
    event: Event,
    schema: FeatureSchema,
    lm: Optional[LanguageModel] = None,
    tokens: Optional[Sequence[str]] = None,
    lm_perplexity: Optional[float] = None,
) -> FeatureVector:
    """One forecaster row for ``event``.

    ``samples`` is an McSampleSet or the prepared per-sample inferences of
    one instance. Samples are sorted before aggregation so the row does not
    depend on sample order.
    """
    if schema.needs_lm and lm_perplexity is None:
        if lm is None:
            raise MissingLanguageModelError(f"Feature schema {list(schema.names)} needs a language model.")
        if tokens is None:
            raise EmptyDataError("Perplexity feature needs the instance tokens.")
        lm_perplexity = lm.perplexity(tokens)

    probabilities = entity_sample_probabilities(samples, event.entity, length_normalize=True)
    values = summarize_probabilities(probabilities)
    values["rank"] = float(event.entity.rank)
    values["span_len"] = float(event.entity.length)
    values["lm_perplexity"] = float(lm_perplexity) if lm_perplexity is not None else float("nan")
    return FeatureVector(schema=schema, values=tuple(values[name] for name in schema.names))


def featurize_events(
    samples: McSampleSet,
    events: Iterable[Event],
    schema: FeatureSchema,
    lm: Optional[LanguageModel] = None,
    tokens: Optional[Sequence[str]] = None,
) -> List[FeatureVector]:
    """Rows for every event of one instance, sharing forward-backward tables and the perplexity."""
    prepared: List[LatticeInference] = prepare_samples(samples)
    lm_perplexity = None
    if schema.needs_lm:
        if lm is None:
            raise MissingLanguageModelError(f"Feature schema {list(schema.names)} needs a language model.")
        lm_perplexity = lm.perplexity(tokens)
    return [featurize(prepared, event, schema, lm_perplexity=lm_perplexity) for event in events]


def feature_matrix(rows: Sequence[FeatureVector], schema: FeatureSchema) -> np.ndarray:
    if not rows:
        return np.zeros((0, len(schema)))
    return np.vstack([row.as_array() for row in rows])


def export_features_csv(rows: Sequence[Tuple[FeatureVector, int]], schema: FeatureSchema, path, config_hash=None):
    """CSV with header = schema order followed by ``label``."""
    frame = pd.DataFrame([row.values for row, _ in rows], columns=list(schema.names))
    frame["label"] = [int(label) for _, label in rows]
    return write_csv(path, frame, config_hash=config_hash)
