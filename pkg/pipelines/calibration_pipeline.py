# pipelines/calibration_pipeline.py
"""Forecaster construction: candidate events, feature datasets and heuristic-k selection.

For every candidate k a forecaster is trained on features of the top-k
events of the dev instances, then scored by ECE on the top-1 events. The
k with the lowest validation ECE wins; ties go to the smaller k.
"""
import logging
import os
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from services.decode_service import mean_lattice
from services.event_service import MAX_ANSWER_TOKENS, EventSet, decode_top_k, events_from_decodes
from services.feature_service import FeatureSchema, FeatureVector, featurize_events
from services.forecaster_service import (
    ForecastDataset,
    Forecaster,
    SelectedForecaster,
    fit_forecaster,
    predict_rows,
)
from services.gbdt_service import GbdtConfig
from services.language_model_service import LanguageModel
from services.metrics_service import DEFAULT_N_BINS, ece_from_arrays
from utils.core_types import LabelSet, SampledInstance
from utils.errors import EmptyDataError, MissingGoldError

logger = logging.getLogger(__name__)

N_JOBS = int(os.environ.get("CALIBRATION_N_JOBS", 1))


def decode_records(
    records: Sequence[SampledInstance],
    k_max: int,
    max_answer_tokens: int = MAX_ANSWER_TOKENS,
    n_jobs: int = N_JOBS,
) -> List[list]:
    """Top-k_max hypotheses of every instance's mean lattice; every smaller k uses a prefix."""
    return Parallel(n_jobs=n_jobs)(
        delayed(decode_top_k)(mean_lattice(record.samples), record.instance.task, k_max, max_answer_tokens)
        for record in records
    )


def collect_events(records: Sequence[SampledInstance], labels: LabelSet, k: int, decodes: Sequence[list]) -> List[EventSet]:
    return [events_from_decodes(record.instance, labels, decoded, k) for record, decoded in zip(records, decodes)]


def build_forecast_dataset(
    records: Sequence[SampledInstance],
    labels: LabelSet,
    k: int,
    schema: FeatureSchema,
    lm: Optional[LanguageModel] = None,
    split: str = "train",
    decodes: Optional[Sequence[list]] = None,
    max_answer_tokens: int = MAX_ANSWER_TOKENS,
) -> ForecastDataset:
    """Featurize the top-k events of every instance, labelled by positivity."""
    missing = [record.instance.id for record in records if not record.instance.has_gold]
    if missing:
        raise MissingGoldError(f"{len(missing)} instances lack gold annotations (first: '{missing[0]}')")
    if decodes is None:
        decodes = decode_records(records, k, max_answer_tokens)

    rows: List[FeatureVector] = []
    row_labels: List[int] = []
    for record, event_set in zip(records, collect_events(records, labels, k, decodes)):
        rows.extend(featurize_events(record.samples, event_set.events, schema, lm, record.instance.tokens))
        row_labels.extend(int(event.positive) for event in event_set.events)

    dataset = ForecastDataset(schema=schema, rows=rows, labels=np.array(row_labels, dtype=np.int64), k=k, split=split)
    logger.info(f"Built {split} dataset (k={k}): {len(dataset)} rows, {dataset.positives} positive")
    return dataset


def validation_ece(forecaster: Forecaster, val_set: ForecastDataset, n_bins: int = DEFAULT_N_BINS) -> float:
    if len(val_set) == 0:
        raise EmptyDataError("Validation dataset is empty.")
    ece, _ = ece_from_arrays(predict_rows(forecaster, val_set.rows), val_set.labels, n_bins)
    return ece


def _fit_and_score(k, train_set, val_set, fit_fn, n_bins):
    forecaster = fit_fn(train_set)
    return k, forecaster, validation_ece(forecaster, val_set, n_bins)


def select_from_datasets(
    train_sets: Dict[int, ForecastDataset],
    val_set: ForecastDataset,
    fit_fn: Callable[[ForecastDataset], Forecaster],
    n_bins: int = DEFAULT_N_BINS,
    n_jobs: int = N_JOBS,
) -> SelectedForecaster:
    """Fit one forecaster per candidate k and keep the one with the lowest validation ECE."""
    if not train_sets:
        raise EmptyDataError("No candidate k to select from.")
    results = Parallel(n_jobs=n_jobs)(
        delayed(_fit_and_score)(k, train_sets[k], val_set, fit_fn, n_bins) for k in sorted(train_sets)
    )
    candidate_eces = {k: ece for k, _, ece in results}
    best_k, best_forecaster, best_ece = results[0]
    for k, forecaster, ece in results[1:]:
        if ece < best_ece:
            best_k, best_forecaster, best_ece = k, forecaster, ece
    for k, ece in candidate_eces.items():
        logger.info(f"heuristic-k candidate k={k}: validation ECE {ece:.4f}")
    logger.info(f"Selected k={best_k} (validation ECE {best_ece:.4f})")
    return SelectedForecaster(forecaster=best_forecaster, chosen_k=best_k, val_ece=best_ece, candidate_eces=candidate_eces)


def select_heuristic_k(
    dev_records: Sequence[SampledInstance],
    labels: LabelSet,
    k_max: int,
    schema: FeatureSchema,
    kind: str = "gbdt",
    gbdt_config: Optional[GbdtConfig] = None,
    lm: Optional[LanguageModel] = None,
    candidates: Optional[Sequence[int]] = None,
    val_records: Optional[Sequence[SampledInstance]] = None,
    max_answer_tokens: int = MAX_ANSWER_TOKENS,
    n_bins: int = DEFAULT_N_BINS,
    n_jobs: int = N_JOBS,
) -> SelectedForecaster:
    """Train on top-k dev events for each candidate k, validate on top-1 events.

    ``val_records`` defaults to the dev instances themselves.
    """
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    candidates = sorted({int(k) for k in (candidates or range(1, k_max + 1)) if 1 <= int(k) <= k_max})
    if not candidates:
        candidates = list(range(1, k_max + 1))

    dev_decodes = decode_records(dev_records, k_max, max_answer_tokens, n_jobs)
    train_sets = {
        k: build_forecast_dataset(dev_records, labels, k, schema, lm, "train", dev_decodes, max_answer_tokens)
        for k in candidates
    }
    if val_records is None:
        val_records, val_decodes = dev_records, dev_decodes
    else:
        val_decodes = decode_records(val_records, 1, max_answer_tokens, n_jobs)
    val_set = build_forecast_dataset(val_records, labels, 1, schema, lm, "val", val_decodes, max_answer_tokens)

    def fit_fn(dataset):
        return fit_forecaster(dataset, kind, gbdt_config)

    return select_from_datasets(train_sets, val_set, fit_fn, n_bins, n_jobs)


def positive_coverage(records: Sequence[SampledInstance], labels: LabelSet, decodes: Sequence[list], k_max: int) -> Dict[int, int]:
    """Positive-event count for every k <= k_max (non-decreasing in k)."""
    return {
        k: sum(event_set.positive_count for event_set in collect_events(records, labels, k, decodes))
        for k in range(1, k_max + 1)
    }
