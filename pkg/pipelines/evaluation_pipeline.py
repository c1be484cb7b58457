# pipelines/evaluation_pipeline.py
"""Held-out evaluation of forecaster variants and calibrated re-scoring.

Every variant is trained on the dev dump and scored on the top-1 events of
the test dump. Re-scoring decodes the test dump to the chosen k and lets the
forecaster pick (sequences, answers) or filter (spans) the predictions.
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from pipelines.calibration_pipeline import (
    N_JOBS,
    build_forecast_dataset,
    collect_events,
    decode_records,
    select_from_datasets,
)
from services.decode_service import entity_sample_probabilities, normalized_confidence, prepare_samples
from services.event_service import EventSet, extract_spans
from services.feature_service import FeatureSchema, featurize, featurize_events
from services.forecaster_service import Forecaster, SelectedForecaster, fit_forecaster, predict_rows
from services.language_model_service import LanguageModel
from services.metrics_service import (
    DEFAULT_N_BINS,
    BinStats,
    exact_match,
    metrics_report,
    micro_f1,
    sequence_accuracy,
)
from services.rescore_service import (
    RescoreConfig,
    inspection_frame,
    rescore_answers,
    rescore_sequences,
    rescore_spans,
)
from services.gbdt_service import GbdtConfig
from utils.core_types import LabelSet, SampledInstance, Task, entity_text
from utils.errors import EmptyDataError, MissingGoldError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    """One evaluated row. ``kind=None`` reports the model's own (raw) probability."""

    name: str
    kind: Optional[str]
    schema: str = "mean"
    heuristic_k: bool = False


BASE_VARIANTS = (
    Variant("uncalibrated", None),
    Variant("platt", "platt"),
    Variant("calibrated_mean", "gbdt"),
    Variant("calibrated_mean_topk", "gbdt", "mean", heuristic_k=True),
    Variant("rank_topk", "gbdt", "rank", heuristic_k=True),
    Variant("rank_var_topk", "gbdt", "rank_var", heuristic_k=True),
)

TASK_VARIANTS = {
    Task.SEQUENCE_LABELING: (),
    Task.SPAN_NER: (Variant("rank_var_ln_topk", "gbdt", "rank_var_ln", heuristic_k=True),),
    Task.EXTRACTIVE_QA: (Variant("rank_var_lm_topk", "gbdt", "rank_var_lm", heuristic_k=True),),
}


def default_variants(task: Task) -> List[Variant]:
    return list(BASE_VARIANTS) + list(TASK_VARIANTS[Task(task)])


# --- task metrics ---

def baseline_predictions(records: Sequence[SampledInstance], labels: LabelSet, decodes: Sequence[list]) -> List[Any]:
    """Rank-1 prediction of every instance in the form ``task_metrics`` expects."""
    predictions = []
    for record, decoded in zip(records, decodes):
        task = record.instance.task
        if task is Task.SEQUENCE_LABELING:
            predictions.append(tuple(decoded[0].labels))
        elif task is Task.SPAN_NER:
            predictions.append(extract_spans(decoded[0], labels))
        else:
            predictions.append(tuple(decoded[0][0]))
    return predictions


def task_metrics(records: Sequence[SampledInstance], labels: LabelSet, predictions: Sequence[Any]) -> Dict[str, float]:
    """accuracy/token_accuracy, f1 or em depending on the task of the records."""
    instances = [record.instance for record in records]
    if not instances:
        raise EmptyDataError("No instances to score.")
    if any(not instance.has_gold for instance in instances):
        raise MissingGoldError("Task metrics need gold annotations on every instance.")
    task = instances[0].task
    if task is Task.SEQUENCE_LABELING:
        accuracy, token_accuracy = sequence_accuracy(predictions, [labels.encode(i.gold) for i in instances])
        return {"accuracy": accuracy, "token_accuracy": token_accuracy}
    if task is Task.SPAN_NER:
        predicted = {(i.id,) + tuple(span) for i, spans in zip(instances, predictions) for span in spans}
        gold = {(i.id,) + tuple(span) for i in instances for span in i.gold}
        precision, recall, f1 = micro_f1(predicted, gold)
        return {"f1": f1, "precision": precision, "recall": recall}
    return {"em": exact_match(predictions, [i.gold for i in instances])}


# --- variant evaluation ---

def raw_confidences(records: Sequence[SampledInstance], event_sets: Sequence[EventSet]) -> np.ndarray:
    """Mean over samples of the unnormalised event probability."""
    values = []
    for record, event_set in zip(records, event_sets):
        prepared = prepare_samples(record.samples)
        values.extend(normalized_confidence(prepared, event.entity, length_normalize=False) for event in event_set.events)
    return np.asarray(values, dtype=np.float64)


def forecaster_confidences(
    forecaster: Forecaster,
    records: Sequence[SampledInstance],
    event_sets: Sequence[EventSet],
    lm: Optional[LanguageModel] = None,
) -> np.ndarray:
    rows = []
    for record, event_set in zip(records, event_sets):
        rows.extend(featurize_events(record.samples, event_set.events, forecaster.schema, lm, record.instance.tokens))
    return predict_rows(forecaster, rows)


def fit_variant(
    variant: Variant,
    dev_records: Sequence[SampledInstance],
    labels: LabelSet,
    dev_decodes: Sequence[list],
    candidates: Sequence[int],
    gbdt_config: Optional[GbdtConfig] = None,
    lm: Optional[LanguageModel] = None,
    n_bins: int = DEFAULT_N_BINS,
    n_jobs: int = N_JOBS,
) -> SelectedForecaster:
    """Train one variant's forecaster on the dev records (top-1 events, or heuristic-k over ``candidates``)."""
    schema = FeatureSchema.preset(variant.schema)
    val_set = build_forecast_dataset(dev_records, labels, 1, schema, lm, "val", dev_decodes)

    def fit_fn(dataset):
        return fit_forecaster(dataset, variant.kind, gbdt_config)

    if not variant.heuristic_k:
        return select_from_datasets({1: val_set}, val_set, fit_fn, n_bins, n_jobs=1)
    train_sets = {
        k: build_forecast_dataset(dev_records, labels, k, schema, lm, "train", dev_decodes)
        for k in candidates
    }
    return select_from_datasets(train_sets, val_set, fit_fn, n_bins, n_jobs)


def evaluate_variants(
    dev_records: Sequence[SampledInstance],
    test_records: Sequence[SampledInstance],
    labels: LabelSet,
    variants: Sequence[Variant],
    candidates: Sequence[int],
    gbdt_config: Optional[GbdtConfig] = None,
    lm: Optional[LanguageModel] = None,
    selected: Optional[SelectedForecaster] = None,
    n_bins: int = DEFAULT_N_BINS,
    n_boot: int = 200,
    seed: int = 0,
    n_jobs: int = N_JOBS,
) -> Tuple[Dict[str, Any], Dict[str, List[BinStats]]]:
    """ECE report per variant on top-1 test events, plus the bins behind each reliability diagram.

    ``selected`` is the forecaster produced by the calibrate stage; it is
    scored as the ``selected`` row.
    """
    if any(not record.instance.has_gold for record in test_records):
        raise MissingGoldError("Evaluation needs gold annotations on every test instance.")
    k_dev = max(candidates) if candidates else 1
    dev_decodes = decode_records(dev_records, k_dev, n_jobs=n_jobs)
    test_decodes = decode_records(test_records, 1, n_jobs=n_jobs)
    test_events = collect_events(test_records, labels, 1, test_decodes)
    test_labels = np.array([int(e.positive) for es in test_events for e in es.events], dtype=np.int64)
    if test_labels.size == 0:
        raise EmptyDataError("The test dump yields no top-1 events to evaluate.")

    rows: Dict[str, Dict[str, Any]] = {}
    bins: Dict[str, List[BinStats]] = {}

    def score(name, confidences, kind, schema, chosen_k):
        report = metrics_report(confidences, test_labels, n_bins, n_boot, seed)
        bins[name] = report["bins"]
        report["bins"] = [b.to_dict() for b in report["bins"]]
        report.update({"kind": kind, "schema": schema, "chosen_k": chosen_k})
        rows[name] = report
        logger.info(f"[{name}] ECE {report['ece']:.4f} (k={chosen_k}, schema={schema})")

    for variant in variants:
        if variant.kind is None:
            score(variant.name, raw_confidences(test_records, test_events), "none", None, 1)
            continue
        if FeatureSchema.preset(variant.schema).needs_lm and lm is None:
            logger.warning(f"Skipping variant '{variant.name}': no language model available")
            continue
        fitted = fit_variant(variant, dev_records, labels, dev_decodes, candidates, gbdt_config, lm, n_bins, n_jobs)
        confidences = forecaster_confidences(fitted.forecaster, test_records, test_events, lm)
        score(variant.name, confidences, variant.kind, variant.schema, fitted.chosen_k)
        rows[variant.name]["val_ece"] = fitted.val_ece

    if selected is not None:
        confidences = forecaster_confidences(selected.forecaster, test_records, test_events, lm)
        score("selected", confidences, selected.forecaster.kind, list(selected.forecaster.schema.names), selected.chosen_k)

    baseline = task_metrics(test_records, labels, baseline_predictions(test_records, labels, test_decodes))
    report = {
        "n_test_instances": len(test_records),
        "n_dev_instances": len(dev_records),
        "n_events": int(test_labels.size),
        "positives": int(test_labels.sum()),
        "n_bins": n_bins,
        "task_metrics": baseline,
        "variants": rows,
    }
    return report, bins


# --- re-scoring ---

@dataclass
class RescoreResult:
    report: Dict[str, Any]
    predictions: List[Dict[str, Any]]
    inspection: List[Dict[str, Any]]


def _render(task: Task, labels: LabelSet, prediction) -> Any:
    if task is Task.SEQUENCE_LABELING:
        return list(labels.decode(prediction))
    if task is Task.SPAN_NER:
        return [list(span) for span in sorted(prediction)]
    return list(prediction)


def rescore_records(
    records: Sequence[SampledInstance],
    labels: LabelSet,
    forecaster: Forecaster,
    k: int,
    config: RescoreConfig = RescoreConfig(),
    lm: Optional[LanguageModel] = None,
    n_jobs: int = N_JOBS,
) -> RescoreResult:
    """Re-rank (sequences, answers) or filter (spans) the top-k events with calibrated confidence."""
    decodes = decode_records(records, k, n_jobs=n_jobs)
    event_sets = collect_events(records, labels, k, decodes)
    baseline = baseline_predictions(records, labels, decodes)

    rescored, predictions, inspection = [], [], []
    for record, event_set, before in zip(records, event_sets, baseline):
        instance = record.instance
        events = list(event_set.events)
        prepared = prepare_samples(record.samples)
        lm_perplexity = lm.perplexity(instance.tokens) if forecaster.schema.needs_lm and lm is not None else None
        rows = [featurize(prepared, event, forecaster.schema, lm, instance.tokens, lm_perplexity) for event in events]
        confidences = predict_rows(forecaster, rows)

        if instance.task is Task.SPAN_NER:
            kept_events = rescore_spans(events, confidences, config, event_set.hypotheses)
            after = frozenset(event.entity.payload for event in kept_events)
            kept = {event.entity.key for event in kept_events}
        else:
            choose = rescore_sequences if instance.task is Task.SEQUENCE_LABELING else rescore_answers
            chosen = choose(events, confidences)
            after = tuple(chosen.entity.payload)
            kept = {chosen.entity.key}
        rescored.append(after)

        predictions.append({
            "id": instance.id,
            "baseline": _render(instance.task, labels, before),
            "rescored": _render(instance.task, labels, after),
        })
        for event, confidence in zip(events, confidences):
            probabilities = entity_sample_probabilities(prepared, event.entity)
            inspection.append({
                "instance_id": instance.id,
                "entity": entity_text(event.entity, instance, labels),
                "rank": event.entity.rank,
                "mean_prob": float(np.mean(probabilities)),
                "std": float(np.std(probabilities)),
                "confidence": float(confidence),
                "kept": event.entity.key in kept,
                "positive": event.positive,
            })

    has_gold = all(record.instance.has_gold for record in records)
    report: Dict[str, Any] = {
        "k": k,
        "mode": config.mode,
        "threshold": config.threshold,
        "overlap_policy": config.overlap_policy,
        "n_instances": len(records),
        "n_events": sum(len(es.events) for es in event_sets),
        "changed": sum(before != after for before, after in zip(baseline, rescored)),
    }
    if has_gold:
        before_metrics = task_metrics(records, labels, baseline)
        after_metrics = task_metrics(records, labels, rescored)
        report["baseline"] = before_metrics
        report["rescored"] = after_metrics
        report["delta"] = {key: after_metrics[key] - before_metrics[key] for key in before_metrics}
        logger.info(f"Re-scoring deltas: {', '.join(f'{k}={v:+.4f}' for k, v in report['delta'].items())}")
    else:
        logger.warning("Test records carry no gold; skipping before/after metrics")
    return RescoreResult(report=report, predictions=predictions, inspection=inspection)


def inspection_table(result: RescoreResult):
    return inspection_frame(result.inspection)
