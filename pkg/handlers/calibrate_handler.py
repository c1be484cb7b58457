# handlers/calibrate_handler.py
import logging
from typing import Any, Dict, List, Sequence

from handlers.common_handler_utils import read_split_dump, write_report
from pipelines.calibration_pipeline import (
    N_JOBS,
    build_forecast_dataset,
    decode_records,
    positive_coverage,
    select_heuristic_k,
)
from services.feature_service import FeatureSchema, export_features_csv
from services.forecaster_service import save_selected_forecaster
from services.language_model_service import save_lm, train_lm
from utils.config import PipelineConfig
from utils.core_types import SampledInstance
from utils.dump_io import read_corpus

logger = logging.getLogger(__name__)


def lm_training_corpus(config: PipelineConfig, fallback: Sequence[SampledInstance]) -> List[Sequence[str]]:
    """Token sequences of the base model's training split; the dev dump stands in when there is none."""
    train_path = config.corpus_path("train")
    if train_path.exists():
        _, instances = read_corpus(train_path)
        return [instance.tokens for instance in instances]
    logger.warning(f"No training corpus at {train_path}; fitting the language model on the dev dump tokens")
    return [record.instance.tokens for record in fallback]


def handle_calibrate(config: PipelineConfig, n_jobs: int = N_JOBS) -> Dict[str, Any]:
    """Fit the n-gram LM, run heuristic-k selection on the dev dump and persist the chosen forecaster."""
    labels, dev = read_split_dump(config, "dev")
    lm = train_lm(lm_training_corpus(config, dev), n=config.lm.order, alpha=config.lm.alpha)
    save_lm(lm, config.lm_path, config_hash=config.config_hash())

    forecast = config.forecast
    schema = FeatureSchema.preset(forecast.schema)
    selected = select_heuristic_k(
        dev,
        labels,
        forecast.k_max,
        schema,
        kind=forecast.kind,
        gbdt_config=config.gbdt_config(),
        lm=lm,
        candidates=forecast.candidates,
        max_answer_tokens=forecast.max_answer_tokens,
        n_bins=config.evaluation.n_bins,
        n_jobs=n_jobs,
    )

    decodes = decode_records(dev, forecast.k_max, forecast.max_answer_tokens, n_jobs)
    coverage = positive_coverage(dev, labels, decodes, forecast.k_max)
    chosen = build_forecast_dataset(dev, labels, selected.chosen_k, schema, lm, "train", decodes, forecast.max_answer_tokens)
    config_hash = config.config_hash()
    export_features_csv(
        list(zip(chosen.rows, chosen.labels)),
        schema,
        config.reports_dir / f"features_dev_k{selected.chosen_k}.csv",
        config_hash=config_hash,
    )

    save_selected_forecaster(
        selected,
        config.forecaster_path,
        config_hash=config_hash,
        schema_name=forecast.schema,
        n_rows=len(chosen),
        positives=chosen.positives,
    )
    summary = {
        "chosen_k": selected.chosen_k,
        "val_ece": selected.val_ece,
        "candidate_eces": {str(k): v for k, v in sorted(selected.candidate_eces.items())},
        "kind": selected.forecaster.kind,
        "schema": list(selected.forecaster.schema.names),
        "n_dev_instances": len(dev),
        "n_events": len(chosen),
        "positives": chosen.positives,
        "positives_by_k": {str(k): v for k, v in coverage.items()},
    }
    write_report(config, "calibrate", summary)
    return summary
