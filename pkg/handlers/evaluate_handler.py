# handlers/evaluate_handler.py
import logging
from typing import Any, Dict

from handlers.common_handler_utils import load_optional_lm, read_split_dump, write_report
from pipelines.calibration_pipeline import N_JOBS
from pipelines.evaluation_pipeline import default_variants, evaluate_variants
from services.forecaster_service import load_selected_forecaster
from services.metrics_service import reliability_export
from utils.config import PipelineConfig

logger = logging.getLogger(__name__)


def handle_evaluate(config: PipelineConfig, n_jobs: int = N_JOBS) -> Dict[str, Any]:
    """ECE of every forecaster variant on the test dump, with one reliability CSV per variant."""
    labels, dev = read_split_dump(config, "dev")
    _, test = read_split_dump(config, "test", labels)
    selected = load_selected_forecaster(config.forecaster_path)
    lm = load_optional_lm(config)

    report, bins = evaluate_variants(
        dev,
        test,
        labels,
        default_variants(config.task_enum),
        config.forecast.candidates,
        gbdt_config=config.gbdt_config(),
        lm=lm,
        selected=selected,
        n_bins=config.evaluation.n_bins,
        n_boot=config.evaluation.n_boot,
        seed=config.seed,
        n_jobs=n_jobs,
    )
    config_hash = config.config_hash()
    for name, variant_bins in bins.items():
        reliability_export(variant_bins, config.reports_dir / f"reliability_{name}.csv", config_hash=config_hash)

    report["chosen_k"] = selected.chosen_k
    report["schema"] = list(selected.forecaster.schema.names)
    report["dev_dump"] = str(config.dump_path("dev"))
    report["test_dump"] = str(config.dump_path("test"))
    write_report(config, "evaluate", report)
    return {name: round(row["ece"], 4) for name, row in report["variants"].items()}
