# handlers/rescore_handler.py
import logging
from typing import Any, Dict

from handlers.common_handler_utils import load_optional_lm, read_split_dump, write_report
from pipelines.calibration_pipeline import N_JOBS
from pipelines.evaluation_pipeline import inspection_table, rescore_records
from services.forecaster_service import load_selected_forecaster
from utils.config import PipelineConfig
from utils.dump_io import write_csv, write_jsonl

logger = logging.getLogger(__name__)


def handle_rescore(config: PipelineConfig, n_jobs: int = N_JOBS) -> Dict[str, Any]:
    """Re-score the test dump's top-k events and report metrics before and after."""
    selected = load_selected_forecaster(config.forecaster_path)
    labels, test = read_split_dump(config, "test")
    lm = load_optional_lm(config) if selected.forecaster.schema.needs_lm else None

    result = rescore_records(test, labels, selected.forecaster, selected.chosen_k, config.rescore, lm, n_jobs)
    config_hash = config.config_hash()
    write_jsonl(config.reports_dir / "predictions.jsonl", result.predictions, config_hash=config_hash)
    write_csv(config.reports_dir / "inspection.csv", inspection_table(result), config_hash=config_hash)
    write_report(config, "rescore", result.report)
    return result.report.get("delta", {"changed": result.report["changed"]})
