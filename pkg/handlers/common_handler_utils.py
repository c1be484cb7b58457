# handlers/common_handler_utils.py
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Optional

from services.language_model_service import LanguageModel, load_lm
from utils.config import PipelineConfig
from utils.core_types import LabelSet
from utils.dump_io import read_dump, write_json_artifact
from utils.errors import CalibrationToolkitError

logger = logging.getLogger(__name__)


def run_handler(name: str, handler: Callable[..., Dict[str, Any]], config: PipelineConfig, **kwargs) -> int:
    """Run one command handler and turn its outcome into a process exit code."""
    logger.info(f"Running '{name}' (config hash {config.config_hash()[:12]})")
    try:
        summary = handler(config, **kwargs)
    except CalibrationToolkitError as e:
        logger.error(f"'{name}' failed: {e}", exc_info=True)
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error in '{name}': {e}", exc_info=True)
        return 1
    logger.info(f"'{name}' finished: {summary}")
    return 0


def write_report(config: PipelineConfig, name: str, payload: Dict[str, Any]) -> Path:
    """Write ``reports/<name>.json`` stamped with the config hash and the run's task and seed."""
    document = {"task": config.task, "seed": config.seed, **payload}
    return write_json_artifact(config.reports_dir / f"{name}.json", document, config_hash=config.config_hash())


def read_split_dump(config: PipelineConfig, split: str, labels: Optional[LabelSet] = None):
    return read_dump(config.dump_path(split), labels, stage_hint=f"dump --split {split}")


def load_optional_lm(config: PipelineConfig) -> Optional[LanguageModel]:
    if not config.lm_path.exists():
        logger.warning(f"No language model at {config.lm_path}; perplexity features are unavailable")
        return None
    return load_lm(config.lm_path)
