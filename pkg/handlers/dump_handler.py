# handlers/dump_handler.py
import logging
from typing import Any, Dict, Sequence

from pipelines.calibration_pipeline import N_JOBS
from services.crf_model import load_crf, sample_corpus
from utils.config import PipelineConfig
from utils.dump_io import read_corpus, write_dump
from utils.errors import ConfigError

logger = logging.getLogger(__name__)

DUMP_SPLITS = ("dev", "test")


def handle_dump(config: PipelineConfig, splits: Sequence[str] = DUMP_SPLITS, n_jobs: int = N_JOBS) -> Dict[str, Any]:
    """Draw M perturbed lattices per instance of each split and write one JSON-lines dump per split."""
    unknown = [split for split in splits if split not in ("train",) + DUMP_SPLITS]
    if unknown:
        raise ConfigError(f"Unknown split(s) {unknown}; expected train, dev or test")
    model = load_crf(config.model_path)
    perturb_config = config.perturb_config()
    counts = {}
    for split in splits:
        _, instances = read_corpus(config.corpus_path(split))
        records = sample_corpus(model, instances, perturb_config, n_jobs=n_jobs)
        counts[split] = write_dump(
            config.dump_path(split), records, model.output_labels, model.task, config.config_hash()
        )
    return {"m": perturb_config.m, "sigma": perturb_config.sigma, "instances": counts}
