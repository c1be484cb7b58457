# handlers/synth_handler.py
import logging
from typing import Any, Dict

from utils.config import PipelineConfig, save_config
from utils.dump_io import write_corpus
from utils.synthetic_corpus import make_synthetic_corpus

logger = logging.getLogger(__name__)


def handle_synth(config: PipelineConfig) -> Dict[str, Any]:
    """Generate the train/dev/test corpora and store the effective config next to them."""
    synth_config = config.synth_config()
    corpus = make_synthetic_corpus(synth_config)
    config_hash = config.config_hash()
    counts = {}
    for split, instances in corpus.splits.items():
        counts[split] = write_corpus(config.corpus_path(split), instances, corpus.labels, corpus.task, config_hash)
    save_config(config, config.corpus_path("train").parent / "config.json")
    return {"task": corpus.task.value, "labels": list(corpus.labels.labels), "instances": counts}
