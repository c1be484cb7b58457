# handlers/train_handler.py
import logging
from typing import Any, Dict

from handlers.common_handler_utils import write_report
from services.crf_model import save_crf, token_accuracy, train_crf
from utils.config import PipelineConfig
from utils.dump_io import read_corpus

logger = logging.getLogger(__name__)


def handle_train(config: PipelineConfig) -> Dict[str, Any]:
    """Train the toy CRF on the train split, early-stopping on the dev split."""
    labels, train = read_corpus(config.corpus_path("train"))
    _, dev = read_corpus(config.corpus_path("dev"), labels)
    model = train_crf(train, dev, labels, config.crf)
    save_crf(model, config.model_path, config_hash=config.config_hash())

    summary = {
        "n_train": len(train),
        "n_dev": len(dev),
        "labels": list(model.labels.labels),
        "n_features": model.feature_map.n_features,
        "train_token_accuracy": token_accuracy(model, train),
        "dev_token_accuracy": token_accuracy(model, dev),
    }
    write_report(config, "train", summary)
    return summary
