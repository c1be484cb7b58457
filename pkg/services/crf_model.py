# services/crf_model.py
"""Linear-chain CRF base model with Gaussian weight perturbation sampling.

Emission scores come from three active features per token: its identity
(``<unk>`` when unseen), its class bucket (the prefix before ``_``) and a
bias. Training minimises the mean per-token negative log-likelihood plus
l2 * ||theta||^2 by full-batch gradient descent in torch float64, with
early stopping on validation token accuracy.

Extractive QA is modelled as an O/A tagger over the passage; its lattices
are converted to the two-column start/end layout by ``answer_readout``.
"""
import logging
import math
import os
import zlib
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from joblib import Parallel, delayed

from services.decode_service import edge_marginals, forward_backward, viterbi_path
from utils.core_types import (
    OUTSIDE_LABEL,
    QA_LABELS,
    Instance,
    LabelSet,
    Lattice,
    McSampleSet,
    SampledInstance,
    Scheme,
    Task,
    answer_to_tags,
    spans_to_bio,
)
from utils.dump_io import read_json_artifact, write_json_artifact
from utils.errors import ConfigError, EmptyDataError, MissingGoldError, SchemaVersionError

logger = logging.getLogger(__name__)

N_JOBS = int(os.environ.get("CALIBRATION_N_JOBS", 1))
CRF_FORMAT_VERSION = 1
ANSWER_LABEL = "A"
QA_TAGGER_LABELS = LabelSet(labels=(OUTSIDE_LABEL, ANSWER_LABEL), scheme=Scheme.PLAIN)
READOUT_FLOOR = 1e-300


@dataclass(frozen=True)
class CrfTrainConfig:
    l2: float = 1e-3
    learning_rate: float = 1.0
    max_epochs: int = 300
    patience: int = 5
    eval_every: int = 5

    def __post_init__(self):
        if self.l2 < 0 or self.learning_rate <= 0 or self.max_epochs < 0 or self.patience < 1 or self.eval_every < 1:
            raise ConfigError(f"Invalid CRF training config: {self}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class PerturbConfig:
    sigma: float = 0.5
    m: int = 10
    seed: int = 0
    perturb_transitions: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise ConfigError(f"Perturbation sigma must be finite and >= 0, got {self.sigma}")
        if self.m < 1:
            raise ConfigError(f"Sample count m must be >= 1, got {self.m}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def token_bucket(token: str) -> str:
    return token.split("_", 1)[0]


class FeatureMap:
    """Token identity and bucket vocabularies; index 0 of each block is its unknown entry."""

    def __init__(self, tokens: Sequence[str], buckets: Sequence[str]):
        self.tokens = list(tokens)
        self.buckets = list(buckets)
        self._token_index = {token: i + 1 for i, token in enumerate(self.tokens)}
        self._bucket_index = {bucket: i + 1 for i, bucket in enumerate(self.buckets)}

    @classmethod
    def from_corpus(cls, instances: Sequence[Instance]) -> "FeatureMap":
        tokens = sorted({token for instance in instances for token in instance.tokens})
        buckets = sorted({token_bucket(token) for token in tokens})
        return cls(tokens, buckets)

    @property
    def n_features(self) -> int:
        return (len(self.tokens) + 1) + (len(self.buckets) + 1) + 1

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        """(L, 3) active feature indices: identity, bucket, bias."""
        bucket_offset = len(self.tokens) + 1
        bias = self.n_features - 1
        return np.array([
            (
                self._token_index.get(token, 0),
                bucket_offset + self._bucket_index.get(token_bucket(token), 0),
                bias,
            )
            for token in tokens
        ], dtype=np.int64).reshape(-1, 3)

    def to_dict(self) -> Dict[str, List[str]]:
        return {"tokens": self.tokens, "buckets": self.buckets}

    @classmethod
    def from_dict(cls, data: Dict[str, List[str]]) -> "FeatureMap":
        return cls(data["tokens"], data["buckets"])


def tagger_labels(task: Task, labels: LabelSet) -> LabelSet:
    return QA_TAGGER_LABELS if Task(task) is Task.EXTRACTIVE_QA else labels


def gold_tags(instance: Instance, labels: LabelSet) -> Tuple[int, ...]:
    """Gold label indices the tagger is trained on."""
    if instance.gold is None:
        raise MissingGoldError(f"Instance '{instance.id}' has no gold annotation to train on.")
    if instance.task is Task.SEQUENCE_LABELING:
        return labels.encode(instance.gold)
    if instance.task is Task.SPAN_NER:
        return labels.encode(spans_to_bio(instance.gold, instance.length))
    return labels.encode(answer_to_tags(instance.gold, instance.length, inside=ANSWER_LABEL))


class CrfModel:
    def __init__(self, task: Task, labels: LabelSet, feature_map: FeatureMap,
                 emission: Optional[np.ndarray] = None, transition: Optional[np.ndarray] = None, l2: float = 0.0):
        self.task = Task(task)
        self.labels = labels
        self.feature_map = feature_map
        n_labels = labels.size
        self.emission = np.zeros((feature_map.n_features, n_labels)) if emission is None else np.asarray(emission, dtype=np.float64)
        self.transition = np.zeros((n_labels, n_labels)) if transition is None else np.asarray(transition, dtype=np.float64)
        self.l2 = float(l2)
        if self.emission.shape != (feature_map.n_features, n_labels) or self.transition.shape != (n_labels, n_labels):
            raise ConfigError(f"CRF weight shapes {self.emission.shape}/{self.transition.shape} do not match the label set")

    @property
    def output_labels(self) -> LabelSet:
        """Label set of the lattices handed to the calibration stages."""
        return QA_LABELS if self.task is Task.EXTRACTIVE_QA else self.labels

    def tag_lattice(self, tokens: Sequence[str], emission=None, transition=None) -> Lattice:
        emission = self.emission if emission is None else emission
        transition = self.transition if transition is None else transition
        features = self.feature_map.encode(tokens)
        return Lattice(unary=emission[features].sum(axis=1), transition=transition)

    def lattice(self, tokens: Sequence[str], emission=None, transition=None) -> Lattice:
        tag_lattice = self.tag_lattice(tokens, emission, transition)
        if self.task is Task.EXTRACTIVE_QA:
            return answer_readout(tag_lattice, inside_index=self.labels.index(ANSWER_LABEL))
        return tag_lattice

    def predict_tags(self, tokens: Sequence[str]) -> Tuple[int, ...]:
        return viterbi_path(self.tag_lattice(tokens))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": CRF_FORMAT_VERSION,
            "task": self.task.value,
            "labels": self.labels.to_dict(),
            "features": self.feature_map.to_dict(),
            "emission": self.emission.tolist(),
            "transition": self.transition.tolist(),
            "l2": self.l2,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CrfModel":
        if data.get("format_version") != CRF_FORMAT_VERSION:
            raise SchemaVersionError(f"Unsupported CRF model format_version {data.get('format_version')!r}")
        return cls(
            task=Task(data["task"]),
            labels=LabelSet.from_dict(data["labels"]),
            feature_map=FeatureMap.from_dict(data["features"]),
            emission=np.asarray(data["emission"], dtype=np.float64),
            transition=np.asarray(data["transition"], dtype=np.float64),
            l2=data["l2"],
        )


def answer_readout(lattice: Lattice, inside_index: int = 1) -> Lattice:
    """Two-column QA lattice from an O/A tagger lattice.

    Column 0 is log P(answer starts at i) = log P(y_i = A, y_i-1 != A) and
    column 1 is log P(answer ends at i) = log P(y_i = A, y_i+1 != A), both
    read off node and edge marginals.
    """
    marginals, _ = forward_backward(lattice)
    inside = marginals.probabilities[:, inside_index]
    both = edge_marginals(lattice)[:, inside_index, inside_index]
    start = inside.copy()
    start[1:] -= both
    end = inside.copy()
    end[:-1] -= both
    unary = np.log(np.clip(np.stack([start, end], axis=1), READOUT_FLOOR, None))
    return Lattice.emission_only(unary)


# --- training ---

class EncodedBatch:
    """Padded feature indices, gold tags and mask for a list of instances."""

    def __init__(self, model: CrfModel, instances: Sequence[Instance]):
        if not instances:
            raise EmptyDataError("CRF batch needs at least one instance.")
        max_len = max(instance.length for instance in instances)
        n = len(instances)
        features = np.zeros((n, max_len, 3), dtype=np.int64)
        tags = np.zeros((n, max_len), dtype=np.int64)
        mask = np.zeros((n, max_len), dtype=bool)
        for i, instance in enumerate(instances):
            length = instance.length
            features[i, :length] = model.feature_map.encode(instance.tokens)
            tags[i, :length] = gold_tags(instance, model.labels)
            mask[i, :length] = True
        self.features = torch.from_numpy(features)
        self.tags = torch.from_numpy(tags)
        self.mask = torch.from_numpy(mask)
        self.n_tokens = int(mask.sum())


def crf_objective(emission: torch.Tensor, transition: torch.Tensor, batch: EncodedBatch, l2: float) -> torch.Tensor:
    """Mean per-token NLL of the gold tags plus l2 * ||theta||^2."""
    unary = emission[batch.features].sum(dim=2)                      # N x T x C
    mask = batch.mask
    tags = batch.tags
    n, max_len, _ = unary.shape

    gold = unary.gather(2, tags.unsqueeze(2)).squeeze(2)             # N x T
    gold = (gold * mask).sum(dim=1)
    if max_len > 1:
        steps = transition[tags[:, :-1], tags[:, 1:]] * mask[:, 1:]
        gold = gold + steps.sum(dim=1)

    alpha = unary[:, 0]
    for t in range(1, max_len):
        step = torch.logsumexp(alpha.unsqueeze(2) + transition.unsqueeze(0), dim=1) + unary[:, t]
        alpha = torch.where(mask[:, t].unsqueeze(1), step, alpha)
    log_partition = torch.logsumexp(alpha, dim=1)

    nll = (log_partition - gold).sum() / batch.n_tokens
    return nll + l2 * (emission.pow(2).sum() + transition.pow(2).sum())


def objective_and_gradient(model: CrfModel, instances: Sequence[Instance], l2: Optional[float] = None):
    """(objective, d/d emission, d/d transition) at the model's current weights."""
    batch = EncodedBatch(model, instances)
    emission = torch.tensor(model.emission, dtype=torch.float64, requires_grad=True)
    transition = torch.tensor(model.transition, dtype=torch.float64, requires_grad=True)
    value = crf_objective(emission, transition, batch, model.l2 if l2 is None else l2)
    value.backward()
    return float(value.item()), emission.grad.numpy().copy(), transition.grad.numpy().copy()


def token_accuracy(model: CrfModel, instances: Sequence[Instance]) -> float:
    hits = total = 0
    for instance in instances:
        predicted = model.predict_tags(instance.tokens)
        gold = gold_tags(instance, model.labels)
        hits += sum(p == g for p, g in zip(predicted, gold))
        total += len(gold)
    return hits / total if total else 0.0


def train_crf(
    train: Sequence[Instance],
    val: Optional[Sequence[Instance]],
    labels: LabelSet,
    config: CrfTrainConfig = CrfTrainConfig(),
) -> CrfModel:
    """Full-batch gradient descent from zero weights with early stopping on val token accuracy.

    Validation accuracy is checked every ``eval_every`` epochs; training
    stops after ``patience`` checks without improvement and the best
    weights are kept. Without validation data it runs ``max_epochs``.
    """
    if not train:
        raise EmptyDataError("Cannot train a CRF on zero instances.")
    task = train[0].task
    model = CrfModel(task, tagger_labels(task, labels), FeatureMap.from_corpus(train), l2=config.l2)
    batch = EncodedBatch(model, train)

    emission = torch.zeros(model.emission.shape, dtype=torch.float64, requires_grad=True)
    transition = torch.zeros(model.transition.shape, dtype=torch.float64, requires_grad=True)
    # keeps l2 * ||theta||^2 contractive for any l2
    step_size = min(config.learning_rate, 1.0 / (1.0 + 2.0 * config.l2))

    def snapshot():
        return emission.detach().numpy().copy(), transition.detach().numpy().copy()

    best_weights, best_accuracy, stale = snapshot(), -1.0, 0
    logger.info(f"Training CRF on {len(train)} instances ({batch.n_tokens} tokens), {model.labels.size} labels, "
                f"{model.feature_map.n_features} features, l2={config.l2}")

    for epoch in range(1, config.max_epochs + 1):
        value = crf_objective(emission, transition, batch, config.l2)
        emission.grad = None
        transition.grad = None
        value.backward()
        with torch.no_grad():
            emission -= step_size * emission.grad
            transition -= step_size * transition.grad

        if val and epoch % config.eval_every == 0:
            model.emission, model.transition = snapshot()
            accuracy = token_accuracy(model, val)
            logger.debug(f"CRF epoch {epoch}: objective {value.item():.5f}, val token accuracy {accuracy:.4f}")
            if accuracy > best_accuracy:
                best_weights, best_accuracy, stale = snapshot(), accuracy, 0
            else:
                stale += 1
                if stale >= config.patience:
                    logger.info(f"Early stopping at epoch {epoch}; best val token accuracy {best_accuracy:.4f}")
                    break

    if val:
        model.emission, model.transition = best_weights
    else:
        model.emission, model.transition = snapshot()
    final = crf_objective(torch.from_numpy(model.emission), torch.from_numpy(model.transition), batch, config.l2)
    logger.info(f"CRF training done: objective {final.item():.5f}")
    return model


def save_crf(model: CrfModel, path, config_hash: Optional[str] = None) -> None:
    write_json_artifact(path, model.to_dict(), config_hash=config_hash)


def load_crf(path) -> CrfModel:
    return CrfModel.from_dict(read_json_artifact(path, stage_hint="train"))


# --- perturbation sampling ---

def instance_seed(seed: int, instance_id: str) -> List[int]:
    """Per-instance seed sequence, independent of processing order."""
    return [int(seed), zlib.crc32(instance_id.encode("utf-8"))]


def sample_lattices(model: CrfModel, instance: Instance, config: PerturbConfig = PerturbConfig()) -> McSampleSet:
    """M lattices from weights + N(0, sigma^2) element-wise noise."""
    rng = np.random.default_rng(instance_seed(config.seed, instance.id))
    samples = []
    for _ in range(config.m):
        emission = model.emission + config.sigma * rng.standard_normal(model.emission.shape)
        transition = model.transition
        if config.perturb_transitions:
            transition = transition + config.sigma * rng.standard_normal(model.transition.shape)
        samples.append(model.lattice(instance.tokens, emission, transition))
    return McSampleSet(samples=tuple(samples))


def sample_corpus(model: CrfModel, instances: Sequence[Instance], config: PerturbConfig = PerturbConfig(),
                  n_jobs: int = N_JOBS) -> List[SampledInstance]:
    """Sample every instance; joblib returns results in input order."""
    sample_sets = Parallel(n_jobs=n_jobs)(
        delayed(sample_lattices)(model, instance, config) for instance in instances
    )
    logger.info(f"Sampled {config.m} lattices for each of {len(instances)} instances (sigma={config.sigma})")
    return [SampledInstance(instance=i, samples=s) for i, s in zip(instances, sample_sets)]
