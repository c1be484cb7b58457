# utils/config.py
"""PipelineConfig: one JSON document that drives every command.

Sections map onto the config dataclasses of the stages they configure;
``--set section.field=value`` flags override single fields. Any path left
null resolves under ``out_dir``.
"""
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

from services.crf_model import CrfTrainConfig, PerturbConfig
from services.feature_service import SCHEMA_PRESETS
from services.gbdt_service import GbdtConfig
from services.rescore_service import RescoreConfig
from utils.core_types import Task
from utils.errors import ConfigError, MissingArtifactError
from utils.synthetic_corpus import SyntheticConfig

logger = logging.getLogger(__name__)

DEFAULT_OUT_DIR = os.environ.get("CALIBRATION_OUT_DIR", "runs/default")

@dataclass(frozen=True)
class LmConfig:
    order: int = 2
    alpha: float = 1.0

@dataclass(frozen=True)
class ForecastConfig:
    kind: str = "gbdt"
    schema: str = "rank_var"
    k_max: int = 3
    k_candidates: Tuple[int, ...] = (2, 3)
    max_answer_tokens: int = 30

    def __post_init__(self):
        object.__setattr__(self, "k_candidates", tuple(int(k) for k in self.k_candidates))
        if self.kind not in ("platt", "gbdt"):
            raise ConfigError(f"forecast.kind must be 'platt' or 'gbdt', got '{self.kind}'")
        if self.schema not in SCHEMA_PRESETS:
            raise ConfigError(f"forecast.schema must be one of {sorted(SCHEMA_PRESETS)}, got '{self.schema}'")
        if self.k_max < 1 or any(k < 1 for k in self.k_candidates):
            raise ConfigError(f"k values must be >= 1: k_max={self.k_max}, candidates={self.k_candidates}")

    @property
    def candidates(self) -> Tuple[int, ...]:
        """Candidate k values within k_max; all of 1..k_max when none of the configured ones fit."""
        chosen = tuple(sorted({k for k in self.k_candidates if k <= self.k_max}))
        return chosen or tuple(range(1, self.k_max + 1))

@dataclass(frozen=True)
class EvaluationConfig:
    n_bins: int = 20
    n_boot: int = 200

@dataclass(frozen=True)
class PathsConfig:
    corpus_dir: Optional[str] = None
    model: Optional[str] = None
    dev_dump: Optional[str] = None
    test_dump: Optional[str] = None
    forecaster: Optional[str] = None
    lm: Optional[str] = None
    reports_dir: Optional[str] = None

SECTIONS = {
    "synth": SyntheticConfig,
    "crf": CrfTrainConfig,
    "perturb": PerturbConfig,
    "lm": LmConfig,
    "forecast": ForecastConfig,
    "gbdt": GbdtConfig,
    "rescore": RescoreConfig,
    "evaluation": EvaluationConfig,
    "paths": PathsConfig,
}

def _section_to_dict(section) -> Dict[str, Any]:
    data = asdict(section)
    return {key: list(value) if isinstance(value, tuple) else value for key, value in data.items()}

def _build_section(name: str, cls, data: Dict[str, Any]):
    if not isinstance(data, dict):
        raise ConfigError(f"Config section '{name}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in config section '{name}': {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid config section '{name}': {e}") from e

@dataclass(frozen=True)
class PipelineConfig:
    task: str = Task.SEQUENCE_LABELING.value
    seed: int = 0
    out_dir: str = DEFAULT_OUT_DIR
    synth: SyntheticConfig = field(default_factory=SyntheticConfig)
    crf: CrfTrainConfig = field(default_factory=CrfTrainConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    forecast: ForecastConfig = field(default_factory=ForecastConfig)
    gbdt: GbdtConfig = field(default_factory=GbdtConfig)
    rescore: RescoreConfig = field(default_factory=RescoreConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        try:
            Task(self.task)
        except ValueError:
            raise ConfigError(f"Unknown task '{self.task}'; expected one of {[t.value for t in Task]}") from None

    @property
    def task_enum(self) -> Task:
        return Task(self.task)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"task": self.task, "seed": self.seed, "out_dir": self.out_dir}
        for name in SECTIONS:
            data[name] = _section_to_dict(getattr(self, name))
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PipelineConfig":
        top_level = {"task", "seed", "out_dir"}
        unknown = sorted(set(data) - top_level - set(SECTIONS))
        if unknown:
            raise ConfigError(f"Unknown config keys: {unknown}")
        kwargs = {key: data[key] for key in top_level if key in data}
        for name, section_cls in SECTIONS.items():
            if name in data:
                kwargs[name] = _build_section(name, section_cls, data[name])
        return cls(**kwargs)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, assignments: Iterable[str] = (), **top_level) -> "PipelineConfig":
        """Apply ``section.field=value`` strings (values parsed as JSON, else kept as text) and top-level fields."""
        data = self.to_dict()
        for key, value in top_level.items():
            if value is not None:
                data[key] = value
        for assignment in assignments:
            if "=" not in assignment:
                raise ConfigError(f"Override '{assignment}' is not of the form section.field=value")
            dotted, raw = assignment.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            parts = dotted.strip().split(".")
            if len(parts) == 1 and parts[0] in ("task", "seed", "out_dir"):
                data[parts[0]] = value
            elif len(parts) == 2 and parts[0] in SECTIONS:
                data[parts[0]][parts[1]] = value
            else:
                raise ConfigError(f"Unknown config field '{dotted}'")
        return PipelineConfig.from_dict(data)

    # --- effective stage configs ---
    # section seeds are offsets added to the top-level seed

    def synth_config(self) -> SyntheticConfig:
        return dataclasses.replace(self.synth, task=self.task, seed=self.seed + self.synth.seed)

    def perturb_config(self) -> PerturbConfig:
        return dataclasses.replace(self.perturb, seed=self.seed + self.perturb.seed)

    def gbdt_config(self) -> GbdtConfig:
        return dataclasses.replace(self.gbdt, seed=self.seed + self.gbdt.seed)

    # --- artifact locations ---

    def _path(self, explicit: Optional[str], default_name: str) -> Path:
        return Path(explicit) if explicit else Path(self.out_dir) / default_name

    def corpus_path(self, split: str) -> Path:
        base = Path(self.paths.corpus_dir) if self.paths.corpus_dir else Path(self.out_dir)
        return base / f"corpus_{split}.jsonl"

    @property
    def model_path(self) -> Path:
        return self._path(self.paths.model, "model.json")

    def dump_path(self, split: str) -> Path:
        explicit = {"dev": self.paths.dev_dump, "test": self.paths.test_dump}.get(split)
        return self._path(explicit, f"dump_{split}.jsonl")

    @property
    def forecaster_path(self) -> Path:
        return self._path(self.paths.forecaster, "forecaster.json")

    @property
    def lm_path(self) -> Path:
        return self._path(self.paths.lm, "lm.json")

    @property
    def reports_dir(self) -> Path:
        return self._path(self.paths.reports_dir, "reports")

def load_config(path: Optional[str] = None) -> PipelineConfig:
    """Read a config file; no path means all defaults."""
    if path is None:
        return PipelineConfig()
    config_file = Path(path)
    if not config_file.exists():
        raise MissingArtifactError(config_file)
    try:
        data = json.loads(config_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {config_file} is not valid JSON: {e.msg} (line {e.lineno})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {config_file} must hold a JSON object")
    return PipelineConfig.from_dict(data)

def save_config(config: PipelineConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path
