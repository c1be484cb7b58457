# utils/dump_io.py
"""Reading and writing of every on-disk artifact.

Corpora and sample dumps are JSON-lines: an optional header object (it has no
``id`` key) followed by one object per instance,
    {"id", "tokens", "task", "gold"?, "samples"?: {"m", "samples": [{"unary", "transition"}]}}.
Models, forecasters and reports are single JSON documents; plot data and
feature tables are CSV files whose first line is ``# config_hash=<hash>``.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import pandas as pd

from utils.core_types import (
    Instance,
    LabelSet,
    McSampleSet,
    SampledInstance,
    Task,
    validate_instance,
    validate_samples,
)
from utils.errors import (
    ConfigError,
    DataError,
    DumpParseError,
    EmptyDataError,
    MissingArtifactError,
    NonFiniteScoreError,
    SchemaMismatchError,
    SchemaVersionError,
)

logger = logging.getLogger(__name__)

DUMP_FORMAT_VERSION = 1
CSV_HASH_PREFIX = "# config_hash="


@dataclass(frozen=True)
class DumpHeader:
    labels: LabelSet
    task: Task
    config_hash: Optional[str] = None
    format_version: int = DUMP_FORMAT_VERSION

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": self.format_version,
            "labels": list(self.labels.labels),
            "scheme": self.labels.scheme.value,
            "task": self.task.value,
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DumpHeader":
        version = data.get("format_version")
        if version != DUMP_FORMAT_VERSION:
            raise SchemaVersionError(f"Unsupported dump format_version {version!r} (expected {DUMP_FORMAT_VERSION})")
        return cls(
            labels=LabelSet.from_dict(data),
            task=Task(data["task"]),
            config_hash=data.get("config_hash"),
            format_version=version,
        )


def _require(path: Union[str, Path], stage_hint: Optional[str]) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, stage_hint=stage_hint)
    return path


def _write_lines(path: Path, header: DumpHeader, rows: Iterable[Dict[str, Any]]) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps(header.to_dict(), sort_keys=True) + "\n")
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")
            count += 1
    return count


def write_corpus(path, instances: Iterable[Instance], labels: LabelSet, task: Task, config_hash: Optional[str] = None) -> int:
    """Write gold-annotated instances (no samples) as JSON-lines."""
    path = Path(path)
    count = _write_lines(path, DumpHeader(labels, Task(task), config_hash), (inst.to_dict() for inst in instances))
    logger.info(f"Wrote {count} instances to {path}")
    return count


def write_dump(path, records: Iterable[SampledInstance], labels: LabelSet, task: Task, config_hash: Optional[str] = None) -> int:
    """Write instances with their M sampled lattices as JSON-lines."""
    path = Path(path)

    def rows():
        for record in records:
            row = record.instance.to_dict()
            row["samples"] = record.samples.to_dict()
            yield row

    count = _write_lines(path, DumpHeader(labels, Task(task), config_hash), rows())
    logger.info(f"Wrote sample dump with {count} instances to {path}")
    return count


def _resolve_labels(path: Path, header: Optional[DumpHeader], labels: Optional[LabelSet]) -> LabelSet:
    if header is None:
        if labels is None:
            raise ConfigError(f"{path} has no header line and no label set was supplied.")
        return labels
    if labels is not None and labels != header.labels:
        raise SchemaMismatchError(
            f"{path} was written for labels {list(header.labels.labels)}, caller expects {list(labels.labels)}"
        )
    return header.labels


def read_records(
    path,
    labels: Optional[LabelSet] = None,
    require_samples: bool = False,
    stage_hint: Optional[str] = None,
) -> Tuple[Optional[DumpHeader], LabelSet, List[Tuple[Instance, Optional[McSampleSet]]]]:
    """Parse a corpus or dump file; every malformed line is reported with its 1-based number."""
    path = _require(path, stage_hint)
    header: Optional[DumpHeader] = None
    label_set: Optional[LabelSet] = None
    records = []

    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise DumpParseError(path, line_number, f"invalid JSON: {e.msg}") from e
            if not isinstance(data, dict):
                raise DumpParseError(path, line_number, "expected a JSON object")

            if "id" not in data:
                if header is not None or records:
                    raise DumpParseError(path, line_number, "header object after the first line")
                try:
                    header = DumpHeader.from_dict(data)
                except SchemaVersionError:
                    raise
                except (KeyError, TypeError, ValueError, DataError) as e:
                    raise DumpParseError(path, line_number, f"bad header: {e}") from e
                continue

            if label_set is None:
                label_set = _resolve_labels(path, header, labels)
            try:
                instance = validate_instance(Instance.from_dict(data), label_set)
                samples = None
                if "samples" in data:
                    samples = validate_samples(McSampleSet.from_dict(data["samples"]), instance, label_set.size)
                elif require_samples:
                    raise DumpParseError(path, line_number, "record has no 'samples'")
            except NonFiniteScoreError:
                logger.error(f"{path}:{line_number}: non-finite lattice scores")
                raise
            except DumpParseError:
                raise
            except (KeyError, TypeError, ValueError, DataError) as e:
                raise DumpParseError(path, line_number, f"{type(e).__name__}: {e}") from e
            records.append((instance, samples))

    if label_set is None:
        label_set = _resolve_labels(path, header, labels)
    if not records:
        raise EmptyDataError(f"{path} holds no instances.")
    logger.info(f"Read {len(records)} records from {path}")
    return header, label_set, records


def read_corpus(path, labels: Optional[LabelSet] = None, stage_hint: Optional[str] = "synth") -> Tuple[LabelSet, List[Instance]]:
    _, label_set, records = read_records(path, labels, stage_hint=stage_hint)
    return label_set, [instance for instance, _ in records]


def read_dump(path, labels: Optional[LabelSet] = None, stage_hint: Optional[str] = "dump") -> Tuple[LabelSet, List[SampledInstance]]:
    _, label_set, records = read_records(path, labels, require_samples=True, stage_hint=stage_hint)
    return label_set, [SampledInstance(instance=instance, samples=samples) for instance, samples in records]


def write_json_artifact(path, payload: Dict[str, Any], config_hash: Optional[str] = None) -> Path:
    """Write a JSON document with sorted keys so identical inputs give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = dict(payload)
    if config_hash is not None:
        document["config_hash"] = config_hash
    path.write_text(json.dumps(document, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote {path}")
    return path


def read_json_artifact(path, stage_hint: Optional[str] = None) -> Dict[str, Any]:
    path = _require(path, stage_hint)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e.msg} (line {e.lineno})") from e


def write_csv(path, frame: pd.DataFrame, config_hash: Optional[str] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        if config_hash is not None:
            handle.write(f"{CSV_HASH_PREFIX}{config_hash}\n")
        frame.to_csv(handle, index=False, lineterminator="\n")
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def read_csv(path) -> pd.DataFrame:
    path = _require(path, None)
    with open(path, "r", encoding="utf-8") as handle:
        first = handle.readline()
    skip = 1 if first.startswith(CSV_HASH_PREFIX) else 0
    return pd.read_csv(path, skiprows=skip)


def write_jsonl(path, rows: Iterable[Dict[str, Any]], config_hash: Optional[str] = None) -> int:
    """Plain JSON-lines output (predictions); the first line carries the config hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps({"config_hash": config_hash}) + "\n")
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")
            count += 1
    logger.info(f"Wrote {count} rows to {path}")
    return count
