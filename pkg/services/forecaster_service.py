# services/forecaster_service.py
"""Forecasters: trained maps from an event's feature row to a calibrated probability."""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from services.feature_service import FeatureSchema, FeatureVector, feature_matrix
from services.gbdt_service import GbdtConfig, GbdtModel, fit_gbdt_arrays
from utils.dump_io import read_json_artifact, write_json_artifact
from utils.errors import ConfigError, DegenerateDataError, EmptyDataError, SchemaMismatchError, SchemaVersionError

logger = logging.getLogger(__name__)

FORECASTER_FORMAT_VERSION = 1
PLATT_GTOL = 1e-8
PLATT_MAX_ITER = 10000


@dataclass
class ForecastDataset:
    """Feature rows with binary labels; ``split`` is "train" (top-k events) or "val" (top-1 events)."""

    schema: FeatureSchema
    rows: List[FeatureVector]
    labels: np.ndarray
    k: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.rows) != self.labels.size:
            raise ConfigError(f"{len(self.rows)} feature rows but {self.labels.size} labels")

    def __len__(self):
        return self.labels.size

    @property
    def X(self) -> np.ndarray:
        return feature_matrix(self.rows, self.schema)

    @property
    def positives(self) -> int:
        return int(self.labels.sum())

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.schema.names.index(name)] if len(self) else np.zeros(0)


def _columns(schema: FeatureSchema, X_schema: FeatureSchema, X: np.ndarray) -> np.ndarray:
    missing = [name for name in schema.names if name not in X_schema.names]
    if missing:
        raise SchemaMismatchError(f"Feature rows lack {missing} required by the forecaster schema {list(schema.names)}")
    return X[:, [X_schema.names.index(name) for name in schema.names]]


@dataclass
class PlattForecaster:
    slope: float
    intercept: float
    schema: FeatureSchema = field(default_factory=lambda: FeatureSchema.preset("mean"))
    kind = "platt"

    def predict_matrix(self, X: np.ndarray, X_schema: Optional[FeatureSchema] = None) -> np.ndarray:
        scores = _columns(self.schema, X_schema or self.schema, np.atleast_2d(X))[:, 0]
        return expit(self.slope * scores + self.intercept)

    def params(self) -> Dict[str, Any]:
        return {"slope": self.slope, "intercept": self.intercept}


@dataclass
class GbdtForecaster:
    model: GbdtModel
    schema: FeatureSchema
    config: GbdtConfig = field(default_factory=GbdtConfig)
    kind = "gbdt"

    def predict_matrix(self, X: np.ndarray, X_schema: Optional[FeatureSchema] = None) -> np.ndarray:
        return self.model.predict_proba(_columns(self.schema, X_schema or self.schema, np.atleast_2d(X)))

    def params(self) -> Dict[str, Any]:
        return {"config": self.config.to_dict(), "model": self.model.to_dict()}


Forecaster = Union[PlattForecaster, GbdtForecaster]


@dataclass
class SelectedForecaster:
    forecaster: Forecaster
    chosen_k: int
    val_ece: float
    candidate_eces: Dict[int, float] = field(default_factory=dict)


def predict(forecaster: Forecaster, row: FeatureVector) -> float:
    """Calibrated confidence in (0, 1) for one feature row."""
    return float(forecaster.predict_matrix(row.as_array()[None, :], row.schema)[0])


def predict_rows(forecaster: Forecaster, rows: Sequence[FeatureVector]) -> np.ndarray:
    if not rows:
        return np.zeros(0)
    return forecaster.predict_matrix(feature_matrix(rows, rows[0].schema), rows[0].schema)


def _check_two_classes(labels: np.ndarray, what: str):
    if labels.size == 0:
        raise EmptyDataError(f"Cannot fit a {what} forecaster on zero rows.")
    positives = int(labels.sum())
    if positives == 0 or positives == labels.size:
        raise DegenerateDataError(f"{what} training data holds a single class ({positives}/{labels.size} positive).")


def fit_platt_scores(scores: np.ndarray, labels: np.ndarray) -> tuple:
    """(slope, intercept) of sigmoid(a*s + b) fitted with Platt's smoothed targets."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_two_classes(labels, "Platt")

    n_pos = float(labels.sum())
    n_neg = labels.size - n_pos
    targets = np.where(labels > 0, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))

    def objective(theta):
        z = theta[0] * scores + theta[1]
        loss = np.mean(targets * np.logaddexp(0.0, -z) + (1.0 - targets) * np.logaddexp(0.0, z))
        residual = expit(z) - targets
        return loss, np.array([np.mean(residual * scores), np.mean(residual)])

    start = np.array([0.0, np.log((n_pos + 1.0) / (n_neg + 1.0))])
    result = minimize(objective, start, jac=True, method="BFGS", options={"gtol": PLATT_GTOL, "maxiter": PLATT_MAX_ITER})
    if not result.success:
        logger.warning(f"Platt fit did not report convergence: {result.message}")
    slope, intercept = (float(v) for v in result.x)
    logger.info(f"Fitted Platt scaling on {labels.size} rows: a={slope:.4f}, b={intercept:.4f}")
    return slope, intercept


def fit_platt(dataset: ForecastDataset) -> PlattForecaster:
    """Platt scaling on the dataset's mean_prob column alone."""
    slope, intercept = fit_platt_scores(dataset.column("mean_prob"), dataset.labels)
    return PlattForecaster(slope=slope, intercept=intercept)


def fit_gbdt(dataset: ForecastDataset, config: GbdtConfig = GbdtConfig()) -> GbdtForecaster:
    _check_two_classes(dataset.labels, "GBDT")
    model = fit_gbdt_arrays(dataset.X, dataset.labels, config)
    return GbdtForecaster(model=model, schema=dataset.schema, config=config)


def fit_forecaster(dataset: ForecastDataset, kind: str, gbdt_config: Optional[GbdtConfig] = None) -> Forecaster:
    if kind == "platt":
        return fit_platt(dataset)
    if kind == "gbdt":
        return fit_gbdt(dataset, gbdt_config or GbdtConfig())
    raise ConfigError(f"Unknown forecaster kind '{kind}' (expected 'platt' or 'gbdt')")


def forecaster_to_dict(forecaster: Forecaster) -> Dict[str, Any]:
    return {
        "format_version": FORECASTER_FORMAT_VERSION,
        "kind": forecaster.kind,
        "schema": list(forecaster.schema.names),
        "params": forecaster.params(),
    }


def forecaster_from_dict(data: Dict[str, Any]) -> Forecaster:
    version = data.get("format_version")
    if version != FORECASTER_FORMAT_VERSION:
        raise SchemaVersionError(f"Unsupported forecaster format_version {version!r}")
    schema = FeatureSchema(tuple(data["schema"]))
    params = data["params"]
    if data["kind"] == "platt":
        return PlattForecaster(slope=float(params["slope"]), intercept=float(params["intercept"]), schema=schema)
    if data["kind"] == "gbdt":
        return GbdtForecaster(model=GbdtModel.from_dict(params["model"]), schema=schema, config=GbdtConfig(**params["config"]))
    raise SchemaVersionError(f"Unknown forecaster kind {data['kind']!r}")


def save_forecaster(forecaster: Forecaster, path, config_hash: Optional[str] = None, **metadata) -> None:
    """Persist as versioned JSON; extra keyword metadata (chosen k, ECE table) is stored alongside."""
    payload = forecaster_to_dict(forecaster)
    payload.update(metadata)
    write_json_artifact(path, payload, config_hash=config_hash)


def load_forecaster(path) -> Forecaster:
    return forecaster_from_dict(read_json_artifact(path, stage_hint="calibrate"))


def save_selected_forecaster(selected: SelectedForecaster, path, config_hash: Optional[str] = None, **metadata) -> None:
    """Persist a heuristic-k result: the forecaster plus chosen k and the per-k validation ECE table."""
    save_forecaster(
        selected.forecaster,
        path,
        config_hash=config_hash,
        chosen_k=selected.chosen_k,
        val_ece=selected.val_ece,
        candidate_eces={str(k): ece for k, ece in sorted(selected.candidate_eces.items())},
        **metadata,
    )


def load_selected_forecaster(path) -> SelectedForecaster:
    data = read_json_artifact(path, stage_hint="calibrate")
    return SelectedForecaster(
        forecaster=forecaster_from_dict(data),
        chosen_k=int(data.get("chosen_k", 1)),
        val_ece=float(data.get("val_ece", float("nan"))),
        candidate_eces={int(k): float(v) for k, v in data.get("candidate_eces", {}).items()},
    )
