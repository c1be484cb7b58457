# services/gbdt_service.py
"""Gradient boosted regression trees on binary log-loss.

Each round fits a depth-limited regression tree to the negative gradient
(y - p) by squared-error splits, then replaces every leaf value with the
Newton step sum(y - p) / (sum p(1 - p) + l2_leaf). A row goes left when
x[feature] < threshold.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit, logit

from utils.errors import ConfigError, DegenerateDataError, EmptyDataError

logger = logging.getLogger(__name__)

HESSIAN_FLOOR = 1e-12
MIN_GAIN = 1e-12


@dataclass(frozen=True)
class GbdtConfig:
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5
    subsample: float = 1.0
    l2_leaf: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 0 or self.max_depth < 0 or self.min_leaf < 1:
            raise ConfigError(f"Invalid GBDT sizes: {self}")
        if not 0.0 < self.subsample <= 1.0:
            raise ConfigError(f"GBDT subsample must be in (0, 1], got {self.subsample}")
        if self.learning_rate <= 0 or self.l2_leaf < 0:
            raise ConfigError(f"Invalid GBDT step settings: {self}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class RegressionTree:
    """Flat node arrays; leaves have feature == -1."""

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return len(self.value)

    @property
    def depth(self) -> int:
        def node_depth(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(node_depth(self.left[i]), node_depth(self.right[i]))
        return node_depth(0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.int64)
        for _ in range(self.n_nodes):
            internal = np.nonzero(self.feature[node] >= 0)[0]
            if internal.size == 0:
                break
            current = node[internal]
            go_left = X[internal, self.feature[current]] < self.threshold[current]
            node[internal] = np.where(go_left, self.left[current], self.right[current])
        return self.value[node]

    def to_dict(self) -> Dict[str, List]:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, List]) -> "RegressionTree":
        return cls(data["feature"], data["threshold"], data["left"], data["right"], data["value"])


def best_split(x: np.ndarray, residual: np.ndarray, min_leaf: int) -> Tuple[Optional[float], float]:
    """Midpoint threshold on one feature maximising the squared-error reduction of ``residual``.

    Returns (threshold, gain); threshold is None when no split leaves at
    least ``min_leaf`` rows on both sides. Ties keep the smallest threshold.
    """
    n = x.shape[0]
    if n < 2 * min_leaf:
        return None, 0.0
    order = np.argsort(x, kind="stable")
    xs = x[order]
    rs = residual[order]
    left_sum = np.cumsum(rs)[:-1]
    left_n = np.arange(1, n)
    total = rs.sum()
    right_sum = total - left_sum
    right_n = n - left_n
    gains = left_sum ** 2 / left_n + right_sum ** 2 / right_n - total ** 2 / n
    # only cut between distinct values, and keep min_leaf rows each side
    valid = (xs[:-1] < xs[1:]) & (left_n >= min_leaf) & (right_n >= min_leaf)
    if not np.any(valid):
        return None, 0.0
    gains = np.where(valid, gains, -np.inf)
    best = int(np.argmax(gains))
    return float((xs[best] + xs[best + 1]) / 2.0), float(gains[best])


def _grow(X, residual, hessian, rows, depth, config: GbdtConfig, nodes: List[list]) -> int:
    index = len(nodes)
    nodes.append([-1, 0.0, -1, -1, 0.0])

    split_feature, split_threshold, split_gain = -1, None, MIN_GAIN
    if depth < config.max_depth:
        for feature in range(X.shape[1]):
            threshold, gain = best_split(X[rows, feature], residual[rows], config.min_leaf)
            if threshold is not None and gain > split_gain:
                split_feature, split_threshold, split_gain = feature, threshold, gain

    if split_feature < 0:
        denominator = max(float(hessian[rows].sum()) + config.l2_leaf, HESSIAN_FLOOR)
        nodes[index][4] = float(residual[rows].sum()) / denominator
        return index

    go_left = X[rows, split_feature] < split_threshold
    left = _grow(X, residual, hessian, rows[go_left], depth + 1, config, nodes)
    right = _grow(X, residual, hessian, rows[~go_left], depth + 1, config, nodes)
    nodes[index][:4] = [split_feature, split_threshold, left, right]
    return index


def fit_tree(X: np.ndarray, residual: np.ndarray, hessian: np.ndarray, rows: np.ndarray, config: GbdtConfig) -> RegressionTree:
    nodes: List[list] = []
    _grow(X, residual, hessian, rows, 0, config, nodes)
    feature, threshold, left, right, value = zip(*nodes)
    return RegressionTree(feature, threshold, left, right, value)


class GbdtModel:
    def __init__(self, base_score: float, learning_rate: float, trees: List[RegressionTree]):
        self.base_score = float(base_score)
        self.learning_rate = float(learning_rate)
        self.trees = list(trees)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        score = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            score = score + self.learning_rate * tree.predict(X)
        return score

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return expit(self.decision_function(X))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GbdtModel":
        return cls(data["base_score"], data["learning_rate"], [RegressionTree.from_dict(t) for t in data["trees"]])


def fit_gbdt_arrays(X: np.ndarray, y: np.ndarray, config: GbdtConfig = GbdtConfig()) -> GbdtModel:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise EmptyDataError("Cannot fit a GBDT forecaster on zero rows.")
    base_rate = float(np.mean(y))
    if base_rate in (0.0, 1.0):
        raise DegenerateDataError(f"GBDT training data holds a single class (base rate {base_rate}).")

    rng = np.random.default_rng(config.seed)
    base_score = float(logit(base_rate))
    score = np.full(y.shape[0], base_score)
    n_sub = max(1, int(round(config.subsample * y.shape[0])))
    trees = []
    for round_index in range(config.n_trees):
        p = expit(score)
        residual = y - p
        hessian = p * (1.0 - p)
        if n_sub < y.shape[0]:
            rows = np.sort(rng.choice(y.shape[0], size=n_sub, replace=False))
        else:
            rows = np.arange(y.shape[0])
        tree = fit_tree(X, residual, hessian, rows, config)
        trees.append(tree)
        score = score + config.learning_rate * tree.predict(X)
        logger.debug(f"GBDT round {round_index + 1}: {tree.n_nodes} nodes, mean |residual| {np.mean(np.abs(residual)):.4f}")

    logger.info(f"Fitted GBDT: {len(trees)} trees on {y.shape[0]} rows x {X.shape[1]} features, base rate {base_rate:.3f}")
    return GbdtModel(base_score, config.learning_rate, trees)
