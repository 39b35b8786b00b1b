"""
Data-driven comparison models: ridge-jittered linear regression, a CART
regression tree and a bagged random forest. All map the 12 model inputs to
(C_p, C_f) jointly.
"""

import itertools
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, FormatError

logger = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-8
REFINEMENT_STEPS = 2
MIN_RELATIVE_GAIN = 1e-12


def _check_xy(X, Y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] == 0:
        raise DataError("cannot fit on an empty dataset")
    if X.shape[0] != Y.shape[0]:
        raise DataError(f"{X.shape[0]} input rows but {Y.shape[0]} target rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise DataError("non-finite value in the training data")
    return X, Y


@dataclass
class LinearModel:
    weights: np.ndarray
    intercept: np.ndarray
    jitter: float = DEFAULT_JITTER

    kind = "linreg"

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return X @ self.weights + self.intercept

    def to_dict(self) -> dict:
        return {"kind": self.kind, "weights": self.weights.tolist(),
                "intercept": self.intercept.tolist(), "jitter": self.jitter}

    @classmethod
    def from_dict(cls, data: dict) -> "LinearModel":
        return cls(np.asarray(data["weights"], dtype=float),
                   np.asarray(data["intercept"], dtype=float), float(data["jitter"]))


def linreg_fit(X, Y, jitter: float = DEFAULT_JITTER) -> LinearModel:
    """Least squares with an intercept via (XᵀX + µI) W = XᵀY on centered data.

    The jitter keeps the system solvable for collinear or constant inputs;
    a couple of refinement sweeps remove its bias on well-posed problems.

    Raises:
        DataError: empty or non-finite data
    """
    X, Y = _check_xy(X, Y)
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean
    gram = Xc.T @ Xc
    rhs = Xc.T @ Yc
    system = gram + jitter * np.eye(gram.shape[0])
    weights = np.linalg.solve(system, rhs)
    for _ in range(REFINEMENT_STEPS):
        weights = weights + np.linalg.solve(system, rhs - gram @ weights)
    if not np.all(np.isfinite(weights)):
        raise DataError("linear regression produced non-finite coefficients")
    return LinearModel(weights, y_mean - x_mean @ weights, jitter)


@dataclass
class TreeModel:
    """Binary regression tree stored as parallel node arrays.

    Node i is a leaf when ``feature[i] == -1``; otherwise rows with
    ``x[feature] <= threshold`` go to ``left[i]``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    kind = "tree"

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by every row."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        node = np.zeros(X.shape[0], dtype=int)
        active = self.feature[node] >= 0
        while np.any(active):
            rows = np.flatnonzero(active)
            at = node[rows]
            go_left = X[rows, self.feature[at]] <= self.threshold[at]
            node[rows] = np.where(go_left, self.left[at], self.right[at])
            active = self.feature[node] >= 0
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "feature": self.feature.tolist(),
                "threshold": self.threshold.tolist(), "left": self.left.tolist(),
                "right": self.right.tolist(), "value": self.value.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "TreeModel":
        return cls(np.asarray(data["feature"], dtype=int),
                   np.asarray(data["threshold"], dtype=float),
                   np.asarray(data["left"], dtype=int),
                   np.asarray(data["right"], dtype=int),
                   np.asarray(data["value"], dtype=float).reshape(len(data["feature"]), -1))


def best_split(X: np.ndarray, Y: np.ndarray, features: Sequence[int],
               min_leaf: int = 1) -> tuple[int, float, float] | None:
    """Lowest summed SSE split as (feature, threshold, sse), or None.

    Thresholds are midpoints between consecutive distinct sorted values.
    Ties go to the lowest feature index, then the lowest threshold.
    """
    n = X.shape[0]
    best = None
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = Y[order]
        csum = np.cumsum(ys, axis=0)
        csq = np.cumsum(ys * ys, axis=0)
        n_left = np.arange(1, n)
        n_right = n - n_left
        left_sse = (csq[:-1] - csum[:-1] ** 2 / n_left[:, None]).sum(axis=1)
        right_sum = csum[-1] - csum[:-1]
        right_sse = ((csq[-1] - csq[:-1]) - right_sum ** 2 / n_right[:, None]).sum(axis=1)
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n_right >= min_leaf)
        if not np.any(valid):
            continue
        sse = np.where(valid, left_sse + right_sse, np.inf)
        pos = int(np.argmin(sse))
        if best is None or sse[pos] < best[2]:
            best = (int(f), float(0.5 * (xs[pos] + xs[pos + 1])), float(sse[pos]))
    return best


class _TreeBuilder:
    def __init__(self, X, Y, max_depth: int, min_leaf: int,
                 max_features: int | None = None, rng: np.random.Generator | None = None):
        self.X, self.Y = X, Y
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.n_features = X.shape[1]
        self.max_features = self.n_features if max_features is None else max_features
        self.rng = rng
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []

    def _candidates(self) -> list[int]:
        if self.max_features >= self.n_features or self.rng is None:
            return list(range(self.n_features))
        drawn = self.rng.choice(self.n_features, size=self.max_features, replace=False)
        return sorted(int(f) for f in drawn)

    def _node(self, rows: np.ndarray, depth: int) -> int:
        index = len(self.feature)
        y = self.Y[rows]
        mean = y.mean(axis=0)
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(mean)
        if depth >= self.max_depth or len(rows) < 2 * self.min_leaf:
            return index
        parent_sse = float(((y - mean) ** 2).sum())
        if parent_sse <= 0.0:
            return index
        split = best_split(self.X[rows], y, self._candidates(), self.min_leaf)
        if split is None:
            return index
        f, threshold, sse = split
        if parent_sse - sse <= MIN_RELATIVE_GAIN * parent_sse:
            return index
        go_left = self.X[rows, f] <= threshold
        self.feature[index] = f
        self.threshold[index] = threshold
        self.left[index] = self._node(rows[go_left], depth + 1)
        self.right[index] = self._node(rows[~go_left], depth + 1)
        return index

    def build(self, rows: np.ndarray | None = None) -> TreeModel:
        if rows is None:
            rows = np.arange(self.X.shape[0])
        self._node(rows, 0)
        return TreeModel(np.asarray(self.feature, dtype=int),
                         np.asarray(self.threshold, dtype=float),
                         np.asarray(self.left, dtype=int),
                         np.asarray(self.right, dtype=int),
                         np.asarray(self.value, dtype=float))


def tree_fit(X, Y, max_depth: int = 8, min_leaf: int = 1) -> TreeModel:
    """Greedy CART on summed per-output squared error."""
    X, Y = _check_xy(X, Y)
    if max_depth < 0 or min_leaf < 1:
        raise ConfigurationError(f"invalid tree limits: max_depth={max_depth}, min_leaf={min_leaf}")
    return _TreeBuilder(X, Y, max_depth, min_leaf).build()


@dataclass
class ForestModel:
    trees: list[TreeModel]
    seeds: list[int]
    max_features: int
    bootstrap: bool = True

    kind = "forest"

    def tree_predictions(self, X) -> np.ndarray:
        return np.stack([tree.predict(X) for tree in self.trees])

    def predict(self, X) -> np.ndarray:
        return self.tree_predictions(X).mean(axis=0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "trees": [t.to_dict() for t in self.trees],
                "seeds": list(self.seeds), "max_features": self.max_features,
                "bootstrap": self.bootstrap}

    @classmethod
    def from_dict(cls, data: dict) -> "ForestModel":
        return cls([TreeModel.from_dict(t) for t in data["trees"]], list(data["seeds"]),
                   int(data["max_features"]), bool(data["bootstrap"]))


def forest_fit(X, Y, n_trees: int = 100, max_depth: int = 8, max_features: int | None = None,
               seed: int = 0, min_leaf: int = 1, bootstrap: bool = True,
               workers: int = 1) -> ForestModel:
    """Bagged CART trees with ``max_features`` features drawn at every split.

    Each tree has its own RNG stream spawned from ``seed``; the result does
    not depend on ``workers``.
    """
    X, Y = _check_xy(X, Y)
    n_features = X.shape[1]
    m = n_features if max_features is None else int(max_features)
    if n_trees < 1:
        raise ConfigurationError(f"a forest needs at least one tree, got {n_trees}")
    if not 1 <= m <= n_features:
        raise ConfigurationError(f"feature subsample {m} outside [1, {n_features}]")
    streams = np.random.SeedSequence(seed).spawn(n_trees)
    seeds = [int(s.generate_state(1)[0]) for s in streams]

    def grow(stream: np.random.SeedSequence) -> TreeModel:
        rng = np.random.default_rng(stream)
        n = X.shape[0]
        rows = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        return _TreeBuilder(X, Y, max_depth, min_leaf, m, rng).build(np.sort(rows))

    if workers > 1 and n_trees > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(grow, streams))
    else:
        trees = [grow(s) for s in streams]
    return ForestModel(trees, seeds, m, bootstrap)


BaselineModel = LinearModel | TreeModel | ForestModel
BASELINE_KINDS = {"linreg": LinearModel, "tree": TreeModel, "forest": ForestModel}


def model_from_dict(data: dict) -> BaselineModel:
    try:
        return BASELINE_KINDS[data["kind"]].from_dict(data)
    except KeyError as e:
        raise FormatError(f"not a baseline checkpoint: missing {e}") from e


@dataclass
class BaselineGrid:
    max_depth: list[int] = field(default_factory=lambda: [4, 8, 12])
    n_trees: list[int] = field(default_factory=lambda: [50, 100])
    max_features: list[int] = field(default_factory=lambda: [4, 8, 12])
    min_leaf: int = 1
    jitter: float = DEFAULT_JITTER

    def candidates(self, kind: str) -> list[dict]:
        if kind == "linreg":
            return [{"jitter": self.jitter}]
        if kind == "tree":
            return [{"max_depth": d, "min_leaf": self.min_leaf} for d in self.max_depth]
        if kind == "forest":
            return [{"max_depth": d, "n_trees": n, "max_features": m, "min_leaf": self.min_leaf}
                    for d, n, m in itertools.product(self.max_depth, self.n_trees, self.max_features)]
        raise ConfigurationError(f"unknown baseline kind '{kind}'")


def fit_baseline(kind: str, X, Y, params: dict, seed: int = 0, workers: int = 1) -> BaselineModel:
    if kind == "linreg":
        return linreg_fit(X, Y, **params)
    if kind == "tree":
        return tree_fit(X, Y, **params)
    if kind == "forest":
        return forest_fit(X, Y, seed=seed, workers=workers, **params)
    raise ConfigurationError(f"unknown baseline kind '{kind}'")


def select_baseline(kind: str, X_train, Y_train, X_val, Y_val, grid: BaselineGrid,
                    seed: int = 0, workers: int = 1) -> tuple[BaselineModel, dict, list[dict]]:
    """Fit every grid candidate and keep the lowest validation MSE.

    Returns the chosen model, its hyperparameters and the full search log.
    Earlier candidates win ties.
    """
    best = None
    log = []
    for params in grid.candidates(kind):
        model = fit_baseline(kind, X_train, Y_train, params, seed=seed, workers=workers)
        mse = float(np.mean((model.predict(X_val) - np.asarray(Y_val, dtype=float)) ** 2))
        log.append({**params, "val_mse": mse})
        logger.debug("%s %s: val MSE %.6g", kind, params, mse)
        if best is None or mse < best[2]:
            best = (model, params, mse)
    logger.info("Selected %s hyperparameters %s (val MSE %.6g)", kind, best[1], best[2])
    return best[0], best[1], log
