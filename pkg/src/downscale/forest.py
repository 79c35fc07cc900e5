"""Random forest regression: bagged CART trees with per-node feature sampling.

Trees are grown greedily by maximum reduction in the sum of squared
deviations. At each node a seeded sample of mtry features is drawn without
replacement and split candidates are the midpoints between consecutive
distinct sorted values. Each tree owns an independent random stream derived
from (seed, tree index), so serial and parallel training produce identical
models. Predictions are leaf means averaged over trees and therefore never
leave the range of the training responses.

Hyper-parameters are chosen by seeded K-fold cross-validation over a fixed
grid; ties prefer the cheaper model (fewer trees, then shallower).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cv import fold_assignments

FORMAT = "rf-model/1"


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 300
    max_depth: int | None = None
    min_samples_leaf: int = 1
    mtry: int | None = None  # None means all features
    bootstrap: bool = True


@dataclass
class Tree:
    """Flat node arrays; feature < 0 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray


@dataclass
class ForestModel:
    params: ForestParams
    names: list[str]
    trees: list[Tree]
    y_min: float
    y_max: float
    seed: int
    oob_mse: float | None = None


@dataclass
class HyperSearchReport:
    entries: list[tuple[ForestParams, float, float]]  # (params, cv mean, cv se)
    chosen: ForestParams
    chosen_mean: float
    chosen_se: float
    folds_seed: int


def _best_split(X: np.ndarray, y: np.ndarray, feats: np.ndarray, min_leaf: int):
    """Best (feature, threshold) among candidates, or None if no valid split."""
    m = len(y)
    if m < 2 * min_leaf:
        return None
    Xf = X[:, feats]
    order = np.argsort(Xf, axis=0, kind="stable")
    xs = np.take_along_axis(Xf, order, axis=0)
    ys = y[order]
    csum = np.cumsum(ys, axis=0)
    total = csum[-1, 0]
    pos = np.arange(min_leaf - 1, m - min_leaf)
    n_left = (pos + 1).astype(float)[:, None]
    sum_left = csum[pos, :]
    gain = sum_left**2 / n_left + (total - sum_left) ** 2 / (m - n_left)
    valid = xs[pos + 1, :] > xs[pos, :]
    if not valid.any():
        return None
    gain = np.where(valid, gain, -np.inf)
    p, f = np.unravel_index(np.argmax(gain), gain.shape)
    if gain[p, f] <= total * total / m:
        return None
    lo, hi = xs[pos[p], f], xs[pos[p] + 1, f]
    thr = 0.5 * (lo + hi)
    if thr >= hi:  # adjacent floats can round the midpoint onto the upper value
        thr = lo
    return int(feats[f]), float(thr)


def fit_tree(
    X: np.ndarray, y: np.ndarray, params: ForestParams, rng: np.random.Generator
) -> Tree:
    """Grow one CART regression tree; deterministic given the rng state."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    J = X.shape[1]
    mtry = J if params.mtry is None else max(1, min(params.mtry, J))
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []
    count: list[int] = []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        count.append(0)
        return len(feature) - 1

    root = new_node()
    stack: list[tuple[int, np.ndarray, int]] = [(root, np.arange(len(y)), 0)]
    while stack:
        node, rows, depth = stack.pop()
        yn = y[rows]
        value[node] = float(yn.mean())
        count[node] = len(rows)
        if (
            (params.max_depth is not None and depth >= params.max_depth)
            or len(rows) < 2 * params.min_samples_leaf
            or np.all(yn == yn[0])
        ):
            continue
        feats = rng.choice(J, size=mtry, replace=False)
        split = _best_split(X[rows], yn, feats, params.min_samples_leaf)
        if split is None:
            continue
        feature[node], threshold[node] = split
        go_left = X[rows, feature[node]] <= threshold[node]
        left[node] = new_node()
        right[node] = new_node()
        # push right first so the left child is processed next (DFS order
        # pins the rng consumption sequence)
        stack.append((right[node], rows[~go_left], depth + 1))
        stack.append((left[node], rows[go_left], depth + 1))
    return Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=float),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=float),
        count=np.array(count, dtype=np.int64),
    )


def _tree_predict(tree: Tree, X: np.ndarray) -> np.ndarray:
    idx = np.zeros(len(X), dtype=np.int64)
    while True:
        rows = np.flatnonzero(tree.feature[idx] >= 0)
        if len(rows) == 0:
            return tree.value[idx]
        cur = idx[rows]
        go_left = X[rows, tree.feature[cur]] <= tree.threshold[cur]
        idx[rows] = np.where(go_left, tree.left[cur], tree.right[cur])


def fit_forest(
    X: np.ndarray,
    y: np.ndarray,
    names: list[str],
    params: ForestParams,
    seed: int = 0,
    oob: bool = False,
) -> ForestModel:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[1] != len(names):
        raise ValueError(f"{X.shape[1]} columns but {len(names)} feature names")
    n = len(y)
    trees: list[Tree] = []
    oob_sum = np.zeros(n)
    oob_hits = np.zeros(n, dtype=np.int64)
    for t in range(params.n_trees):
        rng = np.random.default_rng([seed, t])
        if params.bootstrap:
            rows = rng.integers(0, n, size=n)
        else:
            rows = np.arange(n)
        tree = fit_tree(X[rows], y[rows], params, rng)
        trees.append(tree)
        if oob and params.bootstrap:
            out = np.setdiff1d(np.arange(n), rows, assume_unique=False)
            if len(out):
                oob_sum[out] += _tree_predict(tree, X[out])
                oob_hits[out] += 1
    oob_mse = None
    if oob and params.bootstrap and np.any(oob_hits > 0):
        covered = oob_hits > 0
        resid = y[covered] - oob_sum[covered] / oob_hits[covered]
        oob_mse = float(np.mean(resid**2))
    return ForestModel(
        params=params,
        names=list(names),
        trees=trees,
        y_min=float(y.min()),
        y_max=float(y.max()),
        seed=seed,
        oob_mse=oob_mse,
    )


def tree_predictions(model: ForestModel, X: np.ndarray) -> np.ndarray:
    """Per-tree predictions, shape (n_trees, n_rows)."""
    X = np.asarray(X, dtype=float)
    return np.stack([_tree_predict(t, X) for t in model.trees])


def predict_forest(model: ForestModel, X: np.ndarray, names: list[str]) -> np.ndarray:
    """Mean of per-tree leaf values, clipped to the training response range."""
    missing = [n for n in model.names if n not in names]
    extra = [n for n in names if n not in model.names]
    if missing or extra:
        raise ValueError(
            f"covariate mismatch: missing {missing or 'none'}, extra {extra or 'none'}"
        )
    order = [names.index(n) for n in model.names]
    X = np.asarray(X, dtype=float)[:, order]
    pred = tree_predictions(model, X).mean(axis=0)
    return np.clip(pred, model.y_min, model.y_max)


def default_grid(n_features: int) -> list[ForestParams]:
    """100/300 trees x depth 8/16/unlimited x leaf 1/5/20 x three mtry choices."""
    mtrys = sorted({math.ceil(n_features / 3), math.ceil(math.sqrt(n_features)), n_features})
    return [
        ForestParams(n_trees=t, max_depth=d, min_samples_leaf=l, mtry=m)
        for t in (100, 300)
        for d in (8, 16, None)
        for l in (1, 5, 20)
        for m in mtrys
    ]


def _cost_key(params: ForestParams) -> tuple:
    depth = math.inf if params.max_depth is None else params.max_depth
    return (params.n_trees, depth, -params.min_samples_leaf, params.mtry or math.inf)


def hyper_search(
    X: np.ndarray,
    y: np.ndarray,
    names: list[str],
    grid: list[ForestParams] | None = None,
    k: int = 5,
    seed: int = 0,
    max_configs: int | None = None,
) -> HyperSearchReport:
    """Pick the grid cell with the lowest CV MSE on shared seeded folds.

    Exact ties go to the cheaper model: fewer trees, then shallower depth,
    then larger leaves, then smaller mtry. `max_configs` caps the grid by
    seeded subsampling.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if grid is None:
        grid = default_grid(X.shape[1])
    if not grid:
        raise ValueError("hyper-parameter grid is empty")
    if max_configs is not None and max_configs < len(grid):
        pick = np.random.default_rng([seed, len(grid)]).choice(
            len(grid), size=max_configs, replace=False
        )
        grid = [grid[i] for i in sorted(pick)]
    folds = fold_assignments(len(y), k, seed)
    entries: list[tuple[ForestParams, float, float]] = []
    for params in grid:
        fold_mse = np.empty(k)
        for i in range(k):
            test = folds == i
            model = fit_forest(X[~test], y[~test], names, params, seed=seed)
            resid = y[test] - predict_forest(model, X[test], names)
            fold_mse[i] = float(np.mean(resid**2))
        entries.append((params, float(fold_mse.mean()), float(fold_mse.std(ddof=1) / np.sqrt(k))))
    best = min(range(len(entries)), key=lambda i: (entries[i][1],) + _cost_key(entries[i][0]))
    return HyperSearchReport(
        entries=entries,
        chosen=entries[best][0],
        chosen_mean=entries[best][1],
        chosen_se=entries[best][2],
        folds_seed=seed,
    )


def params_to_dict(params: ForestParams) -> dict:
    return {
        "n_trees": params.n_trees,
        "max_depth": params.max_depth,
        "min_samples_leaf": params.min_samples_leaf,
        "mtry": params.mtry,
        "bootstrap": params.bootstrap,
    }


def params_from_dict(doc: dict) -> ForestParams:
    return ForestParams(
        n_trees=int(doc["n_trees"]),
        max_depth=None if doc["max_depth"] is None else int(doc["max_depth"]),
        min_samples_leaf=int(doc["min_samples_leaf"]),
        mtry=None if doc["mtry"] is None else int(doc["mtry"]),
        bootstrap=bool(doc["bootstrap"]),
    )


def model_to_dict(model: ForestModel) -> dict:
    return {
        "format": FORMAT,
        "params": params_to_dict(model.params),
        "names": model.names,
        "y_min": model.y_min,
        "y_max": model.y_max,
        "seed": model.seed,
        "oob_mse": model.oob_mse,
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "value": t.value.tolist(),
                "count": t.count.tolist(),
            }
            for t in model.trees
        ],
    }


def model_from_dict(doc: dict) -> ForestModel:
    if doc.get("format") != FORMAT:
        raise ValueError(f"unsupported model document format {doc.get('format')!r}")
    trees = [
        Tree(
            feature=np.array(t["feature"], dtype=np.int64),
            threshold=np.array(t["threshold"], dtype=float),
            left=np.array(t["left"], dtype=np.int64),
            right=np.array(t["right"], dtype=np.int64),
            value=np.array(t["value"], dtype=float),
            count=np.array(t["count"], dtype=np.int64),
        )
        for t in doc["trees"]
    ]
    return ForestModel(
        params=params_from_dict(doc["params"]),
        names=list(doc["names"]),
        trees=trees,
        y_min=float(doc["y_min"]),
        y_max=float(doc["y_max"]),
        seed=int(doc["seed"]),
        oob_mse=doc.get("oob_mse"),
    )
