"""Random forest tests: exact small-case behavior, determinism, range safety."""

import json

import numpy as np
import pytest

from downscale.forest import (
    ForestParams,
    default_grid,
    fit_forest,
    fit_tree,
    hyper_search,
    model_from_dict,
    model_to_dict,
    predict_forest,
    tree_predictions,
)


def make_data(seed=0, n=120, J=4):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, J))
    y = 2.0 * (X[:, 0] > 0) + X[:, 1] + 0.1 * rng.normal(size=n)
    return X, y


NAMES4 = ["a", "b", "c", "d"]


class TestFitTree:
    def test_constant_response_single_leaf(self):
        X = np.random.default_rng(0).normal(size=(30, 3))
        tree = fit_tree(X, np.full(30, 7.5), ForestParams(), np.random.default_rng(1))
        assert len(tree.feature) == 1
        assert tree.feature[0] == -1
        assert tree.value[0] == 7.5
        assert tree.count[0] == 30

    def test_step_function_single_split(self):
        x = np.concatenate([np.linspace(-2, -1, 10), np.linspace(1, 2, 10)])
        X = x[:, None]
        y = (x > 0).astype(float)
        tree = fit_tree(X, y, ForestParams(max_depth=1), np.random.default_rng(0))
        assert len(tree.feature) == 3
        assert tree.feature[0] == 0
        assert -1.0 < tree.threshold[0] < 1.0
        pred = tree_predictions(
            fit_forest(X, y, ["x"], ForestParams(n_trees=1, max_depth=1, bootstrap=False)), X
        )[0]
        assert np.array_equal(pred, y)

    def test_full_depth_memorizes_distinct_rows(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(40, 2))
        y = rng.normal(size=40)
        tree = fit_tree(X, y, ForestParams(min_samples_leaf=1), rng)
        model = fit_forest(X, y, ["a", "b"], ForestParams(n_trees=1, bootstrap=False), seed=5)
        assert np.allclose(predict_forest(model, X, ["a", "b"]), y, atol=1e-12)
        assert np.all(tree.count[tree.feature == -1] >= 1)

    def test_min_samples_leaf_respected(self):
        X, y = make_data(seed=4)
        params = ForestParams(n_trees=1, min_samples_leaf=7, bootstrap=False)
        model = fit_forest(X, y, NAMES4, params, seed=0)
        tree = model.trees[0]
        leaves = tree.feature == -1
        assert np.all(tree.count[leaves] >= 7)

    def test_max_depth_zero_is_root_leaf(self):
        X, y = make_data(seed=5, n=20)
        tree = fit_tree(X, y, ForestParams(max_depth=0), np.random.default_rng(0))
        assert len(tree.feature) == 1
        assert tree.value[0] == pytest.approx(y.mean())

    def test_split_separates_training_rows(self):
        X, y = make_data(seed=6)
        model = fit_forest(X, y, NAMES4, ForestParams(n_trees=3, bootstrap=False), seed=2)
        for tree in model.trees:
            stack = [(0, np.arange(len(y)))]
            while stack:
                node, rows = stack.pop()
                if tree.feature[node] < 0:
                    continue
                go_left = X[rows, tree.feature[node]] <= tree.threshold[node]
                assert 0 < go_left.sum() < len(rows)
                stack.append((tree.left[node], rows[go_left]))
                stack.append((tree.right[node], rows[~go_left]))


class TestForest:
    def test_single_tree_matches_fit_tree(self):
        X, y = make_data(seed=7)
        params = ForestParams(n_trees=1, bootstrap=False)
        model = fit_forest(X, y, NAMES4, params, seed=11)
        tree = fit_tree(X, y, params, np.random.default_rng([11, 0]))
        assert np.array_equal(model.trees[0].feature, tree.feature)
        assert np.array_equal(model.trees[0].threshold, tree.threshold)
        assert np.array_equal(model.trees[0].value, tree.value)

    def test_deterministic_for_seed(self):
        X, y = make_data(seed=8)
        a = fit_forest(X, y, NAMES4, ForestParams(n_trees=12), seed=3)
        b = fit_forest(X, y, NAMES4, ForestParams(n_trees=12), seed=3)
        assert json.dumps(model_to_dict(a)) == json.dumps(model_to_dict(b))
        c = fit_forest(X, y, NAMES4, ForestParams(n_trees=12), seed=4)
        probe = np.random.default_rng(0).normal(size=(50, 4))
        assert not np.array_equal(
            predict_forest(a, probe, NAMES4), predict_forest(c, probe, NAMES4)
        )

    def test_ensemble_is_mean_of_trees(self):
        X, y = make_data(seed=9)
        model = fit_forest(X, y, NAMES4, ForestParams(n_trees=15), seed=0)
        probe = np.random.default_rng(1).normal(size=(80, 4))
        manual = tree_predictions(model, probe).mean(axis=0)
        assert np.max(np.abs(predict_forest(model, probe, NAMES4) - manual)) <= 1e-12

    def test_range_safety_under_extrapolation(self):
        X, y = make_data(seed=10, n=100)
        model = fit_forest(X, y, NAMES4, ForestParams(n_trees=30), seed=1)
        probe = np.random.default_rng(2).uniform(-100, 100, size=(10_000, 4))
        pred = predict_forest(model, probe, NAMES4)
        assert np.all(pred >= y.min())
        assert np.all(pred <= y.max())

    def test_piecewise_constant_signal_recovered(self):
        rng = np.random.default_rng(12)
        X = rng.uniform(-2, 2, size=(200, 3))
        y = np.select(
            [X[:, 0] < -1, X[:, 0] < 0, X[:, 0] < 1], [1.0, 3.0, 5.0], default=7.0
        )
        model = fit_forest(X, y, ["a", "b", "c"], ForestParams(n_trees=100), seed=0)
        fitted = predict_forest(model, X, ["a", "b", "c"])
        r2 = 1 - np.sum((y - fitted) ** 2) / np.sum((y - y.mean()) ** 2)
        assert r2 > 0.99

    def test_name_mismatch_rejected(self):
        X, y = make_data(seed=13)
        model = fit_forest(X, y, NAMES4, ForestParams(n_trees=2), seed=0)
        with pytest.raises(ValueError, match="missing.*'d'.*extra.*'z'"):
            predict_forest(model, X, ["a", "b", "c", "z"])
        with pytest.raises(ValueError, match="feature names"):
            fit_forest(X, y, ["a", "b"], ForestParams(n_trees=1), seed=0)

    def test_column_permutation_invariance(self):
        X, y = make_data(seed=14)
        model = fit_forest(X, y, NAMES4, ForestParams(n_trees=8), seed=0)
        probe = np.random.default_rng(3).normal(size=(60, 4))
        base = predict_forest(model, probe, NAMES4)
        perm = predict_forest(model, probe[:, ::-1], NAMES4[::-1])
        assert np.array_equal(base, perm)

    def test_oob_flag(self):
        X, y = make_data(seed=15, n=80)
        model = fit_forest(X, y, NAMES4, ForestParams(n_trees=25), seed=0, oob=True)
        assert model.oob_mse is not None
        assert 0.0 <= model.oob_mse < y.var() * 4
        plain = fit_forest(X, y, NAMES4, ForestParams(n_trees=25), seed=0)
        assert plain.oob_mse is None


class TestHyperSearch:
    def test_default_grid_is_complete(self):
        grid = default_grid(20)
        assert len(grid) == 54
        assert len(set(grid)) == 54
        mtrys = {p.mtry for p in grid}
        assert mtrys == {7, 5, 20}

    def test_degenerate_mtry_deduplicated(self):
        grid = default_grid(1)
        assert len(grid) == 18
        assert {p.mtry for p in grid} == {1}

    def test_single_config_grid_chosen(self):
        X, y = make_data(seed=16, n=60)
        only = ForestParams(n_trees=5, max_depth=4)
        report = hyper_search(X, y, NAMES4, grid=[only], k=3, seed=0)
        assert report.chosen == only
        assert len(report.entries) == 1

    def test_deep_beats_stump_on_linear_signal(self):
        rng = np.random.default_rng(17)
        X = rng.uniform(-2, 2, size=(150, 2))
        y = 3.0 * X[:, 0] + 0.05 * rng.normal(size=150)
        grid = [
            ForestParams(n_trees=30, max_depth=1),
            ForestParams(n_trees=30, max_depth=None),
        ]
        report = hyper_search(X, y, ["a", "b"], grid=grid, k=4, seed=1)
        assert report.chosen.max_depth is None
        assert len(report.entries) == 2

    def test_ties_prefer_cheaper_model(self):
        X = np.random.default_rng(18).normal(size=(40, 2))
        y = np.full(40, 3.0)  # constant response: every config scores identically
        grid = [
            ForestParams(n_trees=300, max_depth=None),
            ForestParams(n_trees=100, max_depth=16),
            ForestParams(n_trees=100, max_depth=8),
        ]
        report = hyper_search(X, y, ["a", "b"], grid=grid, k=4, seed=0)
        assert report.chosen == ForestParams(n_trees=100, max_depth=8)
        assert report.chosen_mean == 0.0

    def test_max_configs_subsamples_deterministically(self):
        X, y = make_data(seed=19, n=60)
        grid = [ForestParams(n_trees=t, max_depth=d) for t in (3, 5) for d in (2, 4, 6)]
        a = hyper_search(X, y, NAMES4, grid=grid, k=3, seed=7, max_configs=3)
        b = hyper_search(X, y, NAMES4, grid=grid, k=3, seed=7, max_configs=3)
        assert len(a.entries) == 3
        assert [e[0] for e in a.entries] == [e[0] for e in b.entries]

    def test_empty_grid_rejected(self):
        X, y = make_data(seed=20, n=30)
        with pytest.raises(ValueError, match="empty"):
            hyper_search(X, y, NAMES4, grid=[], k=3, seed=0)


class TestSerialization:
    def test_round_trip_exact(self):
        X, y = make_data(seed=21, n=70)
        model = fit_forest(X, y, NAMES4, ForestParams(n_trees=6, max_depth=5), seed=9)
        doc = json.loads(json.dumps(model_to_dict(model)))
        back = model_from_dict(doc)
        assert back.params == model.params
        assert back.names == model.names
        assert (back.y_min, back.y_max) == (model.y_min, model.y_max)
        probe = np.random.default_rng(4).normal(size=(40, 4))
        assert np.array_equal(
            predict_forest(back, probe, NAMES4), predict_forest(model, probe, NAMES4)
        )

    def test_format_version_checked(self):
        with pytest.raises(ValueError, match="format"):
            model_from_dict({"format": "rf-model/0", "trees": []})
