"""GLM-LASSO solver tests against independent oracles.

Oracles: closed-form soft threshold for a single covariate, unpenalized
least squares (Gaussian) and a full-Hessian Newton solver (Poisson) at the
small-lambda end of the path, hand-evaluated one-SE selection, and a seeded
Monte Carlo for null-model selection on pure noise.
"""

import json

import numpy as np
import pytest

from downscale.cv import fold_assignments, fold_checksum
from downscale.glmlasso import (
    ConvergenceError,
    LassoFit,
    _gaussian_cd,
    cross_validate,
    default_lambdas,
    fit_from_dict,
    fit_lasso,
    fit_path,
    fit_to_dict,
    kkt_max_violation,
    lambda_max,
    predict,
    select_family,
    select_lambda_1se,
    soft_threshold,
    standardize,
)


def make_gaussian(seed=0, n=50, J=5, noise=0.2):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, J))
    beta = np.array([0.4, -0.3, 0.2, 0.0, 0.1])[:J]
    y = 0.7 + X @ beta + rng.normal(scale=noise, size=n)
    return X, y, beta


def make_poisson(seed=0, n=300, J=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, J))
    beta = np.array([0.5, -0.3, 0.2])[:J]
    eta = 1.0 + X @ beta
    y = rng.poisson(np.exp(eta)).astype(float)
    return X, y, beta


def poisson_newton_oracle(Xs, y, tol=1e-12):
    """Unpenalized Poisson MLE by full-Hessian Newton iteration."""
    n, J = Xs.shape
    Z = np.column_stack([np.ones(n), Xs])
    theta = np.zeros(J + 1)
    theta[0] = np.log(y.mean())
    for _ in range(100):
        mu = np.exp(Z @ theta)
        step = np.linalg.solve((Z * mu[:, None]).T @ Z / n, Z.T @ (mu - y) / n)
        theta -= step
        if np.max(np.abs(step)) < tol:
            return theta[0], theta[1:]
    raise AssertionError("Newton oracle did not converge")


class TestStandardize:
    def test_exact_small_column(self):
        Xs, means, sds, flags = standardize(np.array([[1.0], [2.0], [3.0]]))
        root = np.sqrt(1.5)  # sd with denominator n is sqrt(2/3)
        assert np.allclose(Xs[:, 0], [-root, 0.0, root], atol=1e-12)
        assert means[0] == 2.0
        assert np.isclose(sds[0], np.sqrt(2.0 / 3.0))
        assert not flags[0]

    def test_constant_column_flagged(self):
        X = np.array([[1.0, 7.0], [2.0, 7.0], [4.0, 7.0]])
        Xs, _, sds, flags = standardize(X)
        assert np.all(Xs[:, 1] == 0.0)
        assert sds[1] == 1.0
        assert list(flags) == [False, True]

    def test_columns_centered_unit_scale(self):
        X = np.random.default_rng(3).normal(5, 3, size=(40, 4))
        Xs, _, _, _ = standardize(X)
        assert np.allclose(Xs.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(Xs.std(axis=0), 1.0, atol=1e-12)

    def test_needs_two_rows(self):
        with pytest.raises(ValueError, match="2 rows"):
            standardize(np.array([[1.0, 2.0]]))


class TestSoftThreshold:
    @pytest.mark.parametrize(
        "rho,lam,expected",
        [(3.0, 1.0, 2.0), (-3.0, 1.0, -2.0), (0.5, 1.0, 0.0), (1.0, 1.0, 0.0), (-1.0, 1.0, 0.0)],
    )
    def test_values(self, rho, lam, expected):
        assert soft_threshold(rho, lam) == expected


class TestPathNullModel:
    def test_gaussian_null_exact(self):
        X, y, _ = make_gaussian()
        Xs, _, _, _ = standardize(X)
        path = fit_path(Xs, y, "gaussian")
        assert path.lambdas[0] == lambda_max(Xs, y)
        assert np.all(path.coefs[0] == 0.0)
        assert path.intercepts[0] == y.mean()

    def test_poisson_null_exact(self):
        X, y, _ = make_poisson()
        Xs, _, _, _ = standardize(X)
        path = fit_path(Xs, y, "poisson")
        assert np.all(path.coefs[0] == 0.0)
        assert path.intercepts[0] == np.log(y.mean())

    def test_above_lambda_max_all_zero(self):
        X, y, _ = make_gaussian(seed=5)
        Xs, _, _, _ = standardize(X)
        lmax = lambda_max(Xs, y)
        path = fit_path(Xs, y, "gaussian", lambdas=np.array([3 * lmax, lmax]))
        assert np.all(path.coefs == 0.0)

    def test_constant_response_rejected(self):
        Xs, _, _, _ = standardize(np.random.default_rng(0).normal(size=(20, 3)))
        with pytest.raises(ValueError, match="constant"):
            lambda_max(Xs, np.full(20, 4.0))

    def test_lambdas_must_decrease(self):
        X, y, _ = make_gaussian()
        Xs, _, _, _ = standardize(X)
        with pytest.raises(ValueError, match="decreasing"):
            fit_path(Xs, y, "gaussian", lambdas=np.array([1.0, 1.0, 0.5]))

    def test_poisson_rejects_negative(self):
        X, y, _ = make_gaussian()
        with pytest.raises(ValueError, match="nonnegative"):
            fit_path(standardize(X)[0], y - y.max(), "poisson")


class TestSingleCovariateClosedForm:
    def test_matches_soft_threshold(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(60, 1))
        y = 1.5 + 0.8 * X[:, 0] + rng.normal(scale=0.3, size=60)
        Xs, _, _, _ = standardize(X)
        rho = float(Xs[:, 0] @ (y - y.mean())) / 60
        lmax = abs(rho)
        lams = np.array([lmax * f for f in (0.9, 0.5, 0.1)])
        path = fit_path(Xs, y, "gaussian", lambdas=lams)
        for i, lam in enumerate(lams):
            expected = np.sign(rho) * max(abs(rho) - lam, 0.0)
            assert path.coefs[i, 0] == pytest.approx(expected, abs=1e-10)


class TestGaussianOracle:
    def test_path_end_matches_least_squares(self):
        X, y, _ = make_gaussian()
        Xs, means, sds, _ = standardize(X)
        path = fit_path(Xs, y, "gaussian")
        beta_std = path.coefs[-1]
        coef = beta_std / sds
        intercept = path.intercepts[-1] - np.sum(beta_std * means / sds)
        A = np.column_stack([np.ones(len(y)), X])
        theta = np.linalg.lstsq(A, y, rcond=None)[0]
        assert np.max(np.abs(coef - theta[1:])) < 1e-4
        assert abs(intercept - theta[0]) < 1e-4
        deep = fit_path(Xs, y, "gaussian", lambdas=np.geomspace(path.lambdas[0], path.lambdas[0] * 1e-6, 120))
        fitted = deep.intercepts[-1] + Xs @ deep.coefs[-1]
        assert np.max(np.abs(fitted - A @ theta)) < 1e-4

    def test_kkt_along_full_path(self):
        X, y, _ = make_gaussian()
        Xs, _, _, _ = standardize(X)
        path = fit_path(Xs, y, "gaussian")
        for i, lam in enumerate(path.lambdas):
            v = kkt_max_violation(Xs, y, "gaussian", lam, path.intercepts[i], path.coefs[i])
            assert v <= 1e-5, f"KKT violation {v:.2e} at lambda index {i}"

    def test_objective_monotone_over_sweeps(self):
        X, y, _ = make_gaussian(seed=2, n=80)
        Xs, _, _, _ = standardize(X)
        trace: dict = {}
        fit_path(Xs, y, "gaussian", trace=trace)
        assert trace
        for lam, objs in trace.items():
            diffs = np.diff(objs)
            assert np.all(diffs <= 1e-12), f"objective rose at lambda={lam:g}"

    def test_budget_exhaustion_names_lambda(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(40, 3))
        X[:, 1] = X[:, 0] + 0.05 * rng.normal(size=40)
        y = X[:, 0] - X[:, 1] + rng.normal(size=40)
        Xs, _, _, _ = standardize(X)
        lam = lambda_max(Xs, y) * 1e-4
        with pytest.raises(ConvergenceError, match=f"{lam:g}"):
            _gaussian_cd(Xs, y, lam, np.zeros(3), budget=1)


class TestPoissonOracle:
    def test_deep_path_matches_newton(self):
        X, y, _ = make_poisson()
        Xs, _, _, _ = standardize(X)
        lmax = lambda_max(Xs, y)
        lams = np.geomspace(lmax, lmax * 1e-6, 120)
        path = fit_path(Xs, y, "poisson", lambdas=lams)
        b0, beta = poisson_newton_oracle(Xs, y)
        assert np.max(np.abs(path.coefs[-1] - beta)) < 1e-4
        assert abs(path.intercepts[-1] - b0) < 1e-4

    def test_recovers_truth_large_sample(self):
        X, y, beta_true = make_poisson(seed=4, n=2000)
        Xs, means, sds, _ = standardize(X)
        path = fit_path(Xs, y, "poisson")
        coef = path.coefs[-1] / sds
        intercept = path.intercepts[-1] - np.sum(path.coefs[-1] * means / sds)
        assert np.max(np.abs(coef - beta_true)) < 0.1
        assert abs(intercept - 1.0) < 0.1

    def test_kkt_along_full_path(self):
        X, y, _ = make_poisson(seed=9, n=200)
        Xs, _, _, _ = standardize(X)
        path = fit_path(Xs, y, "poisson")
        for i, lam in enumerate(path.lambdas):
            v = kkt_max_violation(Xs, y, "poisson", lam, path.intercepts[i], path.coefs[i])
            assert v <= 1e-5, f"KKT violation {v:.2e} at lambda index {i}"


class TestFolds:
    def test_sizes_and_determinism(self):
        folds = fold_assignments(103, 5, seed=42)
        sizes = np.bincount(folds)
        assert len(sizes) == 5
        assert sizes.max() - sizes.min() <= 1
        assert np.array_equal(folds, fold_assignments(103, 5, seed=42))
        assert not np.array_equal(folds, fold_assignments(103, 5, seed=43))

    def test_checksum_is_stable_hex(self):
        folds = fold_assignments(50, 5, seed=1)
        c = fold_checksum(folds)
        assert len(c) == 16
        assert c == fold_checksum(folds)
        assert c != fold_checksum(fold_assignments(50, 5, seed=2))

    def test_too_few_observations(self):
        with pytest.raises(ValueError, match="cannot split"):
            fold_assignments(3, 5, seed=0)
        with pytest.raises(ValueError, match="at least 2 folds"):
            fold_assignments(10, 1, seed=0)


class TestCrossValidate:
    def test_noiseless_linear_min_near_zero(self):
        X, y, _ = make_gaussian(seed=1, n=80, noise=0.0)
        cv = cross_validate(X, y, "gaussian", k=5, seed=0)
        assert cv.cv_mean.min() < 1e-4 * y.var()

    def test_same_folds_across_families(self):
        X, y, _ = make_poisson(seed=2, n=100)
        a = cross_validate(X, y, "gaussian", k=5, seed=7)
        b = cross_validate(X, y, "poisson", k=5, seed=7)
        assert np.array_equal(a.folds, b.folds)

    def test_oof_shape_and_poisson_positive(self):
        X, y, _ = make_poisson(seed=3, n=90)
        cv = cross_validate(X, y, "poisson", k=5, seed=0)
        assert cv.oof_predictions.shape == (90, len(cv.lambdas))
        assert np.all(cv.oof_predictions > 0.0)

    def test_undersized_fold_rejected(self):
        X, y, _ = make_gaussian(seed=0, n=9, J=2)
        with pytest.raises(ValueError, match="fewer than 2"):
            cross_validate(X, y, "gaussian", k=5, seed=0)


class TestSelectLambda1se:
    def test_hand_case(self):
        lambdas = np.array([4.0, 3.0, 2.0, 1.0])
        means = np.array([10.0, 5.0, 4.0, 4.5])
        ses = np.array([1.0, 1.0, 0.6, 1.0])
        # min at lambda=2 (mean 4, se 0.6), cutoff 4.6: lambda=3 misses, 2 qualifies
        assert select_lambda_1se(lambdas, means, ses) == 2

    def test_flat_curve_picks_largest(self):
        lambdas = np.geomspace(4, 0.1, 6)
        assert select_lambda_1se(lambdas, np.full(6, 3.0), np.full(6, 0.2)) == 0

    def test_monotone_curve_tiny_se_picks_minimum(self):
        lambdas = np.array([5.0, 4.0, 3.0, 2.0, 1.0])
        means = np.array([5.0, 4.0, 3.0, 2.0, 1.0])
        assert select_lambda_1se(lambdas, means, np.full(5, 1e-9)) == 4


class TestPureNoiseNullSelection:
    def test_null_model_chosen_in_95_of_100_trials(self):
        hits = 0
        for trial in range(100):
            rng = np.random.default_rng(1000 + trial)
            X = rng.normal(size=(40, 6))
            y = rng.normal(size=40)
            Xs, _, _, _ = standardize(X)
            lams = np.geomspace(lambda_max(Xs, y), lambda_max(Xs, y) * 0.05, 25)
            cv = cross_validate(X, y, "gaussian", k=5, seed=trial, lambdas=lams)
            idx = select_lambda_1se(cv.lambdas, cv.cv_mean, cv.cv_se)
            path = fit_path(Xs, y, "gaussian", lambdas=lams)
            if np.all(path.coefs[idx] == 0.0):
                hits += 1
        assert hits >= 95, f"null model selected in only {hits}/100 trials"


class TestSelectFamily:
    def test_negative_response_excludes_poisson(self):
        X, y, _ = make_gaussian()
        assert select_family(X, y - y.max(), k=5, seed=0) == "gaussian"

    def test_poisson_counts_prefer_poisson(self):
        X, y, _ = make_poisson(seed=12, n=150)
        assert select_family(X, y, k=5, seed=0) == "poisson"

    def test_linear_positive_data_prefers_gaussian(self):
        rng = np.random.default_rng(21)
        X = rng.uniform(-1.5, 1.5, size=(150, 2))
        y = 6.0 + 2.5 * X[:, 0] + rng.normal(scale=0.5, size=150)
        assert np.all(y >= 0)
        assert select_family(X, y, k=5, seed=0) == "gaussian"


class TestFitLasso:
    def test_drops_constant_and_duplicate(self):
        X, y, _ = make_gaussian()
        X = np.column_stack([X, np.full(len(y), 3.0), X[:, 0]])
        names = ["a", "b", "c", "d", "e", "const", "dup"]
        fit, _ = fit_lasso(X, y, names, family="gaussian", seed=0)
        assert fit.dropped == {"const": "constant", "dup": "duplicate of a"}
        assert fit.names == ["a", "b", "c", "d", "e"]

    def test_all_columns_degenerate_rejected(self):
        y = np.arange(10.0)
        X = np.column_stack([np.ones(10), np.full(10, 2.0)])
        with pytest.raises(ValueError, match="constant or duplicates"):
            fit_lasso(X, y, ["a", "b"], family="gaussian")

    def test_selected_matches_nonzero(self):
        X, y, _ = make_gaussian(seed=3)
        fit, _ = fit_lasso(X, y, ["a", "b", "c", "d", "e"], family="gaussian", seed=1)
        nonzero = {n for n, c in fit.coef.items() if c != 0.0}
        assert set(fit.selected) == nonzero
        assert fit.chosen_lambda in fit.cv_lambdas

    def test_rescaling_leaves_predictions_unchanged(self):
        X, y, _ = make_gaussian(seed=6)
        names = ["a", "b", "c", "d", "e"]
        fit1, _ = fit_lasso(X, y, names, family="gaussian", seed=0)
        X2 = X.copy()
        X2[:, 2] *= 1000.0
        fit2, _ = fit_lasso(X2, y, names, family="gaussian", seed=0)
        p1 = predict(fit1, X, names)
        p2 = predict(fit2, X2, names)
        assert np.max(np.abs(p1 - p2)) < 1e-8
        assert fit1.selected == fit2.selected

    def test_auto_family_on_counts(self):
        X, y, _ = make_poisson(seed=13, n=150)
        fit, _ = fit_lasso(X, y, ["a", "b", "c"], seed=0)
        assert fit.family == "poisson"


class TestPredict:
    def test_name_mismatch_reported(self):
        X, y, _ = make_gaussian()
        fit, _ = fit_lasso(X, y, ["a", "b", "c", "d", "e"], family="gaussian")
        with pytest.raises(ValueError, match="missing.*'e'.*extra.*'z'"):
            predict(fit, X, ["a", "b", "c", "d", "z"])

    def test_column_order_follows_names(self):
        X, y, _ = make_gaussian(seed=8)
        names = ["a", "b", "c", "d", "e"]
        fit, _ = fit_lasso(X, y, names, family="gaussian")
        base = predict(fit, X, names)
        shuffled = predict(fit, X[:, ::-1], names[::-1])
        assert np.array_equal(base, shuffled)

    def test_zero_coefficients_give_constant(self):
        fit = LassoFit(
            family="gaussian", names=["a"], chosen_lambda=1.0, intercept=4.5,
            coef={"a": 0.0}, selected=[], means={"a": 0.0}, sds={"a": 1.0},
        )
        out = predict(fit, np.random.default_rng(0).normal(size=(10, 1)), ["a"])
        assert np.all(out == 4.5)

    def test_poisson_predictions_positive(self):
        X, y, _ = make_poisson(seed=14, n=120)
        fit, _ = fit_lasso(X, y, ["a", "b", "c"], family="poisson")
        probe = np.random.default_rng(1).normal(scale=5, size=(200, 3))
        assert np.all(predict(fit, probe, ["a", "b", "c"]) > 0.0)


class TestSerialization:
    def test_round_trip(self):
        X, y, _ = make_poisson(seed=15, n=120)
        fit, _ = fit_lasso(X, y, ["a", "b", "c"], family="poisson", seed=3)
        doc = json.loads(json.dumps(fit_to_dict(fit)))
        back = fit_from_dict(doc)
        assert back == fit
        assert np.array_equal(predict(back, X, ["a", "b", "c"]), predict(fit, X, ["a", "b", "c"]))

    def test_unknown_format_rejected(self):
        with pytest.raises(ValueError, match="format"):
            fit_from_dict({"format": "lasso-fit/99"})
