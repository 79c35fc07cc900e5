"""L1-regularized GLMs for feature selection: Gaussian and Poisson families.

The Gaussian solver is cyclic coordinate descent with soft-thresholding on
the objective (1/2n)||y - b0 - X b||^2 + lambda*||b||_1, fitted on
standardized covariates. The Poisson solver wraps the same weighted
coordinate descent in an IRLS loop (log link, working response and weights
refreshed each outer iteration). Paths run over a geometric lambda grid from
lambda_max (where the null model is optimal) with warm starts.

Model selection follows the cross-validation protocol: K seeded folds,
response-scale MSE for both families, the one-standard-error lambda rule,
and family choice by the smaller minimum CV MSE.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cv import fold_assignments

FAMILIES = ("gaussian", "poisson")

# eta is clipped before exponentiation so Poisson means, weights, and
# predictions stay finite and nonzero
_ETA_MAX = 30.0

CONVERGENCE_TOL = 1e-7
MAX_SWEEPS = 100_000
PATH_LENGTH = 100
PATH_RATIO = 1e-4


class ConvergenceError(RuntimeError):
    pass


@dataclass
class LassoPath:
    """Coefficients (standardized scale) along a decreasing lambda grid."""

    family: str
    lambdas: np.ndarray
    intercepts: np.ndarray
    coefs: np.ndarray  # shape (n_lambdas, n_features)


@dataclass
class CvResult:
    lambdas: np.ndarray
    cv_mean: np.ndarray
    cv_se: np.ndarray
    oof_predictions: np.ndarray  # response scale, shape (n, n_lambdas)
    folds: np.ndarray


@dataclass
class LassoFit:
    """Final fitted model on the original covariate scale."""

    family: str
    names: list[str]
    chosen_lambda: float
    intercept: float
    coef: dict[str, float]
    selected: list[str]
    means: dict[str, float]
    sds: dict[str, float]
    dropped: dict[str, str] = field(default_factory=dict)
    folds_seed: int | None = None
    cv_lambdas: list[float] = field(default_factory=list)
    cv_mean: list[float] = field(default_factory=list)
    cv_se: list[float] = field(default_factory=list)


def _check_family(family: str) -> None:
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")


def standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Center and scale columns; sd uses denominator n.

    Constant columns get sd 1 (leaving them all-zero) and are flagged; a
    flagged column can never be selected.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("standardize needs a 2-d matrix with at least 2 rows")
    means = X.mean(axis=0)
    sds = X.std(axis=0)
    constant = sds <= 1e-15
    sds = np.where(constant, 1.0, sds)
    return (X - means) / sds, means, sds, constant


def soft_threshold(rho: float, lam: float) -> float:
    if rho > lam:
        return rho - lam
    if rho < -lam:
        return rho + lam
    return 0.0


def lambda_max(Xs: np.ndarray, y: np.ndarray) -> float:
    """Smallest lambda whose optimum is the null model.

    At the null model both families reduce to the same score: the working
    residual is y - ybar, so lambda_max = max_j |x_j'(y - ybar)|/n. Computed
    with the same per-column dot products as the coordinate updates so that
    the path start yields bit-exact zero coefficients.
    """
    n = len(y)
    r = y - y.mean()
    lmax = max(abs(float(Xs[:, j] @ r)) / n for j in range(Xs.shape[1]))
    if lmax <= 0.0:
        raise ValueError("response is constant; no regularization path exists")
    return lmax


def default_lambdas(lmax: float) -> np.ndarray:
    return np.geomspace(lmax, lmax * PATH_RATIO, PATH_LENGTH)


def _gaussian_cd(
    Xs: np.ndarray,
    y: np.ndarray,
    lam: float,
    beta: np.ndarray,
    budget: int,
    trace: list | None = None,
) -> tuple[np.ndarray, float, int]:
    n = len(y)
    b0 = float(y.mean())  # columns are centered, so the intercept decouples
    r = y - b0 - Xs @ beta
    # alternate sweeps over the active set with full sweeps; convergence is
    # only declared when a full sweep certifies every coordinate
    active: list[int] | None = None
    for sweep in range(budget):
        if trace is not None:
            trace.append(0.5 * float(r @ r) / n + lam * float(np.abs(beta).sum()))
        cols = range(Xs.shape[1]) if active is None else active
        max_delta = 0.0
        for j in cols:
            old = beta[j]
            rho = float(Xs[:, j] @ r) / n + old
            new = soft_threshold(rho, lam)
            if new != old:
                r += Xs[:, j] * (old - new)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta < CONVERGENCE_TOL:
            if active is None:
                return beta, b0, sweep + 1
            active = None
        elif active is None:
            active = np.flatnonzero(beta).tolist()
    raise ConvergenceError(f"coordinate descent did not converge at lambda={lam:g}")


def _weighted_cd(
    Xs: np.ndarray,
    z: np.ndarray,
    w: np.ndarray,
    lam: float,
    beta: np.ndarray,
    b0: float,
    budget: int,
) -> tuple[np.ndarray, float, int]:
    n = len(z)
    wsum = float(w.sum())
    denom = (w @ (Xs * Xs)) / n
    r = z - b0 - Xs @ beta
    for sweep in range(budget):
        max_delta = 0.0
        for j in range(Xs.shape[1]):
            if denom[j] <= 0.0:
                continue
            old = beta[j]
            rho = float((w * Xs[:, j]) @ r) / n + denom[j] * old
            new = soft_threshold(rho, lam) / denom[j]
            if new != old:
                r += Xs[:, j] * (old - new)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        shift = float(w @ r) / wsum
        if shift != 0.0:
            b0 += shift
            r -= shift
            max_delta = max(max_delta, abs(shift))
        if max_delta < CONVERGENCE_TOL:
            return beta, b0, sweep + 1
    raise ConvergenceError(
        f"weighted coordinate descent did not converge at lambda={lam:g}"
    )


def _poisson_solve(
    Xs: np.ndarray,
    y: np.ndarray,
    lam: float,
    beta: np.ndarray,
    b0: float,
    budget: int,
) -> tuple[np.ndarray, float, int]:
    n = len(y)
    if not beta.any():
        # null-model KKT certificate: at beta = 0 the optimal intercept is
        # log ybar, where the gradient matches the Gaussian score exactly
        r = y - y.mean()
        g = max(abs(float(Xs[:, j] @ r)) / n for j in range(Xs.shape[1]))
        if g <= lam:
            return beta, float(np.log(y.mean())), 0
    used = 0
    for _ in range(200):
        beta_prev = beta.copy()
        b0_prev = b0
        eta = np.clip(b0 + Xs @ beta, -_ETA_MAX, _ETA_MAX)
        mu = np.exp(eta)
        z = eta + (y - mu) / mu
        beta, b0, sweeps = _weighted_cd(Xs, z, mu, lam, beta, b0, budget - used)
        used += sweeps
        if max(np.max(np.abs(beta - beta_prev)), abs(b0 - b0_prev)) < CONVERGENCE_TOL:
            return beta, b0, used
        if used >= budget:
            break
    raise ConvergenceError(f"IRLS did not converge at lambda={lam:g}")


def fit_path(
    Xs: np.ndarray,
    y: np.ndarray,
    family: str,
    lambdas: np.ndarray | None = None,
    trace: dict | None = None,
) -> LassoPath:
    """Solve the LASSO along a decreasing lambda grid with warm starts.

    Xs must be standardized. With the default grid, the first lambda is
    lambda_max, where every coefficient is exactly zero. `trace`, when given,
    collects the per-sweep Gaussian objective for each lambda (diagnostics).
    """
    _check_family(family)
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("response contains non-finite values")
    if family == "poisson":
        if np.any(y < 0):
            raise ValueError("Poisson requires nonnegative responses")
        if y.mean() <= 0:
            raise ValueError("Poisson requires a positive mean response")
    if lambdas is None:
        lambdas = default_lambdas(lambda_max(Xs, y))
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(np.diff(lambdas) >= 0) or np.any(lambdas <= 0):
        raise ValueError("lambdas must be positive and strictly decreasing")

    n_lam, J = len(lambdas), Xs.shape[1]
    coefs = np.zeros((n_lam, J))
    intercepts = np.zeros(n_lam)
    beta = np.zeros(J)
    b0 = float(y.mean()) if family == "gaussian" else float(np.log(y.mean()))
    for i, lam in enumerate(lambdas):
        lam_trace: list | None = None
        if trace is not None:
            lam_trace = trace.setdefault(float(lam), [])
        if family == "gaussian":
            beta, b0, _ = _gaussian_cd(Xs, y, lam, beta, MAX_SWEEPS, lam_trace)
        else:
            beta, b0, _ = _poisson_solve(Xs, y, lam, beta, b0, MAX_SWEEPS)
        coefs[i] = beta
        intercepts[i] = b0
    return LassoPath(family=family, lambdas=lambdas, intercepts=intercepts, coefs=coefs)


def kkt_max_violation(
    Xs: np.ndarray, y: np.ndarray, family: str, lam: float, intercept: float,
    beta: np.ndarray,
) -> float:
    """Worst violation of the subgradient optimality conditions.

    Active coordinates must have |gradient| == lambda, inactive ones
    |gradient| <= lambda; the returned value is the largest excess.
    """
    n = len(y)
    eta = intercept + Xs @ beta
    if family == "gaussian":
        grad = Xs.T @ (eta - y) / n
    else:
        mu = np.exp(np.clip(eta, -_ETA_MAX, _ETA_MAX))
        grad = Xs.T @ (mu - y) / n
    active = beta != 0.0
    worst = 0.0
    if np.any(active):
        worst = float(np.max(np.abs(np.abs(grad[active]) - lam)))
    if np.any(~active):
        worst = max(worst, float(np.max(np.abs(grad[~active]) - lam, initial=0.0)))
    return worst


def _response_scale(eta: np.ndarray, family: str) -> np.ndarray:
    if family == "poisson":
        return np.exp(np.clip(eta, -_ETA_MAX, _ETA_MAX))
    return eta


def cv_predict(
    X: np.ndarray,
    y: np.ndarray,
    family: str,
    lambdas: np.ndarray,
    folds: np.ndarray,
) -> np.ndarray:
    """Out-of-fold response-scale predictions for every lambda."""
    n = len(y)
    oof = np.empty((n, len(lambdas)))
    for k in range(int(folds.max()) + 1):
        test = folds == k
        if test.sum() < 2:
            raise ValueError(f"fold {k} has fewer than 2 observations")
        train = ~test
        Xs_tr, means, sds, _ = standardize(X[train])
        path = fit_path(Xs_tr, y[train], family, lambdas)
        Xs_te = (X[test] - means) / sds
        eta = path.intercepts[None, :] + Xs_te @ path.coefs.T
        oof[test] = _response_scale(eta, family)
    return oof


def cross_validate(
    X: np.ndarray,
    y: np.ndarray,
    family: str,
    k: int = 5,
    seed: int = 0,
    lambdas: np.ndarray | None = None,
) -> CvResult:
    """Per-lambda CV mean squared error (response scale) and its fold SE."""
    _check_family(family)
    y = np.asarray(y, dtype=float)
    if lambdas is None:
        Xs, _, _, _ = standardize(X)
        lambdas = default_lambdas(lambda_max(Xs, y))
    folds = fold_assignments(len(y), k, seed)
    oof = cv_predict(X, y, family, lambdas, folds)
    fold_mse = np.stack(
        [np.mean((y[folds == i, None] - oof[folds == i]) ** 2, axis=0) for i in range(k)]
    )
    return CvResult(
        lambdas=np.asarray(lambdas, dtype=float),
        cv_mean=fold_mse.mean(axis=0),
        cv_se=fold_mse.std(axis=0, ddof=1) / np.sqrt(k),
        oof_predictions=oof,
        folds=folds,
    )


def select_lambda_1se(lambdas: np.ndarray, cv_mean: np.ndarray, cv_se: np.ndarray) -> int:
    """Index of the largest lambda within one SE of the minimum CV error."""
    best = int(np.argmin(cv_mean))
    cutoff = cv_mean[best] + cv_se[best]
    for i in range(len(lambdas)):  # lambdas decrease, so scan from the largest
        if cv_mean[i] <= cutoff:
            return i
    return best


def select_family(X: np.ndarray, y: np.ndarray, k: int = 5, seed: int = 0) -> str:
    """Family with the smaller minimum CV MSE; ties and negative y → Gaussian."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        return "gaussian"
    gaussian = cross_validate(X, y, "gaussian", k, seed)
    poisson = cross_validate(X, y, "poisson", k, seed)
    if poisson.cv_mean.min() < gaussian.cv_mean.min():
        return "poisson"
    return "gaussian"


def _drop_redundant(
    X: np.ndarray, names: list[str]
) -> tuple[np.ndarray, list[str], dict[str, str]]:
    dropped: dict[str, str] = {}
    keep: list[int] = []
    seen: dict[bytes, str] = {}
    sds = X.std(axis=0)
    for j, name in enumerate(names):
        if sds[j] <= 1e-15:
            dropped[name] = "constant"
            continue
        key = X[:, j].tobytes()
        if key in seen:
            dropped[name] = f"duplicate of {seen[key]}"
            continue
        seen[key] = name
        keep.append(j)
    if not keep:
        raise ValueError("all covariate columns are constant or duplicates")
    return X[:, keep], [names[j] for j in keep], dropped


def fit_lasso(
    X: np.ndarray,
    y: np.ndarray,
    names: list[str],
    family: str | None = None,
    k: int = 5,
    seed: int = 0,
) -> tuple[LassoFit, CvResult]:
    """Full selection protocol: CV path, 1-SE lambda, refit, destandardize."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    X, names, dropped = _drop_redundant(X, list(names))
    if family is None:
        family = select_family(X, y, k, seed)
    cv = cross_validate(X, y, family, k, seed)
    idx = select_lambda_1se(cv.lambdas, cv.cv_mean, cv.cv_se)
    Xs, means, sds, _ = standardize(X)
    path = fit_path(Xs, y, family, cv.lambdas)
    beta_std = path.coefs[idx]
    coef = beta_std / sds
    intercept = float(path.intercepts[idx] - np.sum(beta_std * means / sds))
    fit = LassoFit(
        family=family,
        names=names,
        chosen_lambda=float(cv.lambdas[idx]),
        intercept=intercept,
        coef={n: float(c) for n, c in zip(names, coef)},
        selected=[n for n, c in zip(names, beta_std) if c != 0.0],
        means={n: float(m) for n, m in zip(names, means)},
        sds={n: float(s) for n, s in zip(names, sds)},
        dropped=dropped,
        folds_seed=seed,
        cv_lambdas=[float(v) for v in cv.lambdas],
        cv_mean=[float(v) for v in cv.cv_mean],
        cv_se=[float(v) for v in cv.cv_se],
    )
    return fit, cv


def predict(fit: LassoFit, X: np.ndarray, names: list[str]) -> np.ndarray:
    """Response-scale predictions; X columns are matched to the fit by name."""
    missing = [n for n in fit.names if n not in names]
    extra = [n for n in names if n not in fit.names]
    if missing or extra:
        raise ValueError(
            f"covariate mismatch: missing {missing or 'none'}, extra {extra or 'none'}"
        )
    order = [names.index(n) for n in fit.names]
    coef = np.array([fit.coef[n] for n in fit.names])
    eta = fit.intercept + np.asarray(X, dtype=float)[:, order] @ coef
    return _response_scale(eta, fit.family)


def fit_to_dict(fit: LassoFit) -> dict:
    return {
        "format": "lasso-fit/1",
        "family": fit.family,
        "names": fit.names,
        "chosen_lambda": fit.chosen_lambda,
        "intercept": fit.intercept,
        "coef": fit.coef,
        "selected": fit.selected,
        "means": fit.means,
        "sds": fit.sds,
        "dropped": fit.dropped,
        "folds_seed": fit.folds_seed,
        "cv": {
            "lambdas": fit.cv_lambdas,
            "mean": fit.cv_mean,
            "se": fit.cv_se,
        },
    }


def fit_from_dict(doc: dict) -> LassoFit:
    if doc.get("format") != "lasso-fit/1":
        raise ValueError(f"unsupported fit document format {doc.get('format')!r}")
    return LassoFit(
        family=doc["family"],
        names=list(doc["names"]),
        chosen_lambda=float(doc["chosen_lambda"]),
        intercept=float(doc["intercept"]),
        coef={k: float(v) for k, v in doc["coef"].items()},
        selected=list(doc["selected"]),
        means={k: float(v) for k, v in doc["means"].items()},
        sds={k: float(v) for k, v in doc["sds"].items()},
        dropped=dict(doc.get("dropped", {})),
        folds_seed=doc.get("folds_seed"),
        cv_lambdas=list(doc.get("cv", {}).get("lambdas", [])),
        cv_mean=list(doc.get("cv", {}).get("mean", [])),
        cv_se=list(doc.get("cv", {}).get("se", [])),
    )
