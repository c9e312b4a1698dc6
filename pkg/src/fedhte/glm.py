"""Maximum-likelihood nuisance models: propensity score and outcome regression.

Logistic fits use iteratively reweighted least squares with step-halving,
which keeps the log-likelihood non-decreasing across accepted steps.  Linear
fits use a rank-revealing (column-pivoted) QR factorization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr as _pivoted_qr
from scipy.special import expit

from .errors import DesignError
from .tables import ObservationTable

MAX_IRLS_ITER = 100
SCORE_TOL_PER_ROW = 1e-8
SEPARATION_NORM = 30.0
RIDGE_EPS = 1e-8


@dataclass(frozen=True)
class GlmSpec:
    """Working form of a nuisance model.

    ``predictor_columns`` restricts which covariates enter the linear
    predictor; misspecified simulation models are expressed by shrinking
    this list.  The treatment main effect and treatment-by-covariate
    interactions are included only for outcome-regression specs.
    """

    family: str
    predictor_columns: tuple[str, ...]
    include_intercept: bool = True
    include_treatment_main_and_interactions: bool = False

    def __post_init__(self):
        if self.family not in ("bernoulli_logit", "gaussian_identity"):
            raise DesignError(f"unknown GLM family {self.family!r}")
        object.__setattr__(self, "predictor_columns", tuple(self.predictor_columns))

    def term_labels(self) -> tuple[str, ...]:
        labels: list[str] = []
        if self.include_intercept:
            labels.append("intercept")
        if self.include_treatment_main_and_interactions:
            labels.append("treatment")
        labels.extend(self.predictor_columns)
        if self.include_treatment_main_and_interactions:
            labels.extend(f"treatment:{c}" for c in self.predictor_columns)
        return tuple(labels)


def ps_spec(predictor_columns) -> GlmSpec:
    """Propensity-score spec: logistic regression of treatment on covariates."""
    return GlmSpec(family="bernoulli_logit", predictor_columns=tuple(predictor_columns))


def or_spec(family: str, predictor_columns) -> GlmSpec:
    """Outcome-regression spec with treatment main effect and interactions."""
    return GlmSpec(
        family=family,
        predictor_columns=tuple(predictor_columns),
        include_treatment_main_and_interactions=True,
    )


@dataclass(frozen=True)
class NuisanceFit:
    coefficients: np.ndarray
    spec: GlmSpec
    role: str  # "ps" or "or"
    converged: bool
    iterations: int
    deviance: float
    separation: bool = False
    ridged: bool = False

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=float)
        object.__setattr__(self, "coefficients", coef)
        if self.converged and not np.isfinite(coef).all():
            raise DesignError("converged fit has non-finite coefficients")


def _check_rank(rows: np.ndarray, what: str) -> None:
    n, d = rows.shape
    if n < d:
        raise DesignError(f"{what}: n={n} rows for d={d} columns")
    gram = rows.T @ rows
    eigvals = np.linalg.eigvalsh(gram)
    if eigvals[0] <= 1e-12 * max(eigvals[-1], 1.0):
        raise DesignError(f"{what}: design matrix is rank deficient")


def _bernoulli_loglik(rows, y, coef):
    eta = rows @ coef
    # log p(y) = y*eta - log(1 + exp(eta)), stable via logaddexp
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_logistic(
    rows: np.ndarray,
    labels: np.ndarray,
    spec: GlmSpec | None = None,
    role: str = "ps",
    init: np.ndarray | None = None,
    check_rank: bool = True,
) -> NuisanceFit:
    """Logistic regression by IRLS with step-halving.

    Non-convergence is reported through ``converged=False`` rather than an
    exception so that Monte Carlo loops can count and skip failed fits.
    Perfect separation is flagged when the coefficient norm diverges.
    """
    rows = np.asarray(rows, dtype=float)
    y = np.asarray(labels, dtype=float)
    n, d = rows.shape
    if check_rank:
        _check_rank(rows, "logistic fit")
    coef = np.zeros(d) if init is None else np.asarray(init, dtype=float).copy()
    tol = SCORE_TOL_PER_ROW * n
    loglik = _bernoulli_loglik(rows, y, coef)
    ridged = False
    converged = False
    iterations = 0
    for iterations in range(1, MAX_IRLS_ITER + 1):
        p = expit(rows @ coef)
        score = rows.T @ (y - p)
        if np.max(np.abs(score)) < tol:
            converged = True
            iterations -= 1
            break
        w = p * (1.0 - p)
        gram = (rows * w[:, None]).T @ rows
        try:
            step = np.linalg.solve(gram, score)
        except np.linalg.LinAlgError:
            gram = gram + RIDGE_EPS * np.eye(d)
            step = np.linalg.solve(gram, score)
            ridged = True
        # step-halving keeps the log-likelihood non-decreasing
        scale = 1.0
        for _ in range(40):
            candidate = coef + scale * step
            cand_loglik = _bernoulli_loglik(rows, y, candidate)
            if cand_loglik >= loglik:
                break
            scale *= 0.5
        else:
            break  # no improving step found
        coef = candidate
        loglik = cand_loglik
    else:
        p = expit(rows @ coef)
        score = rows.T @ (y - p)
        converged = bool(np.max(np.abs(score)) < tol)

    separation = bool(np.max(np.abs(coef)) > SEPARATION_NORM)
    if spec is None:
        spec = GlmSpec(family="bernoulli_logit", predictor_columns=())
    return NuisanceFit(
        coefficients=coef,
        spec=spec,
        role=role,
        converged=converged,
        iterations=iterations,
        deviance=-2.0 * loglik,
        separation=separation,
        ridged=ridged,
    )


def fit_linear(
    rows: np.ndarray,
    response: np.ndarray,
    spec: GlmSpec | None = None,
    role: str = "or",
    column_names: tuple[str, ...] | None = None,
) -> NuisanceFit:
    """Least squares via column-pivoted QR; rank deficiency is fatal."""
    rows = np.asarray(rows, dtype=float)
    y = np.asarray(response, dtype=float)
    n, d = rows.shape
    if n < d:
        raise DesignError(f"linear fit: n={n} rows for d={d} columns")
    q_mat, r_mat, perm = _pivoted_qr(rows, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r_mat))
    rank = int(np.sum(diag > max(n, d) * np.finfo(float).eps * diag.max())) if diag.max() > 0 else 0
    if rank < d:
        dependent = perm[rank:]
        if column_names is not None:
            named = [column_names[j] for j in dependent]
        else:
            named = list(map(int, dependent))
        raise DesignError(f"linear fit: rank deficient design; dependent columns {named}")
    z = q_mat.T @ y
    coef_perm = np.linalg.solve(r_mat, z)
    coef = np.empty(d)
    coef[perm] = coef_perm
    resid = y - rows @ coef
    if spec is None:
        spec = GlmSpec(family="gaussian_identity", predictor_columns=())
    return NuisanceFit(
        coefficients=coef,
        spec=spec,
        role=role,
        converged=True,
        iterations=1,
        deviance=float(resid @ resid),
    )


def ps_design_matrix(table: ObservationTable, spec: GlmSpec) -> np.ndarray:
    cols = [table.column(c) for c in spec.predictor_columns]
    parts = []
    if spec.include_intercept:
        parts.append(np.ones(table.n))
    parts.extend(cols)
    return np.column_stack(parts)


def or_design_matrix(
    table: ObservationTable, spec: GlmSpec, a: int | None = None
) -> np.ndarray:
    """Outcome-model design; ``a=None`` uses the observed treatment column."""
    treat = table.treatment if a is None else np.full(table.n, float(a))
    cols = [table.column(c) for c in spec.predictor_columns]
    parts = []
    if spec.include_intercept:
        parts.append(np.ones(table.n))
    if spec.include_treatment_main_and_interactions:
        parts.append(treat)
    parts.extend(cols)
    if spec.include_treatment_main_and_interactions:
        parts.extend(treat * c for c in cols)
    return np.column_stack(parts)


def fit_propensity(table: ObservationTable, spec: GlmSpec, **kwargs) -> NuisanceFit:
    if spec.family != "bernoulli_logit":
        raise DesignError("propensity model must be bernoulli_logit")
    rows = ps_design_matrix(table, spec)
    return fit_logistic(rows, table.treatment, spec=spec, role="ps", **kwargs)


def fit_outcome(table: ObservationTable, spec: GlmSpec, **kwargs) -> NuisanceFit:
    rows = or_design_matrix(table, spec)
    if spec.family == "bernoulli_logit":
        return fit_logistic(rows, table.outcome, spec=spec, role="or", **kwargs)
    kwargs.pop("init", None)
    kwargs.pop("check_rank", None)
    return fit_linear(
        rows, table.outcome, spec=spec, role="or",
        column_names=spec.term_labels(), **kwargs,
    )


def predict_ps(fit: NuisanceFit, table: ObservationTable, a: int) -> np.ndarray:
    """Fitted treatment probability ``P(A=a | X)`` for every row."""
    if fit.role != "ps" or fit.spec.family != "bernoulli_logit":
        raise DesignError("predict_ps requires a bernoulli_logit propensity fit")
    p1 = expit(ps_design_matrix(table, fit.spec) @ fit.coefficients)
    return p1 if a == 1 else 1.0 - p1


def predict_or(fit: NuisanceFit, table: ObservationTable, a: int) -> np.ndarray:
    """Fitted outcome surface at counterfactual treatment level ``a``."""
    if fit.role != "or":
        raise DesignError("predict_or requires an outcome-regression fit")
    linear = or_design_matrix(table, fit.spec, a=a) @ fit.coefficients
    if fit.spec.family == "bernoulli_logit":
        return expit(linear)
    return linear
