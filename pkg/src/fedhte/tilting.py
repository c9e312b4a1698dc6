"""Exponential-tilting density ratio calibrating a source site to the target.

The ratio ``tau(x) = exp(alpha' r(x))`` is fitted by moment matching: the
tilted source sample means of ``r(x)`` must equal the target sample means.
By default a constant 1 is prepended to ``r`` so the system is square and
the fitted ratio averages to one over the source sample.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DesignError
from .tables import ObservationTable

MAX_NEWTON_ITER = 100
MOMENT_TOL = 1e-8
ESS_WARN_FRACTION = 0.1


@dataclass(frozen=True)
class TiltSpec:
    """Feature map for the density-ratio model.

    ``r_columns`` selects the covariates entering ``r(x)``; with
    ``include_normalization`` a leading constant feature forces the fitted
    weights to average to one over the source sample.
    """

    r_columns: tuple[str, ...]
    include_normalization: bool = True

    def __post_init__(self):
        cols = tuple(self.r_columns)
        if not cols:
            raise DesignError("tilt feature map needs at least one covariate")
        object.__setattr__(self, "r_columns", cols)

    def feature_matrix(self, table: ObservationTable) -> np.ndarray:
        cols = [table.column(c) for c in self.r_columns]
        if self.include_normalization:
            return np.column_stack([np.ones(table.n), *cols])
        return np.column_stack(cols)

    @property
    def dim(self) -> int:
        return len(self.r_columns) + (1 if self.include_normalization else 0)


def default_tilt_spec(table: ObservationTable) -> TiltSpec:
    return TiltSpec(r_columns=table.covariate_names)


@dataclass(frozen=True)
class TiltFit:
    alpha: np.ndarray
    spec: TiltSpec
    converged: bool
    iterations: int
    residual_norm: float
    max_weight: float
    ess: float

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))


def target_moments(table: ObservationTable, spec: TiltSpec) -> np.ndarray:
    """Sample mean of the tilt features over the target rows."""
    return spec.feature_matrix(table).mean(axis=0)


def kish_ess(weights: np.ndarray) -> float:
    total = float(weights.sum())
    squared = float((weights * weights).sum())
    return total * total / squared if squared > 0 else 0.0


def solve_tilt_alpha(
    features: np.ndarray, mu: np.ndarray, init: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, bool, int, float]:
    """Newton solve of the moment-matching equations on a feature matrix.

    Returns ``(alpha, weights, converged, iterations, residual_norm)``.
    """
    features = np.asarray(features, dtype=float)
    mu = np.asarray(mu, dtype=float)
    n, d = features.shape
    if mu.shape != (d,):
        raise DesignError(
            f"target moment vector has length {mu.shape[0]}, features have {d}"
        )
    if n < d:
        raise DesignError(f"tilt fit: n={n} source rows for {d} moment equations")

    def residual(alpha):
        exponent = features @ alpha
        if np.max(exponent) > 700.0:
            return None, np.inf
        w = np.exp(exponent)
        res = features.T @ w / n - mu
        return w, float(np.max(np.abs(res)))

    alpha = np.zeros(d) if init is None else np.asarray(init, dtype=float).copy()
    weights, res_norm = residual(alpha)
    if weights is None:
        alpha = np.zeros(d)
        weights, res_norm = residual(alpha)
    converged = res_norm < MOMENT_TOL
    iterations = 0
    while not converged and iterations < MAX_NEWTON_ITER:
        iterations += 1
        jac = (features * weights[:, None]).T @ features / n
        res = features.T @ weights / n - mu
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            jac = jac + 1e-10 * np.eye(d)
            step = np.linalg.solve(jac, -res)
        scale = 1.0
        improved = False
        for _ in range(50):
            cand = alpha + scale * step
            cand_w, cand_norm = residual(cand)
            if cand_w is not None and cand_norm < res_norm:
                alpha, weights, res_norm = cand, cand_w, cand_norm
                improved = True
                break
            scale *= 0.5
        if not improved:
            break
        converged = res_norm < MOMENT_TOL
    if converged and not (np.isfinite(weights).all() and (weights > 0).all()):
        converged = False
    return alpha, weights, converged, iterations, res_norm


def fit_tilt(
    source: ObservationTable,
    target_moment_vector: np.ndarray,
    spec: TiltSpec,
    init: np.ndarray | None = None,
    warn_on_degeneracy: bool = True,
) -> TiltFit:
    """Fit the density-ratio coefficients for one source site.

    Non-convergence (for example when the target moments lie outside the
    convex hull of the source features, a covariate-support violation) is
    reported through ``converged=False`` with the residual attached.
    """
    features = spec.feature_matrix(source)
    alpha, weights, converged, iterations, res_norm = solve_tilt_alpha(
        features, target_moment_vector, init=init
    )
    ess = kish_ess(weights) if np.isfinite(weights).all() else 0.0
    if warn_on_degeneracy and converged and ess < ESS_WARN_FRACTION * source.n:
        warnings.warn(
            f"tilt weights for site {source.site_id!r} are degenerate: "
            f"ESS {ess:.1f} of n={source.n}",
            stacklevel=2,
        )
    return TiltFit(
        alpha=alpha,
        spec=spec,
        converged=converged,
        iterations=iterations,
        residual_norm=res_norm,
        max_weight=float(np.max(weights)) if weights.size else 0.0,
        ess=ess,
    )


def tilt_weights(fit: TiltFit, table: ObservationTable) -> np.ndarray:
    """Evaluate the fitted density ratio at every row of a table."""
    return np.exp(fit.spec.feature_matrix(table) @ fit.alpha)
