"""Doubly robust estimating equations: augmentation vectors and the solver.

The estimating equation splits into a residual part that never depends on
the working-model coefficients (the augmentation vector ``P``, computable
remotely) and a projection part ``Q`` evaluated on the target data.  The
solver exploits that split: ``P`` totals are accumulated once and stay
constant across Newton iterations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .design import HteEstimate, WorkingDesign, build_design_rows
from .errors import ConvergenceError, DesignError, PositivityError
from .glm import GlmSpec, NuisanceFit, fit_outcome, fit_propensity, or_spec, predict_or, predict_ps, ps_spec
from .links import LinkFunction
from .tables import ObservationTable
from .tilting import TiltFit, tilt_weights

SOLVE_TOL = 1e-9
MAX_SOLVE_ITER = 200


@dataclass(frozen=True)
class AugmentationVector:
    """A site's fixed-dimension aggregate contribution to the equation."""

    site_id: str
    n_m: int
    p_vector: np.ndarray
    replicate: int | None = None
    nuisance_converged: bool = True
    tilt_converged: bool = True

    def __post_init__(self):
        vec = np.asarray(self.p_vector, dtype=float)
        object.__setattr__(self, "p_vector", vec)
        if vec.ndim != 1:
            raise DesignError("p_vector must be one-dimensional")
        if not np.isfinite(vec).all():
            raise DesignError(f"non-finite augmentation vector from {self.site_id!r}")

    @property
    def ok(self) -> bool:
        return self.nuisance_converged and self.tilt_converged


@dataclass(frozen=True)
class WeightScheme:
    """Site weights for information aggregation; they sum to one."""

    kind: str = "sample_size_proportional"
    explicit_weights: Mapping[str, float] | None = None

    _KINDS = ("target_only", "sample_size_proportional", "uniform", "explicit")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise DesignError(f"unknown weight scheme {self.kind!r}")
        if (self.kind == "explicit") != (self.explicit_weights is not None):
            raise DesignError("explicit_weights required iff kind='explicit'")

    def weights_for(
        self, target_id: str, source_ids: Sequence[str], n_by_site: Mapping[str, int]
    ) -> dict[str, float]:
        sites = [target_id, *source_ids]
        if self.kind == "target_only":
            w = {s: 0.0 for s in sites}
            w[target_id] = 1.0
            return w
        if self.kind == "uniform":
            return {s: 1.0 / len(sites) for s in sites}
        if self.kind == "sample_size_proportional":
            total = float(sum(n_by_site[s] for s in sites))
            w = {s: n_by_site[s] / total for s in sites}
        else:
            missing = [s for s in sites if s not in self.explicit_weights]
            if missing:
                raise DesignError(f"explicit weights missing site(s) {missing}")
            w = {s: float(self.explicit_weights[s]) for s in sites}
            if any(v < 0 for v in w.values()):
                raise DesignError("explicit weights must be non-negative")
        total = sum(w.values())
        if total <= 0:
            raise DesignError("weights sum to zero")
        if abs(total - 1.0) > 1e-12:
            w = {s: v / total for s, v in w.items()}
        return w


def kahan_weighted_sum(items: Iterable[tuple[float, np.ndarray]], dim: int) -> np.ndarray:
    """Compensated weighted accumulation, deterministic in iteration order."""
    total = np.zeros(dim)
    carry = np.zeros(dim)
    for weight, vec in items:
        y = weight * vec - carry
        t = total + y
        carry = (t - total) - y
        total = t
    return total


def _p_kernel(
    eta_obs: np.ndarray,
    y: np.ndarray,
    g_obs: np.ndarray,
    pi_obs: np.ndarray,
    tau: np.ndarray | None,
    site_id: str,
    positivity_context: str,
) -> np.ndarray:
    zero = pi_obs == 0.0
    if zero.any():
        row = int(np.argmax(zero))
        raise PositivityError(
            f"fitted propensity is exactly 0 for the observed arm of row {row} "
            f"at site {site_id!r}: positivity of treatment assignment "
            f"{positivity_context} is violated"
        )
    resid = (y - g_obs) / pi_obs
    if tau is not None:
        resid = resid * tau
    return eta_obs.T @ resid / y.shape[0]


def _observed_arm_arrays(
    table: ObservationTable,
    design: WorkingDesign,
    ps_fit: NuisanceFit,
    or_fit: NuisanceFit,
    ps_clip: float | None,
):
    eta0, eta1 = build_design_rows(table, design)
    a = table.treatment
    sel = a == 1.0
    eta_obs = np.where(sel[:, None], eta1, eta0)
    pi1 = predict_ps(ps_fit, table, 1)
    if ps_clip is not None:
        pi1 = np.clip(pi1, ps_clip, 1.0 - ps_clip)
    pi_obs = np.where(sel, pi1, 1.0 - pi1)
    g0 = predict_or(or_fit, table, 0)
    g1 = predict_or(or_fit, table, 1)
    g_obs = np.where(sel, g1, g0)
    return eta_obs, pi_obs, g_obs


def compute_p_target(
    table: ObservationTable,
    design: WorkingDesign,
    ps: NuisanceFit,
    or_fit: NuisanceFit,
    ps_clip: float | None = None,
) -> AugmentationVector:
    """Inverse-probability-weighted residual aggregate for the target site."""
    eta_obs, pi_obs, g_obs = _observed_arm_arrays(table, design, ps, or_fit, ps_clip)
    p_vec = _p_kernel(
        eta_obs, table.outcome, g_obs, pi_obs, None, table.site_id, "in the target site"
    )
    return AugmentationVector(
        site_id=table.site_id,
        n_m=table.n,
        p_vector=p_vec,
        nuisance_converged=ps.converged and or_fit.converged,
    )


def compute_p_source(
    table: ObservationTable,
    design: WorkingDesign,
    ps: NuisanceFit,
    or_fit: NuisanceFit,
    tilt: TiltFit,
    ps_clip: float | None = None,
) -> AugmentationVector:
    """As :func:`compute_p_target` with the density-ratio factor applied."""
    eta_obs, pi_obs, g_obs = _observed_arm_arrays(table, design, ps, or_fit, ps_clip)
    tau = tilt_weights(tilt, table)
    p_vec = _p_kernel(
        eta_obs, table.outcome, g_obs, pi_obs, tau, table.site_id, "in the source site"
    )
    return AugmentationVector(
        site_id=table.site_id,
        n_m=table.n,
        p_vector=p_vec,
        nuisance_converged=ps.converged and or_fit.converged,
        tilt_converged=tilt.converged,
    )


def solve_beta_kernel(
    eta0: np.ndarray,
    eta1: np.ndarray,
    g0: np.ndarray,
    g1: np.ndarray,
    link: LinkFunction,
    p_total: np.ndarray,
    init: np.ndarray | None = None,
    tol: float = SOLVE_TOL,
    max_iter: int = MAX_SOLVE_ITER,
) -> tuple[np.ndarray, int, bool]:
    """Newton solve of ``p_total + Q(beta) = 0`` on prebuilt arrays."""
    n, q = eta0.shape
    inv, dinv = link.inverse, link.inverse_deriv

    def residual(beta):
        proj = eta0.T @ (g0 - inv(eta0 @ beta)) + eta1.T @ (g1 - inv(eta1 @ beta))
        return p_total + proj / n

    beta = np.zeros(q) if init is None else np.asarray(init, dtype=float).copy()
    res = residual(beta)
    res_norm = float(np.max(np.abs(res)))
    iterations = 0
    while res_norm >= tol and iterations < max_iter:
        iterations += 1
        d0 = dinv(eta0 @ beta)
        d1 = dinv(eta1 @ beta)
        jac = -((eta0 * d0[:, None]).T @ eta0 + (eta1 * d1[:, None]).T @ eta1) / n
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            raise DesignError(
                "design not identified (collinear basis or degenerate modifiers)"
            ) from None
        scale = 1.0
        improved = False
        for _ in range(50):
            cand = beta + scale * step
            cand_res = residual(cand)
            cand_norm = float(np.max(np.abs(cand_res)))
            if np.isfinite(cand_norm) and cand_norm < res_norm:
                beta, res, res_norm = cand, cand_res, cand_norm
                improved = True
                break
            scale *= 0.5
        if not improved:
            break
    return beta, iterations, res_norm < tol


def projection_init(
    eta0: np.ndarray,
    eta1: np.ndarray,
    g0: np.ndarray,
    g1: np.ndarray,
    link: LinkFunction,
) -> np.ndarray:
    """Starting value: project the outcome-regression surface onto the basis."""
    q = eta0.shape[1]
    try:
        beta, _, converged = solve_beta_kernel(
            eta0, eta1, g0, g1, link, np.zeros(q), tol=1e-8, max_iter=50
        )
    except DesignError:
        return np.zeros(q)
    return beta if converged and np.isfinite(beta).all() else np.zeros(q)


def solve_beta(
    table: ObservationTable,
    design: WorkingDesign,
    or_fit: NuisanceFit,
    p_total: np.ndarray,
    init: np.ndarray | None = None,
    tol: float = SOLVE_TOL,
    max_iter: int = MAX_SOLVE_ITER,
) -> HteEstimate:
    """Solve the aggregated estimating equation on the target data."""
    p_total = np.asarray(p_total, dtype=float)
    if p_total.shape != (design.q,):
        raise DesignError(
            f"p_total has length {p_total.shape}, design expects {design.q}"
        )
    eta0, eta1 = build_design_rows(table, design)
    g0 = predict_or(or_fit, table, 0)
    g1 = predict_or(or_fit, table, 1)
    if design.link.kind == "log" and (g0.mean() < 0 or g1.mean() < 0):
        raise DesignError(
            "log link requires non-negative mean outcome predictions per arm"
        )
    if init is None:
        init = projection_init(eta0, eta1, g0, g1, design.link)
    beta, iterations, converged = solve_beta_kernel(
        eta0, eta1, g0, g1, design.link, p_total, init=init, tol=tol, max_iter=max_iter
    )
    return HteEstimate(
        beta=beta,
        labels=design.labels,
        solver_iterations=iterations,
        converged=converged,
    )


def default_ps_spec(table: ObservationTable) -> GlmSpec:
    return ps_spec(table.covariate_names)


def default_or_spec(table: ObservationTable, link: LinkFunction) -> GlmSpec:
    family = "bernoulli_logit" if link.binary_outcome else "gaussian_identity"
    return or_spec(family, table.covariate_names)


def estimate_target_only(
    table: ObservationTable,
    design: WorkingDesign,
    ps_model: GlmSpec | None = None,
    or_model: GlmSpec | None = None,
    *,
    ps_fit: NuisanceFit | None = None,
    or_fit: NuisanceFit | None = None,
    ps_clip: float | None = None,
    init: np.ndarray | None = None,
) -> HteEstimate:
    """Doubly robust estimate from the target dataset alone."""
    if ps_fit is None:
        ps_fit = fit_propensity(table, ps_model or default_ps_spec(table))
    if or_fit is None:
        or_fit = fit_outcome(table, or_model or default_or_spec(table, design.link))
    p1 = compute_p_target(table, design, ps_fit, or_fit, ps_clip=ps_clip)
    estimate = solve_beta(table, design, or_fit, p1.p_vector, init=init)
    if not p1.nuisance_converged:
        estimate = HteEstimate(
            beta=estimate.beta,
            labels=estimate.labels,
            solver_iterations=estimate.solver_iterations,
            converged=False,
        )
    return estimate


def estimate_federated(
    target: ObservationTable,
    sources: Sequence[AugmentationVector],
    design: WorkingDesign,
    weights: WeightScheme,
    ps_model: GlmSpec | None = None,
    or_model: GlmSpec | None = None,
    *,
    ps_fit: NuisanceFit | None = None,
    or_fit: NuisanceFit | None = None,
    ps_clip: float | None = None,
    strict: bool = False,
    init: np.ndarray | None = None,
) -> HteEstimate:
    """Doubly robust estimate aggregating remote augmentation vectors.

    Target nuisances are fit here exactly once; source augmentation vectors
    arrive precomputed and are never refit.  Sources whose nuisance or tilt
    fits failed are dropped with a warning (weights renormalized over the
    remaining sites) unless ``strict`` is set.
    """
    for aug in sources:
        if aug.p_vector.shape != (design.q,):
            raise DesignError(
                f"augmentation vector from {aug.site_id!r} has length "
                f"{aug.p_vector.shape[0]}, design expects {design.q}"
            )
    bad = [aug for aug in sources if not aug.ok]
    if bad:
        names = [aug.site_id for aug in bad]
        if strict:
            raise ConvergenceError(f"non-converged source site(s): {names}")
        warnings.warn(
            f"dropping non-converged source site(s) {names}; weights renormalized",
            stacklevel=2,
        )
    usable = [aug for aug in sources if aug.ok]

    if ps_fit is None:
        ps_fit = fit_propensity(target, ps_model or default_ps_spec(target))
    if or_fit is None:
        or_fit = fit_outcome(target, or_model or default_or_spec(target, design.link))
    p1 = compute_p_target(target, design, ps_fit, or_fit, ps_clip=ps_clip)

    n_by_site = {target.site_id: target.n}
    n_by_site.update({aug.site_id: aug.n_m for aug in usable})
    w = weights.weights_for(target.site_id, [aug.site_id for aug in usable], n_by_site)

    by_site = {target.site_id: p1.p_vector}
    by_site.update({aug.site_id: aug.p_vector for aug in usable})
    ordered = sorted(by_site)
    p_total = kahan_weighted_sum(
        ((w[s], by_site[s]) for s in ordered), dim=design.q
    )

    estimate = solve_beta(target, design, or_fit, p_total, init=init)
    if not p1.nuisance_converged:
        estimate = HteEstimate(
            beta=estimate.beta,
            labels=estimate.labels,
            solver_iterations=estimate.solver_iterations,
            converged=False,
        )
    return estimate
