"""Shared per-site computation pipeline.

Bootstrap-heavy callers (the protocol site loop, the selection procedure,
and the Monte Carlo bench) all evaluate the same sequence per replicate:
resample rows, refit nuisances, refit the density ratio, and emit the
augmentation vector.  This module prebuilds every design matrix once per
site so a replicate reduces to row indexing plus small linear algebra,
and exposes the exact same kernels the public table-level API uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .design import WorkingDesign, build_design_rows
from .errors import PositivityError
from .glm import GlmSpec, fit_logistic, or_design_matrix, ps_design_matrix
from .links import LinkFunction
from .solver import solve_beta_kernel
from .tables import ObservationTable
from .tilting import TiltSpec, kish_ess, solve_tilt_alpha


@dataclass
class SiteWorkspace:
    site_id: str
    n: int
    y: np.ndarray
    treated: np.ndarray  # boolean mask, A == 1
    ps_x: np.ndarray
    or_x_obs: np.ndarray
    or_x0: np.ndarray
    or_x1: np.ndarray
    eta0: np.ndarray
    eta1: np.ndarray
    eta_obs: np.ndarray
    tilt_r: np.ndarray
    link: LinkFunction
    or_family: str
    ps_model: GlmSpec
    or_model: GlmSpec
    tilt_model: TiltSpec
    ps_coef: np.ndarray | None = field(default=None)
    or_coef: np.ndarray | None = field(default=None)


def build_workspace(
    table: ObservationTable,
    design: WorkingDesign,
    ps_model: GlmSpec,
    or_model: GlmSpec,
    tilt_model: TiltSpec,
) -> SiteWorkspace:
    eta0, eta1 = build_design_rows(table, design)
    treated = table.treatment == 1.0
    return SiteWorkspace(
        site_id=table.site_id,
        n=table.n,
        y=table.outcome,
        treated=treated,
        ps_x=ps_design_matrix(table, ps_model),
        or_x_obs=or_design_matrix(table, or_model),
        or_x0=or_design_matrix(table, or_model, a=0),
        or_x1=or_design_matrix(table, or_model, a=1),
        eta0=eta0,
        eta1=eta1,
        eta_obs=np.where(treated[:, None], eta1, eta0),
        tilt_r=tilt_model.feature_matrix(table),
        link=design.link,
        or_family=or_model.family,
        ps_model=ps_model,
        or_model=or_model,
        tilt_model=tilt_model,
    )


def _lstsq_coef(rows: np.ndarray, response: np.ndarray) -> tuple[np.ndarray, bool]:
    coef, _, rank, _ = np.linalg.lstsq(rows, response, rcond=None)
    return coef, rank == rows.shape[1]


def fit_nuisances(
    ws: SiteWorkspace,
    idx: np.ndarray | None = None,
    ps_init: np.ndarray | None = None,
    or_init: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Fit PS and OR on a row subset; returns (ps_coef, or_coef, converged)."""
    if idx is None:
        ps_x, or_x = ws.ps_x, ws.or_x_obs
        a = ws.treated.astype(float)
        y = ws.y
    else:
        ps_x, or_x = ws.ps_x[idx], ws.or_x_obs[idx]
        a = ws.treated[idx].astype(float)
        y = ws.y[idx]
    ps_fit = fit_logistic(ps_x, a, init=ps_init, check_rank=False)
    if ws.or_family == "bernoulli_logit":
        or_fit = fit_logistic(or_x, y, init=or_init, check_rank=False)
        or_coef, or_ok = or_fit.coefficients, or_fit.converged
    else:
        or_coef, or_ok = _lstsq_coef(or_x, y)
    return ps_fit.coefficients, or_coef, bool(ps_fit.converged and or_ok)


def or_predictions(
    ws: SiteWorkspace, or_coef: np.ndarray, idx: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray]:
    x0 = ws.or_x0 if idx is None else ws.or_x0[idx]
    x1 = ws.or_x1 if idx is None else ws.or_x1[idx]
    g0 = x0 @ or_coef
    g1 = x1 @ or_coef
    if ws.or_family == "bernoulli_logit":
        g0, g1 = expit(g0), expit(g1)
    return g0, g1


def p_vector(
    ws: SiteWorkspace,
    ps_coef: np.ndarray,
    or_coef: np.ndarray,
    idx: np.ndarray | None = None,
    tau: np.ndarray | None = None,
    ps_clip: float | None = None,
) -> np.ndarray:
    """Augmentation vector on a row subset, optionally density-ratio tilted."""
    if idx is None:
        ps_x, eta_obs, treated, y = ws.ps_x, ws.eta_obs, ws.treated, ws.y
        x_obs = ws.or_x_obs
    else:
        ps_x, eta_obs, treated, y = ws.ps_x[idx], ws.eta_obs[idx], ws.treated[idx], ws.y[idx]
        x_obs = ws.or_x_obs[idx]
    pi1 = expit(ps_x @ ps_coef)
    if ps_clip is not None:
        pi1 = np.clip(pi1, ps_clip, 1.0 - ps_clip)
    pi_obs = np.where(treated, pi1, 1.0 - pi1)
    if (pi_obs == 0.0).any():
        raise PositivityError(
            f"fitted propensity is exactly 0 for an observed arm at site "
            f"{ws.site_id!r}: positivity of treatment assignment is violated"
        )
    g_obs = x_obs @ or_coef
    if ws.or_family == "bernoulli_logit":
        g_obs = expit(g_obs)
    resid = (y - g_obs) / pi_obs
    if tau is not None:
        resid = resid * tau
    return eta_obs.T @ resid / y.shape[0]


def fit_tilt_weights(
    ws: SiteWorkspace,
    mu: np.ndarray,
    idx: np.ndarray | None = None,
    init: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, bool, float, float]:
    """Density-ratio fit on a row subset.

    Returns ``(alpha, weights, converged, ess, max_weight)``.
    """
    features = ws.tilt_r if idx is None else ws.tilt_r[idx]
    alpha, weights, converged, _, _ = solve_tilt_alpha(features, mu, init=init)
    finite = bool(np.isfinite(weights).all())
    ess = kish_ess(weights) if finite else 0.0
    max_w = float(np.max(weights)) if finite and weights.size else float("inf")
    return alpha, weights, converged, ess, max_w


def tilt_moments(ws: SiteWorkspace, idx: np.ndarray | None = None) -> np.ndarray:
    features = ws.tilt_r if idx is None else ws.tilt_r[idx]
    return features.mean(axis=0)


def solve_on_workspace(
    ws: SiteWorkspace,
    or_coef: np.ndarray,
    p_total: np.ndarray,
    idx: np.ndarray | None = None,
    init: np.ndarray | None = None,
) -> tuple[np.ndarray, int, bool]:
    """Solve the estimating equation with the target rows given by ``idx``."""
    eta0 = ws.eta0 if idx is None else ws.eta0[idx]
    eta1 = ws.eta1 if idx is None else ws.eta1[idx]
    g0, g1 = or_predictions(ws, or_coef, idx)
    return solve_beta_kernel(eta0, eta1, g0, g1, ws.link, p_total, init=init)


@dataclass
class SiteReplicate:
    """One bootstrap replicate's site-side output."""

    replicate: int
    p_tilted: np.ndarray
    p_naive: np.ndarray | None
    nuisance_converged: bool
    tilt_converged: bool
    ess: float
    max_weight: float
    alpha: np.ndarray


def source_replicate(
    ws: SiteWorkspace,
    mu_row: np.ndarray,
    replicate: int,
    idx: np.ndarray | None,
    ps_init: np.ndarray | None = None,
    or_init: np.ndarray | None = None,
    tilt_init: np.ndarray | None = None,
    include_naive: bool = False,
    ps_clip: float | None = None,
) -> SiteReplicate:
    """Full site-side computation for one replicate of a source site."""
    ps_coef, or_coef, nuisance_ok = fit_nuisances(ws, idx, ps_init, or_init)
    alpha, weights, tilt_ok, ess, max_w = fit_tilt_weights(ws, mu_row, idx, init=tilt_init)
    if tilt_ok:
        p_tilted = p_vector(ws, ps_coef, or_coef, idx, tau=weights, ps_clip=ps_clip)
    else:
        p_tilted = np.zeros(ws.eta0.shape[1])
    p_naive = (
        p_vector(ws, ps_coef, or_coef, idx, tau=None, ps_clip=ps_clip)
        if include_naive
        else None
    )
    return SiteReplicate(
        replicate=replicate,
        p_tilted=p_tilted,
        p_naive=p_naive,
        nuisance_converged=nuisance_ok,
        tilt_converged=tilt_ok,
        ess=ess,
        max_weight=max_w,
        alpha=alpha,
    )
