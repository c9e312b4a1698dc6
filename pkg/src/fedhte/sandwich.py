"""Model-robust (sandwich) variance from estimated influence functions.

The estimating function is corrected for the estimation of the nuisance
models: the bread is the derivative of the projection term with respect to
the working-model coefficients, and each nuisance contributes its own
influence expansion.  All expectations are replaced by sample means.

``sandwich_variance_federated`` additionally expands the density-ratio
estimation, which couples source rows to target rows; it needs row-level
data from every site and therefore exists only as an in-process validation
tool (the protocol never transmits what it requires).  Treat it as
experimental; bootstrap standard errors are the supported inference path.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .design import HteEstimate, WorkingDesign, build_design_rows
from .errors import DesignError
from .glm import GlmSpec, NuisanceFit, fit_outcome, fit_propensity, or_design_matrix, predict_or, predict_ps, ps_design_matrix
from .solver import WeightScheme, default_or_spec, default_ps_spec
from .tables import ObservationTable
from .tilting import TiltFit, TiltSpec, default_tilt_spec, fit_tilt, target_moments, tilt_weights


def _beta_array(beta_hat) -> np.ndarray:
    if isinstance(beta_hat, HteEstimate):
        return beta_hat.beta
    return np.asarray(beta_hat, dtype=float)


def _solve_or_raise(matrix: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.inv(matrix)
    except np.linalg.LinAlgError:
        raise DesignError(f"singular {what} in sandwich variance") from None


class _SitePieces:
    """Per-site arrays entering the influence expansion."""

    def __init__(
        self,
        table: ObservationTable,
        design: WorkingDesign,
        ps_fit: NuisanceFit,
        or_fit: NuisanceFit,
        beta: np.ndarray,
        tilt: TiltFit | None = None,
    ):
        self.n = table.n
        eta0, eta1 = build_design_rows(table, design)
        self.eta0, self.eta1 = eta0, eta1
        a = table.treatment
        sel = a == 1.0
        self.eta_obs = np.where(sel[:, None], eta1, eta0)
        self.y = table.outcome

        self.z = ps_design_matrix(table, ps_fit.spec)
        pi1 = predict_ps(ps_fit, table, 1)
        self.pi_obs = np.where(sel, pi1, 1.0 - pi1)
        self.pi_other = np.where(sel, 1.0 - pi1, pi1)
        self.sign = 2.0 * a - 1.0
        self.pi1 = pi1

        self.z0 = or_design_matrix(table, or_fit.spec, a=0)
        self.z1 = or_design_matrix(table, or_fit.spec, a=1)
        self.z_obs = np.where(sel[:, None], self.z1, self.z0)
        self.g0 = predict_or(or_fit, table, 0)
        self.g1 = predict_or(or_fit, table, 1)
        self.g_obs = np.where(sel, self.g1, self.g0)
        if or_fit.spec.family == "bernoulli_logit":
            self.gdot0 = self.g0 * (1.0 - self.g0)
            self.gdot1 = self.g1 * (1.0 - self.g1)
            self.gdot_obs = self.g_obs * (1.0 - self.g_obs)
            self.or_weight = self.gdot_obs
        else:
            self.gdot0 = np.ones(self.n)
            self.gdot1 = np.ones(self.n)
            self.gdot_obs = np.ones(self.n)
            self.or_weight = np.ones(self.n)

        self.mu0 = design.link.inverse(eta0 @ beta)
        self.mu1 = design.link.inverse(eta1 @ beta)
        self.mud0 = design.link.inverse_deriv(eta0 @ beta)
        self.mud1 = design.link.inverse_deriv(eta1 @ beta)

        self.tau = tilt_weights(tilt, table) if tilt is not None else None

    def bread(self) -> np.ndarray:
        return (
            (self.eta0 * self.mud0[:, None]).T @ self.eta0
            + (self.eta1 * self.mud1[:, None]).T @ self.eta1
        ) / self.n

    def p_rows(self) -> np.ndarray:
        resid = (self.y - self.g_obs) / self.pi_obs
        if self.tau is not None:
            resid = resid * self.tau
        return self.eta_obs * resid[:, None]

    def q_rows(self) -> np.ndarray:
        return (
            self.eta0 * (self.g0 - self.mu0)[:, None]
            + self.eta1 * (self.g1 - self.mu1)[:, None]
        )

    def dp_dgamma(self) -> np.ndarray:
        """Mean derivative of the P rows w.r.t. the PS coefficients."""
        c = -self.sign * (self.y - self.g_obs) * self.pi_other / self.pi_obs
        if self.tau is not None:
            c = c * self.tau
        return (self.eta_obs * c[:, None]).T @ self.z / self.n

    def dp_dpsi(self) -> np.ndarray:
        c = -self.gdot_obs / self.pi_obs
        if self.tau is not None:
            c = c * self.tau
        return (self.eta_obs * c[:, None]).T @ self.z_obs / self.n

    def dq_dpsi(self) -> np.ndarray:
        return (
            (self.eta0 * self.gdot0[:, None]).T @ self.z0
            + (self.eta1 * self.gdot1[:, None]).T @ self.z1
        ) / self.n

    def ps_influence(self) -> np.ndarray:
        info = (self.z * (self.pi1 * (1.0 - self.pi1))[:, None]).T @ self.z / self.n
        score = self.z * (self.sign * self.pi_other)[:, None]
        return score @ _solve_or_raise(info, "propensity information").T

    def or_influence(self) -> np.ndarray:
        info = (self.z_obs * self.or_weight[:, None]).T @ self.z_obs / self.n
        score = self.z_obs * (self.y - self.g_obs)[:, None]
        return score @ _solve_or_raise(info, "outcome-model information").T


def sandwich_variance_target(
    table: ObservationTable,
    design: WorkingDesign,
    ps_fit: NuisanceFit,
    or_fit: NuisanceFit,
    beta_hat,
) -> np.ndarray:
    """Variance of the target-only estimate via its influence function.

    Returns the ``q x q`` covariance of the coefficient estimate (already
    scaled by the sample size).
    """
    beta = _beta_array(beta_hat)
    pieces = _SitePieces(table, design, ps_fit, or_fit, beta)
    n = pieces.n
    bread_inv = _solve_or_raise(pieces.bread(), "bread matrix")

    f_rows = pieces.p_rows() + pieces.q_rows()
    m_gamma = pieces.dp_dgamma()
    m_psi = pieces.dp_dpsi() + pieces.dq_dpsi()
    d_gamma = pieces.ps_influence()
    d_psi = pieces.or_influence()

    phi = -(f_rows + d_gamma @ m_gamma.T + d_psi @ m_psi.T) @ bread_inv.T
    cov = phi.T @ phi / (n * n)
    return 0.5 * (cov + cov.T)


def sandwich_variance_federated(
    target: ObservationTable,
    sources: Sequence[ObservationTable],
    design: WorkingDesign,
    weights: WeightScheme,
    beta_hat,
    ps_models: Mapping[str, GlmSpec] | None = None,
    or_models: Mapping[str, GlmSpec] | None = None,
    tilt_model: TiltSpec | None = None,
) -> np.ndarray:
    """Experimental all-data-visible variance for the federated estimate.

    Every site's rows must be available in-process: the density-ratio
    correction couples each source's moment residuals to the target's, so
    this computation cannot be carried by the single-round protocol.  Used
    to validate bootstrap standard errors in simulations.
    """
    beta = _beta_array(beta_hat)
    tilt_model = tilt_model or default_tilt_spec(target)
    mu = target_moments(target, tilt_model)

    def model_for(site_id: str, mapping, fallback):
        if mapping is not None and site_id in mapping:
            return mapping[site_id]
        return fallback

    site_ids = [target.site_id] + [s.site_id for s in sources]
    n_by_site = {target.site_id: target.n, **{s.site_id: s.n for s in sources}}
    w = weights.weights_for(target.site_id, [s.site_id for s in sources], n_by_site)
    n_total = sum(n_by_site.values())

    pieces_by_site: dict[str, _SitePieces] = {}
    tilts: dict[str, TiltFit] = {}
    for tbl in (target, *sources):
        ps_m = model_for(tbl.site_id, ps_models, default_ps_spec(tbl))
        or_m = model_for(tbl.site_id, or_models, default_or_spec(tbl, design.link))
        ps_fit = fit_propensity(tbl, ps_m)
        or_fit = fit_outcome(tbl, or_m)
        tilt = None
        if tbl.site_id != target.site_id:
            tilt = fit_tilt(tbl, mu, tilt_model, warn_on_degeneracy=False)
            tilts[tbl.site_id] = tilt
        pieces_by_site[tbl.site_id] = _SitePieces(tbl, design, ps_fit, or_fit, beta, tilt)

    tp = pieces_by_site[target.site_id]
    rho = {s: n_by_site[s] / n_total for s in site_ids}
    bread_inv = _solve_or_raise(tp.bread(), "bread matrix")

    # Stack influence contributions per row, ordered target first then sources.
    q = design.q
    blocks: list[np.ndarray] = []

    target_rows = (w[target.site_id] * tp.p_rows() + tp.q_rows()) / rho[target.site_id]
    corrections = np.zeros_like(target_rows)
    # Nuisance corrections local to the target.
    m_gamma_t = w[target.site_id] * tp.dp_dgamma()
    m_psi_t = w[target.site_id] * tp.dp_dpsi() + tp.dq_dpsi()
    corrections += (tp.ps_influence() @ m_gamma_t.T) / rho[target.site_id]
    corrections += (tp.or_influence() @ m_psi_t.T) / rho[target.site_id]
    target_block = target_rows + corrections

    source_blocks: dict[str, np.ndarray] = {}
    r_features_target = tilt_model.feature_matrix(target)
    for src in sources:
        sp = pieces_by_site[src.site_id]
        wm = w[src.site_id]
        rows = wm * sp.p_rows() / rho[src.site_id]
        rows = rows + (sp.ps_influence() @ (wm * sp.dp_dgamma()).T) / rho[src.site_id]
        rows = rows + (sp.or_influence() @ (wm * sp.dp_dpsi()).T) / rho[src.site_id]

        # Density-ratio expansion: moment residuals at the source and target.
        r_src = tilt_model.feature_matrix(src)
        tau = sp.tau
        t_alpha = (r_src * tau[:, None]).T @ r_src / src.n
        t_alpha_inv = _solve_or_raise(t_alpha, "tilt information")
        m_alpha = wm * (
            (sp.eta_obs * ((sp.y - sp.g_obs) / sp.pi_obs * tau)[:, None]).T @ r_src / src.n
        )
        src_resid = (r_src * tau[:, None] - mu) / rho[src.site_id]
        rows = rows + (src_resid @ t_alpha_inv.T) @ m_alpha.T
        tgt_resid = -(r_features_target - mu) / rho[target.site_id]
        target_block = target_block + (tgt_resid @ t_alpha_inv.T) @ m_alpha.T
        source_blocks[src.site_id] = rows

    blocks.append(target_block)
    blocks.extend(source_blocks[s.site_id] for s in sources)
    stacked = np.vstack(blocks)
    phi = -stacked @ bread_inv.T
    cov = phi.T @ phi / (n_total * n_total)
    return 0.5 * (cov + cov.T)
