"""Estimator classes in the scikit-learn idiom.

``TargetOnlyHte`` and ``FederatedHte`` wrap the functional core behind
``fit`` / ``predict`` / ``get_params`` so they compose with the wider
ecosystem (cloning, grid search over specs, pipelines operating on the
modifier matrix).  Fitted state lives in trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .design import HteEstimate, WorkingDesign
from .errors import DataValidationError, DesignError
from .glm import GlmSpec, or_spec, ps_spec
from .inference import (
    BootstrapPlan,
    SelectionReport,
    SelectionRule,
    SourceReplicateMatrix,
    build_target_replicates,
    decide_sources,
    final_weights_after_selection,
)
from .links import get_link
from .solver import WeightScheme, kahan_weighted_sum
from .tables import ObservationTable
from .tilting import TiltSpec


def check_table(table) -> ObservationTable:
    if not isinstance(table, ObservationTable):
        raise DataValidationError(
            f"expected an ObservationTable, got {type(table).__name__}"
        )
    return table


def check_modifier_matrix(x, n_modifiers: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1) if n_modifiers == 1 else x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != n_modifiers:
        raise DataValidationError(
            f"modifier matrix must have {n_modifiers} column(s), got shape {x.shape}"
        )
    if not np.isfinite(x).all():
        raise DataValidationError("modifier matrix contains non-finite values")
    return x


def _cov_matrix(good: np.ndarray) -> np.ndarray | None:
    if good.shape[0] < 2:
        return None
    return np.atleast_2d(np.cov(good, rowvar=False, ddof=1))


def _weight_scheme(weights) -> WeightScheme:
    if isinstance(weights, WeightScheme):
        return weights
    if isinstance(weights, str):
        alias = {"sample_size": "sample_size_proportional"}
        return WeightScheme(kind=alias.get(weights, weights))
    if isinstance(weights, dict):
        return WeightScheme(kind="explicit", explicit_weights=weights)
    raise DesignError(f"cannot interpret weights {weights!r}")


class _HteBase(BaseEstimator):
    def _design(self, table: ObservationTable) -> WorkingDesign:
        modifiers = self.modifiers
        if modifiers is None:
            modifiers = table.modifier_names
        return WorkingDesign.linear(tuple(modifiers), get_link(self.link))

    def _ps_model(self, table: ObservationTable) -> GlmSpec:
        cols = self.ps_predictors if self.ps_predictors is not None else table.covariate_names
        return ps_spec(tuple(cols))

    def _or_model(self, table: ObservationTable, design: WorkingDesign) -> GlmSpec:
        cols = self.or_predictors if self.or_predictors is not None else table.covariate_names
        family = self.or_family
        if family is None:
            family = "bernoulli_logit" if design.link.binary_outcome else "gaussian_identity"
        return or_spec(family, tuple(cols))

    def predict(self, x_modifiers, a: int) -> np.ndarray:
        """Working-model mean of the potential outcome at treatment ``a``."""
        if not hasattr(self, "beta_"):
            raise DesignError("estimator is not fitted")
        x = check_modifier_matrix(x_modifiers, len(self.design_.modifier_names))
        return self.design_.link.inverse(self.design_.rows(x, int(a)) @ self.beta_)

    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.labels_, self.beta_.tolist()))

    def _store(self, estimate: HteEstimate, design: WorkingDesign) -> None:
        self.design_ = design
        self.result_ = estimate
        self.beta_ = estimate.beta
        self.labels_ = estimate.labels
        self.covariance_ = estimate.covariance
        self.se_ = estimate.se
        self.converged_ = estimate.converged


class TargetOnlyHte(_HteBase):
    """Doubly robust working-model estimate from a single dataset.

    Parameters mirror the model configuration: the link and modifier set
    define the working model, the predictor lists define the nuisance
    models (defaults: every covariate, with treatment interactions in the
    outcome model), and ``se`` picks the inference flavor.
    """

    def __init__(
        self,
        link: str = "logit",
        modifiers=None,
        ps_predictors=None,
        or_predictors=None,
        or_family: str | None = None,
        se: str = "bootstrap",
        bootstrap_replicates: int = 200,
        seed: int = 0,
        ps_clip: float | None = None,
    ):
        self.link = link
        self.modifiers = modifiers
        self.ps_predictors = ps_predictors
        self.or_predictors = or_predictors
        self.or_family = or_family
        self.se = se
        self.bootstrap_replicates = bootstrap_replicates
        self.seed = seed
        self.ps_clip = ps_clip

    def fit(self, table: ObservationTable, y=None):
        table = check_table(table)
        design = self._design(table)
        ps_model = self._ps_model(table)
        or_model = self._or_model(table, design)
        if self.se not in ("none", "bootstrap", "sandwich"):
            raise DesignError(f"unknown se mode {self.se!r}")

        if self.se == "bootstrap":
            plan = BootstrapPlan(replicates=self.bootstrap_replicates, seed=self.seed)
            reps = build_target_replicates(
                table, design, plan, ps_model, or_model, ps_clip=self.ps_clip
            )
            good = reps.betas[reps.ok]
            cov = _cov_matrix(good)
            estimate = HteEstimate(
                beta=reps.point_beta,
                labels=design.labels,
                covariance=cov,
                se_source="bootstrap",
                converged=reps.point_converged,
            )
            self.bootstrap_replicates_ = reps.betas
        else:
            from .solver import estimate_target_only

            estimate = estimate_target_only(
                table, design, ps_model, or_model, ps_clip=self.ps_clip
            )
            if self.se == "sandwich":
                from .glm import fit_outcome, fit_propensity
                from .sandwich import sandwich_variance_target

                ps_fit = fit_propensity(table, ps_model)
                or_fit = fit_outcome(table, or_model)
                cov = sandwich_variance_target(table, design, ps_fit, or_fit, estimate)
                estimate = HteEstimate(
                    beta=estimate.beta,
                    labels=estimate.labels,
                    covariance=cov,
                    se_source="sandwich",
                    solver_iterations=estimate.solver_iterations,
                    converged=estimate.converged,
                )
        self._store(estimate, design)
        return self


class FederatedHte(_HteBase):
    """Doubly robust estimate aggregating remote sites over one round.

    ``fit`` accepts raw tables (served through in-process loopback sites)
    or transport handles for remote sites.  With ``select=True`` the
    bootstrap screen drops non-transportable sources before aggregation;
    everything, including bootstrap standard errors, is obtained from the
    single protocol round.
    """

    def __init__(
        self,
        link: str = "logit",
        modifiers=None,
        ps_predictors=None,
        or_predictors=None,
        or_family: str | None = None,
        tilt_columns=None,
        weights="sample_size_proportional",
        select: bool = False,
        selection_rule: str = "intersection",
        se: str = "bootstrap",
        bootstrap_replicates: int = 200,
        seed: int = 0,
        ps_clip: float | None = None,
        timeout: float = 300.0,
    ):
        self.link = link
        self.modifiers = modifiers
        self.ps_predictors = ps_predictors
        self.or_predictors = or_predictors
        self.or_family = or_family
        self.tilt_columns = tilt_columns
        self.weights = weights
        self.select = select
        self.selection_rule = selection_rule
        self.se = se
        self.bootstrap_replicates = bootstrap_replicates
        self.seed = seed
        self.ps_clip = ps_clip
        self.timeout = timeout

    def fit(self, table: ObservationTable, sources=()):
        from .federation import LocalSite, LoopbackHandle, RoundConfig, coordinator_round

        table = check_table(table)
        design = self._design(table)
        ps_model = self._ps_model(table)
        or_model = self._or_model(table, design)
        tilt_model = TiltSpec(
            r_columns=tuple(self.tilt_columns) if self.tilt_columns is not None else table.covariate_names
        )
        if self.se not in ("none", "bootstrap"):
            raise DesignError(f"unknown se mode {self.se!r} for federated estimation")
        scheme = _weight_scheme(self.weights)

        handles = [
            LoopbackHandle(LocalSite(s)) if isinstance(s, ObservationTable) else s
            for s in sources
        ]

        needs_bootstrap = self.se == "bootstrap" or self.select
        b_boot = self.bootstrap_replicates if needs_bootstrap else 0
        plan = BootstrapPlan(replicates=max(b_boot, 2), seed=self.seed)
        reps = build_target_replicates(
            table, design, plan, ps_model, or_model, tilt_model, ps_clip=self.ps_clip
        ) if needs_bootstrap else None

        rows = 1 + b_boot
        if reps is not None:
            moment_matrix = np.vstack(
                [tilt_model.feature_matrix(table).mean(axis=0), reps.moments[:b_boot]]
            )
        else:
            moment_matrix = tilt_model.feature_matrix(table).mean(axis=0)[None, :]
        config = RoundConfig(
            design=design,
            ps_model=ps_model,
            or_model=or_model,
            tilt_model=tilt_model,
            replicates=rows,
            base_seed=self.seed,
            point_row=True,
            ps_clip=self.ps_clip,
            timeout=self.timeout,
        )
        round_result = coordinator_round(table, handles, config, moment_matrix=moment_matrix)
        self.round_ = round_result

        selection: SelectionReport | None = None
        if self.select:
            matrices = [
                SourceReplicateMatrix(
                    site_id=aug.site_id,
                    n_m=aug.n_m,
                    p_matrix=aug.vectors[1:],
                    ok=aug.replicate_ok[1:],
                )
                for aug in round_result.augmentations
            ]
            rule = SelectionRule(kind=self.selection_rule)
            decisions = decide_sources(reps, matrices, rule)
            final = final_weights_after_selection(table.site_id, table.n, decisions, scheme)
            selection = SelectionReport(
                decisions=tuple(decisions),
                final_weights=final,
                target_id=table.site_id,
                replicates=b_boot,
                seed=self.seed,
                rule=rule,
            )
            weight_map = final
            usable = [a for a in round_result.augmentations if weight_map.get(a.site_id, 0.0) > 0.0]
        else:
            usable = [a for a in round_result.augmentations if all(a.replicate_ok)]
            n_by_site = {table.site_id: table.n}
            n_by_site.update({a.site_id: a.n_m for a in usable})
            weight_map = scheme.weights_for(table.site_id, [a.site_id for a in usable], n_by_site)
        self.selection_ = selection
        self.weights_ = weight_map

        from .pipeline import build_workspace, fit_nuisances, p_vector, solve_on_workspace

        if reps is not None:
            point_p1, point_or, point_beta = reps.point_p1, reps.point_or, reps.point_beta
            point_converged = reps.point_converged
            ws = reps.ws
        else:
            ws = build_workspace(table, design, ps_model, or_model, tilt_model)
            ps_c, or_c, fit_ok = fit_nuisances(ws)
            point_p1 = p_vector(ws, ps_c, or_c, ps_clip=self.ps_clip)
            point_or = or_c
            point_beta, _, solved = solve_on_workspace(ws, or_c, point_p1)
            point_converged = fit_ok and solved

        def total_for(row: int, p_target: np.ndarray) -> np.ndarray:
            by_site = {table.site_id: p_target}
            by_site.update({a.site_id: a.vectors[row] for a in usable})
            return kahan_weighted_sum(
                ((weight_map.get(s, 0.0), by_site[s]) for s in sorted(by_site)),
                dim=design.q,
            )

        beta, iters, solved = solve_on_workspace(
            ws, point_or, total_for(0, point_p1), init=point_beta
        )

        cov = None
        if self.se == "bootstrap":
            rep_betas = np.full((b_boot, design.q), np.nan)
            for b in range(b_boot):
                if not reps.ok[b]:
                    continue
                if any(not a.replicate_ok[b + 1] for a in usable):
                    continue
                rb, ok_b = reps.solve_with(b, total_for(b + 1, reps.p1[b]))
                if ok_b:
                    rep_betas[b] = rb
            cov = _cov_matrix(rep_betas[~np.isnan(rep_betas).any(axis=1)])
            self.bootstrap_replicates_ = rep_betas

        estimate = HteEstimate(
            beta=beta,
            labels=design.labels,
            covariance=cov,
            se_source="bootstrap" if cov is not None else "none",
            solver_iterations=iters,
            converged=bool(point_converged and solved),
        )
        self._store(estimate, design)
        return self
