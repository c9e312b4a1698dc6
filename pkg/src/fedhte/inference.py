"""Bootstrap inference and the screen for non-transportable source sites.

Selection works on paired bootstrap replicates: replicate ``b`` of the
target is matched with replicate ``b`` of every source through the shared
moment-matrix row, so per-replicate differences cancel common target noise.
A source is retained when the Wald interval of its replicate differences
covers zero in every coordinate (or, optionally, under a joint chi-square
rule).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import chi2

from .design import HteEstimate, WorkingDesign
from .errors import BootstrapError, DesignError
from .glm import GlmSpec
from .pipeline import (
    SiteWorkspace,
    build_workspace,
    fit_nuisances,
    p_vector,
    solve_on_workspace,
    tilt_moments,
)
from .seeds import replicate_rng
from .solver import WeightScheme, default_or_spec, default_ps_spec
from .tables import ObservationTable
from .tilting import TiltSpec, default_tilt_spec

Z_975 = 1.959964
MIN_RELIABLE_B = 30
MAX_FAILURE_FRACTION = 0.2


@dataclass(frozen=True)
class BootstrapPlan:
    """Replicate count and base seed; replicate ``b`` is reproducible from
    ``(seed, b)`` alone."""

    replicates: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.replicates < 2:
            raise DesignError("bootstrap needs at least 2 replicates")


@dataclass(frozen=True)
class BootstrapResult:
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    replicates: np.ndarray  # (B, q); failed replicates are NaN rows
    n_failed: int


def bootstrap_se(
    estimator: Callable[[int], "HteEstimate | np.ndarray"],
    plan: BootstrapPlan,
) -> BootstrapResult:
    """Per-coordinate SD and percentile intervals over bootstrap replicates.

    ``estimator`` is called with the replicate index ``b`` (1-based) and must
    perform its own resampling keyed on that index.  Replicates that raise or
    return a non-converged estimate are excluded and counted.
    """
    rows = []
    failed = 0
    for b in range(1, plan.replicates + 1):
        try:
            result = estimator(b)
        except Exception:
            result = None
        if result is None:
            beta, ok = None, False
        elif isinstance(result, HteEstimate):
            beta, ok = result.beta, result.converged
        else:
            beta = np.asarray(result, dtype=float)
            ok = bool(np.isfinite(beta).all())
        if not ok:
            failed += 1
            rows.append(None)
        else:
            rows.append(beta)
    dim = next((r.shape[0] for r in rows if r is not None), 0)
    if failed > MAX_FAILURE_FRACTION * plan.replicates or dim == 0:
        raise BootstrapError(
            f"{failed} of {plan.replicates} bootstrap replicates failed "
            f"(limit {MAX_FAILURE_FRACTION:.0%})"
        )
    matrix = np.full((plan.replicates, dim), np.nan)
    for i, r in enumerate(rows):
        if r is not None:
            matrix[i] = r
    good = matrix[~np.isnan(matrix).any(axis=1)]
    se = good.std(axis=0, ddof=1)
    ci_lower = np.percentile(good, 2.5, axis=0)
    ci_upper = np.percentile(good, 97.5, axis=0)
    return BootstrapResult(
        se=se, ci_lower=ci_lower, ci_upper=ci_upper, replicates=matrix, n_failed=failed
    )


def resample_indices(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, n, size=n)


# ---------------------------------------------------------------------------
# Target-side bootstrap state shared by selection and federated inference.
# ---------------------------------------------------------------------------


@dataclass
class TargetReplicateSet:
    """Target bootstrap replicates plus the solve context for each one."""

    ws: SiteWorkspace
    plan: BootstrapPlan
    point_ps: np.ndarray
    point_or: np.ndarray
    point_p1: np.ndarray
    point_beta: np.ndarray
    point_converged: bool
    indices: list[np.ndarray]
    or_coefs: list[np.ndarray]
    betas: np.ndarray  # (B, q) target-only estimates, NaN where failed
    p1: np.ndarray  # (B, q)
    moments: np.ndarray  # (B, d) bootstrap means of the tilt features
    ok: np.ndarray  # (B,) bool

    @property
    def n_replicates(self) -> int:
        return len(self.indices)

    def solve_with(self, b: int, p_total: np.ndarray) -> tuple[np.ndarray, bool]:
        """Solve the estimating equation on target replicate ``b`` (0-based)."""
        init = self.betas[b] if self.ok[b] else self.point_beta
        beta, _, converged = solve_on_workspace(
            self.ws, self.or_coefs[b], p_total, idx=self.indices[b], init=init
        )
        return beta, converged


def build_target_replicates(
    target: ObservationTable,
    design: WorkingDesign,
    plan: BootstrapPlan,
    ps_model: GlmSpec | None = None,
    or_model: GlmSpec | None = None,
    tilt_model: TiltSpec | None = None,
    ps_clip: float | None = None,
) -> TargetReplicateSet:
    ws = build_workspace(
        target,
        design,
        ps_model or default_ps_spec(target),
        or_model or default_or_spec(target, design.link),
        tilt_model or default_tilt_spec(target),
    )
    q = design.q
    point_ps, point_or, point_ok = fit_nuisances(ws)
    point_p1 = p_vector(ws, point_ps, point_or, ps_clip=ps_clip)
    point_beta, _, point_solved = solve_on_workspace(ws, point_or, point_p1)
    ws.ps_coef, ws.or_coef = point_ps, point_or

    B = plan.replicates
    indices: list[np.ndarray] = []
    or_coefs: list[np.ndarray] = []
    betas = np.full((B, q), np.nan)
    p1 = np.zeros((B, q))
    moments = np.zeros((B, ws.tilt_r.shape[1]))
    ok = np.zeros(B, dtype=bool)
    for b in range(1, B + 1):
        rng = replicate_rng(plan.seed, target.site_id, b)
        idx = resample_indices(ws.n, rng)
        ps_c, or_c, fit_ok = fit_nuisances(ws, idx, ps_init=point_ps, or_init=point_or)
        indices.append(idx)
        or_coefs.append(or_c)
        moments[b - 1] = tilt_moments(ws, idx)
        try:
            vec = p_vector(ws, ps_c, or_c, idx, ps_clip=ps_clip)
        except Exception:
            ok[b - 1] = False
            continue
        p1[b - 1] = vec
        beta, _, solved = solve_on_workspace(ws, or_c, vec, idx=idx, init=point_beta)
        if fit_ok and solved:
            betas[b - 1] = beta
            ok[b - 1] = True
    return TargetReplicateSet(
        ws=ws,
        plan=plan,
        point_ps=point_ps,
        point_or=point_or,
        point_p1=point_p1,
        point_beta=point_beta,
        point_converged=bool(point_ok and point_solved),
        indices=indices,
        or_coefs=or_coefs,
        betas=betas,
        p1=p1,
        moments=moments,
        ok=ok,
    )


# ---------------------------------------------------------------------------
# Selection rule and report.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectionRule:
    """How per-source replicate differences are turned into keep/drop calls.

    ``intersection`` retains a source only when every coordinate's Wald
    interval covers zero; ``chi_square`` applies a joint test instead.
    """

    kind: str = "intersection"
    z: float = Z_975
    level: float = 0.95

    def __post_init__(self):
        if self.kind not in ("intersection", "chi_square"):
            raise DesignError(f"unknown selection rule {self.kind!r}")


@dataclass(frozen=True)
class SourceDecision:
    site_id: str
    n_m: int
    delta_mean: np.ndarray
    delta_sd: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    retained: bool
    n_used: int
    reason: str = ""


@dataclass(frozen=True)
class SelectionReport:
    decisions: tuple[SourceDecision, ...]
    final_weights: dict[str, float]
    target_id: str
    replicates: int
    seed: int
    rule: SelectionRule

    @property
    def retained_ids(self) -> tuple[str, ...]:
        return tuple(d.site_id for d in self.decisions if d.retained)

    @property
    def excluded_ids(self) -> tuple[str, ...]:
        return tuple(d.site_id for d in self.decisions if not d.retained)


@dataclass(frozen=True)
class SourceReplicateMatrix:
    """Replicate-level augmentation vectors received from one source."""

    site_id: str
    n_m: int
    p_matrix: np.ndarray  # (B, q)
    ok: np.ndarray  # (B,) bool


def decide_source(
    site_id: str,
    n_m: int,
    deltas: np.ndarray,
    rule: SelectionRule,
    reason: str = "",
) -> SourceDecision:
    """Keep/drop call from the usable replicate differences of one source."""
    n_used = deltas.shape[0]
    q = deltas.shape[1] if deltas.ndim == 2 else 0
    if n_used < 2:
        return SourceDecision(
            site_id=site_id,
            n_m=n_m,
            delta_mean=np.full(q, np.nan),
            delta_sd=np.full(q, np.nan),
            ci_lower=np.full(q, np.nan),
            ci_upper=np.full(q, np.nan),
            retained=False,
            n_used=n_used,
            reason=reason or "fewer than 2 usable replicates",
        )
    mean = deltas.mean(axis=0)
    sd = deltas.std(axis=0, ddof=1)
    lower = mean - rule.z * sd
    upper = mean + rule.z * sd
    if rule.kind == "intersection":
        retained = bool(np.all((lower <= 0.0) & (0.0 <= upper)))
    else:
        cov = np.cov(deltas, rowvar=False, ddof=1)
        try:
            stat = float(mean @ np.linalg.solve(cov, mean))
        except np.linalg.LinAlgError:
            stat = float("inf")
        retained = stat <= chi2.ppf(rule.level, deltas.shape[1])
    return SourceDecision(
        site_id=site_id,
        n_m=n_m,
        delta_mean=mean,
        delta_sd=sd,
        ci_lower=lower,
        ci_upper=upper,
        retained=retained,
        n_used=n_used,
        reason=reason,
    )


def decide_sources(
    target_reps: TargetReplicateSet,
    source_matrices: Sequence[SourceReplicateMatrix],
    rule: SelectionRule | None = None,
) -> list[SourceDecision]:
    """Step through every source, solving its single-source estimate per
    replicate and differencing against the paired target-only estimate."""
    rule = rule or SelectionRule()
    B = target_reps.n_replicates
    if B < MIN_RELIABLE_B:
        warnings.warn(
            f"selection intervals from only {B} bootstrap replicates are unreliable",
            stacklevel=2,
        )
    decisions = []
    for src in sorted(source_matrices, key=lambda s: s.site_id):
        if src.p_matrix.shape[0] != B:
            raise DesignError(
                f"source {src.site_id!r} returned {src.p_matrix.shape[0]} replicates, "
                f"expected {B}"
            )
        deltas = []
        for b in range(B):
            if not (target_reps.ok[b] and src.ok[b]):
                continue
            beta_m, solved = target_reps.solve_with(b, src.p_matrix[b])
            if solved:
                deltas.append(beta_m - target_reps.betas[b])
        reason = "" if deltas else "all replicates failed"
        deltas = np.asarray(deltas) if deltas else np.zeros((0, target_reps.betas.shape[1]))
        decisions.append(decide_source(src.site_id, src.n_m, deltas, rule, reason))
    return decisions


def final_weights_after_selection(
    target_id: str,
    target_n: int,
    decisions: Sequence[SourceDecision],
    weights: WeightScheme,
) -> dict[str, float]:
    retained = [d for d in decisions if d.retained]
    n_by_site = {target_id: target_n}
    n_by_site.update({d.site_id: d.n_m for d in retained})
    w = weights.weights_for(target_id, [d.site_id for d in retained], n_by_site)
    for d in decisions:
        if not d.retained:
            w[d.site_id] = 0.0
    return w


def select_sources(
    target: ObservationTable,
    source_handles: Sequence,
    design: WorkingDesign,
    plan: BootstrapPlan,
    rule: SelectionRule | None = None,
    weights: WeightScheme | None = None,
    ps_model: GlmSpec | None = None,
    or_model: GlmSpec | None = None,
    tilt_model: TiltSpec | None = None,
    ps_clip: float | None = None,
    timeout: float = 300.0,
) -> SelectionReport:
    """Run the bootstrap selection procedure over federation site handles.

    One protocol round ships the target's bootstrap moment matrix out and
    brings every source's replicate augmentation vectors back; the
    keep/drop decisions are made locally.
    """
    from .federation import RoundConfig, coordinator_round

    rule = rule or SelectionRule()
    weights = weights or WeightScheme()
    tilt_model = tilt_model or default_tilt_spec(target)
    reps = build_target_replicates(
        target, design, plan, ps_model, or_model, tilt_model, ps_clip=ps_clip
    )
    config = RoundConfig(
        design=design,
        ps_model=ps_model or default_ps_spec(target),
        or_model=or_model or default_or_spec(target, design.link),
        tilt_model=tilt_model,
        replicates=plan.replicates,
        base_seed=plan.seed,
        point_row=False,
        ps_clip=ps_clip,
        timeout=timeout,
    )
    round_result = coordinator_round(target, source_handles, config, moment_matrix=reps.moments)
    matrices = [
        SourceReplicateMatrix(
            site_id=aug.site_id,
            n_m=aug.n_m,
            p_matrix=aug.vectors,
            ok=aug.replicate_ok,
        )
        for aug in round_result.augmentations
    ]
    decisions = decide_sources(reps, matrices, rule)
    for site_id, why in round_result.failures.items():
        decisions.append(
            SourceDecision(
                site_id=site_id,
                n_m=0,
                delta_mean=np.full(design.q, np.nan),
                delta_sd=np.full(design.q, np.nan),
                ci_lower=np.full(design.q, np.nan),
                ci_upper=np.full(design.q, np.nan),
                retained=False,
                n_used=0,
                reason=f"protocol failure: {why}",
            )
        )
    decisions.sort(key=lambda d: d.site_id)
    final = final_weights_after_selection(target.site_id, target.n, decisions, weights)
    return SelectionReport(
        decisions=tuple(decisions),
        final_weights=final,
        target_id=target.site_id,
        replicates=plan.replicates,
        seed=plan.seed,
        rule=rule,
    )
