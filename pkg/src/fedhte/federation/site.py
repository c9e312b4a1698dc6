"""Site-side protocol logic: answer one MomentRequest with one Augmentation.

A site never ships rows.  For every moment-matrix row it (optionally)
resamples its local data, refits its nuisance models, calibrates the
density ratio against that row, and emits a single q-vector.  All failure
modes that can be survived per replicate are reported as flags; only
structural problems (missing columns, hash mismatch) produce an Error.
"""

from __future__ import annotations

import numpy as np

from ..errors import FedhteError, ProtocolError
from ..pipeline import build_workspace, fit_nuisances, source_replicate
from ..seeds import replicate_rng
from ..tables import ObservationTable
from . import wire
from .messages import Augmentation, ErrorMessage, MomentRequest


def site_serve(
    local: ObservationTable, request: MomentRequest
) -> Augmentation | ErrorMessage:
    expected = wire.config_hash(request.spec_payload())
    if request.config_hash != expected:
        return ErrorMessage(
            code="config_mismatch",
            message="request config hash does not match its specification payload",
        )
    needed = sorted(
        set(request.modifier_columns)
        | set(request.tilt_columns)
        | set(request.ps_predictors)
        | set(request.or_predictors)
    )
    missing = [c for c in needed if c not in local.covariate_names]
    if missing:
        return ErrorMessage(
            code="missing_columns",
            message=f"site {local.site_id!r} lacks covariate column(s) {missing}",
        )
    try:
        design = request.design()
    except ProtocolError as exc:
        return ErrorMessage(code="bad_design", message=str(exc))

    tilt_model = request.tilt_model()
    if request.moment_matrix.shape[1] != tilt_model.dim:
        return ErrorMessage(
            code="bad_moments",
            message=(
                f"moment rows have {request.moment_matrix.shape[1]} entries, "
                f"tilt model expects {tilt_model.dim}"
            ),
        )

    try:
        ws = build_workspace(
            local, design, request.ps_model(), request.or_model(), tilt_model
        )
    except FedhteError as exc:
        return ErrorMessage(code="bad_spec", message=str(exc))

    # Full-sample fits warm-start every replicate refit.
    point_ps, point_or, _ = fit_nuisances(ws)

    boot = request.bootstrap
    rows = boot.rows
    q = design.q
    vectors = np.zeros((rows, q))
    nuisance_flags: list[bool] = []
    tilt_flags: list[bool] = []
    ess = np.zeros(rows)
    max_weight = np.zeros(rows)
    tilt_warm = None
    for row in range(rows):
        b = boot.replicate_number(row)
        if b == 0:
            idx = None
        else:
            rng = replicate_rng(boot.base_seed, local.site_id, b)
            idx = rng.integers(0, ws.n, size=ws.n)
        try:
            rep = source_replicate(
                ws,
                request.moment_matrix[row],
                replicate=b,
                idx=idx,
                ps_init=point_ps,
                or_init=point_or,
                tilt_init=tilt_warm,
                ps_clip=request.ps_clip,
            )
        except FedhteError:
            nuisance_flags.append(False)
            tilt_flags.append(False)
            continue
        vectors[row] = rep.p_tilted
        nuisance_flags.append(rep.nuisance_converged)
        tilt_flags.append(rep.tilt_converged)
        ess[row] = rep.ess if np.isfinite(rep.ess) else 0.0
        max_weight[row] = rep.max_weight if np.isfinite(rep.max_weight) else 0.0
        if row == 0 and rep.tilt_converged:
            tilt_warm = rep.alpha
    return Augmentation(
        site_id=local.site_id,
        n_m=local.n,
        q=q,
        vectors=vectors,
        nuisance_converged=tuple(nuisance_flags),
        tilt_converged=tuple(tilt_flags),
        ess=ess,
        max_weight=max_weight,
    )
