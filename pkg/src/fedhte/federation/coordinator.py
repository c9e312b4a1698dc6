"""Coordinator side of the single-round protocol.

One request goes out to every site and one response comes back; the
request bytes are identical across sites (the target's moment matrix is a
broadcast), responses are reduced in ascending site-id order, and the full
transcript is retained so privacy and single-round properties can be
audited after the fact.
"""

from __future__ import annotations

import dataclasses
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..design import WorkingDesign
from ..errors import ProtocolError
from ..glm import GlmSpec
from ..solver import AugmentationVector
from ..tables import ObservationTable
from ..tilting import TiltSpec
from . import wire
from .messages import Augmentation, BootstrapSpec, ErrorMessage, MomentRequest, decode_message, encode_message


@dataclass(frozen=True)
class RoundConfig:
    design: WorkingDesign
    ps_model: GlmSpec
    or_model: GlmSpec
    tilt_model: TiltSpec
    replicates: int = 1  # total moment rows
    base_seed: int = 0
    point_row: bool = True
    ps_clip: float | None = None
    timeout: float = 300.0

    def __post_init__(self):
        if self.design.basis_kind != "linear" or self.design.modifier_names is None:
            raise ProtocolError(
                "only designs built with WorkingDesign.linear can cross the wire"
            )
        if self.replicates < 1:
            raise ProtocolError("a round needs at least one moment row")


@dataclass
class RoundResult:
    request_bytes: bytes
    augmentations: list[Augmentation]
    failures: dict[str, str]
    transcripts: dict[str, tuple[bytes, bytes]] = field(default_factory=dict)
    moment_matrix: np.ndarray | None = None

    def point_vectors(self) -> list[AugmentationVector]:
        """Row-0 augmentation vectors (the full-sample ones) per site."""
        out = []
        for aug in self.augmentations:
            out.append(
                AugmentationVector(
                    site_id=aug.site_id,
                    n_m=aug.n_m,
                    p_vector=aug.vectors[0],
                    replicate=0,
                    nuisance_converged=aug.nuisance_converged[0],
                    tilt_converged=aug.tilt_converged[0],
                )
            )
        return out

    def transcript_digest(self) -> str:
        digest = hashlib.sha256()
        for site_id in sorted(self.transcripts):
            request, response = self.transcripts[site_id]
            digest.update(site_id.encode("utf-8"))
            digest.update(request)
            digest.update(response)
        return digest.hexdigest()


def build_request(config: RoundConfig, moment_matrix: np.ndarray) -> MomentRequest:
    design = config.design
    request = MomentRequest(
        design_link=design.link.kind,
        design_basis="linear",
        modifier_columns=design.modifier_names,
        tilt_columns=config.tilt_model.r_columns,
        tilt_normalization=config.tilt_model.include_normalization,
        ps_predictors=config.ps_model.predictor_columns,
        ps_intercept=config.ps_model.include_intercept,
        or_family=config.or_model.family,
        or_predictors=config.or_model.predictor_columns,
        or_intercept=config.or_model.include_intercept,
        or_treatment_terms=config.or_model.include_treatment_main_and_interactions,
        bootstrap=BootstrapSpec(
            rows=config.replicates,
            base_seed=config.base_seed,
            point_row=config.point_row,
        ),
        moment_matrix=moment_matrix,
        ps_clip=config.ps_clip,
        config_hash="",
    )
    return dataclasses.replace(request, config_hash=wire.config_hash(request.spec_payload()))


def default_moment_matrix(target: ObservationTable, config: RoundConfig) -> np.ndarray:
    """Target moment rows: full-sample first when requested, then replicates."""
    from ..pipeline import build_workspace, tilt_moments
    from ..seeds import replicate_rng

    ws_features = config.tilt_model.feature_matrix(target)
    rows = []
    start = 1
    if config.point_row:
        rows.append(ws_features.mean(axis=0))
    count = config.replicates - len(rows)
    for b in range(start, start + count):
        rng = replicate_rng(config.base_seed, target.site_id, b)
        idx = rng.integers(0, target.n, size=target.n)
        rows.append(ws_features[idx].mean(axis=0))
    return np.asarray(rows)


def coordinator_round(
    target: ObservationTable,
    handles: Sequence,
    config: RoundConfig,
    moment_matrix: np.ndarray | None = None,
) -> RoundResult:
    """Broadcast one MomentRequest and gather one Augmentation per site."""
    ids = [h.site_id for h in handles]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate site ids among handles: {ids}")
    if target.site_id in ids:
        raise ProtocolError("a source handle reuses the target's site id")
    if moment_matrix is None:
        moment_matrix = default_moment_matrix(target, config)
    moment_matrix = np.asarray(moment_matrix, dtype=float)
    if moment_matrix.shape != (config.replicates, config.tilt_model.dim):
        raise ProtocolError(
            f"moment matrix shape {moment_matrix.shape} does not match "
            f"({config.replicates}, {config.tilt_model.dim})"
        )
    request_bytes = encode_message(build_request(config, moment_matrix))

    result = RoundResult(
        request_bytes=request_bytes,
        augmentations=[],
        failures={},
        moment_matrix=moment_matrix,
    )
    if not handles:
        return result

    def talk(handle):
        return handle.exchange(request_bytes, config.timeout)

    with ThreadPoolExecutor(max_workers=len(handles)) as pool:
        futures = {h.site_id: pool.submit(talk, h) for h in handles}
        replies: dict[str, bytes | None] = {}
        for site_id, future in futures.items():
            try:
                replies[site_id] = future.result()
            except Exception as exc:
                replies[site_id] = None
                result.failures[site_id] = f"{type(exc).__name__}: {exc}"

    for site_id in sorted(replies):
        payload = replies[site_id]
        if payload is None:
            continue
        result.transcripts[site_id] = (request_bytes, payload)
        try:
            message = decode_message(payload)
        except ProtocolError as exc:
            result.failures[site_id] = str(exc)
            continue
        if isinstance(message, ErrorMessage):
            result.failures[site_id] = f"{message.code}: {message.message}"
            continue
        if not isinstance(message, Augmentation):
            result.failures[site_id] = f"unexpected reply kind {type(message).__name__}"
            continue
        if message.site_id != site_id:
            result.failures[site_id] = (
                f"reply from {message.site_id!r} on handle {site_id!r}"
            )
            continue
        if message.rows != config.replicates or message.q != config.design.q:
            result.failures[site_id] = (
                f"reply shape ({message.rows}, {message.q}) does not match "
                f"({config.replicates}, {config.design.q})"
            )
            continue
        result.augmentations.append(message)
    result.augmentations.sort(key=lambda a: a.site_id)
    return result
