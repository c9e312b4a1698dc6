"""Protocol message types and their canonical (de)serialization.

Exactly two substantive messages exist: the coordinator's ``MomentRequest``
(model specs plus the target's moment matrix) and the site's
``Augmentation`` reply (replicate augmentation vectors plus convergence
flags and weight diagnostics).  Every field of the reply has a shape
determined by ``(B, q, d)`` alone; nothing scales with the site's sample
size except the explicit ``n_m`` integer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..design import WorkingDesign
from ..errors import ProtocolError
from ..glm import GlmSpec
from ..links import get_link
from ..tilting import TiltSpec
from . import wire


@dataclass(frozen=True)
class BootstrapSpec:
    """Replicate layout for one round.

    ``rows`` is the number of moment-matrix rows.  When ``point_row`` is
    set, the first row is evaluated on the full local sample (no
    resampling) and the remaining rows are bootstrap replicates 1..rows-1;
    otherwise every row b is bootstrap replicate b (1-based).
    """

    rows: int
    base_seed: int
    point_row: bool

    def replicate_number(self, row: int) -> int:
        """Bootstrap replicate number for a row; 0 means the full sample."""
        return row if self.point_row else row + 1


@dataclass(frozen=True)
class MomentRequest:
    design_link: str
    design_basis: str
    modifier_columns: tuple[str, ...]
    tilt_columns: tuple[str, ...]
    tilt_normalization: bool
    ps_predictors: tuple[str, ...]
    ps_intercept: bool
    or_family: str
    or_predictors: tuple[str, ...]
    or_intercept: bool
    or_treatment_terms: bool
    bootstrap: BootstrapSpec
    moment_matrix: np.ndarray
    ps_clip: float | None
    config_hash: str

    def __post_init__(self):
        matrix = np.asarray(self.moment_matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != self.bootstrap.rows:
            raise ProtocolError(
                f"moment matrix shape {matrix.shape} does not match "
                f"{self.bootstrap.rows} replicate rows"
            )
        object.__setattr__(self, "moment_matrix", matrix)
        object.__setattr__(self, "modifier_columns", tuple(self.modifier_columns))
        object.__setattr__(self, "tilt_columns", tuple(self.tilt_columns))
        object.__setattr__(self, "ps_predictors", tuple(self.ps_predictors))
        object.__setattr__(self, "or_predictors", tuple(self.or_predictors))

    def spec_payload(self) -> dict:
        """The configuration subset protected by the config hash."""
        return {
            "version": wire.WIRE_VERSION,
            "design": {
                "link": self.design_link,
                "basis": self.design_basis,
                "modifier_columns": list(self.modifier_columns),
            },
            "tilt": {
                "r_columns": list(self.tilt_columns),
                "include_normalization": self.tilt_normalization,
            },
            "nuisance": {
                "ps": {
                    "predictors": list(self.ps_predictors),
                    "intercept": self.ps_intercept,
                },
                "or": {
                    "family": self.or_family,
                    "predictors": list(self.or_predictors),
                    "intercept": self.or_intercept,
                    "treatment_terms": self.or_treatment_terms,
                },
            },
            "ps_clip": None if self.ps_clip is None else wire.encode_float(self.ps_clip),
        }

    def design(self) -> WorkingDesign:
        if self.design_basis != "linear":
            raise ProtocolError(f"unsupported basis {self.design_basis!r}")
        return WorkingDesign.linear(self.modifier_columns, get_link(self.design_link))

    def tilt_model(self) -> TiltSpec:
        return TiltSpec(
            r_columns=self.tilt_columns,
            include_normalization=self.tilt_normalization,
        )

    def ps_model(self) -> GlmSpec:
        return GlmSpec(
            family="bernoulli_logit",
            predictor_columns=self.ps_predictors,
            include_intercept=self.ps_intercept,
        )

    def or_model(self) -> GlmSpec:
        return GlmSpec(
            family=self.or_family,
            predictor_columns=self.or_predictors,
            include_intercept=self.or_intercept,
            include_treatment_main_and_interactions=self.or_treatment_terms,
        )


@dataclass(frozen=True)
class Augmentation:
    site_id: str
    n_m: int
    q: int
    vectors: np.ndarray  # (rows, q)
    nuisance_converged: tuple[bool, ...]
    tilt_converged: tuple[bool, ...]
    ess: np.ndarray
    max_weight: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=float)
        if vectors.ndim != 2 or vectors.shape[1] != self.q:
            raise ProtocolError(f"augmentation vectors shape {vectors.shape} != (*, {self.q})")
        rows = vectors.shape[0]
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "nuisance_converged", tuple(bool(v) for v in self.nuisance_converged))
        object.__setattr__(self, "tilt_converged", tuple(bool(v) for v in self.tilt_converged))
        object.__setattr__(self, "ess", np.asarray(self.ess, dtype=float))
        object.__setattr__(self, "max_weight", np.asarray(self.max_weight, dtype=float))
        for name in ("nuisance_converged", "tilt_converged", "ess", "max_weight"):
            if len(getattr(self, name)) != rows:
                raise ProtocolError(f"augmentation field {name} has wrong length")

    @property
    def rows(self) -> int:
        return self.vectors.shape[0]

    @property
    def replicate_ok(self) -> np.ndarray:
        return np.asarray(
            [n and t for n, t in zip(self.nuisance_converged, self.tilt_converged)]
        )


@dataclass(frozen=True)
class Ack:
    message: str = "ok"


@dataclass(frozen=True)
class ErrorMessage:
    code: str
    message: str


_KINDS = ("MomentRequest", "Augmentation", "Ack", "Error")


def _require_keys(obj: dict, keys: tuple[str, ...], what: str) -> None:
    if not isinstance(obj, dict):
        raise ProtocolError(f"{what}: expected an object")
    if tuple(obj.keys()) != keys:
        raise ProtocolError(
            f"{what}: expected keys {list(keys)}, got {list(obj.keys())}"
        )


def _body(msg) -> dict:
    if isinstance(msg, MomentRequest):
        return {
            "spec": msg.spec_payload(),
            "bootstrap": {
                "rows": msg.bootstrap.rows,
                "base_seed": msg.bootstrap.base_seed,
                "point_row": msg.bootstrap.point_row,
            },
            "moment_matrix": wire.encode_float_matrix(msg.moment_matrix),
            "config_hash": msg.config_hash,
        }
    if isinstance(msg, Augmentation):
        return {
            "site_id": msg.site_id,
            "n_m": msg.n_m,
            "q": msg.q,
            "vectors": wire.encode_float_matrix(msg.vectors),
            "nuisance_converged": [int(v) for v in msg.nuisance_converged],
            "tilt_converged": [int(v) for v in msg.tilt_converged],
            "ess": wire.encode_float_list(msg.ess),
            "max_weight": wire.encode_float_list(msg.max_weight),
        }
    if isinstance(msg, Ack):
        return {"message": msg.message}
    if isinstance(msg, ErrorMessage):
        return {"code": msg.code, "message": msg.message}
    raise ProtocolError(f"cannot encode {type(msg).__name__}")


def encode_message(msg) -> bytes:
    kind = type(msg).__name__ if not isinstance(msg, ErrorMessage) else "Error"
    if kind not in _KINDS:
        raise ProtocolError(f"unknown message kind {kind!r}")
    return wire.dumps({"version": wire.WIRE_VERSION, "kind": kind, "body": _body(msg)})


def _decode_request(body: dict) -> MomentRequest:
    _require_keys(body, ("spec", "bootstrap", "moment_matrix", "config_hash"), "MomentRequest")
    spec = body["spec"]
    _require_keys(spec, ("version", "design", "tilt", "nuisance", "ps_clip"), "spec")
    if spec["version"] != wire.WIRE_VERSION:
        raise ProtocolError(f"unsupported spec version {spec['version']!r}")
    design = spec["design"]
    _require_keys(design, ("link", "basis", "modifier_columns"), "design")
    tilt = spec["tilt"]
    _require_keys(tilt, ("r_columns", "include_normalization"), "tilt")
    nuisance = spec["nuisance"]
    _require_keys(nuisance, ("ps", "or"), "nuisance")
    ps = nuisance["ps"]
    _require_keys(ps, ("predictors", "intercept"), "ps model")
    or_model = nuisance["or"]
    _require_keys(or_model, ("family", "predictors", "intercept", "treatment_terms"), "or model")
    boot = body["bootstrap"]
    _require_keys(boot, ("rows", "base_seed", "point_row"), "bootstrap")
    if not isinstance(boot["rows"], int) or boot["rows"] < 1:
        raise ProtocolError("bootstrap rows must be a positive integer")
    clip = spec["ps_clip"]
    return MomentRequest(
        design_link=design["link"],
        design_basis=design["basis"],
        modifier_columns=tuple(design["modifier_columns"]),
        tilt_columns=tuple(tilt["r_columns"]),
        tilt_normalization=bool(tilt["include_normalization"]),
        ps_predictors=tuple(ps["predictors"]),
        ps_intercept=bool(ps["intercept"]),
        or_family=or_model["family"],
        or_predictors=tuple(or_model["predictors"]),
        or_intercept=bool(or_model["intercept"]),
        or_treatment_terms=bool(or_model["treatment_terms"]),
        bootstrap=BootstrapSpec(
            rows=boot["rows"],
            base_seed=boot["base_seed"],
            point_row=bool(boot["point_row"]),
        ),
        moment_matrix=wire.decode_float_matrix(body["moment_matrix"], "moment_matrix"),
        ps_clip=None if clip is None else wire.decode_float(clip),
        config_hash=body["config_hash"],
    )


def _decode_augmentation(body: dict) -> Augmentation:
    _require_keys(
        body,
        ("site_id", "n_m", "q", "vectors", "nuisance_converged", "tilt_converged", "ess", "max_weight"),
        "Augmentation",
    )
    if not isinstance(body["n_m"], int) or not isinstance(body["q"], int):
        raise ProtocolError("n_m and q must be integers")
    flags_n = body["nuisance_converged"]
    flags_t = body["tilt_converged"]
    for flags in (flags_n, flags_t):
        if not isinstance(flags, list) or any(v not in (0, 1) for v in flags):
            raise ProtocolError("convergence flags must be 0/1 integers")
    return Augmentation(
        site_id=body["site_id"],
        n_m=body["n_m"],
        q=body["q"],
        vectors=wire.decode_float_matrix(body["vectors"], "vectors"),
        nuisance_converged=tuple(bool(v) for v in flags_n),
        tilt_converged=tuple(bool(v) for v in flags_t),
        ess=wire.decode_float_list(body["ess"], "ess"),
        max_weight=wire.decode_float_list(body["max_weight"], "max_weight"),
    )


def decode_message(data: bytes):
    payload = wire.loads(data)
    _require_keys(payload, ("version", "kind", "body"), "message envelope")
    if payload["version"] != wire.WIRE_VERSION:
        raise ProtocolError(f"unknown protocol version {payload['version']!r}")
    kind = payload["kind"]
    body = payload["body"]
    if kind == "MomentRequest":
        return _decode_request(body)
    if kind == "Augmentation":
        return _decode_augmentation(body)
    if kind == "Ack":
        _require_keys(body, ("message",), "Ack")
        return Ack(message=body["message"])
    if kind == "Error":
        _require_keys(body, ("code", "message"), "Error")
        return ErrorMessage(code=body["code"], message=body["message"])
    raise ProtocolError(f"unknown message kind {kind!r}")


def size_excluding_n_m(data: bytes) -> int:
    """Byte size of an Augmentation with its ``n_m`` field normalized.

    Used to check that nothing but the explicit sample-size integer varies
    with a site's n.
    """
    msg = decode_message(data)
    if not isinstance(msg, Augmentation):
        raise ProtocolError("size check applies to Augmentation messages")
    normalized = Augmentation(
        site_id=msg.site_id,
        n_m=0,
        q=msg.q,
        vectors=msg.vectors,
        nuisance_converged=msg.nuisance_converged,
        tilt_converged=msg.tilt_converged,
        ess=msg.ess,
        max_weight=msg.max_weight,
    )
    return len(encode_message(normalized))
