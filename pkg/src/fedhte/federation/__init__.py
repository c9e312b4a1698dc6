"""Single-round coordinator/site protocol and its transports."""

from .coordinator import RoundConfig, RoundResult, build_request, coordinator_round, default_moment_matrix
from .messages import (
    Ack,
    Augmentation,
    BootstrapSpec,
    ErrorMessage,
    MomentRequest,
    decode_message,
    encode_message,
    size_excluding_n_m,
)
from .site import site_serve
from .transports import (
    FileExchangeHandle,
    LocalSite,
    LoopbackHandle,
    TcpHandle,
    TcpSiteServer,
    parse_address,
    serve_handoff,
)
from .wire import config_hash, decode_float, encode_float, frame, read_frame

__all__ = [
    "Ack",
    "Augmentation",
    "BootstrapSpec",
    "ErrorMessage",
    "FileExchangeHandle",
    "LocalSite",
    "LoopbackHandle",
    "MomentRequest",
    "RoundConfig",
    "RoundResult",
    "TcpHandle",
    "TcpSiteServer",
    "build_request",
    "config_hash",
    "coordinator_round",
    "decode_float",
    "decode_message",
    "default_moment_matrix",
    "encode_float",
    "encode_message",
    "frame",
    "parse_address",
    "read_frame",
    "serve_handoff",
    "site_serve",
    "size_excluding_n_m",
]
