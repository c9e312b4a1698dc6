"""Canonical byte encoding for protocol messages.

Messages are JSON with schema-ordered keys and no whitespace.  Every float
is rendered as a fixed-width 24-character decimal string (sign, 17
significant digits, 3-digit exponent) so a payload's byte size depends only
on its shape, never on the numeric values it carries: transcripts cannot
leak a site's sample size through value formatting.  The rendering
round-trips IEEE doubles exactly.

TCP transport wraps each payload in a frame with a 4-byte big-endian
length prefix.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from ..errors import FramingError, ProtocolError

WIRE_VERSION = 1
MAX_FRAME_BYTES = 64 * 1024 * 1024
FLOAT_WIDTH = 24


def encode_float(value: float) -> str:
    """Fixed-width decimal rendering of one finite double."""
    value = float(value)
    if not np.isfinite(value):
        raise ProtocolError(f"non-finite value {value!r} cannot cross the wire")
    mantissa, exponent = f"{value:+.16e}".split("e")
    return f"{mantissa}e{exponent[0]}{int(exponent[1:]):03d}"


def decode_float(text: str) -> float:
    if not isinstance(text, str) or len(text) != FLOAT_WIDTH:
        raise ProtocolError(f"malformed wire float {text!r}")
    try:
        value = float(text)
    except ValueError:
        raise ProtocolError(f"malformed wire float {text!r}") from None
    if not np.isfinite(value):
        raise ProtocolError(f"non-finite wire float {text!r}")
    return value


def encode_float_list(values) -> list[str]:
    return [encode_float(v) for v in np.asarray(values, dtype=float).ravel().tolist()]


def encode_float_matrix(matrix) -> list[list[str]]:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2:
        raise ProtocolError("expected a 2-d matrix")
    return [[encode_float(v) for v in row] for row in matrix.tolist()]


def decode_float_list(items, what: str) -> np.ndarray:
    if not isinstance(items, list):
        raise ProtocolError(f"{what}: expected a list")
    return np.asarray([decode_float(v) for v in items], dtype=float)


def decode_float_matrix(rows, what: str) -> np.ndarray:
    if not isinstance(rows, list) or not rows:
        raise ProtocolError(f"{what}: expected a non-empty list of rows")
    width = None
    decoded = []
    for row in rows:
        if not isinstance(row, list):
            raise ProtocolError(f"{what}: expected a list of lists")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ProtocolError(f"{what}: ragged rows")
        decoded.append([decode_float(v) for v in row])
    return np.asarray(decoded, dtype=float)


def dumps(payload) -> bytes:
    """Serialize a JSON-ready structure (floats already stringified)."""
    return json.dumps(
        payload, separators=(",", ":"), ensure_ascii=True, allow_nan=False
    ).encode("utf-8")


def loads(data: bytes):
    try:
        return json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable message: {exc}") from None


def config_hash(payload) -> str:
    """Digest pinning the run configuration; sites refuse on mismatch."""
    return hashlib.sha256(dumps(payload)).hexdigest()


def frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME_BYTES:
        raise FramingError(f"frame of {len(payload)} bytes exceeds limit")
    return len(payload).to_bytes(4, "big") + payload


def read_frame(recv_exact) -> bytes:
    """Read one frame through a ``recv_exact(nbytes) -> bytes`` callable."""
    header = recv_exact(4)
    if len(header) < 4:
        raise FramingError("truncated frame header")
    length = int.from_bytes(header, "big")
    if length > MAX_FRAME_BYTES:
        raise FramingError(f"declared frame of {length} bytes exceeds limit")
    payload = recv_exact(length)
    if len(payload) < length:
        raise FramingError(
            f"truncated frame: expected {length} bytes, got {len(payload)}"
        )
    return payload
