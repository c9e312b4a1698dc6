"""Transports carrying identical serialized bytes by three different means.

The transport cannot affect results: a handle's ``exchange`` takes the
request bytes and returns the response bytes verbatim, whether the site
runs in-process (loopback), behind a handoff directory (file exchange), or
across a TCP connection (length-prefixed frames).
"""

from __future__ import annotations

import os
import socket
import threading
import time
from pathlib import Path

from ..errors import FramingError, ProtocolError
from ..tables import ObservationTable
from . import wire
from .messages import decode_message, encode_message
from .site import site_serve

REQUEST_NAME = "request.json"
RESPONSE_NAME = "response.json"


class LocalSite:
    """In-process site: decodes, serves, and re-encodes like a remote one."""

    def __init__(self, table: ObservationTable):
        self.table = table
        self.site_id = table.site_id

    def serve_bytes(self, request_bytes: bytes) -> bytes:
        message = decode_message(request_bytes)
        reply = site_serve(self.table, message)
        return encode_message(reply)


class LoopbackHandle:
    def __init__(self, site: LocalSite):
        self.site_id = site.site_id
        self._site = site

    def exchange(self, request_bytes: bytes, timeout: float) -> bytes:
        return self._site.serve_bytes(request_bytes)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as handle:
        handle.write(data)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp, path)


class FileExchangeHandle:
    """Coordinator side of the handoff-directory transport."""

    def __init__(self, site_id: str, root, poll_interval: float = 0.05):
        self.site_id = site_id
        self.root = Path(root)
        self.poll_interval = poll_interval

    def exchange(self, request_bytes: bytes, timeout: float) -> bytes:
        site_dir = self.root / self.site_id
        site_dir.mkdir(parents=True, exist_ok=True)
        response = site_dir / RESPONSE_NAME
        if response.exists():
            response.unlink()
        _atomic_write(site_dir / REQUEST_NAME, request_bytes)
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if response.exists():
                return response.read_bytes()
            time.sleep(self.poll_interval)
        raise TimeoutError(
            f"site {self.site_id!r} produced no response within {timeout:.0f}s"
        )


def serve_handoff(
    root,
    table: ObservationTable,
    poll_interval: float = 0.05,
    deadline: float | None = None,
    persist: bool = False,
) -> int:
    """Site side of the handoff directory; returns rounds served."""
    site = LocalSite(table)
    site_dir = Path(root) / site.site_id
    site_dir.mkdir(parents=True, exist_ok=True)
    request = site_dir / REQUEST_NAME
    response = site_dir / RESPONSE_NAME
    served = 0
    while True:
        if request.exists() and not response.exists():
            reply = site.serve_bytes(request.read_bytes())
            _atomic_write(response, reply)
            request.unlink()
            served += 1
            if not persist:
                return served
        if deadline is not None and time.monotonic() > deadline:
            return served
        time.sleep(poll_interval)


class TcpHandle:
    def __init__(self, site_id: str, host: str, port: int):
        self.site_id = site_id
        self.host = host
        self.port = port

    def exchange(self, request_bytes: bytes, timeout: float) -> bytes:
        with socket.create_connection((self.host, self.port), timeout=timeout) as conn:
            conn.settimeout(timeout)
            conn.sendall(wire.frame(request_bytes))

            def recv_exact(nbytes: int) -> bytes:
                chunks = b""
                while len(chunks) < nbytes:
                    block = conn.recv(nbytes - len(chunks))
                    if not block:
                        break
                    chunks += block
                return chunks

            return wire.read_frame(recv_exact)


class TcpSiteServer:
    """Serves protocol rounds on a TCP port, one request per connection."""

    def __init__(self, table: ObservationTable, host: str = "127.0.0.1", port: int = 0):
        self.site = LocalSite(table)
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(8)
        self.host, self.port = self._sock.getsockname()
        self._stop = threading.Event()

    def serve(self, rounds: int | None = 1) -> int:
        """Handle ``rounds`` requests (None = until ``stop()``)."""
        served = 0
        self._sock.settimeout(0.2)
        try:
            while not self._stop.is_set() and (rounds is None or served < rounds):
                try:
                    conn, _ = self._sock.accept()
                except socket.timeout:
                    continue
                with conn:
                    conn.settimeout(30.0)

                    def recv_exact(nbytes: int) -> bytes:
                        chunks = b""
                        while len(chunks) < nbytes:
                            block = conn.recv(nbytes - len(chunks))
                            if not block:
                                break
                            chunks += block
                        return chunks

                    try:
                        request = wire.read_frame(recv_exact)
                    except FramingError:
                        continue
                    reply = self.site.serve_bytes(request)
                    conn.sendall(wire.frame(reply))
                    served += 1
        finally:
            self._sock.close()
        return served

    def serve_in_thread(self, rounds: int | None = 1) -> threading.Thread:
        thread = threading.Thread(target=self.serve, args=(rounds,), daemon=True)
        thread.start()
        return thread

    def stop(self) -> None:
        self._stop.set()


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ProtocolError(f"malformed address {addr!r}; expected host:port")
    return host or "127.0.0.1", int(port)
