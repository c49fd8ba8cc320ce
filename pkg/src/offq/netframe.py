"""Length-prefixed JSON framing shared by the TCP broker and blob channels.

Wire format per frame: a 4-byte big-endian header length, the header (a
canonical-JSON object), then ``payload_len`` raw bytes if the header names a
payload.  Headers stay small; bulk bytes (checkpoint blobs, results) ride in
the payload so they are never JSON-escaped.
"""

from __future__ import annotations

import json
import socket
import struct
from typing import Any

from offq.protocol import canonical_json

MAX_HEADER_BYTES = 1 << 20
MAX_PAYLOAD_BYTES = 1 << 30

_LEN = struct.Struct(">I")


class FrameError(ConnectionError):
    """Malformed frame or closed peer."""


def read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise FrameError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def send_frame(
    sock: socket.socket, header: dict[str, Any], payload: bytes = b""
) -> None:
    if payload:
        header = dict(header, payload_len=len(payload))
    raw = canonical_json(header).encode("utf-8")
    if len(raw) > MAX_HEADER_BYTES:
        raise FrameError(f"header too large: {len(raw)} bytes")
    sock.sendall(_LEN.pack(len(raw)) + raw + payload)


def recv_frame(sock: socket.socket) -> tuple[dict[str, Any], bytes]:
    (header_len,) = _LEN.unpack(read_exact(sock, _LEN.size))
    if header_len > MAX_HEADER_BYTES:
        raise FrameError(f"header too large: {header_len} bytes")
    try:
        header = json.loads(read_exact(sock, header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"bad frame header: {exc}") from None
    if not isinstance(header, dict):
        raise FrameError("frame header is not an object")
    payload_len = header.get("payload_len", 0)
    if not isinstance(payload_len, int) or not 0 <= payload_len <= MAX_PAYLOAD_BYTES:
        raise FrameError(f"bad payload length: {payload_len!r}")
    payload = read_exact(sock, payload_len) if payload_len else b""
    return header, payload
