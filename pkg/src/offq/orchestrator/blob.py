"""Blob storage for checkpoints, uploaded programs, and results.

The orchestrator side of the shared folder: workers and clients push opaque
byte blobs under caller-chosen keys and fetch them back later.  Two
implementations share the dict-of-bytes semantics: an in-process store used
by simulations (one instance shared by all simulated nodes, standing in for
a network share) and a TCP server/client pair for live deployments.
"""

from __future__ import annotations

import socket
import socketserver
import threading

from offq.netframe import FrameError, recv_frame, send_frame

DEFAULT_BLOB_PORT = 5700


class BlobError(KeyError):
    """Missing blob key."""


class MemoryBlobStore:
    """Thread-safe dict-backed blob store."""

    def __init__(self) -> None:
        self._blobs: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def put(self, key: str, data: bytes) -> None:
        with self._lock:
            self._blobs[key] = bytes(data)

    def get(self, key: str) -> bytes:
        with self._lock:
            try:
                return self._blobs[key]
            except KeyError:
                raise BlobError(key) from None

    def delete(self, key: str) -> None:
        with self._lock:
            self._blobs.pop(key, None)

    def exists(self, key: str) -> bool:
        with self._lock:
            return key in self._blobs

    def keys(self) -> list[str]:
        with self._lock:
            return sorted(self._blobs)

    def total_bytes(self) -> int:
        with self._lock:
            return sum(len(v) for v in self._blobs.values())


class _BlobHandler(socketserver.BaseRequestHandler):
    def setup(self) -> None:
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def handle(self) -> None:
        store: MemoryBlobStore = self.server.store  # type: ignore[attr-defined]
        while True:
            try:
                header, payload = recv_frame(self.request)
            except (FrameError, OSError):
                return
            op = header.get("op")
            key = header.get("key", "")
            try:
                if op == "put":
                    store.put(key, payload)
                    send_frame(self.request, {"ok": True})
                elif op == "get":
                    try:
                        data = store.get(key)
                        send_frame(self.request, {"ok": True}, payload=data)
                    except BlobError:
                        send_frame(self.request, {"ok": False, "error": "not_found"})
                elif op == "delete":
                    store.delete(key)
                    send_frame(self.request, {"ok": True})
                elif op == "exists":
                    send_frame(self.request, {"ok": True, "exists": store.exists(key)})
                else:
                    send_frame(self.request, {"ok": False, "error": "bad_op"})
            except OSError:
                return


class BlobServer:
    """Serves a MemoryBlobStore over framed TCP; one thread per client."""

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_BLOB_PORT):
        self.store = MemoryBlobStore()
        self._server = socketserver.ThreadingTCPServer(
            (host, port), _BlobHandler, bind_and_activate=False
        )
        self._server.allow_reuse_address = True
        self._server.daemon_threads = True
        self._server.store = self.store  # type: ignore[attr-defined]
        self._server.server_bind()
        self._server.server_activate()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="blob-server", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


class BlobClient:
    """Blocking client for a BlobServer; reconnects per call on failure."""

    def __init__(self, address: str, timeout_s: float = 10.0):
        host, _, port = address.rpartition(":")
        self._addr = (host, int(port))
        self._timeout_s = timeout_s
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _conn(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.create_connection(self._addr, timeout=self._timeout_s)
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return self._sock

    def _call(self, header: dict, payload: bytes = b"") -> tuple[dict, bytes]:
        with self._lock:
            try:
                send_frame(self._conn(), header, payload)
                return recv_frame(self._conn())
            except (OSError, FrameError):
                self.close()
                # one reconnect attempt, then let the error surface
                send_frame(self._conn(), header, payload)
                return recv_frame(self._conn())

    def put(self, key: str, data: bytes) -> None:
        self._call({"op": "put", "key": key}, data)

    def get(self, key: str) -> bytes:
        header, payload = self._call({"op": "get", "key": key})
        if not header.get("ok"):
            raise BlobError(key)
        return payload

    def delete(self, key: str) -> None:
        self._call({"op": "delete", "key": key})

    def exists(self, key: str) -> bool:
        header, _ = self._call({"op": "exists", "key": key})
        return bool(header.get("exists"))

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None
