"""TCP transport for the broker: framed JSON ops, pushed deliveries.

One server process owns a broker core; any number of connections drive it
with request frames ``{"op": ..., ...}`` and get exactly one response frame
per request, in request order.  Deliveries are pushed to the connection
whose consumer they belong to as separate ``{"delivery": {...}}`` frames,
so a response and a delivery can interleave on the wire but never corrupt
each other (frames are atomic under a per-connection send lock).

Losing a connection is a broker disconnect: its consumers drop, its
unacked deliveries requeue as redelivered, and its temporary queues vanish.

The client runs two background threads: a reader that splits incoming
frames into responses and deliveries, and a dispatcher that invokes
consumer callbacks outside the reader so a callback may issue broker calls
(ack, publish) without deadlocking.  One request is outstanding at a time.
A delivery can overtake its own consume response on the wire; the
dispatcher parks such deliveries until the consume call registers the
callback, and nacks deliveries for consumers cancelled locally.
"""

from __future__ import annotations

import queue
import socket
import socketserver
import threading
from typing import Any, Callable

from offq.broker.core import (
    Broker,
    BrokerError,
    DeclareConflict,
    Delivery,
    DEFAULT_PORT,
    NotFound,
)
from offq.netframe import FrameError, recv_frame, send_frame
from offq.protocol import envelope_from_json, envelope_to_json, Envelope

_ERROR_KINDS = {
    "not_found": NotFound,
    "declare_conflict": DeclareConflict,
    "broker": BrokerError,
}


def _error_kind(exc: BrokerError) -> str:
    if isinstance(exc, NotFound):
        return "not_found"
    if isinstance(exc, DeclareConflict):
        return "declare_conflict"
    return "broker"


class _ConnectionHandler(socketserver.BaseRequestHandler):
    def setup(self) -> None:
        # Responses and delivery pushes are back-to-back small writes; Nagle
        # would hold the second for the peer's delayed ACK (~40ms a message).
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.host: BrokerTcpServer = self.server.host_server
        self.owner = self.host.next_owner()
        self.send_lock = threading.Lock()
        self.host.register_conn(self)

    def handle(self) -> None:
        while True:
            try:
                header, _ = recv_frame(self.request)
            except (FrameError, OSError):
                return
            try:
                response = self.host.execute(self, header)
            except BrokerError as exc:
                response = {"error": str(exc), "kind": _error_kind(exc)}
            except (KeyError, TypeError, ValueError) as exc:
                response = {"error": f"malformed request: {exc}", "kind": "broker"}
            if not self.send(response):
                return

    def finish(self) -> None:
        self.host.drop_conn(self)

    def send(self, header: dict[str, Any]) -> bool:
        try:
            with self.send_lock:
                send_frame(self.request, header)
            return True
        except OSError:
            return False


class _TcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], host_server: "BrokerTcpServer"):
        self.host_server = host_server
        super().__init__(address, _ConnectionHandler)


class BrokerTcpServer:
    """Hosts one broker core on a TCP port; start() returns immediately."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = DEFAULT_PORT,
        journal_path: str | None = None,
    ):
        self.broker = Broker(journal_path=journal_path)
        self._tcp = _TcpServer((host, port), self)
        self._thread: threading.Thread | None = None
        # The dispatch lock serializes op+flush so pushed deliveries leave in
        # broker assignment order.
        self._dispatch = threading.Lock()
        self._owner_seq = 0
        self._conns: dict[str, _ConnectionHandler] = {}
        self._consumer_conn: dict[str, str] = {}
        self._tag_conn: dict[int, str] = {}

    @property
    def address(self) -> str:
        host, port = self._tcp.server_address[:2]
        return f"{host}:{port}"

    @property
    def port(self) -> int:
        return int(self._tcp.server_address[1])

    def start(self) -> "BrokerTcpServer":
        self._thread = threading.Thread(
            target=lambda: self._tcp.serve_forever(poll_interval=0.05),
            name="broker-tcp",
            daemon=True,
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        self._tcp.serve_forever()

    # -- connection registry --------------------------------------------------

    def next_owner(self) -> str:
        with self._dispatch:
            self._owner_seq += 1
            return f"conn.{self._owner_seq}"

    def register_conn(self, conn: _ConnectionHandler) -> None:
        with self._dispatch:
            self._conns[conn.owner] = conn

    def drop_conn(self, conn: _ConnectionHandler) -> None:
        with self._dispatch:
            self._conns.pop(conn.owner, None)
            for tag in [t for t, o in self._consumer_conn.items() if o == conn.owner]:
                del self._consumer_conn[tag]
            for tag in [t for t, o in self._tag_conn.items() if o == conn.owner]:
                del self._tag_conn[tag]
            self.broker.disconnect(conn.owner)
            self._flush()

    # -- request execution ------------------------------------------------------

    def execute(self, conn: _ConnectionHandler, req: dict[str, Any]) -> dict[str, Any]:
        with self._dispatch:
            result = self._apply(conn, req.get("op"), req)
            self._flush()
            return result

    def _apply(
        self, conn: _ConnectionHandler, op: Any, req: dict[str, Any]
    ) -> dict[str, Any]:
        broker = self.broker
        if op == "declare_exchange":
            broker.declare_exchange(req["name"], req["kind"])
            return {"ok": True}
        if op == "declare_queue":
            owner = conn.owner if req.get("exclusive") else None
            return {
                "ok": True,
                "queue": broker.declare_queue(req["name"], exclusive_owner=owner),
            }
        if op == "temporary_queue":
            return {"ok": True, "queue": broker.temporary_queue(conn.owner)}
        if op == "bind":
            broker.bind(req["queue"], req["exchange"], req["pattern"])
            return {"ok": True}
        if op == "publish":
            envelope = envelope_from_json(req["envelope"])
            seq = broker.publish(req["exchange"], req["routing_key"], envelope)
            return {"ok": True, "seq": seq}
        if op == "consume":
            tag = broker.consume(req["queue"], conn.owner)
            self._consumer_conn[tag] = conn.owner
            return {"ok": True, "consumer_tag": tag}
        if op == "cancel_consumer":
            tag = req["consumer_tag"]
            if self._consumer_conn.get(tag) != conn.owner:
                raise NotFound(f"consumer {tag!r} does not belong to you")
            broker.cancel_consumer(tag)
            del self._consumer_conn[tag]
            return {"ok": True}
        if op == "ack" or op == "nack":
            tag = req["tag"]
            if self._tag_conn.get(tag) != conn.owner:
                raise NotFound(f"delivery tag {tag} is not yours to settle")
            del self._tag_conn[tag]
            (broker.ack if op == "ack" else broker.nack)(tag)
            return {"ok": True}
        if op == "queue_depth":
            return {"ok": True, "depth": broker.queue_depth(req["queue"])}
        if op == "ping":
            return {"ok": True}
        raise BrokerError(f"unknown op {op!r}")

    def _flush(self) -> None:
        for delivery in self.broker.collect_ready():
            owner = self._consumer_conn.get(delivery.consumer_tag)
            conn = self._conns.get(owner) if owner is not None else None
            if conn is None:
                # Connection raced away; its disconnect path requeues this.
                continue
            self._tag_conn[delivery.tag] = owner
            conn.send({"delivery": delivery.to_json()})


class BrokerTcpClient:
    """One connection to a broker server; safe to share across threads."""

    def __init__(self, address: str, connect_timeout_s: float = 5.0):
        host, _, port = address.rpartition(":")
        self.address = address
        self._sock = socket.create_connection(
            (host or "127.0.0.1", int(port)), timeout=connect_timeout_s
        )
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._req_lock = threading.Lock()
        self._responses: queue.Queue[dict[str, Any] | None] = queue.Queue()
        self._deliveries: queue.Queue[dict[str, Any] | None] = queue.Queue()
        self._callbacks: dict[str, Callable[[Delivery], None]] = {}
        self._cancelled: set[str] = set()
        self._callbacks_cond = threading.Condition()
        self._closed = False
        self._reader = threading.Thread(
            target=self._read_loop, name="broker-client-reader", daemon=True
        )
        self._dispatcher = threading.Thread(
            target=self._dispatch_loop, name="broker-client-dispatch", daemon=True
        )
        self._reader.start()
        self._dispatcher.start()

    # -- plumbing ------------------------------------------------------------

    def _read_loop(self) -> None:
        while True:
            try:
                header, _ = recv_frame(self._sock)
            except (FrameError, OSError):
                self._responses.put(None)
                self._deliveries.put(None)
                with self._callbacks_cond:
                    self._callbacks_cond.notify_all()
                return
            if "delivery" in header:
                self._deliveries.put(header["delivery"])
            else:
                self._responses.put(header)

    def _resolve_callback(self, tag: str) -> Callable[[Delivery], None] | None:
        """Wait out the delivery-beats-consume-response race, bounded."""
        deadline = 5.0
        with self._callbacks_cond:
            while True:
                callback = self._callbacks.get(tag)
                if callback is not None or tag in self._cancelled or self._closed:
                    return callback
                if deadline <= 0:
                    return None
                waited = self._callbacks_cond.wait(timeout=deadline)
                deadline = 0 if not waited else deadline

    def _dispatch_loop(self) -> None:
        while True:
            payload = self._deliveries.get()
            if payload is None:
                return
            delivery = Delivery.from_json(payload)
            callback = self._resolve_callback(delivery.consumer_tag)
            if callback is None:
                try:
                    self._request({"op": "nack", "tag": delivery.tag})
                except (BrokerError, ConnectionError):
                    pass
                continue
            callback(delivery)

    def _request(self, req: dict[str, Any]) -> dict[str, Any]:
        with self._req_lock:
            if self._closed:
                raise ConnectionError("broker client is closed")
            try:
                send_frame(self._sock, req)
            except OSError as exc:
                raise ConnectionError(f"broker connection lost: {exc}") from None
            response = self._responses.get()
        if response is None:
            raise ConnectionError("broker connection lost")
        if "error" in response:
            raise _ERROR_KINDS.get(response.get("kind", ""), BrokerError)(
                response["error"]
            )
        return response

    def close(self) -> None:
        self._closed = True
        with self._callbacks_cond:
            self._callbacks_cond.notify_all()
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    # -- broker surface ---------------------------------------------------------

    def ping(self) -> None:
        self._request({"op": "ping"})

    def declare_exchange(self, name: str, kind: str) -> None:
        self._request({"op": "declare_exchange", "name": name, "kind": kind})

    def declare_queue(self, name: str, exclusive: bool = False) -> str:
        # An exclusive queue doubles as a connection-scoped lock: a second
        # connection declaring the same name gets DeclareConflict.
        req: dict[str, Any] = {"op": "declare_queue", "name": name}
        if exclusive:
            req["exclusive"] = True
        return self._request(req)["queue"]

    def temporary_queue(self) -> str:
        return self._request({"op": "temporary_queue"})["queue"]

    def bind(self, queue_name: str, exchange: str, pattern: str) -> None:
        self._request(
            {"op": "bind", "queue": queue_name, "exchange": exchange, "pattern": pattern}
        )

    def publish(self, exchange: str, routing_key: str, envelope: Envelope) -> int:
        return self._request(
            {
                "op": "publish",
                "exchange": exchange,
                "routing_key": routing_key,
                "envelope": envelope_to_json(envelope),
            }
        )["seq"]

    def consume(
        self, queue_name: str, on_delivery: Callable[[Delivery], None]
    ) -> str:
        response = self._request({"op": "consume", "queue": queue_name})
        tag = response["consumer_tag"]
        with self._callbacks_cond:
            self._callbacks[tag] = on_delivery
            self._callbacks_cond.notify_all()
        return tag

    def cancel_consumer(self, consumer_tag: str) -> None:
        with self._callbacks_cond:
            self._callbacks.pop(consumer_tag, None)
            self._cancelled.add(consumer_tag)
            self._callbacks_cond.notify_all()
        self._request({"op": "cancel_consumer", "consumer_tag": consumer_tag})

    def ack(self, delivery: Delivery | int) -> None:
        tag = delivery.tag if isinstance(delivery, Delivery) else delivery
        self._request({"op": "ack", "tag": tag})

    def nack(self, delivery: Delivery | int) -> None:
        tag = delivery.tag if isinstance(delivery, Delivery) else delivery
        self._request({"op": "nack", "tag": tag})

    def queue_depth(self, queue_name: str) -> int:
        return self._request({"op": "queue_depth", "queue": queue_name})["depth"]
