"""Real-time hosting for protocol nodes: wall clock, TCP broker, TCP blobs.

Node logic is single-threaded by contract, so each LiveRuntime owns one
event-loop thread and funnels everything onto it: timers fire there, and
broker deliveries arriving on the client's dispatcher thread are submitted
there rather than run in place.  Effects issued by the node (publish, ack,
blob transfers) are blocking calls from the loop thread; the broker client
tolerates that because delivery dispatch and request/response run on
separate threads.

One runtime hosts one node.  Several runtimes in one process (as the tests
do, or a small single-machine deployment) each hold their own broker
connection, which is what scopes temporary queues and consumer ownership.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from collections import deque
from typing import Any, Callable

from offq.broker.core import Delivery
from offq.broker.tcp import BrokerTcpClient
from offq.orchestrator.blob import BlobClient
from offq.protocol import Envelope, new_guid
from offq.runtime import Node, Runtime

log = logging.getLogger("offq.live")


class _Timer:
    __slots__ = ("when", "seq", "fn", "args", "cancelled")

    def __init__(self, when: float, seq: int, fn: Callable[..., None], args: tuple):
        self.when = when
        self.seq = seq
        self.fn = fn
        self.args = args
        self.cancelled = False

    def __lt__(self, other: "_Timer") -> bool:
        return (self.when, self.seq) < (other.when, other.seq)


class _EventLoop:
    """One worker thread draining submitted tasks and due timers.

    Due timers are moved into the task queue before each pop, so a steady
    stream of submissions cannot starve periodic timers (heartbeats must
    keep their cadence under delivery load or peers start failover).
    """

    def __init__(self, name: str):
        self._cond = threading.Condition()
        self._tasks: deque[tuple[Callable[..., None], tuple]] = deque()
        self._timers: list[_Timer] = []
        self._seq = itertools.count()
        self._stopped = False
        self._thread = threading.Thread(
            target=self._run, name=f"loop-{name}", daemon=True
        )
        self._thread.start()

    def submit(self, fn: Callable[..., None], *args: Any) -> None:
        with self._cond:
            self._tasks.append((fn, args))
            self._cond.notify()

    def call_later(self, delay_s: float, fn: Callable[..., None], *args: Any) -> _Timer:
        timer = _Timer(time.monotonic() + max(0.0, delay_s), next(self._seq), fn, args)
        with self._cond:
            heapq.heappush(self._timers, timer)
            self._cond.notify()
        return timer

    def cancel(self, timer: Any) -> None:
        if isinstance(timer, _Timer):
            timer.cancelled = True  # removed lazily when it surfaces

    def stop(self) -> None:
        with self._cond:
            self._stopped = True
            self._cond.notify()
        if threading.current_thread() is not self._thread:
            self._thread.join(timeout=5)

    def _next_action(self) -> tuple[Callable[..., None], tuple] | None:
        with self._cond:
            while True:
                if self._stopped:
                    return None
                now = time.monotonic()
                while self._timers and (
                    self._timers[0].cancelled or self._timers[0].when <= now
                ):
                    timer = heapq.heappop(self._timers)
                    if not timer.cancelled:
                        self._tasks.append((timer.fn, timer.args))
                if self._tasks:
                    return self._tasks.popleft()
                wait = None
                if self._timers:
                    wait = max(0.0, self._timers[0].when - now)
                self._cond.wait(timeout=wait)

    def _run(self) -> None:
        while True:
            action = self._next_action()
            if action is None:
                return
            fn, args = action
            try:
                fn(*args)
            except Exception:
                # A failing handler must not kill the loop; the node's own
                # retries and the broker's redelivery own recovery.
                log.exception("handler raised on %s", threading.current_thread().name)


class LiveRuntime(Runtime):
    """Runtime over a TCP broker and blob service, on the wall clock."""

    def __init__(self, name: str, broker_address: str, connect_timeout_s: float = 5.0):
        self.name = name
        self.broker = BrokerTcpClient(broker_address, connect_timeout_s=connect_timeout_s)
        self._loop = _EventLoop(name)
        self._blob_clients: dict[str, BlobClient] = {}
        self._blob_lock = threading.Lock()

    # -- clock and scheduling ---------------------------------------------------

    def now(self) -> float:
        return time.monotonic()

    def call_later(self, delay_s: float, fn: Callable[..., None], *args: Any) -> Any:
        return self._loop.call_later(delay_s, fn, *args)

    def cancel(self, handle: Any) -> None:
        self._loop.cancel(handle)

    def submit(self, fn: Callable[..., None], *args: Any) -> None:
        """Run fn on the loop thread (where all node state lives)."""
        self._loop.submit(fn, *args)

    def new_guid(self) -> str:
        return new_guid()

    # -- broker -----------------------------------------------------------------

    def declare_exchange(self, name: str, kind: str) -> None:
        self.broker.declare_exchange(name, kind)

    def declare_queue(self, name: str) -> str:
        return self.broker.declare_queue(name)

    def temporary_queue(self) -> str:
        return self.broker.temporary_queue()

    def bind(self, queue: str, exchange: str, pattern: str) -> None:
        self.broker.bind(queue, exchange, pattern)

    def publish(self, exchange: str, routing_key: str, envelope: Envelope) -> None:
        self.broker.publish(exchange, routing_key, envelope)

    def consume(self, queue: str, callback: Callable[[Delivery], None]) -> str:
        return self.broker.consume(
            queue, lambda delivery: self._loop.submit(callback, delivery)
        )

    def cancel_consumer(self, consumer_tag: str) -> None:
        self.broker.cancel_consumer(consumer_tag)

    def ack(self, delivery: Delivery) -> None:
        self.broker.ack(delivery)

    def nack(self, delivery: Delivery) -> None:
        self.broker.nack(delivery)

    # -- blobs --------------------------------------------------------------------

    def _blob(self, addr: str) -> BlobClient:
        if not addr:
            raise ValueError("blob address is empty; was the node granted one?")
        with self._blob_lock:
            client = self._blob_clients.get(addr)
            if client is None:
                client = self._blob_clients[addr] = BlobClient(addr)
            return client

    def blob_put(self, addr: str, key: str, data: bytes) -> None:
        self._blob(addr).put(key, data)

    def blob_get(self, addr: str, key: str) -> bytes:
        return self._blob(addr).get(key)

    def blob_delete(self, addr: str, key: str) -> None:
        self._blob(addr).delete(key)

    def blob_exists(self, addr: str, key: str) -> bool:
        return self._blob(addr).exists(key)

    # -- lifecycle ----------------------------------------------------------------

    def stop(self) -> None:
        self._loop.stop()
        self.broker.close()
        with self._blob_lock:
            for client in self._blob_clients.values():
                client.close()
            self._blob_clients.clear()


def host_node(node: Node, broker_address: str, connect_timeout_s: float = 5.0) -> LiveRuntime:
    """Attach a node to a fresh LiveRuntime; returns the running runtime.

    start() runs on the loop thread so every touch of node state happens
    there, including the very first.
    """
    runtime = LiveRuntime(node.name, broker_address, connect_timeout_s)
    runtime.submit(node.start, runtime)
    return runtime
