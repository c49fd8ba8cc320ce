"""Hosting interface for protocol nodes.

Orchestrators, workers, and clients are event-driven state machines: they
react to broker deliveries and timers, and issue effects (publishes, blob
transfers, more timers) through this interface. The simulation lab hosts
them on a virtual clock; live mode hosts each on its own thread against the
TCP broker. Node logic is identical in both.

Timer handles come from call_later() and are opaque; cancel() is idempotent.
Consumer callbacks receive a Delivery and must eventually ack or nack it.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Any, Callable

from offq.broker.core import Delivery
from offq.protocol import CLIENT_REGISTER_KEY, Envelope, WORKER_REGISTER_KEY

DeliveryCallback = Callable[[Delivery], None]

# Exchange layout shared by every deployment. The orchestrator exchange is a
# topic exchange (patterns like "p1.#"); client and worker exchanges route
# by exact principal GUID; replication is a fanout shared by the replica
# group.
ORCH_EXCHANGE = "orch"
CLIENT_EXCHANGE = "client"
WORKER_EXCHANGE = "worker"
REPL_EXCHANGE = "repl"

EXCHANGE_LAYOUT = (
    (ORCH_EXCHANGE, "topic"),
    (CLIENT_EXCHANGE, "direct"),
    (WORKER_EXCHANGE, "direct"),
    (REPL_EXCHANGE, "fanout"),
)


def register_queue_client() -> str:
    return "q.register.client"


def register_queue_worker() -> str:
    return "q.register.worker"


def orchestrator_queue(name: str) -> str:
    return f"q.orch.{name}"


def replication_queue(name: str) -> str:
    return f"q.repl.{name}"


def client_queue(client_id: str) -> str:
    return f"q.client.{client_id}"


def worker_queue(worker_id: str) -> str:
    return f"q.worker.{worker_id}"


def declare_exchange_layout(declare: Callable[[str, str], Any]) -> None:
    for name, kind in EXCHANGE_LAYOUT:
        declare(name, kind)


def declare_register_layout(
    declare_queue: Callable[[str], Any], bind: Callable[[str, str, str], Any]
) -> None:
    """Declare the shared registration queues and their bindings.

    Every participant runs this, not just orchestrators: a register message
    published before any orchestrator is up then waits in the queue instead
    of being dropped by the exchange, so start order does not matter.
    """
    declare_queue(register_queue_client())
    bind(register_queue_client(), ORCH_EXCHANGE, CLIENT_REGISTER_KEY)
    declare_queue(register_queue_worker())
    bind(register_queue_worker(), ORCH_EXCHANGE, WORKER_REGISTER_KEY)


class Runtime(ABC):
    """Effect interface a hosted node talks to. One runtime per node."""

    name: str  # connection owner identity on the broker

    @abstractmethod
    def now(self) -> float:
        """Seconds on this runtime's clock (virtual or monotonic wall)."""

    @abstractmethod
    def call_later(self, delay_s: float, fn: Callable[..., None], *args: Any) -> Any:
        """Schedule fn(*args) after delay_s; returns a cancellable handle."""

    @abstractmethod
    def cancel(self, handle: Any) -> None:
        """Cancel a timer if it has not fired; safe to call twice."""

    @abstractmethod
    def new_guid(self) -> str:
        """Fresh GUID (seeded and reproducible under simulation)."""

    # -- broker --

    @abstractmethod
    def declare_exchange(self, name: str, kind: str) -> None: ...

    @abstractmethod
    def declare_queue(self, name: str) -> str: ...

    @abstractmethod
    def temporary_queue(self) -> str: ...

    @abstractmethod
    def bind(self, queue: str, exchange: str, pattern: str) -> None: ...

    @abstractmethod
    def publish(self, exchange: str, routing_key: str, envelope: Envelope) -> None: ...

    @abstractmethod
    def consume(self, queue: str, callback: DeliveryCallback) -> str: ...

    @abstractmethod
    def cancel_consumer(self, consumer_tag: str) -> None: ...

    @abstractmethod
    def ack(self, delivery: Delivery) -> None: ...

    @abstractmethod
    def nack(self, delivery: Delivery) -> None: ...

    # -- blob channel (addressed by the serving orchestrator's blob_addr) --

    @abstractmethod
    def blob_put(self, addr: str, key: str, data: bytes) -> None: ...

    @abstractmethod
    def blob_get(self, addr: str, key: str) -> bytes: ...

    @abstractmethod
    def blob_delete(self, addr: str, key: str) -> None: ...

    @abstractmethod
    def blob_exists(self, addr: str, key: str) -> bool: ...

    # -- execution accounting hooks (used by the simulation; no-ops live) --

    def on_exec_span(self, job_key: str, duration_s: float) -> Any:
        """Announce an uninterrupted stretch of job execution about to run.

        ``job_key`` identifies the job whose work is being done, so fault
        injection can follow the job across worker restarts.  Returns an
        opaque span token to close with :meth:`end_exec_span`.
        """
        return None

    def end_exec_span(self, token: Any, actual_duration_s: float) -> None:
        """Close a span after actually completing actual_duration_s of it."""

    def note_busy(self, duration_s: float) -> None:
        """Account non-step busy time (checkpoint pauses) for energy stats."""


class Node(ABC):
    """Base for hosted state machines."""

    def __init__(self, name: str):
        self.name = name
        self.runtime: Runtime | None = None

    @abstractmethod
    def start(self, runtime: Runtime) -> None:
        """Attach to a runtime: declare queues, bind, consume, arm timers."""

    def stop(self) -> None:
        """Graceful shutdown hook; kill paths bypass this."""
