"""Discrete-event kernel hosting broker, nodes, and fault injection.

One :class:`SimKernel` owns a virtual clock, an event heap, an in-process
broker, a shared blob store, and the random streams.  Nodes written against
the :class:`~offq.runtime.Runtime` interface run unmodified under a
:class:`SimHost`, which translates their broker calls, timers, and blob I/O
into kernel events.

Determinism contract: with a fixed seed and a fixed sequence of kernel
calls, every run replays the identical event sequence.  Three independent
PCG64 streams derive from the root seed: guid minting (stream 0), delivery
jitter (stream 2), and one fault stream per job in first-execution order
(stream (1, job_index)).  Event ties break by insertion order, so zero
latency means FIFO processing.

Fault model: faults strike jobs while their steps execute, with exponential
inter-arrival times measured on the job's accumulated execution clock.
Workers announce execution spans; the kernel kills the hosting worker when
a fault position falls inside a span.  Keying streams by job (not by
worker) keeps fault positions identical across simulation modes regardless
of which worker resumes after a failure, so extra latencies can only ever
delay completion.

Killing a node drops its in-flight deliveries and timers (stale events are
skipped, never rewired to a restarted namesake) and disconnects it from the
broker, which requeues whatever it had not acknowledged.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from offq.broker import Broker, Delivery
from offq.orchestrator.blob import MemoryBlobStore
from offq.protocol import Envelope
from offq.runtime import Node, Runtime

_GUID_STREAM = 0
_FAULT_STREAM = 1
_JITTER_STREAM = 2


@dataclass
class _Timer:
    time: float
    fn: Callable[..., None]
    args: tuple
    host: "SimHost | None"
    cancelled: bool = False


@dataclass
class _FaultStream:
    rng: np.random.Generator
    exec_pos: float = 0.0
    next_at: float = float("inf")


@dataclass
class _SpanToken:
    job_key: str
    start_pos: float
    start_time: float
    planned_s: float
    host: "SimHost"
    kill_timer: _Timer | None = None
    closed: bool = False


class SimKernel:
    """Virtual-time event loop with seeded randomness and fault injection."""

    def __init__(
        self,
        seed: int = 0,
        *,
        delivery_latency_s: float = 0.0,
        delivery_jitter_s: float = 0.0,
        fault_rate_per_s: float = 0.0,
    ):
        self.seed = seed
        self.delivery_latency_s = delivery_latency_s
        self.delivery_jitter_s = delivery_jitter_s
        self.fault_rate_per_s = fault_rate_per_s
        self.now = 0.0
        self.broker = Broker()
        self.blob = MemoryBlobStore()
        self.hosts: dict[str, SimHost] = {}
        self.busy_s: dict[str, float] = {}
        self.lifetime_started: dict[str, float] = {}
        self.faults_by_job: dict[str, int] = {}
        self.total_faults = 0
        self.events_executed = 0
        self._heap: list[tuple[float, int, _Timer]] = []
        self._seq = itertools.count()
        self._tag_owner: dict[str, tuple["SimHost", Callable[[Delivery], None]]] = {}
        self._fault_streams: dict[str, _FaultStream] = {}
        self._guid_rng = self._stream(_GUID_STREAM)
        self._guid_pool = b""
        self._guid_pos = 0
        self._jitter_rng = self._stream(_JITTER_STREAM)

    def _stream(self, *key: int) -> np.random.Generator:
        return np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed, *key)))
        )

    def mint_guid(self) -> str:
        # Pooled draws: one generator call per 256 guids, same stream.
        if self._guid_pos >= len(self._guid_pool):
            self._guid_pool = self._guid_rng.bytes(4096)
            self._guid_pos = 0
        raw = self._guid_pool[self._guid_pos : self._guid_pos + 16]
        self._guid_pos += 16
        return raw.hex()

    # -- scheduling ---------------------------------------------------------

    def schedule(
        self,
        delay_s: float,
        fn: Callable[..., None],
        args: tuple = (),
        host: "SimHost | None" = None,
    ) -> _Timer:
        if delay_s < 0:
            raise ValueError(f"negative delay: {delay_s}")
        timer = _Timer(time=self.now + delay_s, fn=fn, args=args, host=host)
        heapq.heappush(self._heap, (timer.time, next(self._seq), timer))
        return timer

    def at(self, time_s: float, fn: Callable[..., None], *args: Any) -> _Timer:
        """Schedule a kernel-level event at an absolute virtual time."""
        return self.schedule(max(0.0, time_s - self.now), fn, args)

    def run(
        self,
        until: float | None = None,
        max_events: int | None = None,
        stop_when: Callable[[], bool] | None = None,
    ) -> int:
        """Drain events; returns how many executed.

        Stops when the heap empties, when the next event lies past ``until``
        (the clock then parks at ``until``), after ``max_events``, or once
        ``stop_when()`` turns true (checked after each event).
        """
        executed = 0
        if stop_when is not None and stop_when():
            return 0
        while self._heap:
            time, _, timer = self._heap[0]
            if until is not None and time > until:
                self.now = until
                break
            heapq.heappop(self._heap)
            if timer.cancelled or (timer.host is not None and not timer.host.alive):
                continue
            self.now = time
            timer.fn(*timer.args)
            executed += 1
            self.events_executed += 1
            if max_events is not None and executed >= max_events:
                break
            if stop_when is not None and stop_when():
                break
        else:
            if until is not None:
                self.now = until
        return executed

    # -- node lifecycle -----------------------------------------------------

    def add_node(self, node: Node) -> "SimHost":
        if node.name in self.hosts:
            raise ValueError(f"node name already live: {node.name}")
        host = SimHost(self, node.name)
        self.hosts[node.name] = host
        self.busy_s.setdefault(node.name, 0.0)
        self.lifetime_started.setdefault(node.name, self.now)
        node.start(host)
        return host

    def kill(self, name: str) -> None:
        """Hard-fail a node: no goodbye messages, timers die, queue state
        follows broker disconnect rules."""
        host = self.hosts.pop(name, None)
        if host is None:
            return
        host.alive = False
        if host.active_span is not None:
            self._close_span(host.active_span, killed=True)
        for tag in host.tags:
            self._tag_owner.pop(tag, None)
        self.broker.disconnect(name)
        self._pump()

    def alive(self, name: str) -> bool:
        return name in self.hosts

    def job_exec_seconds(self, job_key: str) -> float:
        """Total execution seconds ever spent on a job, re-runs included."""
        stream = self._fault_streams.get(job_key)
        return stream.exec_pos if stream is not None else 0.0

    # -- delivery plumbing --------------------------------------------------

    def _pump(self) -> None:
        for delivery in self.broker.collect_ready():
            entry = self._tag_owner.get(delivery.consumer_tag)
            if entry is None:
                continue
            host, callback = entry
            delay = self.delivery_latency_s
            if self.delivery_jitter_s:
                delay += self.delivery_jitter_s * float(self._jitter_rng.random())
            self.schedule(delay, self._dispatch, (host, callback, delivery), host=host)

    def _dispatch(
        self, host: "SimHost", callback: Callable[[Delivery], None], delivery: Delivery
    ) -> None:
        # A consumer cancelled after assignment already had this requeued.
        if delivery.consumer_tag not in host.tags:
            return
        callback(delivery)

    # -- fault injection ----------------------------------------------------

    def _job_stream(self, job_key: str) -> _FaultStream:
        stream = self._fault_streams.get(job_key)
        if stream is None:
            index = len(self._fault_streams)
            rng = self._stream(_FAULT_STREAM, index)
            stream = _FaultStream(rng=rng)
            if self.fault_rate_per_s > 0:
                stream.next_at = float(rng.exponential(1.0 / self.fault_rate_per_s))
            self._fault_streams[job_key] = stream
        return stream

    def begin_span(self, host: "SimHost", job_key: str, duration_s: float) -> _SpanToken:
        if host.active_span is not None:
            raise RuntimeError(f"{host.name} already has an open span")
        stream = self._job_stream(job_key)
        token = _SpanToken(
            job_key=job_key,
            start_pos=stream.exec_pos,
            start_time=self.now,
            planned_s=duration_s,
            host=host,
        )
        if stream.next_at < stream.exec_pos + duration_s:
            token.kill_timer = self.schedule(
                stream.next_at - stream.exec_pos,
                self._fault_kill,
                (host, token),
                host=host,
            )
        host.active_span = token
        return token

    def end_span(self, token: _SpanToken, actual_s: float) -> None:
        if token.closed:
            return
        if not 0.0 <= actual_s <= token.planned_s + 1e-9:
            raise ValueError(f"span closed with bad duration {actual_s}")
        token.closed = True
        token.host.active_span = None
        if token.kill_timer is not None:
            token.kill_timer.cancelled = True
            token.kill_timer = None
        stream = self._fault_streams[token.job_key]
        stream.exec_pos = token.start_pos + actual_s
        self.busy_s[token.host.name] = self.busy_s.get(token.host.name, 0.0) + actual_s

    def _close_span(self, token: _SpanToken, killed: bool) -> None:
        # Kill path: work done so far still burned energy and advanced the
        # job's execution clock up to the failure instant.
        if token.closed:
            return
        executed = min(max(self.now - token.start_time, 0.0), token.planned_s)
        token.closed = True
        token.host.active_span = None
        if token.kill_timer is not None:
            token.kill_timer.cancelled = True
        stream = self._fault_streams[token.job_key]
        stream.exec_pos = token.start_pos + executed
        self.busy_s[token.host.name] = self.busy_s.get(token.host.name, 0.0) + executed

    def _fault_kill(self, host: "SimHost", token: _SpanToken) -> None:
        if host.active_span is not token:
            return
        stream = self._fault_streams[token.job_key]
        self.faults_by_job[token.job_key] = self.faults_by_job.get(token.job_key, 0) + 1
        self.total_faults += 1
        self.kill(host.name)  # closes the span at the fault position
        stream.next_at = stream.exec_pos + float(
            stream.rng.exponential(1.0 / self.fault_rate_per_s)
        )
        if self.on_fault is not None:
            self.on_fault(host.name, token.job_key)

    # Optional observer invoked as on_fault(worker_name, job_key) after a
    # fault kill; the model-faithful runner uses it for instant detection.
    on_fault: Callable[[str, str], None] | None = None


class SimHost(Runtime):
    """Runtime adapter binding one node to the kernel."""

    def __init__(self, kernel: SimKernel, name: str):
        self.kernel = kernel
        self.name = name
        self.alive = True
        self.tags: set[str] = set()
        self.active_span: _SpanToken | None = None

    # -- clock and ids ------------------------------------------------------

    def now(self) -> float:
        return self.kernel.now

    def call_later(self, delay_s: float, fn: Callable[..., None], *args: Any) -> Any:
        return self.kernel.schedule(delay_s, fn, args, host=self)

    def cancel(self, handle: Any) -> None:
        handle.cancelled = True

    def new_guid(self) -> str:
        return self.kernel.mint_guid()

    # -- broker -------------------------------------------------------------

    def declare_exchange(self, name: str, kind: str) -> None:
        self.kernel.broker.declare_exchange(name, kind)

    def declare_queue(self, name: str) -> str:
        queue = self.kernel.broker.declare_queue(name)
        self.kernel._pump()
        return queue

    def temporary_queue(self) -> str:
        queue = self.kernel.broker.temporary_queue(self.name)
        self.kernel._pump()
        return queue

    def bind(self, queue: str, exchange: str, pattern: str) -> None:
        self.kernel.broker.bind(queue, exchange, pattern)
        self.kernel._pump()

    def publish(self, exchange: str, routing_key: str, envelope: Envelope) -> None:
        self.kernel.broker.publish(exchange, routing_key, envelope)
        self.kernel._pump()

    def consume(self, queue: str, callback: Callable[[Delivery], None]) -> str:
        tag = self.kernel.broker.consume(queue, owner=self.name)
        self.tags.add(tag)
        self.kernel._tag_owner[tag] = (self, callback)
        self.kernel._pump()
        return tag

    def cancel_consumer(self, consumer_tag: str) -> None:
        self.tags.discard(consumer_tag)
        self.kernel._tag_owner.pop(consumer_tag, None)
        self.kernel.broker.cancel_consumer(consumer_tag)
        self.kernel._pump()

    def ack(self, delivery: Delivery) -> None:
        self.kernel.broker.ack(delivery.tag)
        self.kernel._pump()

    def nack(self, delivery: Delivery) -> None:
        self.kernel.broker.nack(delivery.tag)
        self.kernel._pump()

    # -- blobs (the kernel's shared store plays the network share) -----------

    def blob_put(self, addr: str, key: str, data: bytes) -> None:
        self.kernel.blob.put(key, data)

    def blob_get(self, addr: str, key: str) -> bytes:
        return self.kernel.blob.get(key)

    def blob_delete(self, addr: str, key: str) -> None:
        self.kernel.blob.delete(key)

    def blob_exists(self, addr: str, key: str) -> bool:
        return self.kernel.blob.exists(key)

    # -- execution accounting -------------------------------------------------

    def on_exec_span(self, job_key: str, duration_s: float) -> Any:
        return self.kernel.begin_span(self, job_key, duration_s)

    def end_exec_span(self, token: Any, actual_duration_s: float) -> None:
        self.kernel.end_span(token, actual_duration_s)

    def note_busy(self, duration_s: float) -> None:
        self.kernel.busy_s[self.name] = (
            self.kernel.busy_s.get(self.name, 0.0) + duration_s
        )
