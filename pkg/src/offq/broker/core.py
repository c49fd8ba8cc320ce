"""In-memory message broker with totally ordered exchanges.

Semantics:
  - Exchange kinds: topic (wildcard patterns), direct (exact key), fanout
    (every bound queue). A default direct exchange "" binds every queue by
    its own name.
  - publish() stamps each message with the exchange's next sequence number
    atomically, so all queues bound to one exchange agree on the relative
    order of the messages they share.
  - Queues are FIFO. Consumers get at most one unacknowledged delivery at a
    time (prefetch 1); multiple consumers on a queue compete round-robin.
  - nack() and consumer loss return the message to the head of its queue
    with redelivered=True (at-least-once delivery).
  - Temporary queues are exclusive to their owner connection and are deleted
    when the owner disconnects.

The core never invokes callbacks. Mutating calls hand back newly assignable
deliveries via collect_ready(); the hosting runtime (virtual-clock
simulation or the TCP server) decides when consumers see them. All public
methods are safe to call from multiple threads.

An optional append-only journal makes named queues survive a broker restart:
publishes and settlements are logged, and a new Broker pointed at the same
file replays them, re-offering every unsettled message with redelivered=True.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable

from offq.protocol import Envelope, canonical_json, envelope_from_json, envelope_to_json

EXCHANGE_KINDS = ("topic", "direct", "fanout")

DEFAULT_PORT = 5699


class BrokerError(Exception):
    """Base class for broker-side failures."""


class NotFound(BrokerError):
    """Unknown exchange, queue, consumer, or delivery tag."""


class DeclareConflict(BrokerError):
    """Redeclaration with incompatible properties."""


def topic_match(pattern: str, key: str) -> bool:
    """Dot-token wildcard match: '*' is one token, '#' is zero or more."""
    pt = pattern.split(".")
    kt = key.split(".")
    n_pat, n_key = len(pt), len(kt)
    # match[i][j]: pt[i:] matches kt[j:]
    match = [[False] * (n_key + 1) for _ in range(n_pat + 1)]
    match[n_pat][n_key] = True
    for i in range(n_pat - 1, -1, -1):
        for j in range(n_key, -1, -1):
            token = pt[i]
            if token == "#":
                match[i][j] = match[i + 1][j] or (j < n_key and match[i][j + 1])
            elif j < n_key and (token == "*" or token == kt[j]):
                match[i][j] = match[i + 1][j + 1]
    return match[0][0]


@dataclass(frozen=True)
class Delivery:
    """One message handed to one consumer; ack or nack it by tag."""

    tag: int
    queue: str
    consumer_tag: str
    exchange: str
    exchange_seq: int
    redelivered: bool
    envelope: Envelope

    def to_json(self) -> dict[str, Any]:
        return {
            "tag": self.tag,
            "queue": self.queue,
            "consumer_tag": self.consumer_tag,
            "exchange": self.exchange,
            "exchange_seq": self.exchange_seq,
            "redelivered": self.redelivered,
            "envelope": envelope_to_json(self.envelope),
        }

    @classmethod
    def from_json(cls, payload: dict[str, Any]) -> "Delivery":
        return cls(
            tag=payload["tag"],
            queue=payload["queue"],
            consumer_tag=payload["consumer_tag"],
            exchange=payload["exchange"],
            exchange_seq=payload["exchange_seq"],
            redelivered=payload["redelivered"],
            envelope=envelope_from_json(payload["envelope"]),
        )


@dataclass
class _Queued:
    instance: int
    exchange: str
    seq: int
    envelope: Envelope
    redelivered: bool = False


@dataclass
class _Consumer:
    tag: str
    queue: str
    owner: str
    unacked: int | None = None  # outstanding delivery tag, prefetch 1


@dataclass
class _Queue:
    name: str
    exclusive_owner: str | None = None
    pending: list[_Queued] = field(default_factory=list)
    consumers: list[str] = field(default_factory=list)  # consumer tags, join order
    rr_next: int = 0


@dataclass
class _Exchange:
    name: str
    kind: str
    next_seq: int = 1
    bindings: list[tuple[str, str]] = field(default_factory=list)  # (queue, pattern)


class Broker:
    """Exchange/queue state machine. See module docstring for semantics."""

    def __init__(self, journal_path: str | None = None):
        self._lock = threading.RLock()
        self._exchanges: dict[str, _Exchange] = {}
        self._queues: dict[str, _Queue] = {}
        self._consumers: dict[str, _Consumer] = {}
        self._outstanding: dict[int, tuple[str, _Queued]] = {}  # tag -> (consumer, msg)
        self._ready: list[Delivery] = []
        self._next_delivery_tag = 1
        self._next_consumer = 1
        self._next_instance = 1
        self._next_temp = 1
        self._journal_path = journal_path
        self._journal_file = None
        self._exchanges[""] = _Exchange("", "direct")
        if journal_path:
            self._restore(journal_path)
            self._journal_file = open(journal_path, "a", encoding="utf-8")

    # -- declarations ------------------------------------------------------

    def declare_exchange(self, name: str, kind: str) -> None:
        if kind not in EXCHANGE_KINDS:
            raise BrokerError(f"unknown exchange kind {kind!r}")
        if not name:
            raise BrokerError("the default exchange cannot be redeclared")
        with self._lock:
            existing = self._exchanges.get(name)
            if existing is not None:
                if existing.kind != kind:
                    raise DeclareConflict(
                        f"exchange {name!r} already declared as {existing.kind!r}"
                    )
                return
            self._exchanges[name] = _Exchange(name, kind)
            self._journal({"op": "declare_exchange", "name": name, "kind": kind})

    def declare_queue(self, name: str, exclusive_owner: str | None = None) -> str:
        if not name or not isinstance(name, str):
            raise BrokerError(f"queue name must be a non-empty string, got {name!r}")
        with self._lock:
            existing = self._queues.get(name)
            if existing is not None:
                if existing.exclusive_owner is not None and existing.exclusive_owner != exclusive_owner:
                    raise DeclareConflict(f"queue {name!r} is exclusive to another owner")
                return name
            self._queues[name] = _Queue(name, exclusive_owner=exclusive_owner)
            # Default exchange routes by queue name.
            self._exchanges[""].bindings.append((name, name))
            if exclusive_owner is None:
                self._journal({"op": "declare_queue", "name": name})
            return name

    def temporary_queue(self, owner: str) -> str:
        """Fresh exclusive queue, deleted when the owner disconnects."""
        with self._lock:
            name = f"tmp.{owner}.{self._next_temp}"
            self._next_temp += 1
            return self.declare_queue(name, exclusive_owner=owner)

    def bind(self, queue: str, exchange: str, pattern: str) -> None:
        with self._lock:
            if queue not in self._queues:
                raise NotFound(f"queue {queue!r} does not exist")
            ex = self._exchanges.get(exchange)
            if ex is None:
                raise NotFound(f"exchange {exchange!r} does not exist")
            if (queue, pattern) not in ex.bindings:
                ex.bindings.append((queue, pattern))
                if self._queues[queue].exclusive_owner is None:
                    self._journal(
                        {"op": "bind", "queue": queue, "exchange": exchange, "pattern": pattern}
                    )

    # -- publish / consume ------------------------------------------------

    def publish(self, exchange: str, routing_key: str, envelope: Envelope) -> int:
        """Route one envelope; returns the exchange sequence number it got."""
        with self._lock:
            ex = self._exchanges.get(exchange)
            if ex is None:
                raise NotFound(f"exchange {exchange!r} does not exist")
            seq = ex.next_seq
            ex.next_seq += 1
            touched: list[tuple[str, int]] = []
            hit_queues: set[str] = set()
            for queue_name, pattern in ex.bindings:
                # Several bindings of one queue may match; deliver once.
                if queue_name not in self._queues or queue_name in hit_queues:
                    continue
                if ex.kind == "fanout":
                    hit = True
                elif ex.kind == "direct":
                    hit = pattern == routing_key
                else:
                    hit = topic_match(pattern, routing_key)
                if hit:
                    hit_queues.add(queue_name)
                    instance = self._next_instance
                    self._next_instance += 1
                    self._queues[queue_name].pending.append(
                        _Queued(instance, exchange, seq, envelope)
                    )
                    touched.append((queue_name, instance))
            journal_queues = [
                (q, inst)
                for q, inst in touched
                if self._queues[q].exclusive_owner is None
            ]
            self._journal(
                {
                    "op": "publish",
                    "exchange": exchange,
                    "seq": seq,
                    "queues": journal_queues,
                    "envelope": envelope_to_json(envelope),
                }
            )
            self._assign(dict.fromkeys(q for q, _ in touched))
            return seq

    def consume(self, queue: str, owner: str) -> str:
        """Attach a consumer; returns its tag. Deliveries via collect_ready()."""
        with self._lock:
            q = self._queues.get(queue)
            if q is None:
                raise NotFound(f"queue {queue!r} does not exist")
            if q.exclusive_owner is not None and q.exclusive_owner != owner:
                raise BrokerError(f"queue {queue!r} is exclusive to another owner")
            tag = f"ctag.{self._next_consumer}"
            self._next_consumer += 1
            self._consumers[tag] = _Consumer(tag, queue, owner)
            q.consumers.append(tag)
            self._assign([queue])
            return tag

    def cancel_consumer(self, consumer_tag: str) -> None:
        with self._lock:
            consumer = self._consumers.pop(consumer_tag, None)
            if consumer is None:
                raise NotFound(f"consumer {consumer_tag!r} does not exist")
            self._drop_consumer(consumer)

    def ack(self, delivery_tag: int) -> None:
        """Settle a delivery; the message is gone for good."""
        with self._lock:
            entry = self._outstanding.pop(delivery_tag, None)
            if entry is None:
                raise NotFound(f"delivery tag {delivery_tag} is not outstanding")
            consumer_tag, msg = entry
            consumer = self._consumers.get(consumer_tag)
            if consumer is not None and consumer.unacked == delivery_tag:
                consumer.unacked = None
                self._journal_settle(consumer.queue, msg.instance)
                self._assign([consumer.queue])

    def nack(self, delivery_tag: int) -> None:
        """Reject a delivery: back to the head of its queue, redelivered."""
        with self._lock:
            entry = self._outstanding.pop(delivery_tag, None)
            if entry is None:
                raise NotFound(f"delivery tag {delivery_tag} is not outstanding")
            consumer_tag, msg = entry
            msg.redelivered = True
            consumer = self._consumers.get(consumer_tag)
            if consumer is not None and consumer.unacked == delivery_tag:
                consumer.unacked = None
                queue = self._queues.get(consumer.queue)
                if queue is not None:
                    queue.pending.insert(0, msg)
                    self._assign([consumer.queue])

    def disconnect(self, owner: str) -> None:
        """Drop every consumer and exclusive queue belonging to a connection."""
        with self._lock:
            for tag in [t for t, c in self._consumers.items() if c.owner == owner]:
                self._drop_consumer(self._consumers.pop(tag))
            for name in [n for n, q in self._queues.items() if q.exclusive_owner == owner]:
                self._delete_queue(name)

    def collect_ready(self) -> list[Delivery]:
        """Drain deliveries assigned since the last call, in assignment order."""
        with self._lock:
            ready, self._ready = self._ready, []
            return ready

    # -- introspection ------------------------------------------------------

    def queue_depth(self, queue: str) -> int:
        with self._lock:
            q = self._queues.get(queue)
            if q is None:
                raise NotFound(f"queue {queue!r} does not exist")
            return len(q.pending)

    def queue_names(self) -> list[str]:
        with self._lock:
            return list(self._queues)

    def has_queue(self, queue: str) -> bool:
        with self._lock:
            return queue in self._queues

    # -- internals ----------------------------------------------------------

    def _drop_consumer(self, consumer: _Consumer) -> None:
        queue = self._queues.get(consumer.queue)
        if queue is not None and consumer.tag in queue.consumers:
            idx = queue.consumers.index(consumer.tag)
            queue.consumers.remove(consumer.tag)
            if queue.rr_next > idx:
                queue.rr_next -= 1
            if queue.consumers:
                queue.rr_next %= len(queue.consumers)
            else:
                queue.rr_next = 0
        if consumer.unacked is not None:
            entry = self._outstanding.pop(consumer.unacked, None)
            if entry is not None and queue is not None:
                _, msg = entry
                msg.redelivered = True
                queue.pending.insert(0, msg)
        if queue is not None:
            self._assign([queue.name])

    def _delete_queue(self, name: str) -> None:
        queue = self._queues.pop(name, None)
        if queue is None:
            return
        for tag in list(queue.consumers):
            self._consumers.pop(tag, None)
        for ex in self._exchanges.values():
            ex.bindings = [(q, p) for q, p in ex.bindings if q != name]

    def _assign(self, queues: Iterable[str]) -> None:
        """Move pending messages to free consumers (round-robin, prefetch 1)."""
        for name in queues:
            queue = self._queues.get(name)
            if queue is None:
                continue
            while queue.pending and queue.consumers:
                start = queue.rr_next
                chosen = None
                for offset in range(len(queue.consumers)):
                    idx = (start + offset) % len(queue.consumers)
                    candidate = self._consumers[queue.consumers[idx]]
                    if candidate.unacked is None:
                        chosen = candidate
                        queue.rr_next = (idx + 1) % len(queue.consumers)
                        break
                if chosen is None:
                    break
                msg = queue.pending.pop(0)
                tag = self._next_delivery_tag
                self._next_delivery_tag += 1
                chosen.unacked = tag
                self._outstanding[tag] = (chosen.tag, msg)
                self._ready.append(
                    Delivery(
                        tag=tag,
                        queue=name,
                        consumer_tag=chosen.tag,
                        exchange=msg.exchange,
                        exchange_seq=msg.seq,
                        redelivered=msg.redelivered,
                        envelope=msg.envelope,
                    )
                )

    # -- journal ------------------------------------------------------------

    def _journal(self, record: dict[str, Any]) -> None:
        if self._journal_file is not None:
            self._journal_file.write(canonical_json(record) + "\n")
            self._journal_file.flush()

    def _journal_settle(self, queue: str, instance: int) -> None:
        if self._journal_file is not None and queue in self._queues:
            if self._queues[queue].exclusive_owner is None:
                self._journal({"op": "settle", "queue": queue, "instance": instance})

    def _restore(self, path: str) -> None:
        """Replay the journal: unsettled messages come back redelivered."""
        if not os.path.exists(path):
            return
        settled: set[int] = set()
        records: list[dict[str, Any]] = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                records.append(record)
                if record["op"] == "settle":
                    settled.add(record["instance"])
        max_instance = 0
        for record in records:
            op = record["op"]
            if op == "declare_exchange":
                if record["name"] not in self._exchanges:
                    self._exchanges[record["name"]] = _Exchange(record["name"], record["kind"])
            elif op == "declare_queue":
                if record["name"] not in self._queues:
                    self._queues[record["name"]] = _Queue(record["name"])
                    self._exchanges[""].bindings.append((record["name"], record["name"]))
            elif op == "bind":
                ex = self._exchanges.get(record["exchange"])
                if ex is not None and (record["queue"], record["pattern"]) not in ex.bindings:
                    ex.bindings.append((record["queue"], record["pattern"]))
            elif op == "publish":
                ex = self._exchanges.get(record["exchange"])
                if ex is not None:
                    ex.next_seq = max(ex.next_seq, record["seq"] + 1)
                envelope = envelope_from_json(record["envelope"])
                for queue_name, instance in record["queues"]:
                    max_instance = max(max_instance, instance)
                    queue = self._queues.get(queue_name)
                    if queue is not None and instance not in settled:
                        queue.pending.append(
                            _Queued(
                                instance,
                                record["exchange"],
                                record["seq"],
                                envelope,
                                redelivered=True,
                            )
                        )
        self._next_instance = max_instance + 1
