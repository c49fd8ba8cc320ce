"""Totally ordered replication of store changes over a fanout exchange.

Each orchestrator replica binds one durable queue to a shared fanout
exchange.  The broker stamps a single monotone sequence per exchange, so
every replica's queue holds the same publications in the same order; that
order IS the global apply order.  The engine wraps store mutations in a
three-step ceremony:

1. The proposer multicasts a lock request carrying a fresh change guid.
2. Every live replica (the proposer included) answers with an ack naming
   that guid.  Acks are unconditional: they promise "I am alive and my
   queue will deliver your publication", not exclusive ownership.  Ordering
   does not come from the lock; it comes from the fanout sequence.
3. Once acks cover the live membership, the proposer multicasts the change
   itself.  Every replica applies changes strictly in fanout order, skipping
   guids it has already applied, so concurrent proposers converge to the
   same state without coordination beyond the exchange.

If acks stall past a timeout the proposer re-reads the live membership
(nodes may have died meanwhile), re-requests with the same guid, and keeps
acks already gathered.  A replica may therefore see duplicate lock requests
or duplicate publications for one guid; both are harmless by idempotence.

One change is in flight per proposer at a time; later requests queue behind
it in FIFO order.  Callbacks run when the proposer applies its own change
off the fanout, i.e. when the change is durably ordered, not merely sent.

A replica configured with a one-name roster (``solo=True``) skips the
ceremony and applies changes synchronously in proposal order: with no peer
possible, ever, proposal order IS the total order, and the broker round
trips would buy nothing.  The flag must reflect the static roster, never
the live membership: a live-looking singleton may still have a partitioned
peer whose queue must keep receiving publications.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from offq.orchestrator.store import ApplyResult, ChangeRecord, ReplicatedStore
from offq.protocol import Envelope, make_envelope

REPLICATION_TYPES = frozenset({"lockRequest", "lockAck", "changePublish"})

ChangeCallback = Callable[[ApplyResult], None]
AppliedHook = Callable[[ChangeRecord, ApplyResult], None]


@dataclass
class _Pending:
    record: ChangeRecord
    callback: ChangeCallback | None
    acks: set[str] = field(default_factory=set)
    members: frozenset[str] = frozenset()
    attempt: int = 0
    timer: Any = None
    published: bool = False


class ReplicationEngine:
    """Per-replica driver for the guid-locked change ceremony.

    The engine is event driven and single threaded: the hosting node feeds
    it envelopes from its replication queue via :meth:`handle_envelope` and
    provides timer and publish primitives.  ``members`` must return the
    currently-live replica names including this node; it is consulted when
    a change starts and again on every ack timeout.
    """

    def __init__(
        self,
        *,
        name: str,
        store: ReplicatedStore,
        publish: Callable[[Envelope], None],
        members: Callable[[], set[str]],
        new_guid: Callable[[], str],
        call_later: Callable[..., Any],
        cancel_timer: Callable[[Any], None],
        on_applied: AppliedHook | None = None,
        ack_timeout_s: float = 2.0,
        solo: bool = False,
    ):
        self.name = name
        self.store = store
        self._publish = publish
        self._members = members
        self._new_guid = new_guid
        self._call_later = call_later
        self._cancel_timer = cancel_timer
        self._on_applied = on_applied
        self.ack_timeout_s = ack_timeout_s
        self.solo = solo
        self._queue: deque[_Pending] = deque()
        self._inflight: _Pending | None = None
        self.retries = 0
        self.changes_proposed = 0

    # -- proposing ----------------------------------------------------------

    def request_change(
        self, mutation: dict[str, Any], callback: ChangeCallback | None = None
    ) -> str:
        """Queue a mutation for replicated apply; returns its change guid."""
        record = ChangeRecord(
            guid=self._new_guid(), origin=self.name, mutation=mutation
        )
        self._queue.append(_Pending(record=record, callback=callback))
        self.changes_proposed += 1
        self._pump()
        return record.guid

    def pending_count(self) -> int:
        return len(self._queue) + (1 if self._inflight else 0)

    def _pump(self) -> None:
        while self._inflight is None and self._queue:
            pending = self._queue.popleft()
            self._inflight = pending
            if self.solo:
                self._apply_solo(pending)
                continue
            pending.members = frozenset(self._members()) | {self.name}
            self._send_lock_request(pending)
            return

    def _apply_solo(self, pending: _Pending) -> None:
        pending.published = True
        result = self.store.apply(pending.record)
        if not result.duplicate and self._on_applied is not None:
            self._on_applied(pending.record, result)
        self._inflight = None
        if pending.callback is not None:
            pending.callback(result)

    def _send_lock_request(self, pending: _Pending) -> None:
        pending.attempt += 1
        self._publish(
            make_envelope(
                msg_type="lockRequest",
                sender=self.name,
                body={"guid": pending.record.guid, "origin": self.name},
                msg_id=self._new_guid(),
            )
        )
        pending.timer = self._call_later(self.ack_timeout_s, self._on_ack_timeout)

    def _on_ack_timeout(self) -> None:
        pending = self._inflight
        if pending is None or pending.published:
            return
        # Someone did not ack in time: either they died (membership shrinks
        # and current acks may already suffice) or the request got delayed
        # (re-request with the same guid; gathered acks stay valid).
        self.retries += 1
        pending.members = frozenset(self._members()) | {self.name}
        if pending.acks >= pending.members:
            self._publish_change(pending)
        else:
            self._send_lock_request(pending)

    def _publish_change(self, pending: _Pending) -> None:
        pending.published = True
        if pending.timer is not None:
            self._cancel_timer(pending.timer)
            pending.timer = None
        self._publish(
            make_envelope(
                msg_type="changePublish",
                sender=self.name,
                body={"change": pending.record.to_json()},
                msg_id=self._new_guid(),
            )
        )

    # -- receiving ----------------------------------------------------------

    def handle_envelope(self, env: Envelope) -> bool:
        """Feed one replication-queue envelope; False if not ours."""
        if env.msg_type == "lockRequest":
            self._publish(
                make_envelope(
                    msg_type="lockAck",
                    sender=self.name,
                    body={"guid": env.body["guid"], "origin": env.body["origin"]},
                    msg_id=self._new_guid(),
                )
            )
            return True
        if env.msg_type == "lockAck":
            self._on_lock_ack(env)
            return True
        if env.msg_type == "changePublish":
            self._on_change_publish(env)
            return True
        return False

    def _on_lock_ack(self, env: Envelope) -> None:
        pending = self._inflight
        if (
            pending is None
            or pending.published
            or env.body.get("origin") != self.name
            or env.body.get("guid") != pending.record.guid
        ):
            return
        pending.acks.add(env.sender)
        if pending.acks >= pending.members:
            self._publish_change(pending)

    def _on_change_publish(self, env: Envelope) -> None:
        record = ChangeRecord.from_json(env.body["change"])
        result = self.store.apply(record)
        if not result.duplicate and self._on_applied is not None:
            self._on_applied(record, result)
        pending = self._inflight
        if (
            pending is not None
            and record.origin == self.name
            and record.guid == pending.record.guid
        ):
            if pending.timer is not None:
                self._cancel_timer(pending.timer)
                pending.timer = None
            self._inflight = None
            if pending.callback is not None:
                pending.callback(result)
            self._pump()
