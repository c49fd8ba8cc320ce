"""Blocking connection flows for live principals.

A fresh client or worker does not yet own a queue: it must first present
itself on the shared registration key with a throwaway reply queue, wait
for a session grant naming its principal id and serving orchestrator, and
only then declare its durable queue and announce itself on the connect key.
These helpers run that choreography start to finish against a connected
broker client and hand back the session facts the caller needs to operate.

The grant wait is bounded; no orchestrator answering within the timeout
raises SessionTimeout, as does losing the broker mid-flow (to the caller
both look the same: no session).
"""

from __future__ import annotations

import queue
from dataclasses import dataclass

from offq.broker.core import BrokerError, Delivery
from offq.protocol import (
    CLIENT_REGISTER_KEY,
    WORKER_REGISTER_KEY,
    client_connect_key,
    make_envelope,
    new_guid,
    worker_connect_key,
)
from offq.runtime import (
    CLIENT_EXCHANGE,
    ORCH_EXCHANGE,
    WORKER_EXCHANGE,
    client_queue,
    declare_exchange_layout,
    declare_register_layout,
    worker_queue,
)

DEFAULT_SESSION_TIMEOUT_S = 5.0


class SessionTimeout(TimeoutError):
    """No session grant arrived in time."""


@dataclass(frozen=True)
class Session:
    """What a connected principal knows: who it is and where to talk."""

    principal_id: str
    orchestrator: str
    blob_addr: str
    queue: str


def client_connect_flow(
    broker, username: str, timeout_s: float = DEFAULT_SESSION_TIMEOUT_S
) -> Session:
    """Register a username, wait for the grant, stand up the client queue.

    The same username always resolves to the same client id, so running
    the flow twice is a reconnect, not a second identity.
    """
    grant = _register(
        broker,
        exchange=CLIENT_EXCHANGE,
        register_key=CLIENT_REGISTER_KEY,
        msg_type="clientRegister",
        sender=username,
        body={"username": username},
        timeout_s=timeout_s,
    )
    client_id = grant["client_id"]
    session = _stand_up(
        broker,
        exchange=CLIENT_EXCHANGE,
        principal_id=client_id,
        queue_name=client_queue(client_id),
        grant=grant,
    )
    _announce(
        broker,
        key=client_connect_key(session.orchestrator),
        msg_type="clientConnect",
        sender=client_id,
        body={"client_id": client_id, "username": username},
    )
    return session


def worker_connect_flow(
    broker, worker_id: str = "", timeout_s: float = DEFAULT_SESSION_TIMEOUT_S
) -> Session:
    """Register a worker, wait for the grant, stand up the worker queue.

    An empty worker_id asks the orchestrator to mint one; the caller must
    save the granted id and pass it on every reconnect to keep the same
    identity (and therefore the same queue and any requeued work).
    """
    grant = _register(
        broker,
        exchange=WORKER_EXCHANGE,
        register_key=WORKER_REGISTER_KEY,
        msg_type="workerRegister",
        sender=worker_id or "new-worker",
        body={"worker_id": worker_id},
        timeout_s=timeout_s,
    )
    granted_id = grant["worker_id"]
    session = _stand_up(
        broker,
        exchange=WORKER_EXCHANGE,
        principal_id=granted_id,
        queue_name=worker_queue(granted_id),
        grant=grant,
    )
    _announce(
        broker,
        key=worker_connect_key(session.orchestrator),
        msg_type="workerConnect",
        sender=granted_id,
        body={"worker_id": granted_id},
    )
    return session


def _register(
    broker,
    exchange: str,
    register_key: str,
    msg_type: str,
    sender: str,
    body: dict,
    timeout_s: float,
) -> dict:
    """Publish a register message and return the grant body."""
    inbox: queue.Queue[Delivery] = queue.Queue()
    try:
        declare_exchange_layout(broker.declare_exchange)
        declare_register_layout(broker.declare_queue, broker.bind)
        reply_key = new_guid()
        temp = broker.temporary_queue()
        broker.bind(temp, exchange, reply_key)
        tag = broker.consume(temp, inbox.put)
        broker.publish(
            ORCH_EXCHANGE,
            register_key,
            make_envelope(msg_type=msg_type, sender=sender, reply_to=reply_key, body=body),
        )
    except (BrokerError, ConnectionError) as exc:
        raise SessionTimeout(f"registration failed: {exc}") from exc
    deadline_hit = False
    try:
        delivery = inbox.get(timeout=timeout_s)
    except queue.Empty:
        deadline_hit = True
    if deadline_hit:
        try:
            broker.cancel_consumer(tag)
        except (BrokerError, ConnectionError):
            pass
        raise SessionTimeout(f"no session grant within {timeout_s:g}s")
    try:
        broker.ack(delivery)
        broker.cancel_consumer(tag)
    except (BrokerError, ConnectionError) as exc:
        raise SessionTimeout(f"broker lost mid-flow: {exc}") from exc
    if delivery.envelope.msg_type != "sessionGrant":
        raise SessionTimeout(
            f"expected sessionGrant, got {delivery.envelope.msg_type!r}"
        )
    return delivery.envelope.body


def _stand_up(
    broker, exchange: str, principal_id: str, queue_name: str, grant: dict
) -> Session:
    try:
        broker.declare_queue(queue_name)
        broker.bind(queue_name, exchange, principal_id)
    except (BrokerError, ConnectionError) as exc:
        raise SessionTimeout(f"broker lost mid-flow: {exc}") from exc
    return Session(
        principal_id=principal_id,
        orchestrator=grant["orchestrator"],
        blob_addr=grant.get("blob_addr", ""),
        queue=queue_name,
    )


def _announce(broker, key: str, msg_type: str, sender: str, body: dict) -> None:
    try:
        broker.publish(
            ORCH_EXCHANGE,
            key,
            make_envelope(msg_type=msg_type, sender=sender, body=body),
        )
    except (BrokerError, ConnectionError) as exc:
        raise SessionTimeout(f"broker lost mid-flow: {exc}") from exc
