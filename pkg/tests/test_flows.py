"""Connection flows against a granting peer over the TCP broker."""

import threading

import pytest

from offq.broker.tcp import BrokerTcpClient, BrokerTcpServer
from offq.flows import Session, SessionTimeout, client_connect_flow, worker_connect_flow
from offq.protocol import is_guid, make_envelope, new_guid, parse_routing_key
from offq.runtime import (
    CLIENT_EXCHANGE,
    ORCH_EXCHANGE,
    WORKER_EXCHANGE,
    client_queue,
    declare_exchange_layout,
    register_queue_client,
    register_queue_worker,
    worker_queue,
)


class StubGranter:
    """Minimal register-side peer: grants sessions like a primary would."""

    def __init__(self, address, name="o1", blob_addr="127.0.0.1:5700"):
        self.name = name
        self.blob_addr = blob_addr
        self.broker = BrokerTcpClient(address)
        self.clients_by_username = {}
        self.known_workers = set()
        self.connects = []
        self._lock = threading.Lock()
        declare_exchange_layout(self.broker.declare_exchange)
        self.broker.declare_queue(register_queue_client())
        self.broker.bind(register_queue_client(), ORCH_EXCHANGE, "clientRegister")
        self.broker.declare_queue(register_queue_worker())
        self.broker.bind(register_queue_worker(), ORCH_EXCHANGE, "workerRegister")
        self.broker.declare_queue(f"q.orch.{name}")
        self.broker.bind(f"q.orch.{name}", ORCH_EXCHANGE, f"{name}.#")
        self.broker.consume(register_queue_client(), self._on_client_register)
        self.broker.consume(register_queue_worker(), self._on_worker_register)
        self.broker.consume(f"q.orch.{name}", self._on_orch_traffic)

    def _grant(self, exchange, reply_key, body):
        body = dict(body, orchestrator=self.name, blob_addr=self.blob_addr)
        self.broker.publish(
            exchange,
            reply_key,
            make_envelope(msg_type="sessionGrant", sender=self.name, body=body),
        )

    def _on_client_register(self, delivery):
        env = delivery.envelope
        with self._lock:
            username = env.body["username"]
            client_id = self.clients_by_username.setdefault(username, new_guid())
        self._grant(CLIENT_EXCHANGE, env.reply_to, {"client_id": client_id})
        self.broker.ack(delivery)

    def _on_worker_register(self, delivery):
        env = delivery.envelope
        with self._lock:
            worker_id = env.body.get("worker_id") or new_guid()
            self.known_workers.add(worker_id)
        self._grant(WORKER_EXCHANGE, env.reply_to, {"worker_id": worker_id})
        self.broker.ack(delivery)

    def _on_orch_traffic(self, delivery):
        with self._lock:
            self.connects.append(delivery.envelope)
        self.broker.ack(delivery)

    def close(self):
        self.broker.close()


@pytest.fixture
def server():
    srv = BrokerTcpServer(port=0).start()
    yield srv
    srv.stop()


@pytest.fixture
def granter(server):
    g = StubGranter(server.address)
    yield g
    g.close()


@pytest.fixture
def broker(server):
    c = BrokerTcpClient(server.address)
    yield c
    c.close()


def wait_for_connects(granter, n, timeout_s=3.0):
    import time

    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        with granter._lock:
            got = list(granter.connects)
        if len(got) >= n:
            return got
        time.sleep(0.01)
    pytest.fail(f"expected {n} connect messages, saw {len(granter.connects)}")


class TestClientFlow:
    def test_fresh_username_gets_session(self, broker, granter):
        session = client_connect_flow(broker, "alice", timeout_s=3.0)
        assert isinstance(session, Session)
        assert is_guid(session.principal_id)
        assert session.orchestrator == "o1"
        assert session.blob_addr == "127.0.0.1:5700"
        assert session.queue == client_queue(session.principal_id)
        (connect,) = wait_for_connects(granter, 1)
        assert connect.msg_type == "clientConnect"
        assert connect.body["client_id"] == session.principal_id

    def test_repeat_username_same_identity(self, broker, granter):
        first = client_connect_flow(broker, "bob", timeout_s=3.0)
        second = client_connect_flow(broker, "bob", timeout_s=3.0)
        assert second.principal_id == first.principal_id
        third = client_connect_flow(broker, "someone-else", timeout_s=3.0)
        assert third.principal_id != first.principal_id

    def test_client_queue_receives_directed_traffic(self, broker, granter):
        session = client_connect_flow(broker, "carol", timeout_s=3.0)
        import queue as queue_mod

        inbox = queue_mod.Queue()
        broker.consume(session.queue, inbox.put)
        granter.broker.publish(
            CLIENT_EXCHANGE,
            session.principal_id,
            make_envelope("resultReady", "o1", {"job_id": "x" * 32}),
        )
        d = inbox.get(timeout=3)
        assert d.envelope.msg_type == "resultReady"
        broker.ack(d)

    def test_temp_reply_queue_dropped_after_flow(self, broker, granter, server):
        client_connect_flow(broker, "dave", timeout_s=3.0)
        # Only durable queues remain bound for this principal; the temp
        # queue's consumer is gone so a second grant publish goes nowhere.
        depth_before = server.broker.queue_depth(client_queue(
            granter.clients_by_username["dave"]))
        assert depth_before == 0


class TestWorkerFlow:
    def test_empty_id_minted(self, broker, granter):
        session = worker_connect_flow(broker, "", timeout_s=3.0)
        assert is_guid(session.principal_id)
        assert session.queue == worker_queue(session.principal_id)
        (connect,) = wait_for_connects(granter, 1)
        assert connect.msg_type == "workerConnect"
        assert connect.body["worker_id"] == session.principal_id

    def test_saved_id_echoed(self, broker, granter):
        saved = new_guid()
        session = worker_connect_flow(broker, saved, timeout_s=3.0)
        assert session.principal_id == saved

    def test_two_workers_distinct_ids(self, broker, granter):
        a = worker_connect_flow(broker, "", timeout_s=3.0)
        b = worker_connect_flow(broker, "", timeout_s=3.0)
        assert a.principal_id != b.principal_id


class TestTimeout:
    def test_no_granter_times_out(self, broker):
        with pytest.raises(SessionTimeout):
            client_connect_flow(broker, "nobody-home", timeout_s=0.3)

    def test_worker_flow_times_out_too(self, broker):
        with pytest.raises(SessionTimeout):
            worker_connect_flow(broker, "", timeout_s=0.3)

    def test_dead_broker_is_session_timeout(self, server):
        c = BrokerTcpClient(server.address)
        c.close()
        with pytest.raises(SessionTimeout):
            client_connect_flow(c, "eve", timeout_s=0.5)


class TestGrammar:
    def test_flow_routing_keys_parse(self, broker, granter):
        session = client_connect_flow(broker, "frank", timeout_s=3.0)
        # Every key a flow can produce fits one grammar production.
        for key in (
            "clientRegister",
            "workerRegister",
            f"{session.orchestrator}.clientConnect",
            f"{session.orchestrator}.workerConnect",
            f"{session.orchestrator}.{session.principal_id}",
            session.principal_id,
        ):
            parse_routing_key(key)
