"""Broker over TCP: framed ops, pushed deliveries, disconnect semantics."""

import queue
import threading
import time

import pytest

from offq.broker import DeclareConflict, NotFound
from offq.broker.tcp import BrokerTcpClient, BrokerTcpServer
from offq.protocol import encode_envelope, make_envelope


def env(n=0):
    return make_envelope("heartbeat", "t", {"n": n})


@pytest.fixture
def server():
    srv = BrokerTcpServer(port=0).start()
    yield srv
    srv.stop()


@pytest.fixture
def client(server):
    c = BrokerTcpClient(server.address)
    yield c
    c.close()


def collector():
    """Callback plus a queue to wait on."""
    q = queue.Queue()
    return q.put, q


class TestRoundTrip:
    def test_declare_bind_publish_consume_ack(self, client):
        client.declare_exchange("x", "topic")
        assert client.declare_queue("q") == "q"
        client.bind("q", "x", "a.#")
        on_delivery, inbox = collector()
        tag = client.consume("q", on_delivery)
        seq = client.publish("x", "a.b", env(1))
        assert seq == 1
        d = inbox.get(timeout=3)
        assert d.consumer_tag == tag
        assert d.exchange_seq == 1
        assert d.redelivered is False
        assert d.envelope.body == {"n": 1}
        client.ack(d)
        assert client.queue_depth("q") == 0

    def test_ping(self, client):
        client.ping()

    def test_default_exchange_routes_by_queue_name(self, client):
        client.declare_queue("replies.1")
        on_delivery, inbox = collector()
        client.consume("replies.1", on_delivery)
        client.publish("", "replies.1", env(7))
        assert inbox.get(timeout=3).envelope.body == {"n": 7}

    def test_payload_survives_wire_bit_exact(self, client):
        original = make_envelope(
            "startNewTask", "c1", {"args": ["a", 1, {"k": [True, None]}]}, reply_to="r"
        )
        client.declare_queue("q")
        on_delivery, inbox = collector()
        client.consume("q", on_delivery)
        client.publish("", "q", original)
        received = inbox.get(timeout=3).envelope
        assert received == original
        assert encode_envelope(received) == encode_envelope(original)

    def test_callback_may_call_broker_without_deadlock(self, client):
        # ack from inside the delivery callback must not wedge the client.
        client.declare_queue("q")
        done = threading.Event()
        def on_delivery(d):
            client.ack(d)
            done.set()
        client.consume("q", on_delivery)
        client.publish("", "q", env())
        assert done.wait(timeout=3)
        assert client.queue_depth("q") == 0

    def test_consume_response_vs_delivery_race(self, client):
        # A message already queued is pushed the instant consume executes
        # server-side, racing the consume response back to the client. The
        # delivery must still reach the callback, not get dropped.
        client.declare_queue("q")
        client.publish("", "q", env(42))
        on_delivery, inbox = collector()
        client.consume("q", on_delivery)
        assert inbox.get(timeout=3).envelope.body == {"n": 42}


class TestErrors:
    def test_not_found_maps_to_exception(self, client):
        with pytest.raises(NotFound):
            client.bind("nope", "x", "k")
        with pytest.raises(NotFound):
            client.queue_depth("nope")
        with pytest.raises(NotFound):
            client.publish("ghost-exchange", "k", env())

    def test_declare_conflict_maps_to_exception(self, client, server):
        other = BrokerTcpClient(server.address)
        try:
            name = other.temporary_queue()
            with pytest.raises(DeclareConflict):
                client.declare_queue(name)
        finally:
            other.close()

    def test_connection_usable_after_error(self, client):
        with pytest.raises(NotFound):
            client.queue_depth("nope")
        client.declare_queue("q")
        assert client.queue_depth("q") == 0

    def test_ack_of_foreign_tag_rejected(self, client, server):
        # Settlement is per-connection: you cannot ack another session's
        # delivery even if you learn its tag.
        other = BrokerTcpClient(server.address)
        try:
            client.declare_queue("q")
            on_delivery, inbox = collector()
            client.consume("q", on_delivery)
            client.publish("", "q", env())
            d = inbox.get(timeout=3)
            with pytest.raises(NotFound):
                other.ack(d.tag)
            client.ack(d)
        finally:
            other.close()

    def test_cancel_of_foreign_consumer_rejected(self, client, server):
        other = BrokerTcpClient(server.address)
        try:
            client.declare_queue("q")
            tag = client.consume("q", lambda d: None)
            with pytest.raises(NotFound):
                other.cancel_consumer(tag)
        finally:
            other.close()


class TestRedelivery:
    def test_nack_redelivers_bit_exact(self, client):
        original = env(9)
        client.declare_queue("q")
        on_delivery, inbox = collector()
        client.consume("q", on_delivery)
        client.publish("", "q", original)
        first = inbox.get(timeout=3)
        client.nack(first)
        second = inbox.get(timeout=3)
        assert second.redelivered is True
        assert second.envelope == original
        assert encode_envelope(second.envelope) == encode_envelope(original)
        client.ack(second)

    def test_disconnect_requeues_unacked_to_surviving_consumer(self, client, server):
        victim = BrokerTcpClient(server.address)
        client.declare_queue("q")
        on_victim, victim_inbox = collector()
        victim.consume("q", on_victim)
        client.publish("", "q", env(5))
        held = victim_inbox.get(timeout=3)
        assert held.redelivered is False
        on_delivery, inbox = collector()
        client.consume("q", on_delivery)
        victim.close()  # drops without acking
        d = inbox.get(timeout=3)
        assert d.redelivered is True
        assert d.envelope.body == {"n": 5}

    def test_temporary_queue_vanishes_on_disconnect(self, client, server):
        other = BrokerTcpClient(server.address)
        name = other.temporary_queue()
        assert client.queue_depth(name) == 0
        other.close()
        deadline = time.monotonic() + 3
        while time.monotonic() < deadline:
            try:
                client.queue_depth(name)
            except NotFound:
                return
            time.sleep(0.01)
        pytest.fail("temporary queue outlived its connection")

    def test_cancelled_consumer_stops_receiving(self, client):
        client.declare_queue("q")
        on_delivery, inbox = collector()
        tag = client.consume("q", on_delivery)
        client.publish("", "q", env(1))
        client.ack(inbox.get(timeout=3))
        client.cancel_consumer(tag)
        client.publish("", "q", env(2))
        with pytest.raises(queue.Empty):
            inbox.get(timeout=0.3)
        assert client.queue_depth("q") == 1


class TestFanoutAcrossConnections:
    def test_each_bound_queue_gets_every_message_in_order(self, server):
        clients = [BrokerTcpClient(server.address) for _ in range(3)]
        try:
            clients[0].declare_exchange("fan", "fanout")
            inboxes = []
            for i, c in enumerate(clients):
                q = c.declare_queue(f"q{i}")
                c.bind(q, "fan", "")
                on_delivery, inbox = collector()
                c.consume(q, lambda d, c=c, put=on_delivery: (c.ack(d), put(d)))
                inboxes.append(inbox)
            for n in range(5):
                clients[n % 3].publish("fan", "", env(n))
            for inbox in inboxes:
                seen = [inbox.get(timeout=3).envelope.body["n"] for _ in range(5)]
                assert seen == [0, 1, 2, 3, 4]
        finally:
            for c in clients:
                c.close()

    def test_two_consumers_on_one_queue_split_work(self, server):
        a = BrokerTcpClient(server.address)
        b = BrokerTcpClient(server.address)
        try:
            a.declare_queue("jobs")
            on_a, inbox_a = collector()
            on_b, inbox_b = collector()
            a.consume("jobs", lambda d: (a.ack(d), on_a(d)))
            b.consume("jobs", lambda d: (b.ack(d), on_b(d)))
            for n in range(10):
                a.publish("", "jobs", env(n))
            got = []
            deadline = time.monotonic() + 10
            while len(got) < 10 and time.monotonic() < deadline:
                # Round-robin assignment: both inboxes fill; drain whichever.
                for inbox in (inbox_a, inbox_b):
                    try:
                        got.append(inbox.get(timeout=0.05))
                    except queue.Empty:
                        pass
            assert sorted(d.envelope.body["n"] for d in got) == list(range(10))
        finally:
            a.close()
            b.close()
