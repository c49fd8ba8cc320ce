"""Full live stack on localhost: broker, blob service, orchestrators, workers."""

import json
import queue
import time

import pytest

from offq.broker.tcp import BrokerTcpClient, BrokerTcpServer
from offq.flows import client_connect_flow, worker_connect_flow
from offq.live import host_node
from offq.orchestrator.blob import BlobClient, BlobServer
from offq.orchestrator.node import OrchestratorConfig, OrchestratorNode
from offq.protocol import canonical_json, make_envelope, new_guid, to_orchestrator_key
from offq.runtime import ORCH_EXCHANGE
from offq.worker.node import WorkerConfig, WorkerNode
from offq.worker.programs import JobProgram

FAST = dict(
    heartbeat_interval_s=0.2,
    detection_multiplier=3.0,
    sweep_interval_s=0.1,
    repl_ack_timeout_s=0.5,
)


class MiniClient:
    """Blocking client: session, submit, await result. Test-sized."""

    def __init__(self, broker_address, username):
        self.broker = BrokerTcpClient(broker_address)
        self.session = client_connect_flow(self.broker, username, timeout_s=5.0)
        self.inbox = queue.Queue()
        self.pending = []  # envelopes popped while awaiting something else
        self.broker.consume(self.session.queue, self._on_delivery)
        self.blob = BlobClient(self.session.blob_addr)
        self.result_ready_counts = {}

    def _on_delivery(self, delivery):
        self.broker.ack(delivery)
        env = delivery.envelope
        if env.msg_type == "resultReady":
            job_id = env.body.get("job_id", "")
            self.result_ready_counts[job_id] = (
                self.result_ready_counts.get(job_id, 0) + 1
            )
        self.inbox.put(env)

    def _to_orch(self, env, key=None):
        if key is None:
            key = to_orchestrator_key(self.session.orchestrator, env.msg_id)
        self.broker.publish(ORCH_EXCHANGE, key, env)

    def _await(self, msg_type, job_id, timeout_s=15.0):
        def matches(env):
            return env.msg_type == msg_type and env.body.get("job_id") == job_id

        for i, env in enumerate(self.pending):
            if matches(env):
                return self.pending.pop(i)
        deadline = time.monotonic() + timeout_s
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                pytest.fail(f"timed out waiting for {msg_type} of {job_id}")
            try:
                env = self.inbox.get(timeout=remaining)
            except queue.Empty:
                pytest.fail(f"timed out waiting for {msg_type} of {job_id}")
            if matches(env):
                return env
            self.pending.append(env)

    def submit(self, name, program, checkpoint_policy=None):
        job_id = new_guid()
        self._to_orch(
            make_envelope(
                msg_type="startNewTask",
                sender=self.session.principal_id,
                reply_to=self.session.principal_id,
                body={
                    "client_id": self.session.principal_id,
                    "name": name,
                    "program_ref": f"prog.{job_id}",
                    "checkpoint_policy": checkpoint_policy,
                },
                msg_id=job_id,
            )
        )
        ack = self._await("newTaskAck", job_id)
        self.blob.put(
            ack.body["program_ref"],
            canonical_json(program.to_json()).encode("utf-8"),
        )
        self._to_orch(
            make_envelope(
                msg_type="taskUploadCompleted",
                sender=self.session.principal_id,
                reply_to=self.session.principal_id,
                body={"job_id": job_id, "client_id": self.session.principal_id},
            )
        )
        self._await("jobStatusReply", job_id)
        return job_id

    def await_result(self, job_id, timeout_s=30.0):
        env = self._await("resultReady", job_id, timeout_s)
        raw = self.blob.get(env.body["result_ref"])
        return json.loads(raw.decode("utf-8"))

    def close(self):
        self.broker.close()
        self.blob.close()


@pytest.fixture
def stack():
    """Broker + blob service + runtimes list torn down after the test."""
    broker = BrokerTcpServer(port=0).start()
    blob = BlobServer(port=0)
    blob.start()
    runtimes = []
    clients = []
    yield broker, blob, runtimes, clients
    for c in clients:
        c.close()
    for r in runtimes:
        r.stop()
    blob.stop()
    broker.stop()


def spawn_orchestrators(stack, names):
    broker, blob, runtimes, _ = stack
    roster = tuple(names)
    for name in names:
        node = OrchestratorNode(
            OrchestratorConfig(name=name, roster=roster, blob_addr=blob.address, **FAST)
        )
        runtimes.append(host_node(node, broker.address))


def spawn_worker(stack, worker_id):
    broker, _, runtimes, _ = stack
    node = WorkerNode(
        WorkerConfig(
            worker_id=worker_id,
            heartbeat_interval_s=0.2,
            checkpoint_pause_s=0.02,
            register_retry_s=0.5,
        )
    )
    runtimes.append(host_node(node, broker.address))
    return node


def make_client(stack, username):
    broker, _, _, clients = stack
    client = MiniClient(broker.address, username)
    clients.append(client)
    return client


PROGRAM = JobProgram(kind="busy_counter", total_steps=40, step_cost_s=0.01, params={})


class TestEndToEnd:
    def test_single_orchestrator_single_worker(self, stack):
        spawn_orchestrators(stack, ["o1"])
        spawn_worker(stack, new_guid())
        client = make_client(stack, "alice")
        job_id = client.submit("smoke", PROGRAM)
        result = client.await_result(job_id)
        assert result["kind"] == "busy_counter"
        assert result["steps"] == 40
        assert client.result_ready_counts[job_id] == 1

    def test_two_orchestrators_two_workers_two_jobs(self, stack):
        spawn_orchestrators(stack, ["o1", "o2"])
        spawn_worker(stack, new_guid())
        spawn_worker(stack, new_guid())
        client = make_client(stack, "bob")
        with_ckpts = client.submit(
            "ckpts", PROGRAM, checkpoint_policy={"segments": 4}
        )
        bare = client.submit("bare", PROGRAM)
        result_a = client.await_result(with_ckpts)
        result_b = client.await_result(bare)
        # Checkpoint splits must not change the computed value.
        assert result_a["value"] == result_b["value"]

    def test_result_matches_simulation(self, stack):
        # The same program computes the same value on the virtual clock and
        # on the wall clock: execution is pure in (program, step range).
        from offq.simlab.runner import SimConfig, run_simulation

        sim = run_simulation(
            SimConfig(program=PROGRAM, mode="model_faithful", seed=1)
        )
        spawn_orchestrators(stack, ["o1"])
        spawn_worker(stack, new_guid())
        client = make_client(stack, "carol")
        job_id = client.submit("twin", PROGRAM)
        assert client.await_result(job_id) == sim.result


class TestWorkerIdentity:
    def test_flow_minted_id_then_node_reuses_it(self, stack):
        broker, _, runtimes, _ = stack
        spawn_orchestrators(stack, ["o1"])
        bootstrap = BrokerTcpClient(broker.address)
        session = worker_connect_flow(bootstrap, "", timeout_s=5.0)
        bootstrap.close()
        node = spawn_worker(stack, session.principal_id)
        client = make_client(stack, "dave")
        job_id = client.submit("ident", PROGRAM)
        client.await_result(job_id)
        assert node.jobs_completed == 1
        assert node.name == session.principal_id


class TestDuplicateNameLock:
    def test_second_exclusive_declare_conflicts(self, stack):
        broker, _, _, _ = stack
        from offq.broker import DeclareConflict

        first = BrokerTcpClient(broker.address)
        second = BrokerTcpClient(broker.address)
        try:
            first.declare_queue("lock.orch.o1", exclusive=True)
            with pytest.raises(DeclareConflict):
                second.declare_queue("lock.orch.o1", exclusive=True)
        finally:
            first.close()
            second.close()
