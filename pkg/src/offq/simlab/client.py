"""Simulated client: submits jobs, uploads programs, awaits results.

Mirrors what a human-driven CLI client does, as an event-driven node the
kernel can host.  Each job records submit and completion timestamps as the
client perceives them (submit = the instant startNewTask is published,
completion = the instant resultReady is delivered), plus how many
resultReady envelopes arrived, which failover tests assert to be exactly 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from offq.broker import Delivery
from offq.protocol import (
    CLIENT_REGISTER_KEY,
    Envelope,
    canonical_json,
    client_connect_key,
    make_envelope,
    to_orchestrator_key,
)
from offq.runtime import (
    CLIENT_EXCHANGE,
    Node,
    ORCH_EXCHANGE,
    Runtime,
    client_queue,
    declare_exchange_layout,
    declare_register_layout,
)
from offq.worker.programs import JobProgram


@dataclass(frozen=True)
class JobSpec:
    name: str
    program: JobProgram
    checkpoint_policy: dict[str, Any] | None = None
    submit_at_s: float = 0.0
    cancel_at_s: float | None = None
    fetch_result: bool = True


@dataclass(frozen=True)
class ClientProfile:
    username: str
    jobs: tuple[JobSpec, ...]


@dataclass
class JobRecord:
    spec: JobSpec
    job_id: str
    submitted_at: float
    acked: bool = False
    uploaded: bool = False
    completed_at: float | None = None
    result_ready_count: int = 0
    result: dict[str, Any] | None = None
    statuses: list[dict[str, Any]] = field(default_factory=list)

    @property
    def completion_s(self) -> float | None:
        if self.completed_at is None:
            return None
        return self.completed_at - self.submitted_at


class SimClient(Node):
    def __init__(self, profile: ClientProfile, register_retry_s: float = 10.0):
        super().__init__(profile.username)
        self.profile = profile
        self.register_retry_s = register_retry_s
        self.client_id = ""
        self.serving_orch = ""
        self.blob_addr = ""
        self.records: dict[str, JobRecord] = {}
        self.by_name: dict[str, JobRecord] = {}
        self._reply_key = ""
        self._reply_tag = ""
        self._registered = False
        self._retry_timer: Any = None

    # -- session ------------------------------------------------------------

    def start(self, runtime: Runtime) -> None:
        self.runtime = runtime
        declare_exchange_layout(runtime.declare_exchange)
        declare_register_layout(runtime.declare_queue, runtime.bind)
        self._reply_key = runtime.new_guid()
        reply_queue = runtime.temporary_queue()
        runtime.bind(reply_queue, CLIENT_EXCHANGE, self._reply_key)
        self._reply_tag = runtime.consume(reply_queue, self._on_reply)
        self._send_register()

    def _send_register(self) -> None:
        self.runtime.publish(
            ORCH_EXCHANGE,
            CLIENT_REGISTER_KEY,
            make_envelope(
                msg_type="clientRegister",
                sender=self.name,
                reply_to=self._reply_key,
                body={"username": self.profile.username},
                msg_id=self.runtime.new_guid(),
            ),
        )
        self._retry_timer = self.runtime.call_later(
            self.register_retry_s, self._on_register_timeout
        )

    def _on_register_timeout(self) -> None:
        if not self._registered:
            self._send_register()

    def _on_reply(self, delivery: Delivery) -> None:
        env = delivery.envelope
        self.runtime.ack(delivery)
        if env.msg_type != "sessionGrant" or self._registered:
            return
        self._registered = True
        if self._retry_timer is not None:
            self.runtime.cancel(self._retry_timer)
            self._retry_timer = None
        self.client_id = env.body["client_id"]
        self.serving_orch = env.body["orchestrator"]
        self.blob_addr = env.body.get("blob_addr", "")
        self.runtime.cancel_consumer(self._reply_tag)
        queue = self.runtime.declare_queue(client_queue(self.client_id))
        self.runtime.bind(queue, CLIENT_EXCHANGE, self.client_id)
        self.runtime.consume(queue, self._on_delivery)
        self._to_orch(
            make_envelope(
                msg_type="clientConnect",
                sender=self.name,
                body={"client_id": self.client_id},
                msg_id=self.runtime.new_guid(),
            ),
            key=client_connect_key(self.serving_orch),
        )
        now = self.runtime.now()
        for spec in self.profile.jobs:
            self.runtime.call_later(
                max(0.0, spec.submit_at_s - now), self._submit, spec
            )

    def _to_orch(self, env: Envelope, key: str | None = None) -> None:
        if key is None:
            key = to_orchestrator_key(self.serving_orch, env.msg_id)
        self.runtime.publish(ORCH_EXCHANGE, key, env)

    # -- submission -----------------------------------------------------------

    def _submit(self, spec: JobSpec) -> None:
        job_id = self.runtime.new_guid()  # the submit msg_id IS the job id
        record = JobRecord(
            spec=spec, job_id=job_id, submitted_at=self.runtime.now()
        )
        self.records[job_id] = record
        self.by_name[spec.name] = record
        self._to_orch(
            make_envelope(
                msg_type="startNewTask",
                sender=self.name,
                reply_to=self.client_id,
                body={
                    "client_id": self.client_id,
                    "name": spec.name,
                    "program_ref": f"prog.{job_id}",
                    "checkpoint_policy": spec.checkpoint_policy,
                },
                msg_id=job_id,
            )
        )
        if spec.cancel_at_s is not None:
            self.runtime.call_later(
                max(0.0, spec.cancel_at_s - self.runtime.now()),
                self._cancel,
                job_id,
            )

    def _cancel(self, job_id: str) -> None:
        self._to_orch(
            make_envelope(
                msg_type="cancelJob",
                sender=self.name,
                reply_to=self.client_id,
                body={"job_id": job_id, "client_id": self.client_id},
                msg_id=self.runtime.new_guid(),
            )
        )

    def request_status(self, job_id: str | None = None) -> None:
        body: dict[str, Any] = {"client_id": self.client_id}
        if job_id is not None:
            body["job_id"] = job_id
        self._to_orch(
            make_envelope(
                msg_type="jobStatusRequest",
                sender=self.name,
                reply_to=self.client_id,
                body=body,
                msg_id=self.runtime.new_guid(),
            )
        )

    # -- inbound ---------------------------------------------------------------

    def _on_delivery(self, delivery: Delivery) -> None:
        env = delivery.envelope
        self.runtime.ack(delivery)
        if env.msg_type == "newTaskAck":
            self._on_task_ack(env)
        elif env.msg_type == "resultReady":
            self._on_result_ready(env)
        elif env.msg_type == "jobStatusReply":
            record = self.records.get(env.body.get("job_id", ""))
            if record is not None:
                record.statuses.append(dict(env.body))

    def _on_task_ack(self, env: Envelope) -> None:
        record = self.records.get(env.body.get("job_id", ""))
        if record is None:
            return
        record.acked = True
        if record.uploaded:
            return  # duplicate ack after a redelivered submit
        record.uploaded = True
        self.runtime.blob_put(
            self.blob_addr,
            f"prog.{record.job_id}",
            canonical_json(record.spec.program.to_json()).encode("utf-8"),
        )
        self._to_orch(
            make_envelope(
                msg_type="taskUploadCompleted",
                sender=self.name,
                reply_to=self.client_id,
                body={"job_id": record.job_id, "client_id": self.client_id},
                msg_id=self.runtime.new_guid(),
            )
        )

    def _on_result_ready(self, env: Envelope) -> None:
        record = self.records.get(env.body.get("job_id", ""))
        if record is None:
            return
        record.result_ready_count += 1
        if record.completed_at is not None:
            return
        record.completed_at = self.runtime.now()
        if record.spec.fetch_result:
            raw = self.runtime.blob_get(self.blob_addr, env.body["result_ref"])
            record.result = json.loads(raw.decode("utf-8"))

    # -- queries -----------------------------------------------------------------

    def all_done(self) -> bool:
        if len(self.records) < len(self.profile.jobs):
            return False
        return all(r.completed_at is not None for r in self.records.values())
