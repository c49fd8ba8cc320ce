"""Orchestrator node: sessions, job lifecycle, scheduling, and failover.

A fixed roster of orchestrator replicas shares one replicated store.  The
replica holding the primary role consumes the registration queues and every
roster member's orchestrator queue, so principals keep publishing to the
orchestrator name they were granted even after a failover; whoever is
primary picks the traffic up.  Backups consume only the replication queue,
apply the ordered change stream, and watch the primary's heartbeats.

Hard state (sessions, workers, jobs, manifests, roles) changes only through
replicated mutations.  Soft state (who heartbeated when, which workers sit
in the idle queue, when a job was handed to its worker) is rebuilt from
scratch on promotion and from incoming traffic afterwards.

Delivery handling follows an ack-after-processing discipline: a message from
an orchestrator queue is acknowledged only after the mutations it triggered
have applied (often inside the replication callback).  If the primary dies
mid-processing the broker redelivers to the next primary, and every handler
is written to make that redelivery idempotent: job ids equal the submit
message id, store mutations validate against current state, and duplicate
guids are skipped.

Known unavoidable window, accepted and documented: the primary publishes
resultReady and then records the notification as a replicated change before
acknowledging the worker's result.  A crash landing exactly between the
publish and that change's apply would re-notify once on the next primary.
The window is a few events wide; failover scenarios here kill primaries
mid-job, where redelivery produces exactly one notification.

A killed orchestrator must not rejoin: a blank namesake replica would need
a state snapshot transfer, which this system deliberately does not have.
Failover only ever hands the role forward to a standing backup.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Any, Callable

from offq.broker import Delivery, NotFound
from offq.orchestrator.replication import ReplicationEngine
from offq.orchestrator.store import ApplyResult, ChangeRecord, ReplicatedStore
from offq.protocol import Envelope, make_envelope
from offq.runtime import (
    CLIENT_EXCHANGE,
    Node,
    ORCH_EXCHANGE,
    REPL_EXCHANGE,
    Runtime,
    WORKER_EXCHANGE,
    declare_exchange_layout,
    declare_register_layout,
    orchestrator_queue,
    register_queue_client,
    register_queue_worker,
    replication_queue,
)


@dataclass(frozen=True)
class OrchestratorConfig:
    name: str
    roster: tuple[str, ...]
    blob_addr: str = "sim"
    heartbeat_interval_s: float = 5.0
    detection_multiplier: float = 3.0
    sweep_interval_s: float = 2.5
    repl_ack_timeout_s: float = 2.0
    assignment_grace_s: float = 10.0

    @property
    def detection_timeout_s(self) -> float:
        return self.heartbeat_interval_s * self.detection_multiplier


class OrchestratorNode(Node):
    def __init__(self, config: OrchestratorConfig):
        super().__init__(config.name)
        if config.name not in config.roster:
            raise ValueError(f"{config.name} not in roster {config.roster}")
        self.config = config
        self.store = ReplicatedStore(config.roster)
        self.engine: ReplicationEngine | None = None
        # soft state, rebuilt on promotion
        self.worker_last_seen: dict[str, float] = {}
        self.orch_last_seen: dict[str, float] = {}
        self.idle: deque[str] = deque()
        self.assigned_at: dict[str, float] = {}
        self._assign_inflight = False
        self._consumer_tags: dict[str, str] = {}
        self._started_at = 0.0

    # -- lifecycle ----------------------------------------------------------

    def start(self, runtime: Runtime) -> None:
        self.runtime = runtime
        self._started_at = runtime.now()
        declare_exchange_layout(runtime.declare_exchange)
        declare_register_layout(runtime.declare_queue, runtime.bind)
        for member in self.config.roster:
            runtime.declare_queue(orchestrator_queue(member))
            runtime.bind(orchestrator_queue(member), ORCH_EXCHANGE, f"{member}.#")
        runtime.declare_queue(replication_queue(self.name))
        runtime.bind(replication_queue(self.name), REPL_EXCHANGE, self.name)
        self.engine = ReplicationEngine(
            name=self.name,
            store=self.store,
            publish=self._publish_repl,
            members=self._live_replicas,
            new_guid=runtime.new_guid,
            call_later=runtime.call_later,
            cancel_timer=runtime.cancel,
            on_applied=self._on_change_applied,
            ack_timeout_s=self.config.repl_ack_timeout_s,
            solo=len(self.config.roster) == 1,
        )
        for member in self.config.roster:
            if member != self.name:
                self.orch_last_seen[member] = runtime.now()
        self._reconcile_consumers()
        self._heartbeat()
        self.runtime.call_later(self.config.sweep_interval_s, self._sweep)

    def role(self) -> str:
        return self.store.roles[self.name]

    def _publish_repl(self, env: Envelope) -> None:
        self.runtime.publish(REPL_EXCHANGE, self.name, env)

    def _live_replicas(self) -> set[str]:
        cutoff = self.runtime.now() - self.config.detection_timeout_s
        live = {self.name}
        for member, seen in self.orch_last_seen.items():
            if seen >= cutoff:
                live.add(member)
        return live

    def _reconcile_consumers(self) -> None:
        desired: dict[str, Callable[[Delivery], None]] = {
            replication_queue(self.name): self._on_repl_delivery
        }
        if self.role() == "primary":
            desired[register_queue_client()] = self._on_orch_delivery
            desired[register_queue_worker()] = self._on_orch_delivery
            for member in self.config.roster:
                desired[orchestrator_queue(member)] = self._on_orch_delivery
        for queue in list(self._consumer_tags):
            if queue not in desired:
                self.runtime.cancel_consumer(self._consumer_tags.pop(queue))
        for queue, callback in desired.items():
            if queue not in self._consumer_tags:
                self._consumer_tags[queue] = self.runtime.consume(queue, callback)

    # -- timers ---------------------------------------------------------------

    def _heartbeat(self) -> None:
        self._publish_repl(
            make_envelope(
                msg_type="heartbeat",
                sender=self.name,
                body={"node_kind": "orchestrator", "name": self.name},
                msg_id=self.runtime.new_guid(),
            )
        )
        self.runtime.call_later(self.config.heartbeat_interval_s, self._heartbeat)

    def _sweep(self) -> None:
        if self.role() == "primary":
            self._sweep_workers()
        else:
            self._consider_promotion()
        self.runtime.call_later(self.config.sweep_interval_s, self._sweep)

    def _sweep_workers(self) -> None:
        now = self.runtime.now()
        cutoff = now - self.config.detection_timeout_s
        for worker_id in list(self.store.workers):
            seen = self.worker_last_seen.setdefault(worker_id, now)
            if seen >= cutoff:
                continue
            for job_id in self.store.running_worker_jobs(worker_id):
                self._requeue(job_id)
            while worker_id in self.idle:
                self.idle.remove(worker_id)

    def _requeue(self, job_id: str) -> None:
        self.assigned_at.pop(job_id, None)
        self.engine.request_change(
            {"kind": "requeue_job", "job_id": job_id},
            lambda result: self._pump_assignments(),
        )

    def _consider_promotion(self) -> None:
        now = self.runtime.now()
        primary = self.store.primary()
        if primary == self.name:
            return
        if now - self.orch_last_seen.get(primary, self._started_at) <= (
            self.config.detection_timeout_s
        ):
            return
        live = self._live_replicas()
        candidates = sorted(live - {primary})
        if not candidates or candidates[0] != self.name:
            return
        self._publish_repl(
            make_envelope(
                msg_type="promoteBackup",
                sender=self.name,
                body={"orchestrator": self.name, "replaces": primary},
                msg_id=self.runtime.new_guid(),
            )
        )
        self.engine.request_change(
            {"kind": "promote", "orchestrator": self.name}
        )

    # -- replication plumbing --------------------------------------------------

    def _on_repl_delivery(self, delivery: Delivery) -> None:
        env = delivery.envelope
        if self.engine.handle_envelope(env):
            self.runtime.ack(delivery)
            return
        if env.msg_type == "heartbeat":
            name = env.body.get("name", env.sender)
            if name != self.name:
                self.orch_last_seen[name] = self.runtime.now()
        # promoteBackup announcements are informational
        self.runtime.ack(delivery)

    def _on_change_applied(self, record: ChangeRecord, result: ApplyResult) -> None:
        if not result.applied:
            return
        if record.mutation["kind"] == "promote":
            self._reconcile_consumers()
            if self.store.primary() == self.name:
                self._on_became_primary()

    def _on_became_primary(self) -> None:
        now = self.runtime.now()
        self.worker_last_seen = {w: now for w in self.store.workers}
        self.assigned_at = {
            job_id: now
            for job_id, job in self.store.jobs.items()
            if job.status == "running"
        }
        busy = self.store.busy_workers()
        self.idle = deque(
            w
            for w, _ in sorted(self.store.workers.items(), key=lambda kv: kv[1])
            if w not in busy
        )
        self._assign_inflight = False
        # Completed-but-unnotified jobs need no sweep here: their jobResult
        # was never acknowledged (the ack follows the notify publish), so the
        # broker redelivers it to us and the result handler re-notifies.
        self._pump_assignments()

    # -- principal traffic ------------------------------------------------------

    def _ack(self, delivery: Delivery) -> None:
        # Settling principal traffic races demotion: losing the primary role
        # cancels these consumers and requeues whatever was unacked, and the
        # broker then refuses the late ack. The redelivered message belongs
        # to the new primary; dropping our ack is the correct outcome.
        try:
            self.runtime.ack(delivery)
        except NotFound:
            pass

    def _on_orch_delivery(self, delivery: Delivery) -> None:
        env = delivery.envelope
        handler = {
            "clientRegister": self._h_client_register,
            "workerRegister": self._h_worker_register,
            "clientConnect": self._h_client_connect,
            "workerConnect": self._h_worker_connect,
            "startNewTask": self._h_start_new_task,
            "taskUploadCompleted": self._h_upload_completed,
            "checkpointManifest": self._h_manifest,
            "heartbeat": self._h_worker_heartbeat,
            "jobResult": self._h_job_result,
            "cancelJob": self._h_cancel,
            "jobStatusRequest": self._h_status_request,
        }.get(env.msg_type)
        if handler is None:
            self._ack(delivery)
            return
        handler(delivery, env)

    def _reply_client(self, env: Envelope, reply: Envelope, key: str = "") -> None:
        self.runtime.publish(
            CLIENT_EXCHANGE, key or env.reply_to or env.sender, reply
        )

    def _grant(self, exchange: str, reply_key: str, body: dict[str, Any]) -> None:
        body = dict(body, orchestrator=self.name, blob_addr=self.config.blob_addr)
        self.runtime.publish(
            exchange,
            reply_key,
            make_envelope(
                msg_type="sessionGrant",
                sender=self.name,
                body=body,
                msg_id=self.runtime.new_guid(),
            ),
        )

    def _h_client_register(self, delivery: Delivery, env: Envelope) -> None:
        username = env.body.get("username", env.sender)
        reply_key = env.reply_to
        existing = self.store.sessions.get(username)
        if existing is not None:
            self._grant(CLIENT_EXCHANGE, reply_key, {"client_id": existing})
            self._ack(delivery)
            return
        client_id = self.runtime.new_guid()

        def granted(result: ApplyResult) -> None:
            # On a lost race the stored id wins over the one we minted.
            self._grant(
                CLIENT_EXCHANGE,
                reply_key,
                {"client_id": self.store.sessions[username]},
            )
            self._ack(delivery)

        self.engine.request_change(
            {"kind": "add_client", "username": username, "client_id": client_id},
            granted,
        )

    def _h_worker_register(self, delivery: Delivery, env: Envelope) -> None:
        # An empty id means "first contact": mint one, the worker saves it.
        worker_id = env.body.get("worker_id") or self.runtime.new_guid()
        reply_key = env.reply_to

        def granted(result: ApplyResult | None = None) -> None:
            self.worker_last_seen[worker_id] = self.runtime.now()
            self._grant(WORKER_EXCHANGE, reply_key, {"worker_id": worker_id})
            self._ack(delivery)

        if worker_id in self.store.workers:
            granted()
            return
        self.engine.request_change(
            {"kind": "add_worker", "worker_id": worker_id}, granted
        )

    def _h_client_connect(self, delivery: Delivery, env: Envelope) -> None:
        self._ack(delivery)

    def _h_worker_connect(self, delivery: Delivery, env: Envelope) -> None:
        worker_id = env.body.get("worker_id", env.sender)
        if worker_id in self.store.workers:
            self.worker_last_seen[worker_id] = self.runtime.now()
            self._mark_idle(worker_id)
        self._ack(delivery)
        self._pump_assignments()

    def _mark_idle(self, worker_id: str) -> None:
        if worker_id in self.store.busy_workers():
            return
        if worker_id not in self.idle:
            self.idle.append(worker_id)

    def _h_start_new_task(self, delivery: Delivery, env: Envelope) -> None:
        job_id = env.msg_id  # resubmits and redeliveries collapse to one job
        client_id = env.body.get("client_id", "")
        reply_key = env.reply_to or client_id

        def acked(result: ApplyResult | None = None) -> None:
            job = self.store.jobs.get(job_id)
            self._reply_client(
                env,
                make_envelope(
                    msg_type="newTaskAck",
                    sender=self.name,
                    body={
                        "job_id": job_id,
                        "program_ref": job.program_ref if job else "",
                    },
                    msg_id=self.runtime.new_guid(),
                ),
                key=reply_key,
            )
            self._ack(delivery)

        if job_id in self.store.jobs:
            acked()
            return
        if client_id not in self.store.clients:
            self._reply_client(
                env,
                make_envelope(
                    msg_type="jobStatusReply",
                    sender=self.name,
                    body={"job_id": job_id, "error": "unknown_client"},
                    msg_id=self.runtime.new_guid(),
                ),
                key=reply_key,
            )
            self._ack(delivery)
            return
        self.engine.request_change(
            {
                "kind": "add_job",
                "job_id": job_id,
                "client_id": client_id,
                "name": env.body.get("name", job_id[:8]),
                "program_ref": env.body.get("program_ref", f"prog.{job_id}"),
                "checkpoint_policy": env.body.get("checkpoint_policy"),
                "created_at": self.runtime.now(),
            },
            acked,
        )

    def _h_upload_completed(self, delivery: Delivery, env: Envelope) -> None:
        job_id = env.body.get("job_id", "")
        job = self.store.jobs.get(job_id)
        if job is None:
            self._reply_status_error(delivery, env, job_id, "not_found")
            return
        if job.status != "uploading":
            # redelivery after a crash that already queued it: confirm
            self._reply_status(delivery, env, job_id)
            return
        if not self.runtime.blob_exists(self.config.blob_addr, job.program_ref):
            def failed(result: ApplyResult) -> None:
                self._reply_status(delivery, env, job_id)

            self.engine.request_change(
                {
                    "kind": "fail_job",
                    "job_id": job_id,
                    "reason": "program blob missing at upload complete",
                },
                failed,
            )
            return

        def queued(result: ApplyResult) -> None:
            self._reply_status(delivery, env, job_id)
            self._pump_assignments()

        self.engine.request_change(
            {"kind": "job_uploaded", "job_id": job_id}, queued
        )

    def _reply_status(self, delivery: Delivery, env: Envelope, job_id: str) -> None:
        job = self.store.jobs.get(job_id)
        body: dict[str, Any] = {"job_id": job_id}
        if job is None:
            body["error"] = "not_found"
        else:
            body.update(job.to_json())
        self._reply_client(
            env,
            make_envelope(
                msg_type="jobStatusReply",
                sender=self.name,
                body=body,
                msg_id=self.runtime.new_guid(),
            ),
        )
        self._ack(delivery)

    def _reply_status_error(
        self, delivery: Delivery, env: Envelope, job_id: str, error: str
    ) -> None:
        self._reply_client(
            env,
            make_envelope(
                msg_type="jobStatusReply",
                sender=self.name,
                body={"job_id": job_id, "error": error},
                msg_id=self.runtime.new_guid(),
            ),
        )
        self._ack(delivery)

    def _h_manifest(self, delivery: Delivery, env: Envelope) -> None:
        manifest = env.body.get("manifest", {})
        worker_id = manifest.get("worker_id", env.sender)
        self.worker_last_seen[worker_id] = self.runtime.now()

        def applied(result: ApplyResult) -> None:
            for ref in result.dropped_refs:
                self.runtime.blob_delete(self.config.blob_addr, ref)
            self._ack(delivery)

        self.engine.request_change(
            {"kind": "add_manifest", "manifest": manifest}, applied
        )

    def _h_worker_heartbeat(self, delivery: Delivery, env: Envelope) -> None:
        body = env.body
        worker_id = body.get("worker_id", env.sender)
        now = self.runtime.now()
        self.worker_last_seen[worker_id] = now
        reported = body.get("job_id")
        if worker_id in self.store.workers:
            # A worker claiming to be idle while the store says it runs a job
            # lost that job (restart between our assignment and now): requeue
            # once the assignment grace passed, it will never finish alone.
            for job_id in self.store.running_worker_jobs(worker_id):
                if reported != job_id and (
                    now - self.assigned_at.get(job_id, now)
                    > self.config.assignment_grace_s
                ):
                    self._requeue(job_id)
            if reported is None:
                self._mark_idle(worker_id)
        self._ack(delivery)
        self._pump_assignments()

    def _h_job_result(self, delivery: Delivery, env: Envelope) -> None:
        body = env.body
        job_id = body.get("job_id", "")
        worker_id = body.get("worker_id", env.sender)
        self.worker_last_seen[worker_id] = self.runtime.now()
        job = self.store.jobs.get(job_id)
        if job is None:
            self._ack(delivery)
            return
        if job.status == "completed":
            if not job.notified:
                self._notify_result(job_id)
            self._ack(delivery)
            return
        if job.status != "running" or job.assigned_worker != worker_id:
            # canceled meanwhile, or a reassigned job's first attempt coming
            # home late; the active assignment owns the result
            self._ack(delivery)
            return

        def completed(result: ApplyResult) -> None:
            if result.applied:
                self._notify_result(job_id)
                self.assigned_at.pop(job_id, None)
                self._mark_idle(worker_id)
            self._ack(delivery)
            self._pump_assignments()

        self.engine.request_change(
            {
                "kind": "complete_job",
                "job_id": job_id,
                "result_ref": body.get("result_ref", ""),
            },
            completed,
        )

    def _notify_result(self, job_id: str) -> None:
        job = self.store.jobs[job_id]
        self.runtime.publish(
            CLIENT_EXCHANGE,
            job.client_id,
            make_envelope(
                msg_type="resultReady",
                sender=self.name,
                body={
                    "job_id": job_id,
                    "result_ref": job.result_ref,
                    "status": "completed",
                },
                msg_id=self.runtime.new_guid(),
            ),
        )
        self.engine.request_change({"kind": "set_notified", "job_id": job_id})

    def _h_cancel(self, delivery: Delivery, env: Envelope) -> None:
        job_id = env.body.get("job_id", "")
        client_id = env.body.get("client_id", "")
        job = self.store.jobs.get(job_id)
        if job is None:
            self._reply_status_error(delivery, env, job_id, "not_found")
            return
        if job.client_id != client_id:
            self._reply_status_error(delivery, env, job_id, "not_owner")
            return
        was_running_on = job.assigned_worker

        def canceled(result: ApplyResult) -> None:
            if result.applied and was_running_on is not None:
                self.runtime.publish(
                    WORKER_EXCHANGE,
                    was_running_on,
                    make_envelope(
                        msg_type="cancelJob",
                        sender=self.name,
                        body={"job_id": job_id},
                        msg_id=self.runtime.new_guid(),
                    ),
                )
                self.assigned_at.pop(job_id, None)
                self._mark_idle(was_running_on)
            self._reply_status(delivery, env, job_id)
            self._pump_assignments()

        self.engine.request_change({"kind": "cancel_job", "job_id": job_id}, canceled)

    def _h_status_request(self, delivery: Delivery, env: Envelope) -> None:
        job_id = env.body.get("job_id")
        client_id = env.body.get("client_id", "")
        if job_id is not None:
            job = self.store.jobs.get(job_id)
            if job is not None and job.client_id != client_id:
                self._reply_status_error(delivery, env, job_id, "not_owner")
                return
            self._reply_status(delivery, env, job_id)
            return
        jobs = [
            job.to_json()
            for job in self.store.jobs.values()
            if job.client_id == client_id
        ]
        jobs.sort(key=lambda j: (j["created_at"], j["job_id"]))
        self._reply_client(
            env,
            make_envelope(
                msg_type="jobStatusReply",
                sender=self.name,
                body={"jobs": jobs},
                msg_id=self.runtime.new_guid(),
            ),
        )
        self._ack(delivery)

    # -- assignment ---------------------------------------------------------------

    def _next_idle_worker(self) -> str | None:
        cutoff = self.runtime.now() - self.config.detection_timeout_s
        busy = self.store.busy_workers()
        while self.idle:
            worker_id = self.idle.popleft()
            if worker_id not in self.store.workers or worker_id in busy:
                continue
            if self.worker_last_seen.get(worker_id, self.runtime.now()) < cutoff:
                continue
            return worker_id
        return None

    def _pump_assignments(self) -> None:
        if self.role() != "primary" or self._assign_inflight:
            return
        if not self.store.queued_order:
            return
        worker_id = self._next_idle_worker()
        if worker_id is None:
            return
        job_id = self.store.queued_order[0]
        self._assign_inflight = True

        def assigned(result: ApplyResult) -> None:
            self._assign_inflight = False
            if result.applied:
                self._send_assignment(job_id, worker_id)
            else:
                self._mark_idle(worker_id)
            self._pump_assignments()

        self.engine.request_change(
            {"kind": "assign_job", "job_id": job_id, "worker_id": worker_id},
            assigned,
        )

    def _send_assignment(self, job_id: str, worker_id: str) -> None:
        job = self.store.jobs[job_id]
        self.assigned_at[job_id] = self.runtime.now()
        self.runtime.publish(
            WORKER_EXCHANGE,
            worker_id,
            make_envelope(
                msg_type="jobAssignment",
                sender=self.name,
                body={
                    "job_id": job_id,
                    "program_ref": job.program_ref,
                    "checkpoint_policy": job.checkpoint_policy,
                    "resume_manifest": self.store.latest_manifest(job_id),
                    "blob_addr": self.config.blob_addr,
                },
                msg_id=self.runtime.new_guid(),
            ),
        )
