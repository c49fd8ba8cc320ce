"""Worker node: registers, executes assigned jobs, checkpoints, reports.

Execution is span driven.  Instead of ticking per step, the worker plans an
uninterrupted span from its current step to the next checkpoint boundary
(or to completion), announces it to the runtime, and schedules one wake-up
at the span's end.  Step effects are applied in bulk at the wake-up via the
pure step function, which produces bit-identical state no matter how the
steps were split across spans, workers, or restarts.

At a checkpoint boundary the worker serializes its state, uploads the blob,
publishes a manifest to the serving orchestrator, and pauses for the
configured checkpoint cost before resuming.  Cancellation truncates the
current span at the next whole step.  A kill (crash) simply loses the
in-memory state; recovery is the orchestrator's job, and this worker (or a
namesake) later resumes from the last manifest it is handed.

The worker never learns about orchestrator failover: it keeps publishing to
the orchestrator name from its session grant, and whichever replica
currently consumes that orchestrator's queue handles the traffic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Any

from offq.broker import Delivery
from offq.protocol import (
    CheckpointManifest,
    Envelope,
    ProtocolError,
    WORKER_REGISTER_KEY,
    canonical_json,
    make_envelope,
    to_orchestrator_key,
    worker_connect_key,
)
from offq.runtime import (
    Node,
    ORCH_EXCHANGE,
    Runtime,
    WORKER_EXCHANGE,
    declare_exchange_layout,
    declare_register_layout,
    worker_queue,
)
from offq.worker.programs import (
    JobProgram,
    ProgramError,
    apply_steps,
    finalize,
    initial_state,
)
from offq.worker.state import (
    ExecutionState,
    checkpoint_boundaries,
    deserialize_state,
    serialize_state,
)

_STEP_EPS = 1e-9


def checkpoint_ref(job_id: str, seq: int) -> str:
    return f"ckpt.{job_id}.{seq}"


def result_ref(job_id: str) -> str:
    return f"result.{job_id}"


@dataclass(frozen=True)
class WorkerConfig:
    worker_id: str
    heartbeat_interval_s: float = 5.0
    checkpoint_pause_s: float = 6.0
    register_retry_s: float = 10.0


@dataclass
class _ActiveJob:
    job_id: str
    program: JobProgram
    state: ExecutionState
    boundaries: list[int]
    next_boundary: int  # index into boundaries == checkpoints taken
    blob_addr: str
    span_token: Any = None
    span_timer: Any = None
    span_start_step: int = 0
    span_target_step: int = 0
    span_start_time: float = 0.0
    cancel_requested: bool = False
    checkpointing: bool = False


class WorkerNode(Node):
    def __init__(self, config: WorkerConfig):
        if not config.worker_id:
            raise ValueError(
                "worker_id is required; first-contact minting happens in the "
                "connect flow, which grants an id to save and reuse"
            )
        super().__init__(config.worker_id)
        self.config = config
        self.serving_orch: str | None = None
        self.blob_addr = ""
        self.registered = False
        self.current: _ActiveJob | None = None
        self.pending_assignment: Envelope | None = None
        self.jobs_completed = 0
        self.checkpoints_taken = 0
        self._reply_key = ""
        self._reply_tag = ""
        self._retry_timer: Any = None

    # -- lifecycle ----------------------------------------------------------

    def start(self, runtime: Runtime) -> None:
        self.runtime = runtime
        declare_exchange_layout(runtime.declare_exchange)
        declare_register_layout(runtime.declare_queue, runtime.bind)
        self._reply_key = runtime.new_guid()
        reply_queue = runtime.temporary_queue()
        runtime.bind(reply_queue, WORKER_EXCHANGE, self._reply_key)
        self._reply_tag = runtime.consume(reply_queue, self._on_reply)
        self._send_register()

    def _send_register(self) -> None:
        self.runtime.publish(
            ORCH_EXCHANGE,
            WORKER_REGISTER_KEY,
            make_envelope(
                msg_type="workerRegister",
                sender=self.name,
                reply_to=self._reply_key,
                body={"worker_id": self.name},
                msg_id=self.runtime.new_guid(),
            ),
        )
        self._retry_timer = self.runtime.call_later(
            self.config.register_retry_s, self._on_register_timeout
        )

    def _on_register_timeout(self) -> None:
        if not self.registered:
            self._send_register()

    def _on_reply(self, delivery: Delivery) -> None:
        env = delivery.envelope
        self.runtime.ack(delivery)
        if env.msg_type != "sessionGrant" or self.registered:
            return
        self.registered = True
        if self._retry_timer is not None:
            self.runtime.cancel(self._retry_timer)
            self._retry_timer = None
        self.serving_orch = env.body["orchestrator"]
        self.blob_addr = env.body.get("blob_addr", "")
        self.runtime.cancel_consumer(self._reply_tag)
        queue = self.runtime.declare_queue(worker_queue(self.name))
        self.runtime.bind(queue, WORKER_EXCHANGE, self.name)
        self.runtime.consume(queue, self._on_delivery)
        self._to_orch(
            make_envelope(
                msg_type="workerConnect",
                sender=self.name,
                body={"worker_id": self.name},
                msg_id=self.runtime.new_guid(),
            ),
            key=worker_connect_key(self.serving_orch),
        )
        self._heartbeat()

    def _to_orch(self, env: Envelope, key: str | None = None) -> None:
        if key is None:
            key = to_orchestrator_key(self.serving_orch, env.msg_id)
        self.runtime.publish(ORCH_EXCHANGE, key, env)

    # -- heartbeats -----------------------------------------------------------

    def _heartbeat(self) -> None:
        self._to_orch(
            make_envelope(
                msg_type="heartbeat",
                sender=self.name,
                body={
                    "node_kind": "worker",
                    "worker_id": self.name,
                    "job_id": self.current.job_id if self.current else None,
                    "step_counter": self._current_step(),
                },
                msg_id=self.runtime.new_guid(),
            )
        )
        self.runtime.call_later(self.config.heartbeat_interval_s, self._heartbeat)

    def _current_step(self) -> int:
        job = self.current
        if job is None:
            return 0
        if job.span_timer is None:
            return job.state.step_counter
        elapsed = self.runtime.now() - job.span_start_time
        done = int(
            math.floor(elapsed / job.program.step_cost_s + _STEP_EPS)
        )
        return min(job.span_start_step + done, job.span_target_step)

    # -- job intake -----------------------------------------------------------

    def _on_delivery(self, delivery: Delivery) -> None:
        env = delivery.envelope
        if env.msg_type == "jobAssignment":
            self.runtime.ack(delivery)
            self._on_assignment(env)
        elif env.msg_type == "cancelJob":
            self.runtime.ack(delivery)
            self._on_cancel(env)
        else:
            self.runtime.ack(delivery)

    def _on_assignment(self, env: Envelope) -> None:
        job_id = env.body.get("job_id", "")
        if self.current is not None:
            if self.current.job_id == job_id:
                return  # duplicate delivery of the job we are running
            if self.current.cancel_requested:
                self.pending_assignment = env  # start once truncation lands
            # otherwise: stale assignment; the orchestrator's failure
            # sweep owns the conflict, heartbeats carry our real state
            return
        self._start_assignment(env)

    def _start_assignment(self, env: Envelope) -> None:
        body = env.body
        job_id = body["job_id"]
        blob_addr = body.get("blob_addr", self.blob_addr)
        try:
            raw = self.runtime.blob_get(blob_addr, body["program_ref"])
            program = JobProgram.from_json(json.loads(raw.decode("utf-8")))
        except (KeyError, ValueError, ProgramError):
            # Unable to load the job; stay idle. Heartbeats keep reporting
            # no job, and the orchestrator's sweep requeues the orphan.
            return
        policy = body.get("checkpoint_policy") or {}
        if "interval_s" in policy or "segments" in policy:
            boundaries = checkpoint_boundaries(
                program,
                interval_s=policy.get("interval_s"),
                segments=policy.get("segments"),
            )
        else:
            boundaries = []
        resume = body.get("resume_manifest")
        if resume:
            manifest = CheckpointManifest.from_json(resume)
            state = deserialize_state(
                self.runtime.blob_get(blob_addr, manifest.state_ref)
            )
            next_boundary = manifest.seq
        else:
            state = ExecutionState(
                job_id=job_id,
                program=program,
                step_counter=0,
                payload=initial_state(program),
            )
            next_boundary = 0
        self.current = _ActiveJob(
            job_id=job_id,
            program=program,
            state=state,
            boundaries=boundaries,
            next_boundary=next_boundary,
            blob_addr=blob_addr,
        )
        self._begin_span()

    # -- execution spans ------------------------------------------------------

    def _begin_span(self) -> None:
        job = self.current
        assert job is not None
        start = job.state.step_counter
        if job.next_boundary < len(job.boundaries):
            target = job.boundaries[job.next_boundary]
        else:
            target = job.program.total_steps
        target = max(target, start)
        duration = (target - start) * job.program.step_cost_s
        job.span_start_step = start
        job.span_target_step = target
        job.span_start_time = self.runtime.now()
        job.span_token = self.runtime.on_exec_span(job.job_id, duration)
        job.span_timer = self.runtime.call_later(duration, self._on_span_done)

    def _advance_to(self, job: _ActiveJob, target: int) -> None:
        payload = apply_steps(
            job.program, job.state.payload, job.state.step_counter, target
        )
        job.state = replace(job.state, step_counter=target, payload=payload)

    def _on_span_done(self) -> None:
        job = self.current
        if job is None:
            return
        target = job.span_target_step
        duration = (target - job.span_start_step) * job.program.step_cost_s
        self.runtime.end_exec_span(job.span_token, duration)
        job.span_token = None
        job.span_timer = None
        self._advance_to(job, target)
        if job.cancel_requested:
            self._finish_cancel()
            return
        if target >= job.program.total_steps:
            self._complete()
        else:
            self._checkpoint()

    # -- checkpointing ----------------------------------------------------------

    def _checkpoint(self) -> None:
        job = self.current
        assert job is not None
        seq = job.next_boundary + 1
        ref = checkpoint_ref(job.job_id, seq)
        self.runtime.blob_put(job.blob_addr, ref, serialize_state(job.state))
        manifest = CheckpointManifest(
            job_id=job.job_id,
            seq=seq,
            step_counter=job.state.step_counter,
            accumulated_exec_s=job.state.accumulated_exec_s,
            state_ref=ref,
            worker_id=self.name,
        )
        self._to_orch(
            make_envelope(
                msg_type="checkpointManifest",
                sender=self.name,
                body={"manifest": manifest.to_json()},
                msg_id=self.runtime.new_guid(),
            )
        )
        job.next_boundary = seq
        job.checkpointing = True
        self.checkpoints_taken += 1
        pause = self.config.checkpoint_pause_s
        if pause > 0:
            self.runtime.note_busy(pause)
        self.runtime.call_later(pause, self._after_checkpoint)

    def _after_checkpoint(self) -> None:
        job = self.current
        if job is None:
            return
        job.checkpointing = False
        if job.cancel_requested:
            self._finish_cancel()
            return
        self._begin_span()

    # -- completion and cancellation ---------------------------------------------

    def _complete(self) -> None:
        job = self.current
        assert job is not None
        result = finalize(job.program, job.state.payload)
        ref = result_ref(job.job_id)
        self.runtime.blob_put(
            job.blob_addr, ref, canonical_json(result).encode("utf-8")
        )
        self._to_orch(
            make_envelope(
                msg_type="jobResult",
                sender=self.name,
                body={
                    "job_id": job.job_id,
                    "worker_id": self.name,
                    "result_ref": ref,
                    "step_counter": job.state.step_counter,
                },
                msg_id=self.runtime.new_guid(),
            )
        )
        self.jobs_completed += 1
        self.current = None
        self._start_pending()

    def _on_cancel(self, env: Envelope) -> None:
        job = self.current
        if job is None or job.job_id != env.body.get("job_id"):
            return
        if job.cancel_requested:
            return
        job.cancel_requested = True
        if job.checkpointing:
            return  # state already safe; drop after the pause completes
        if job.span_timer is None:
            return
        # Truncate at the next whole step instead of the span's end.
        self.runtime.cancel(job.span_timer)
        elapsed = self.runtime.now() - job.span_start_time
        done = math.ceil(elapsed / job.program.step_cost_s - _STEP_EPS)
        done = max(0, min(done, job.span_target_step - job.span_start_step))
        truncated = job.span_start_step + done
        finish_at = (
            job.span_start_time + done * job.program.step_cost_s
        )
        job.span_target_step = truncated
        job.span_timer = self.runtime.call_later(
            max(0.0, finish_at - self.runtime.now()), self._on_truncated
        )

    def _on_truncated(self) -> None:
        job = self.current
        if job is None:
            return
        actual = (
            job.span_target_step - job.span_start_step
        ) * job.program.step_cost_s
        self.runtime.end_exec_span(job.span_token, actual)
        job.span_token = None
        job.span_timer = None
        self._advance_to(job, job.span_target_step)
        self._finish_cancel()

    def _finish_cancel(self) -> None:
        self.current = None
        self._heartbeat_once()
        self._start_pending()

    def _heartbeat_once(self) -> None:
        # Push state promptly (no timer reset); the periodic loop continues.
        self._to_orch(
            make_envelope(
                msg_type="heartbeat",
                sender=self.name,
                body={
                    "node_kind": "worker",
                    "worker_id": self.name,
                    "job_id": None,
                    "step_counter": 0,
                },
                msg_id=self.runtime.new_guid(),
            )
        )

    def _start_pending(self) -> None:
        if self.pending_assignment is not None and self.current is None:
            env = self.pending_assignment
            self.pending_assignment = None
            self._start_assignment(env)
