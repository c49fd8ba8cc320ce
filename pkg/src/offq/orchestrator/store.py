"""Replicated orchestrator state and the mutations that evolve it.

Every orchestrator replica holds a :class:`ReplicatedStore`.  Replicas never
exchange state directly; they exchange :class:`ChangeRecord` mutations over a
fanout exchange, and each replica applies them in the order its queue delivers
them.  For replicas to stay identical, ``apply`` has to be a pure function of
(current state, mutation): no clock reads, no randomness, no dependence on
who is applying.  Anything nondeterministic (timestamps, fresh ids) is minted
by the originating node and carried inside the mutation payload.

Invalid transitions are not errors.  A mutation that does not validate
against the current state (unknown job, wrong status, stale checkpoint
sequence) is skipped, and ``apply`` reports ``applied=False``.  Skipping is
itself deterministic, so replicas that disagree with a mutation all disagree
the same way.  Re-applying a mutation guid that was already applied is the
caller's problem; the store only records the per-guid outcome so callers can
dedup.

Volatile scheduling state (worker heartbeat timestamps, the idle-worker
queue) deliberately lives outside this store: it is soft state that each
replica can rebuild from the replicated facts, and including it would make
digests depend on delivery timing.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Any

from offq.protocol import (
    CheckpointManifest,
    ProtocolError,
    canonical_json,
    is_guid,
    is_node_name,
)

JOB_STATUSES = ("uploading", "queued", "running", "completed", "canceled", "failed")

# Statuses a job may move to from each status.  requeue is the only edge
# that moves "backwards" (running -> queued, after a worker death).
_TRANSITIONS = {
    "uploading": {"queued", "canceled", "failed"},
    "queued": {"running", "canceled", "failed"},
    "running": {"queued", "completed", "canceled", "failed"},
    "completed": set(),
    "canceled": set(),
    "failed": set(),
}

MANIFESTS_KEPT = 2

MUTATION_KINDS = (
    "add_client",
    "add_worker",
    "add_job",
    "job_uploaded",
    "assign_job",
    "requeue_job",
    "add_manifest",
    "complete_job",
    "set_notified",
    "cancel_job",
    "fail_job",
    "promote",
)


class StoreError(ValueError):
    """A malformed mutation or job payload (distinct from a skipped one)."""


@dataclass(frozen=True)
class Job:
    """One offloaded task as the orchestrators track it."""

    job_id: str
    client_id: str
    name: str
    program_ref: str
    created_at: float
    checkpoint_policy: dict[str, Any] | None = None
    status: str = "uploading"
    assigned_worker: str | None = None
    result_ref: str | None = None
    notified: bool = False
    failure_reason: str | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "job_id": self.job_id,
            "client_id": self.client_id,
            "name": self.name,
            "program_ref": self.program_ref,
            "created_at": self.created_at,
            "checkpoint_policy": self.checkpoint_policy,
            "status": self.status,
            "assigned_worker": self.assigned_worker,
            "result_ref": self.result_ref,
            "notified": self.notified,
            "failure_reason": self.failure_reason,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "Job":
        try:
            job = cls(**data)
        except TypeError as exc:
            raise StoreError(f"bad job payload: {exc}") from None
        if job.status not in JOB_STATUSES:
            raise StoreError(f"bad job payload: unknown status {job.status!r}")
        return job


@dataclass(frozen=True)
class ChangeRecord:
    """A mutation as it travels between replicas.

    ``guid`` identifies the change for locking and dedup; ``origin`` is the
    node that proposed it; ``mutation`` is a JSON dict whose ``kind`` selects
    the transition.
    """

    guid: str
    origin: str
    mutation: dict[str, Any]

    def __post_init__(self) -> None:
        if not is_guid(self.guid):
            raise StoreError(f"bad change guid: {self.guid!r}")
        if not is_node_name(self.origin):
            raise StoreError(f"bad change origin: {self.origin!r}")
        kind = self.mutation.get("kind")
        if kind not in MUTATION_KINDS:
            raise StoreError(f"unknown mutation kind: {kind!r}")

    def to_json(self) -> dict[str, Any]:
        return {"guid": self.guid, "origin": self.origin, "mutation": self.mutation}

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "ChangeRecord":
        try:
            return cls(
                guid=data["guid"],
                origin=data["origin"],
                mutation=dict(data["mutation"]),
            )
        except (KeyError, TypeError) as exc:
            raise StoreError(f"bad change record: {exc}") from None


@dataclass(frozen=True)
class ApplyResult:
    """Outcome of applying one mutation.

    ``applied`` is False when the mutation was skipped as invalid for the
    current state.  ``dropped_refs`` lists blob references that fell out of
    the manifest history and may be garbage collected by whoever owns the
    blobs.  ``duplicate`` marks a guid that had already been applied; the
    store state was not touched.
    """

    applied: bool
    kind: str
    duplicate: bool = False
    dropped_refs: tuple[str, ...] = ()
    detail: str = ""


class ReplicatedStore:
    """The deterministic state machine shared by all orchestrator replicas.

    ``roster`` fixes the orchestrator group.  The first roster entry starts
    as the principal orchestrator; ``promote`` mutations move that role.
    """

    def __init__(self, roster: tuple[str, ...]):
        if not roster:
            raise StoreError("empty orchestrator roster")
        self.roster = tuple(roster)
        self.sessions: dict[str, str] = {}  # username -> client id
        self.clients: dict[str, str] = {}  # client id -> username
        self.workers: dict[str, int] = {}  # worker id -> registration index
        self.next_worker_index = 0
        self.jobs: dict[str, Job] = {}
        self.queued_order: list[str] = []
        self.manifests: dict[str, list[dict[str, Any]]] = {}
        self.roles: dict[str, str] = {
            name: ("primary" if i == 0 else "backup") for i, name in enumerate(roster)
        }
        self.applied_guids: list[str] = []
        self._outcomes: dict[str, bool] = {}

    # -- queries ----------------------------------------------------------

    def primary(self) -> str:
        for name, role in self.roles.items():
            if role == "primary":
                return name
        raise StoreError("roster has no primary")  # unreachable by construction

    def has_applied(self, guid: str) -> bool:
        return guid in self._outcomes

    def latest_manifest(self, job_id: str) -> dict[str, Any] | None:
        history = self.manifests.get(job_id)
        return history[-1] if history else None

    def running_worker_jobs(self, worker_id: str) -> list[str]:
        return [
            j.job_id
            for j in self.jobs.values()
            if j.status == "running" and j.assigned_worker == worker_id
        ]

    def busy_workers(self) -> set[str]:
        return {
            j.assigned_worker
            for j in self.jobs.values()
            if j.status == "running" and j.assigned_worker is not None
        }

    def digest(self) -> str:
        """Hash of the replicated state, for cross-replica comparison."""
        snapshot = {
            "sessions": self.sessions,
            "clients": self.clients,
            "workers": self.workers,
            "next_worker_index": self.next_worker_index,
            "jobs": {job_id: job.to_json() for job_id, job in self.jobs.items()},
            "queued_order": self.queued_order,
            "manifests": self.manifests,
            "roles": self.roles,
        }
        return hashlib.sha256(canonical_json(snapshot).encode("utf-8")).hexdigest()

    # -- mutation ---------------------------------------------------------

    def apply(self, record: ChangeRecord) -> ApplyResult:
        """Apply one change; returns what happened.  Pure given (state, record)."""
        kind = record.mutation["kind"]
        if record.guid in self._outcomes:
            return ApplyResult(
                applied=self._outcomes[record.guid], kind=kind, duplicate=True
            )
        try:
            handler = getattr(self, "_apply_" + kind)
            result = handler(record.mutation)
        except KeyError as exc:
            raise StoreError(f"mutation {kind} missing field {exc}") from None
        self.applied_guids.append(record.guid)
        self._outcomes[record.guid] = result.applied
        return result

    def _job_to(self, job: Job, status: str, **changes: Any) -> None:
        self.jobs[job.job_id] = replace(job, status=status, **changes)

    def _apply_add_client(self, m: dict[str, Any]) -> ApplyResult:
        username, client_id = m["username"], m["client_id"]
        if username in self.sessions:
            return ApplyResult(False, "add_client", detail="username taken")
        self.sessions[username] = client_id
        self.clients[client_id] = username
        return ApplyResult(True, "add_client")

    def _apply_add_worker(self, m: dict[str, Any]) -> ApplyResult:
        worker_id = m["worker_id"]
        if worker_id in self.workers:
            return ApplyResult(False, "add_worker", detail="already registered")
        self.workers[worker_id] = self.next_worker_index
        self.next_worker_index += 1
        return ApplyResult(True, "add_worker")

    def _apply_add_job(self, m: dict[str, Any]) -> ApplyResult:
        job_id = m["job_id"]
        if job_id in self.jobs:
            return ApplyResult(False, "add_job", detail="job exists")
        if m["client_id"] not in self.clients:
            return ApplyResult(False, "add_job", detail="unknown client")
        self.jobs[job_id] = Job(
            job_id=job_id,
            client_id=m["client_id"],
            name=m["name"],
            program_ref=m["program_ref"],
            created_at=m["created_at"],
            checkpoint_policy=m.get("checkpoint_policy"),
        )
        return ApplyResult(True, "add_job")

    def _apply_job_uploaded(self, m: dict[str, Any]) -> ApplyResult:
        job = self.jobs.get(m["job_id"])
        if job is None or job.status != "uploading":
            return ApplyResult(False, "job_uploaded", detail="not uploading")
        self._job_to(job, "queued")
        self.queued_order.append(job.job_id)
        return ApplyResult(True, "job_uploaded")

    def _apply_assign_job(self, m: dict[str, Any]) -> ApplyResult:
        job = self.jobs.get(m["job_id"])
        worker_id = m["worker_id"]
        if job is None or job.status != "queued":
            return ApplyResult(False, "assign_job", detail="not queued")
        if worker_id not in self.workers:
            return ApplyResult(False, "assign_job", detail="unknown worker")
        if worker_id in self.busy_workers():
            return ApplyResult(False, "assign_job", detail="worker busy")
        self.queued_order.remove(job.job_id)
        self._job_to(job, "running", assigned_worker=worker_id)
        return ApplyResult(True, "assign_job")

    def _apply_requeue_job(self, m: dict[str, Any]) -> ApplyResult:
        job = self.jobs.get(m["job_id"])
        if job is None or job.status != "running":
            return ApplyResult(False, "requeue_job", detail="not running")
        self._job_to(job, "queued", assigned_worker=None)
        self.queued_order.append(job.job_id)
        return ApplyResult(True, "requeue_job")

    def _apply_add_manifest(self, m: dict[str, Any]) -> ApplyResult:
        try:
            manifest = CheckpointManifest.from_json(m["manifest"])
        except ProtocolError as exc:
            return ApplyResult(False, "add_manifest", detail=str(exc))
        job = self.jobs.get(manifest.job_id)
        if job is None or job.status != "running":
            return ApplyResult(False, "add_manifest", detail="job not running")
        if job.assigned_worker != manifest.worker_id:
            return ApplyResult(False, "add_manifest", detail="stale worker")
        history = self.manifests.setdefault(manifest.job_id, [])
        if history and manifest.seq <= history[-1]["seq"]:
            return ApplyResult(False, "add_manifest", detail="stale seq")
        history.append(manifest.to_json())
        dropped = tuple(h["state_ref"] for h in history[:-MANIFESTS_KEPT])
        del history[:-MANIFESTS_KEPT]
        return ApplyResult(True, "add_manifest", dropped_refs=dropped)

    def _apply_complete_job(self, m: dict[str, Any]) -> ApplyResult:
        job = self.jobs.get(m["job_id"])
        if job is None or job.status != "running":
            return ApplyResult(False, "complete_job", detail="not running")
        self._job_to(job, "completed", assigned_worker=None, result_ref=m["result_ref"])
        return ApplyResult(True, "complete_job")

    def _apply_set_notified(self, m: dict[str, Any]) -> ApplyResult:
        job = self.jobs.get(m["job_id"])
        if job is None or job.status != "completed" or job.notified:
            return ApplyResult(False, "set_notified", detail="not pending notify")
        self.jobs[job.job_id] = replace(job, notified=True)
        return ApplyResult(True, "set_notified")

    def _apply_cancel_job(self, m: dict[str, Any]) -> ApplyResult:
        job = self.jobs.get(m["job_id"])
        if job is None or "canceled" not in _TRANSITIONS[job.status]:
            return ApplyResult(False, "cancel_job", detail="not cancelable")
        if job.job_id in self.queued_order:
            self.queued_order.remove(job.job_id)
        self._job_to(job, "canceled", assigned_worker=None)
        return ApplyResult(True, "cancel_job")

    def _apply_fail_job(self, m: dict[str, Any]) -> ApplyResult:
        job = self.jobs.get(m["job_id"])
        if job is None or "failed" not in _TRANSITIONS[job.status]:
            return ApplyResult(False, "fail_job", detail="not failable")
        if job.job_id in self.queued_order:
            self.queued_order.remove(job.job_id)
        self._job_to(job, "failed", assigned_worker=None, failure_reason=m["reason"])
        return ApplyResult(True, "fail_job")

    def _apply_promote(self, m: dict[str, Any]) -> ApplyResult:
        name = m["orchestrator"]
        if name not in self.roles:
            return ApplyResult(False, "promote", detail="not in roster")
        if self.roles[name] == "primary":
            return ApplyResult(False, "promote", detail="already primary")
        self.roles = {n: ("primary" if n == name else "backup") for n in self.roles}
        return ApplyResult(True, "promote")
