"""Orchestrator: replicated job store, lock-step replication, scheduling node."""

from offq.orchestrator.store import (
    ApplyResult,
    ChangeRecord,
    Job,
    JOB_STATUSES,
    ReplicatedStore,
    StoreError,
)
from offq.orchestrator.replication import ReplicationEngine
from offq.orchestrator.blob import MemoryBlobStore
from offq.orchestrator.node import OrchestratorConfig, OrchestratorNode

__all__ = [
    "ApplyResult",
    "ChangeRecord",
    "Job",
    "JOB_STATUSES",
    "ReplicatedStore",
    "StoreError",
    "ReplicationEngine",
    "MemoryBlobStore",
    "OrchestratorConfig",
    "OrchestratorNode",
]
