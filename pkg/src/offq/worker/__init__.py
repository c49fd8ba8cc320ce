"""Worker: built-in step programs, resumable execution state, worker node."""

from offq.worker.programs import (
    JobProgram,
    PROGRAM_KINDS,
    apply_steps,
    finalize,
    initial_state,
    parse_program_spec,
)
from offq.worker.state import (
    ExecutionState,
    checkpoint_boundaries,
    deserialize_state,
    serialize_state,
)
from offq.worker.node import WorkerConfig, WorkerNode

__all__ = [
    "JobProgram",
    "PROGRAM_KINDS",
    "apply_steps",
    "finalize",
    "initial_state",
    "parse_program_spec",
    "ExecutionState",
    "checkpoint_boundaries",
    "deserialize_state",
    "serialize_state",
    "WorkerConfig",
    "WorkerNode",
]
