"""Resumable execution state and checkpoint boundary math."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

from offq.protocol import ProtocolError, canonical_json
from offq.worker.programs import JobProgram

# Guards float-noise when an exec-time multiple lands exactly on a boundary.
_BOUNDARY_EPS = 1e-9


@dataclass(frozen=True)
class ExecutionState:
    """Snapshot of a job between two steps: enough to resume bit-identically."""

    job_id: str
    program: JobProgram
    step_counter: int
    payload: dict[str, Any]

    @property
    def accumulated_exec_s(self) -> float:
        return self.step_counter * self.program.step_cost_s


def serialize_state(state: ExecutionState) -> bytes:
    """Canonical JSON bytes; deserialize_state() round-trips exactly."""
    return canonical_json(
        {
            "job_id": state.job_id,
            "program": state.program.to_json(),
            "step_counter": state.step_counter,
            "payload": state.payload,
        }
    ).encode("utf-8")


def deserialize_state(data: bytes) -> ExecutionState:
    import json

    try:
        raw = json.loads(data.decode("utf-8"))
        return ExecutionState(
            job_id=raw["job_id"],
            program=JobProgram.from_json(raw["program"]),
            step_counter=raw["step_counter"],
            payload=raw["payload"],
        )
    except (KeyError, ValueError) as exc:
        raise ProtocolError(f"bad execution state blob: {exc}") from exc


def checkpoint_boundaries(
    program: JobProgram,
    interval_s: float | None = None,
    segments: int | None = None,
) -> list[int]:
    """Step indices after which to checkpoint. Possibly empty.

    Interval mode: the k-th checkpoint fires at the first step boundary at or
    past k * interval_s of accumulated execution time (the interval clock
    excludes checkpointing time, so boundaries are in execution seconds).
    Plan mode (segments=N): after round(k * total_steps / N) steps,
    k = 1..N-1, the even split a SegmentPlan asks for.

    Boundaries at or past the final step are dropped: a checkpoint that would
    coincide with completion is useless work.
    """
    if (interval_s is None) == (segments is None):
        raise ValueError("give exactly one of interval_s or segments")
    total = program.total_steps
    if interval_s is not None:
        if interval_s < 0:
            raise ValueError(f"interval_s must be >= 0, got {interval_s}")
        if interval_s == 0:  # checkpointing disabled
            return []
        out = []
        k = 1
        while True:
            due = k * interval_s
            step = math.ceil(due / program.step_cost_s - _BOUNDARY_EPS)
            if step >= total:
                return out
            out.append(max(step, 1))
            k += 1
    if segments < 1:
        raise ValueError(f"segments must be >= 1, got {segments}")
    out = []
    for k in range(1, segments):
        step = round(k * total / segments)
        if 1 <= step < total:
            out.append(step)
    return out
