"""Built-in job programs: deterministic, step-structured, resumable.

A program advances in discrete steps; each step has a nominal cost in
seconds (honored by the hosting clock, not by burning CPU). Program state is
a small JSON object, so checkpoints are cheap to serialize, and advancing is
a pure function of (program, state, step range): running 0..n in one shot or
split at any step boundaries gives bit-identical state and results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

PROGRAM_KINDS = ("busy_counter", "prime_sieve", "mc_pi")

# 64-bit LCG multiplier/increment (Knuth), used by busy_counter.
_LCG_A = 6364136223846793005
_LCG_B = 1442695040888963407
_MASK = (1 << 64) - 1


class ProgramError(ValueError):
    """Bad program kind, params, or spec string."""


@dataclass(frozen=True)
class JobProgram:
    """What to run: kind, parameters, step count, nominal seconds per step."""

    kind: str
    total_steps: int
    step_cost_s: float
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in PROGRAM_KINDS:
            raise ProgramError(f"unknown program kind {self.kind!r}; know {PROGRAM_KINDS}")
        if not isinstance(self.total_steps, int) or self.total_steps < 1:
            raise ProgramError(f"total_steps must be an int >= 1, got {self.total_steps!r}")
        if not (isinstance(self.step_cost_s, (int, float)) and self.step_cost_s > 0):
            raise ProgramError(f"step_cost_s must be > 0, got {self.step_cost_s!r}")

    @property
    def total_exec_s(self) -> float:
        return self.total_steps * self.step_cost_s

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "total_steps": self.total_steps,
            "step_cost_s": self.step_cost_s,
            "params": self.params,
        }

    @classmethod
    def from_json(cls, payload: dict[str, Any]) -> "JobProgram":
        try:
            return cls(
                kind=payload["kind"],
                total_steps=payload["total_steps"],
                step_cost_s=payload["step_cost_s"],
                params=dict(payload.get("params", {})),
            )
        except KeyError as exc:
            raise ProgramError(f"program spec missing field {exc.args[0]!r}") from exc


def parse_program_spec(spec: str) -> JobProgram:
    """Parse 'kind:key=value,...' (e.g. 'busy_counter:steps=300,step_cost=1').

    Common keys: steps (int), step_cost (seconds). Remaining keys are
    program parameters; numeric values are auto-converted.
    """
    kind, _, rest = spec.partition(":")
    kind = kind.strip()
    raw: dict[str, Any] = {}
    if rest.strip():
        for item in rest.split(","):
            key, sep, value = item.partition("=")
            if not sep or not key.strip():
                raise ProgramError(f"bad program option {item!r} in {spec!r}")
            raw[key.strip()] = _auto(value.strip())
    steps = raw.pop("steps", 300)
    step_cost = raw.pop("step_cost", 1.0)
    if not isinstance(steps, int):
        raise ProgramError(f"steps must be an integer, got {steps!r}")
    return JobProgram(kind=kind, total_steps=steps, step_cost_s=float(step_cost), params=raw)


def _auto(value: str) -> Any:
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def initial_state(program: JobProgram) -> dict[str, Any]:
    """Program state before step 0."""
    if program.kind == "busy_counter":
        return {"value": int(program.params.get("start", 0)) & _MASK}
    if program.kind == "prime_sieve":
        return {"count": 0}
    return {"hits": 0}  # mc_pi


def apply_steps(
    program: JobProgram, state: dict[str, Any], from_step: int, to_step: int
) -> dict[str, Any]:
    """Run the steps with indices from_step..to_step-1. Pure; inputs untouched."""
    if not (0 <= from_step <= to_step <= program.total_steps):
        raise ProgramError(
            f"step range [{from_step}, {to_step}) out of bounds for {program.total_steps} steps"
        )
    if program.kind == "busy_counter":
        value = state["value"]
        for k in range(from_step, to_step):
            value = ((value ^ k) * _LCG_A + _LCG_B) & _MASK
        return {"value": value}
    if program.kind == "prime_sieve":
        chunk = int(program.params.get("chunk", 500))
        count = state["count"]
        for k in range(from_step, to_step):
            count += _primes_in(k * chunk, (k + 1) * chunk)
        return {"count": count}
    # mc_pi: each step draws its own substream keyed by (seed, step), so any
    # checkpoint split replays identical points.
    points = int(program.params.get("points", 256))
    seed = int(program.params.get("seed", 0))
    hits = state["hits"]
    for k in range(from_step, to_step):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, k))))
        xy = rng.random((points, 2))
        hits += int((xy[:, 0] ** 2 + xy[:, 1] ** 2 <= 1.0).sum())
    return {"hits": hits}


def finalize(program: JobProgram, state: dict[str, Any]) -> dict[str, Any]:
    """Result payload once all steps ran."""
    if program.kind == "busy_counter":
        return {"kind": program.kind, "steps": program.total_steps, "value": state["value"]}
    if program.kind == "prime_sieve":
        chunk = int(program.params.get("chunk", 500))
        return {
            "kind": program.kind,
            "limit": program.total_steps * chunk,
            "primes": state["count"],
        }
    points = int(program.params.get("points", 256))
    total = program.total_steps * points
    return {
        "kind": program.kind,
        "samples": total,
        "hits": state["hits"],
        "pi_estimate": 4.0 * state["hits"] / total,
    }


def _primes_in(lo: int, hi: int) -> int:
    count = 0
    for n in range(max(lo, 2), hi):
        if n < 4:
            count += 1
            continue
        if n % 2 == 0:
            continue
        limit = int(math.isqrt(n))
        for d in range(3, limit + 1, 2):
            if n % d == 0:
                break
        else:
            count += 1
    return count
