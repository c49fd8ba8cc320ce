"""Build and execute one simulated deployment run.

Two modes share every node implementation and differ only in overheads:

``model_faithful``
    Zero delivery latency, no heartbeat traffic, instant fault detection
    (the kernel tells the primary directly when a fault kills a worker) and
    instant worker restart.  Completion times then contain exactly the
    quantities the closed-form analysis prices: step execution, checkpoint
    pauses, and re-executed work.

``system``
    Full protocol overheads: finite delivery latency, heartbeat-based
    failure detection, sweep-driven requeue, and delayed worker restart.
    For a fixed seed the fault positions (in job execution time) match the
    faithful run exactly, so a system run can only ever take longer.

A run hosts a roster of orchestrator replicas, a worker pool, and a single
client submitting one job; scripted kills and Poisson faults perturb it.
The returned record carries client-perceived completion, fault and
checkpoint counts, re-executed work, and the fleet energy estimate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from offq.orchestrator.node import OrchestratorConfig, OrchestratorNode
from offq.simlab.client import ClientProfile, JobSpec, SimClient
from offq.simlab.energy import EnergyModel
from offq.simlab.kernel import SimKernel
from offq.worker.node import WorkerConfig, WorkerNode
from offq.worker.programs import JobProgram
from offq.worker.state import checkpoint_boundaries

MODES = ("model_faithful", "system")

# Far enough in the future that no periodic timer ever fires in a run.
_NEVER_S = 1e15


@dataclass(frozen=True)
class SimConfig:
    program: JobProgram
    checkpoint_policy: dict[str, Any] | None = None
    mode: str = "model_faithful"
    seed: int = 0
    fault_rate_per_s: float = 0.0
    orchestrators: int = 1
    workers: int = 1
    cutoff_s: float | None = None
    scripted_kills: tuple[tuple[float, str], ...] = ()
    restart_killed_workers: bool = True
    worker_restart_delay_s: float = 10.0
    delivery_latency_s: float = 0.005
    delivery_jitter_s: float = 0.0
    heartbeat_interval_s: float = 5.0
    detection_multiplier: float = 3.0
    sweep_interval_s: float = 2.5
    checkpoint_pause_s: float = 6.0
    repl_ack_timeout_s: float = 2.0
    energy: EnergyModel = EnergyModel()

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.orchestrators < 1 or self.workers < 1:
            raise ValueError("need at least one orchestrator and one worker")

    @property
    def detection_timeout_s(self) -> float:
        return self.heartbeat_interval_s * self.detection_multiplier


@dataclass(frozen=True)
class RunRecord:
    seed: int
    mode: str
    job_id: str
    completed: bool
    completion_s: float | None
    result: dict[str, Any] | None
    result_ready_count: int
    faults: int
    checkpoints_taken: int
    planned_checkpoints: int
    segments: int
    reexecuted_s: float
    virtual_end_s: float
    busy_by_node: dict[str, float]
    energy_total_j: float
    events: int


def planned_checkpoint_count(
    program: JobProgram, policy: dict[str, Any] | None
) -> int:
    if not policy:
        return 0
    return len(
        checkpoint_boundaries(
            program,
            interval_s=policy.get("interval_s"),
            segments=policy.get("segments"),
        )
    )


def run_simulation(config: SimConfig) -> RunRecord:
    faithful = config.mode == "model_faithful"
    kernel = SimKernel(
        config.seed,
        delivery_latency_s=0.0 if faithful else config.delivery_latency_s,
        delivery_jitter_s=0.0 if faithful else config.delivery_jitter_s,
        fault_rate_per_s=config.fault_rate_per_s,
    )
    heartbeat_s = _NEVER_S if faithful else config.heartbeat_interval_s
    sweep_s = _NEVER_S if faithful else config.sweep_interval_s
    restart_delay_s = 0.0 if faithful else config.worker_restart_delay_s

    roster = tuple(f"o{i + 1}" for i in range(config.orchestrators))
    nodes: dict[str, Any] = {}
    for name in roster:
        node = OrchestratorNode(
            OrchestratorConfig(
                name=name,
                roster=roster,
                blob_addr="sim",
                heartbeat_interval_s=heartbeat_s,
                detection_multiplier=config.detection_multiplier,
                sweep_interval_s=sweep_s,
                repl_ack_timeout_s=config.repl_ack_timeout_s,
            )
        )
        nodes[name] = node
        kernel.add_node(node)

    def worker_node(name: str) -> WorkerNode:
        node = WorkerNode(
            WorkerConfig(
                worker_id=name,
                heartbeat_interval_s=heartbeat_s,
                checkpoint_pause_s=config.checkpoint_pause_s,
            )
        )
        nodes[name] = node
        return node

    worker_names = tuple(f"w{i + 1}" for i in range(config.workers))
    for name in worker_names:
        kernel.add_node(worker_node(name))

    def restart_worker(name: str) -> None:
        if kernel.alive(name):
            return
        kernel.add_node(worker_node(name))

    def primary_orchestrator() -> OrchestratorNode | None:
        for name in roster:
            node = nodes[name]
            if kernel.alive(name) and node.store.roles.get(name) == "primary":
                return node
        return None

    def on_fault(worker_name: str, job_key: str) -> None:
        if config.restart_killed_workers:
            kernel.schedule(restart_delay_s, restart_worker, (worker_name,))
        if faithful:
            primary = primary_orchestrator()
            if primary is not None:
                primary._requeue(job_key)

    kernel.on_fault = on_fault

    def scripted_kill(name: str) -> None:
        was_worker = name in worker_names
        kernel.kill(name)
        if was_worker and config.restart_killed_workers:
            kernel.schedule(restart_delay_s, restart_worker, (name,))

    for kill_at, name in config.scripted_kills:
        kernel.at(kill_at, scripted_kill, name)

    client = SimClient(
        ClientProfile(
            username="c1",
            jobs=(
                JobSpec(
                    name="job",
                    program=config.program,
                    checkpoint_policy=config.checkpoint_policy,
                ),
            ),
        )
    )
    nodes[client.name] = client
    kernel.add_node(client)

    kernel.run(until=config.cutoff_s, stop_when=client.all_done)

    record = next(iter(client.records.values()), None)
    if record is None:
        raise RuntimeError("client never submitted its job")
    completed = record.completed_at is not None
    reexecuted = 0.0
    if completed:
        reexecuted = max(
            0.0,
            kernel.job_exec_seconds(record.job_id) - config.program.total_exec_s,
        )
    checkpoints_taken = 0
    for name in roster:
        manifest = nodes[name].store.latest_manifest(record.job_id)
        if manifest is not None:
            checkpoints_taken = max(checkpoints_taken, manifest["seq"])
    planned = planned_checkpoint_count(config.program, config.checkpoint_policy)
    busy = dict(kernel.busy_s)
    return RunRecord(
        seed=config.seed,
        mode=config.mode,
        job_id=record.job_id,
        completed=completed,
        completion_s=record.completion_s,
        result=record.result,
        result_ready_count=record.result_ready_count,
        faults=kernel.total_faults,
        checkpoints_taken=checkpoints_taken,
        planned_checkpoints=planned,
        segments=planned + 1,
        reexecuted_s=reexecuted,
        virtual_end_s=kernel.now,
        busy_by_node=busy,
        energy_total_j=config.energy.fleet_energy_j(kernel.now, busy),
        events=kernel.events_executed,
    )
