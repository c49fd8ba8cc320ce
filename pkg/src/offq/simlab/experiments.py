"""Experiment suites: batches of seeded runs written as CSV for plotting.

Three registered suites compare checkpointing strategies on a 300 s job:

``checkpoint_overhead``
    No faults; a bare run against a sixteen-segment run.  The completion
    gap is exactly the fifteen checkpoint pauses.

``optimal_frequency``
    Faults at a moderate rate; arms with no checkpoints, a checkpoint
    every 50 s, and sixteen segments.  The per-arm means land on the
    closed-form expectations and order the middle arm best.

``mu_sweep``
    No checkpoints across a range of fault rates, with a virtual-time
    cutoff.  High rates practically never finish.

Every suite writes one row per run with a fixed column set, a
space-separated .dat mirror for gnuplot, and a per-arm summary that
overlays the closed-form expectation next to the observed mean.  Output
depends only on (arguments, seed): rerunning a suite reproduces its files
byte for byte.  Per-run seeds are spread as seed + arm_index*10^6 + trial
so arms never share fault streams.

The default roster is two orchestrator replicas and two workers; the
reported energy covers exactly those nodes, not the measuring client.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Callable

from offq.ckptmath import expected_exec_time, expected_with_checkpoints
from offq.simlab.energy import EnergyModel
from offq.simlab.runner import RunRecord, SimConfig, run_simulation
from offq.worker.programs import JobProgram

CSV_COLUMNS = (
    "run_id",
    "mode",
    "mu",
    "T_s",
    "segments",
    "checkpoints",
    "C_s",
    "completion_s",
    "faults",
    "checkpoints_taken",
    "energy_total_j",
    "seed",
)

_ARM_SEED_STRIDE = 1_000_000


def default_program(total_s: float = 300.0) -> JobProgram:
    return JobProgram(
        kind="busy_counter", total_steps=int(round(total_s)), step_cost_s=1.0, params={}
    )


@dataclass(frozen=True)
class Arm:
    """One line of a figure: a (policy, fault rate) cell run `trials` times."""

    name: str
    mu: float
    checkpoint_policy: dict[str, Any] | None
    trials: int
    cutoff_s: float | None = None


@dataclass(frozen=True)
class ArmStats:
    name: str
    trials: int
    completed: int
    mean_completion_s: float | None
    expected_completion_s: float
    mean_energy_j: float
    segments: int
    checkpoints: int


@dataclass(frozen=True)
class ExperimentReport:
    name: str
    out_dir: str
    csv_path: str
    dat_path: str
    summary_path: str
    plot_path: str | None
    rows: tuple[dict[str, Any], ...]
    arms: tuple[ArmStats, ...]

    def arm(self, name: str) -> ArmStats:
        for stats in self.arms:
            if stats.name == name:
                return stats
        raise KeyError(name)


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: str, columns: tuple[str, ...], rows: list[dict[str, Any]]) -> None:
    lines = [",".join(columns)]
    lines.extend(",".join(_fmt(row[c]) for c in columns) for row in rows)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_dat(path: str, columns: tuple[str, ...], rows: list[dict[str, Any]]) -> None:
    lines = ["# " + " ".join(columns)]
    lines.extend(
        " ".join(_fmt(row[c]) if row[c] is not None else "nan" for c in columns)
        for row in rows
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _run_arms(
    arms: tuple[Arm, ...],
    program: JobProgram,
    base_seed: int,
    mode: str,
    orchestrators: int,
    workers: int,
    checkpoint_pause_s: float,
    energy: EnergyModel,
) -> tuple[list[dict[str, Any]], list[ArmStats]]:
    infra = tuple(f"o{i + 1}" for i in range(orchestrators)) + tuple(
        f"w{i + 1}" for i in range(workers)
    )
    total_s = program.total_exec_s
    rows: list[dict[str, Any]] = []
    stats: list[ArmStats] = []
    for arm_index, arm in enumerate(arms):
        completions: list[float] = []
        energies: list[float] = []
        segments = checkpoints = 0
        for trial in range(arm.trials):
            record = run_simulation(
                SimConfig(
                    program=program,
                    checkpoint_policy=arm.checkpoint_policy,
                    mode=mode,
                    seed=base_seed + arm_index * _ARM_SEED_STRIDE + trial,
                    fault_rate_per_s=arm.mu,
                    orchestrators=orchestrators,
                    workers=workers,
                    cutoff_s=arm.cutoff_s,
                    checkpoint_pause_s=checkpoint_pause_s,
                    energy=energy,
                )
            )
            segments, checkpoints = record.segments, record.planned_checkpoints
            infra_energy = energy.fleet_energy_j(
                record.virtual_end_s,
                {name: record.busy_by_node.get(name, 0.0) for name in infra},
            )
            energies.append(infra_energy)
            if record.completed:
                completions.append(record.completion_s)
            rows.append(
                {
                    "run_id": f"{arm.name}-{trial:05d}",
                    "mode": mode,
                    "mu": float(arm.mu),
                    "T_s": float(total_s),
                    "segments": record.segments,
                    "checkpoints": record.planned_checkpoints,
                    "C_s": float(checkpoint_pause_s),
                    "completion_s": record.completion_s,
                    "faults": record.faults,
                    "checkpoints_taken": record.checkpoints_taken,
                    "energy_total_j": infra_energy,
                    "seed": record.seed,
                }
            )
        expected = expected_with_checkpoints(
            arm.mu, total_s, segments, checkpoint_pause_s
        ) if checkpoints else expected_exec_time(arm.mu, total_s)
        stats.append(
            ArmStats(
                name=arm.name,
                trials=arm.trials,
                completed=len(completions),
                mean_completion_s=(
                    sum(completions) / len(completions) if completions else None
                ),
                expected_completion_s=expected,
                mean_energy_j=sum(energies) / len(energies),
                segments=segments,
                checkpoints=checkpoints,
            )
        )
    return rows, stats


_SUMMARY_COLUMNS = (
    "arm",
    "mu",
    "segments",
    "checkpoints",
    "trials",
    "completed",
    "mean_completion_s",
    "expected_completion_s",
    "mean_energy_j",
)

_PLOT_TEMPLATE = """set datafile missing "nan"
set datafile separator whitespace
set terminal pngcairo size 960,640
set output "{name}.png"
set title "{title}"
set xlabel "trial"
set ylabel "completion time (s)"
set key outside
plot "{name}.dat" using 8 with points pt 7 ps 0.4 title "completion_s"
"""


def _emit(
    name: str,
    title: str,
    out_dir: str,
    arms: tuple[Arm, ...],
    rows: list[dict[str, Any]],
    stats: list[ArmStats],
    plot_script: bool,
) -> ExperimentReport:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{name}.csv")
    dat_path = os.path.join(out_dir, f"{name}.dat")
    summary_path = os.path.join(out_dir, f"{name}_summary.csv")
    _write_csv(csv_path, CSV_COLUMNS, rows)
    _write_dat(dat_path, CSV_COLUMNS, rows)
    summary_rows = [
        {
            "arm": s.name,
            "mu": float(arm.mu),
            "segments": s.segments,
            "checkpoints": s.checkpoints,
            "trials": s.trials,
            "completed": s.completed,
            "mean_completion_s": s.mean_completion_s,
            "expected_completion_s": s.expected_completion_s,
            "mean_energy_j": s.mean_energy_j,
        }
        for s, arm in zip(stats, arms)
    ]
    _write_csv(summary_path, _SUMMARY_COLUMNS, summary_rows)
    plot_path = None
    if plot_script:
        plot_path = os.path.join(out_dir, f"{name}.plt")
        with open(plot_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(_PLOT_TEMPLATE.format(name=name, title=title))
    return ExperimentReport(
        name=name,
        out_dir=out_dir,
        csv_path=csv_path,
        dat_path=dat_path,
        summary_path=summary_path,
        plot_path=plot_path,
        rows=tuple(rows),
        arms=tuple(stats),
    )


def checkpoint_overhead(
    out_dir: str,
    trials: int = 5,
    seed: int = 0,
    mode: str = "model_faithful",
    orchestrators: int = 2,
    workers: int = 2,
    checkpoint_pause_s: float = 6.0,
    energy: EnergyModel = EnergyModel(),
    plot_script: bool = False,
) -> ExperimentReport:
    """Fault-free cost of checkpointing: bare vs sixteen segments."""
    program = default_program()
    arms = (
        Arm(name="bare", mu=0.0, checkpoint_policy=None, trials=trials),
        Arm(
            name="sixteen_segments",
            mu=0.0,
            checkpoint_policy={"segments": 16},
            trials=trials,
        ),
    )
    rows, stats = _run_arms(
        arms, program, seed, mode, orchestrators, workers, checkpoint_pause_s, energy
    )
    return _emit(
        "checkpoint_overhead",
        "checkpoint cost, no faults",
        out_dir,
        arms,
        rows,
        stats,
        plot_script,
    )


def optimal_frequency(
    out_dir: str,
    trials: int = 2000,
    seed: int = 0,
    bare_trials: int | None = None,
    mu: float = 0.003,
    mode: str = "model_faithful",
    orchestrators: int = 2,
    workers: int = 2,
    checkpoint_pause_s: float = 6.0,
    energy: EnergyModel = EnergyModel(),
    plot_script: bool = False,
) -> ExperimentReport:
    """Three checkpoint policies under faults; every 50 s should win."""
    program = default_program()
    arms = (
        Arm(
            name="bare",
            mu=mu,
            checkpoint_policy=None,
            trials=bare_trials if bare_trials is not None else trials,
        ),
        Arm(
            name="every_50s",
            mu=mu,
            checkpoint_policy={"interval_s": 50.0},
            trials=trials,
        ),
        Arm(
            name="sixteen_segments",
            mu=mu,
            checkpoint_policy={"segments": 16},
            trials=trials,
        ),
    )
    rows, stats = _run_arms(
        arms, program, seed, mode, orchestrators, workers, checkpoint_pause_s, energy
    )
    return _emit(
        "optimal_frequency",
        f"checkpoint policies at fault rate {mu}/s",
        out_dir,
        arms,
        rows,
        stats,
        plot_script,
    )


def mu_sweep(
    out_dir: str,
    trials: int = 100,
    seed: int = 0,
    mus: tuple[float, ...] = (0.001, 0.003, 0.01, 0.131),
    cutoff_factor: float = 100.0,
    mode: str = "model_faithful",
    orchestrators: int = 2,
    workers: int = 2,
    checkpoint_pause_s: float = 6.0,
    energy: EnergyModel = EnergyModel(),
    plot_script: bool = False,
) -> ExperimentReport:
    """Bare runs across fault rates, cut off at cutoff_factor * T virtual."""
    program = default_program()
    cutoff_s = cutoff_factor * program.total_exec_s
    arms = tuple(
        Arm(
            name=f"mu_{mu:g}",
            mu=mu,
            checkpoint_policy=None,
            trials=trials,
            cutoff_s=cutoff_s,
        )
        for mu in mus
    )
    rows, stats = _run_arms(
        arms, program, seed, mode, orchestrators, workers, checkpoint_pause_s, energy
    )
    return _emit(
        "mu_sweep",
        "fault rate sweep, no checkpoints",
        out_dir,
        arms,
        rows,
        stats,
        plot_script,
    )


EXPERIMENTS: dict[str, Callable[..., ExperimentReport]] = {
    "checkpoint_overhead": checkpoint_overhead,
    "optimal_frequency": optimal_frequency,
    "mu_sweep": mu_sweep,
}


def run_experiment_suite(
    name: str, out_dir: str, trials: int | None = None, seed: int = 0, **kwargs: Any
) -> ExperimentReport:
    """Run a registered suite by name; unknown names list what exists."""
    suite = EXPERIMENTS.get(name)
    if suite is None:
        known = ", ".join(sorted(EXPERIMENTS))
        raise ValueError(f"unknown experiment {name!r}; registered: {known}")
    if trials is not None:
        kwargs["trials"] = trials
    return suite(out_dir, seed=seed, **kwargs)
