"""Terminal frontend: client commands, node processes, optimizer, sim lab.

The frontend is stateless between invocations except for a small JSON
identity file (username and worker id), created on first use.  Client
commands open a fresh session against the broker, do one request/reply
exchange with the primary orchestrator, and exit.  `serve` commands host
their node's event loop until SIGINT/SIGTERM (or an injected stop event,
which is how tests drive them).

Exit codes, one per error class:

    0  success
    2  usage error (bad flags, bad program spec, unknown experiment)
    3  job or blob not found
    4  job belongs to a different client
    5  no reply within the timeout
    6  invalid state (duplicate orchestrator name, port in use, no result)
    7  bad config or identity file
    8  broker unreachable or protocol-level failure
"""

from __future__ import annotations

import argparse
import json
import os
import queue
import signal
import sys
import threading
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

from offq.broker import BrokerError, DeclareConflict, Delivery
from offq.broker.core import DEFAULT_PORT
from offq.broker.tcp import BrokerTcpClient, BrokerTcpServer
from offq.ckptmath import expected_with_checkpoints, optimal_segments
from offq.flows import SessionTimeout, client_connect_flow, worker_connect_flow
from offq.live import host_node
from offq.orchestrator.blob import (
    BlobClient,
    BlobError,
    BlobServer,
    DEFAULT_BLOB_PORT,
)
from offq.orchestrator.node import OrchestratorConfig, OrchestratorNode
from offq.protocol import canonical_json, make_envelope, new_guid, to_orchestrator_key
from offq.runtime import ORCH_EXCHANGE
from offq.simlab.experiments import EXPERIMENTS, run_experiment_suite
from offq.simlab.runner import SimConfig, run_simulation
from offq.worker.node import WorkerConfig, WorkerNode
from offq.worker.programs import JobProgram, ProgramError, parse_program_spec

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NOT_FOUND = 3
EXIT_NOT_OWNER = 4
EXIT_TIMEOUT = 5
EXIT_INVALID_STATE = 6
EXIT_BAD_CONFIG = 7
EXIT_NETWORK = 8

DEFAULT_BROKER = f"127.0.0.1:{DEFAULT_PORT}"
DEFAULT_IDENTITY = "~/.offq/identity.json"
REPLY_TIMEOUT_S = 10.0

JOB_COLUMNS = (
    "job_id",
    "name",
    "status",
    "created_at",
    "assigned_worker",
    "result_ref",
)


class CliError(Exception):
    """Failure with a dedicated exit code; message goes to stderr."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    # argparse's error() calls sys.exit directly; route it through CliError
    # so every exit path of main() returns a code instead of raising.
    def error(self, message: str):
        raise CliError(EXIT_USAGE, f"{self.prog}: error: {message}")


# -- identity file ------------------------------------------------------------------


def _load_identity(path: Path) -> dict[str, Any]:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        return {}
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_BAD_CONFIG, f"identity file {path}: {exc}")
    if not isinstance(doc, dict):
        raise CliError(EXIT_BAD_CONFIG, f"identity file {path}: expected an object")
    return doc


def _save_identity(path: Path, identity: dict[str, Any]) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(identity, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise CliError(EXIT_BAD_CONFIG, f"cannot write identity file {path}: {exc}")


def _resolve_username(args: argparse.Namespace) -> str:
    path = Path(args.identity).expanduser()
    identity = _load_identity(path)
    username = args.username or identity.get("username")
    if not username:
        username = "user-" + new_guid()[:8]
    if identity.get("username") != username:
        identity["username"] = username
        _save_identity(path, identity)
    return username


# -- client session ------------------------------------------------------------------


class ClientSession:
    """Blocking request/reply client over one broker connection.

    Replies arrive asynchronously on the session queue; `await_reply` does a
    selective receive (non-matching envelopes are buffered, not dropped) so
    an unrelated push like resultReady cannot eat the reply we wait for.
    """

    def __init__(self, broker_addr: str, username: str, timeout_s: float):
        self.timeout_s = timeout_s
        self.broker = BrokerTcpClient(broker_addr)
        self.grant = client_connect_flow(self.broker, username, timeout_s=timeout_s)
        self.inbox: queue.Queue = queue.Queue()
        self.pending: list = []
        self.broker.consume(self.grant.queue, self._on_delivery)
        self.blob = BlobClient(self.grant.blob_addr)

    def _on_delivery(self, delivery: Delivery) -> None:
        self.broker.ack(delivery)
        self.inbox.put(delivery.envelope)

    def send(self, msg_type: str, body: dict[str, Any], msg_id: str | None = None) -> None:
        env = make_envelope(
            msg_type=msg_type,
            sender=self.grant.principal_id,
            reply_to=self.grant.principal_id,
            body=body,
            msg_id=msg_id or new_guid(),
        )
        self.broker.publish(
            ORCH_EXCHANGE, to_orchestrator_key(self.grant.orchestrator, env.msg_id), env
        )

    def await_reply(self, msg_type: str, job_id: str | None = None):
        def matches(env) -> bool:
            return env.msg_type == msg_type and (
                job_id is None or env.body.get("job_id") == job_id
            )

        for i, env in enumerate(self.pending):
            if matches(env):
                return self.pending.pop(i)
        deadline = time.monotonic() + self.timeout_s
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise CliError(
                    EXIT_TIMEOUT, f"no {msg_type} reply within {self.timeout_s:g}s"
                )
            try:
                env = self.inbox.get(timeout=remaining)
            except queue.Empty:
                raise CliError(
                    EXIT_TIMEOUT, f"no {msg_type} reply within {self.timeout_s:g}s"
                )
            if matches(env):
                return env
            self.pending.append(env)

    def close(self) -> None:
        try:
            self.broker.close()
        finally:
            self.blob.close()


def _open_session(args: argparse.Namespace) -> ClientSession:
    username = _resolve_username(args)
    try:
        return ClientSession(args.broker, username, timeout_s=args.timeout)
    except SessionTimeout:
        raise
    except OSError as exc:
        raise CliError(
            EXIT_NETWORK, f"cannot reach broker at {args.broker}: {exc}"
        ) from None


def _connect_broker(args: argparse.Namespace) -> BrokerTcpClient:
    try:
        return BrokerTcpClient(args.broker)
    except OSError as exc:
        raise CliError(
            EXIT_NETWORK, f"cannot reach broker at {args.broker}: {exc}"
        ) from None


def _job_reply(env) -> dict[str, Any]:
    body = env.body
    error = body.get("error")
    if error == "not_found":
        raise CliError(EXIT_NOT_FOUND, f"job {body.get('job_id', '?')} not found")
    if error == "not_owner":
        raise CliError(
            EXIT_NOT_OWNER, f"job {body.get('job_id', '?')} belongs to another client"
        )
    if error:
        raise CliError(EXIT_NETWORK, f"orchestrator error: {error}")
    return body


# -- output formatting ---------------------------------------------------------------


def _fmt_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _emit_rows(rows: list[dict[str, Any]], columns: tuple[str, ...], fmt: str) -> None:
    if fmt == "json":
        print(json.dumps(rows, indent=2, sort_keys=True))
        return
    if fmt == "csv":
        print(",".join(columns))
        for row in rows:
            print(",".join(_fmt_cell(row.get(c)) for c in columns))
        return
    if not rows:
        print("(none)")
        return
    widths = [
        max(len(c), max(len(_fmt_cell(r.get(c))) for r in rows)) for c in columns
    ]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip())
    for r in rows:
        print(
            "  ".join(_fmt_cell(r.get(c)).ljust(w) for c, w in zip(columns, widths)).rstrip()
        )


def _emit_job(body: dict[str, Any], fmt: str) -> None:
    if fmt == "json":
        print(json.dumps(body, indent=2, sort_keys=True))
        return
    _emit_rows([body], JOB_COLUMNS, fmt)
    if body.get("failure_reason"):
        print(f"failure_reason: {body['failure_reason']}")


# -- client commands -----------------------------------------------------------------


def _cmd_submit(args: argparse.Namespace) -> int:
    try:
        program = parse_program_spec(args.program)
    except ProgramError as exc:
        raise CliError(EXIT_USAGE, f"bad program spec: {exc}")
    policy = None
    if args.every is not None:
        if args.every <= 0:
            raise CliError(EXIT_USAGE, "--every must be > 0 seconds")
        policy = {"interval_s": args.every}
    if args.segments is not None:
        if args.segments < 1:
            raise CliError(EXIT_USAGE, "--segments must be >= 1")
        policy = {"segments": args.segments}
    session = _open_session(args)
    try:
        job_id = new_guid()
        session.send(
            "startNewTask",
            {
                "client_id": session.grant.principal_id,
                "name": args.name,
                "program_ref": f"prog.{job_id}",
                "checkpoint_policy": policy,
            },
            msg_id=job_id,
        )
        ack = session.await_reply("newTaskAck", job_id)
        session.blob.put(
            ack.body["program_ref"],
            canonical_json(program.to_json()).encode("utf-8"),
        )
        session.send(
            "taskUploadCompleted",
            {"job_id": job_id, "client_id": session.grant.principal_id},
        )
        body = _job_reply(session.await_reply("jobStatusReply", job_id))
        _emit_job(body, args.format)
        return EXIT_OK
    finally:
        session.close()


def _cmd_status(args: argparse.Namespace) -> int:
    session = _open_session(args)
    try:
        session.send(
            "jobStatusRequest",
            {"job_id": args.job_id, "client_id": session.grant.principal_id},
        )
        body = _job_reply(session.await_reply("jobStatusReply", args.job_id))
        _emit_job(body, args.format)
        return EXIT_OK
    finally:
        session.close()


def _cmd_list(args: argparse.Namespace) -> int:
    session = _open_session(args)
    try:
        session.send(
            "jobStatusRequest", {"client_id": session.grant.principal_id}
        )
        body = _job_reply(session.await_reply("jobStatusReply"))
        jobs = body.get("jobs", [])
        if args.filter != "all":
            jobs = [j for j in jobs if j.get("status") == args.filter]
        _emit_rows(jobs, JOB_COLUMNS, args.format)
        return EXIT_OK
    finally:
        session.close()


def _cmd_cancel(args: argparse.Namespace) -> int:
    session = _open_session(args)
    try:
        session.send(
            "cancelJob",
            {"job_id": args.job_id, "client_id": session.grant.principal_id},
        )
        body = _job_reply(session.await_reply("jobStatusReply", args.job_id))
        _emit_job(body, args.format)
        return EXIT_OK
    finally:
        session.close()


def _cmd_download(args: argparse.Namespace) -> int:
    session = _open_session(args)
    try:
        session.send(
            "jobStatusRequest",
            {"job_id": args.job_id, "client_id": session.grant.principal_id},
        )
        body = _job_reply(session.await_reply("jobStatusReply", args.job_id))
        if body.get("status") != "completed" or not body.get("result_ref"):
            raise CliError(
                EXIT_INVALID_STATE,
                f"job {args.job_id} is {body.get('status', 'unknown')}; "
                "no result to download",
            )
        try:
            data = session.blob.get(body["result_ref"])
        except BlobError:
            raise CliError(
                EXIT_NOT_FOUND, f"result blob {body['result_ref']} not found"
            )
        try:
            Path(args.dest).write_bytes(data)
        except OSError as exc:
            raise CliError(EXIT_BAD_CONFIG, f"cannot write {args.dest}: {exc}")
        print(f"{args.dest}: {len(data)} bytes")
        return EXIT_OK
    finally:
        session.close()


# -- node processes ------------------------------------------------------------------


def _serve(args: argparse.Namespace, banner: str, shutdown: Callable[[], None]) -> int:
    stop = args.stop_event
    if stop is None:
        stop = threading.Event()
        # Signal handlers only exist on the main thread; tests inject an
        # event instead and run serve commands on side threads.
        if threading.current_thread() is threading.main_thread():
            signal.signal(signal.SIGINT, lambda *_: stop.set())
            signal.signal(signal.SIGTERM, lambda *_: stop.set())
    # Status lines go to stderr: stdout stays reserved for command output,
    # so scripts can pipe query results while nodes chatter.
    print(banner, file=sys.stderr, flush=True)
    try:
        stop.wait()
    finally:
        shutdown()
    return EXIT_OK


def _cmd_broker_serve(args: argparse.Namespace) -> int:
    try:
        server = BrokerTcpServer(
            host=args.host, port=args.port, journal_path=args.journal
        ).start()
    except OSError as exc:
        raise CliError(
            EXIT_INVALID_STATE, f"cannot bind broker to {args.host}:{args.port}: {exc}"
        )
    return _serve(args, f"broker listening on {server.address}", server.stop)


def _cmd_blob_serve(args: argparse.Namespace) -> int:
    try:
        server = BlobServer(host=args.host, port=args.port)
    except OSError as exc:
        raise CliError(
            EXIT_INVALID_STATE,
            f"cannot bind blob service to {args.host}:{args.port}: {exc}",
        )
    server.start()
    return _serve(args, f"blob service listening on {server.address}", server.stop)


def _cmd_orchestrator_serve(args: argparse.Namespace) -> int:
    roster = tuple(n.strip() for n in args.roster.split(",") if n.strip())
    if args.name not in roster:
        raise CliError(
            EXIT_USAGE, f"--name {args.name!r} must appear in --roster {args.roster!r}"
        )
    # The lock queue is connection-scoped and exclusive: it exists exactly as
    # long as this process's connection, so a second serve with the same name
    # against the same broker fails fast instead of split-braining the store.
    lock = _connect_broker(args)
    try:
        lock.declare_queue(f"lock.orch.{args.name}", exclusive=True)
    except DeclareConflict:
        lock.close()
        raise CliError(
            EXIT_INVALID_STATE,
            f"orchestrator {args.name!r} is already running against this broker",
        )
    node = OrchestratorNode(
        OrchestratorConfig(
            name=args.name,
            roster=roster,
            blob_addr=args.blob,
            heartbeat_interval_s=args.heartbeat_interval,
            detection_multiplier=args.detection_multiplier,
            sweep_interval_s=args.sweep_interval,
            repl_ack_timeout_s=args.repl_ack_timeout,
        )
    )
    try:
        runtime = host_node(node, args.broker)
    except OSError as exc:
        lock.close()
        raise CliError(
            EXIT_NETWORK, f"cannot reach broker at {args.broker}: {exc}"
        ) from None

    def shutdown() -> None:
        runtime.stop()
        lock.close()

    return _serve(
        args, f"orchestrator {args.name} serving (roster {', '.join(roster)})", shutdown
    )


def _cmd_worker_serve(args: argparse.Namespace) -> int:
    path = Path(args.identity).expanduser()
    identity = _load_identity(path)
    worker_id = args.id or identity.get("worker_id") or ""
    if not worker_id:
        # First run: ask an orchestrator to mint an id, then keep it forever.
        bootstrap = _connect_broker(args)
        try:
            granted = worker_connect_flow(bootstrap, "", timeout_s=args.timeout)
        finally:
            bootstrap.close()
        worker_id = granted.principal_id
    if identity.get("worker_id") != worker_id:
        identity["worker_id"] = worker_id
        _save_identity(path, identity)
    node = WorkerNode(
        WorkerConfig(
            worker_id=worker_id,
            heartbeat_interval_s=args.heartbeat_interval,
            checkpoint_pause_s=args.checkpoint_pause,
            register_retry_s=args.register_retry,
        )
    )
    try:
        runtime = host_node(node, args.broker)
    except OSError as exc:
        raise CliError(
            EXIT_NETWORK, f"cannot reach broker at {args.broker}: {exc}"
        ) from None
    return _serve(args, f"worker {worker_id} serving", runtime.stop)


# -- optimizer -----------------------------------------------------------------------


def _cmd_optimize(args: argparse.Namespace) -> int:
    if args.mu < 0:
        raise CliError(EXIT_USAGE, "--mu must be >= 0")
    if args.T <= 0:
        raise CliError(EXIT_USAGE, "--T must be > 0")
    if args.C < 0:
        raise CliError(EXIT_USAGE, "--C must be >= 0")
    if args.table_max_n is not None and args.table_max_n < 1:
        raise CliError(EXIT_USAGE, "--table-max-n must be >= 1")
    plan = optimal_segments(args.mu, args.T, args.C)
    report: dict[str, Any] = {
        "mu": args.mu,
        "work_s": args.T,
        "checkpoint_cost_s": args.C,
        "segments": plan.segments,
        "checkpoints": plan.checkpoints,
        "interval_s": plan.interval_s,
        "expected_completion_s": plan.expected_completion_s,
        "capped": plan.capped,
    }
    table = []
    if args.table_max_n is not None:
        table = [
            {
                "segments": n,
                "checkpoints": n - 1,
                "expected_completion_s": expected_with_checkpoints(
                    args.mu, args.T, n, args.C
                ),
            }
            for n in range(1, args.table_max_n + 1)
        ]
        report["table"] = table
    if args.format == "json":
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_OK
    if args.format == "csv":
        rows = table or [report]
        _emit_rows(rows, ("segments", "checkpoints", "expected_completion_s"), "csv")
        return EXIT_OK
    print(f"segments               {plan.segments}")
    print(f"checkpoints            {plan.checkpoints}")
    print(f"interval_s             {plan.interval_s:g}")
    print(f"expected_completion_s  {plan.expected_completion_s:.4f}")
    if plan.capped:
        print("note: segment cap reached; free checkpoints have no finite optimum")
    for row in table:
        print(
            f"  N={row['segments']:<4d} checkpoints={row['checkpoints']:<4d} "
            f"expected_s={row['expected_completion_s']:.4f}"
        )
    return EXIT_OK


# -- simulation lab ------------------------------------------------------------------

_SIM_FLOAT_KEYS = frozenset(
    {
        "fault_rate_per_s",
        "delivery_latency_s",
        "delivery_jitter_s",
        "heartbeat_interval_s",
        "detection_multiplier",
        "sweep_interval_s",
        "checkpoint_pause_s",
        "repl_ack_timeout_s",
        "worker_restart_delay_s",
    }
)
_SIM_INT_KEYS = frozenset({"seed", "orchestrators", "workers"})


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _program_from_config(value: Any) -> JobProgram:
    if isinstance(value, str):
        try:
            return parse_program_spec(value)
        except ProgramError as exc:
            raise CliError(EXIT_BAD_CONFIG, f"config error at program: {exc}")
    if isinstance(value, dict):
        for key in ("kind", "total_steps", "step_cost_s"):
            if key not in value:
                raise CliError(
                    EXIT_BAD_CONFIG, f"config error at program.{key}: required"
                )
        try:
            return JobProgram.from_json(value)
        except ProgramError as exc:
            raise CliError(EXIT_BAD_CONFIG, f"config error at program: {exc}")
    raise CliError(
        EXIT_BAD_CONFIG, "config error at program: expected spec string or object"
    )


def _sim_config(doc: Any) -> SimConfig:
    if not isinstance(doc, dict):
        raise CliError(EXIT_BAD_CONFIG, "config error at <root>: expected an object")
    if "program" not in doc:
        raise CliError(EXIT_BAD_CONFIG, "config error at program: required")
    kwargs: dict[str, Any] = {}
    for key, value in doc.items():
        if key == "program":
            kwargs[key] = _program_from_config(value)
        elif key == "checkpoint_policy":
            if value is not None and not isinstance(value, dict):
                raise CliError(
                    EXIT_BAD_CONFIG,
                    f"config error at {key}: expected object or null",
                )
            kwargs[key] = value
        elif key == "mode":
            if not isinstance(value, str):
                raise CliError(EXIT_BAD_CONFIG, f"config error at {key}: expected string")
            kwargs[key] = value
        elif key == "cutoff_s":
            if value is not None and not _is_number(value):
                raise CliError(
                    EXIT_BAD_CONFIG, f"config error at {key}: expected number or null"
                )
            kwargs[key] = None if value is None else float(value)
        elif key in _SIM_FLOAT_KEYS:
            if not _is_number(value):
                raise CliError(EXIT_BAD_CONFIG, f"config error at {key}: expected number")
            kwargs[key] = float(value)
        elif key in _SIM_INT_KEYS:
            if not isinstance(value, int) or isinstance(value, bool):
                raise CliError(EXIT_BAD_CONFIG, f"config error at {key}: expected integer")
            kwargs[key] = value
        else:
            raise CliError(EXIT_BAD_CONFIG, f"config error at {key}: unknown field")
    try:
        return SimConfig(**kwargs)
    except ValueError as exc:
        raise CliError(EXIT_BAD_CONFIG, f"config error: {exc}")


SIM_RUN_COLUMNS = (
    "trial",
    "seed",
    "completed",
    "completion_s",
    "faults",
    "checkpoints_taken",
    "planned_checkpoints",
    "segments",
    "reexecuted_s",
    "virtual_end_s",
    "result_ready_count",
    "energy_total_j",
    "events",
)


def _cmd_sim_run(args: argparse.Namespace) -> int:
    try:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(EXIT_BAD_CONFIG, f"config file {args.config} not found")
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_BAD_CONFIG, f"config file {args.config}: {exc}")
    base = _sim_config(doc)
    seed = args.seed if args.seed is not None else base.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for trial in range(args.trials):
        record = run_simulation(replace(base, seed=seed + trial))
        rows.append(
            {
                "trial": trial,
                "seed": record.seed,
                "completed": record.completed,
                "completion_s": record.completion_s,
                "faults": record.faults,
                "checkpoints_taken": record.checkpoints_taken,
                "planned_checkpoints": record.planned_checkpoints,
                "segments": record.segments,
                "reexecuted_s": record.reexecuted_s,
                "virtual_end_s": record.virtual_end_s,
                "result_ready_count": record.result_ready_count,
                "energy_total_j": record.energy_total_j,
                "events": record.events,
            }
        )
    path = out / "runs.csv"
    lines = [",".join(SIM_RUN_COLUMNS)]
    lines.extend(
        ",".join(_fmt_cell(row[c]) for c in SIM_RUN_COLUMNS) for row in rows
    )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    completed = sum(1 for r in rows if r["completed"])
    print(f"{len(rows)} trials, {completed} completed -> {path}")
    return EXIT_OK


def _cmd_sim_experiment(args: argparse.Namespace) -> int:
    if args.name not in EXPERIMENTS:
        known = ", ".join(sorted(EXPERIMENTS))
        raise CliError(
            EXIT_USAGE, f"unknown experiment {args.name!r}; registered: {known}"
        )
    report = run_experiment_suite(
        args.name,
        str(args.out),
        trials=args.trials,
        seed=args.seed,
        plot_script=args.plot_script,
    )
    print(f"{report.name}: {len(report.rows)} rows -> {report.csv_path}")
    for stats in report.arms:
        mean = "" if stats.mean_completion_s is None else f"{stats.mean_completion_s:.2f}"
        print(
            f"  {stats.name}: completed {stats.completed}/{stats.trials}"
            f" mean_completion_s={mean}"
            f" expected_s={stats.expected_completion_s:.2f}"
        )
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(
        prog="offq",
        description="Offload jobs to checkpointing workers behind replicated"
        " orchestrators, or host the nodes themselves.",
    )
    parser.add_argument(
        "--broker",
        default=os.environ.get("OFFQ_BROKER", DEFAULT_BROKER),
        help=f"broker host:port (env OFFQ_BROKER, default {DEFAULT_BROKER})",
    )
    parser.add_argument(
        "--identity",
        default=DEFAULT_IDENTITY,
        help=f"identity file path (default {DEFAULT_IDENTITY})",
    )
    parser.add_argument("--username", default=None, help="override the saved username")
    parser.add_argument(
        "--format", choices=("table", "json", "csv"), default="table",
        help="output format for query commands",
    )
    parser.add_argument(
        "--timeout", type=float, default=REPLY_TIMEOUT_S,
        help=f"reply timeout in seconds (default {REPLY_TIMEOUT_S:g})",
    )
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("submit", help="upload a job and queue it")
    p.add_argument("name", help="human-readable job name")
    p.add_argument(
        "program",
        help="program spec kind:key=value,... e.g. busy_counter:steps=300,step_cost=1",
    )
    group = p.add_mutually_exclusive_group()
    group.add_argument(
        "--every", type=float, metavar="SECONDS", help="checkpoint every N seconds"
    )
    group.add_argument(
        "--segments", type=int, metavar="N", help="split the job into N segments"
    )
    p.set_defaults(func=_cmd_submit)

    p = sub.add_parser("status", help="show one job")
    p.add_argument("job_id")
    p.set_defaults(func=_cmd_status)

    p = sub.add_parser("list", help="list this client's jobs")
    p.add_argument(
        "--filter", choices=("all", "completed", "canceled"), default="all"
    )
    p.set_defaults(func=_cmd_list)

    p = sub.add_parser("cancel", help="cancel a job")
    p.add_argument("job_id")
    p.set_defaults(func=_cmd_cancel)

    p = sub.add_parser("download", help="write a completed job's result to a file")
    p.add_argument("job_id")
    p.add_argument("dest")
    p.set_defaults(func=_cmd_download)

    p = sub.add_parser("broker", help="message broker process")
    bsub = p.add_subparsers(dest="broker_command", metavar="action", required=True)
    b = bsub.add_parser("serve", help="run a broker until signaled")
    b.add_argument("--host", default="127.0.0.1")
    b.add_argument("--port", type=int, default=DEFAULT_PORT)
    b.add_argument("--journal", default=None, help="append-only journal file")
    b.set_defaults(func=_cmd_broker_serve)

    p = sub.add_parser("blob", help="blob storage process")
    bsub = p.add_subparsers(dest="blob_command", metavar="action", required=True)
    b = bsub.add_parser("serve", help="run a blob service until signaled")
    b.add_argument("--host", default="127.0.0.1")
    b.add_argument("--port", type=int, default=DEFAULT_BLOB_PORT)
    b.set_defaults(func=_cmd_blob_serve)

    p = sub.add_parser("orchestrator", help="orchestrator replica process")
    osub = p.add_subparsers(dest="orch_command", metavar="action", required=True)
    o = osub.add_parser("serve", help="run an orchestrator replica until signaled")
    o.add_argument("--name", required=True, help="replica name, unique per broker")
    o.add_argument(
        "--roster",
        required=True,
        help="comma-separated replica names; first one boots as primary",
    )
    o.add_argument(
        "--blob",
        default=f"127.0.0.1:{DEFAULT_BLOB_PORT}",
        help="blob service host:port handed to clients and workers",
    )
    o.add_argument("--heartbeat-interval", type=float, default=5.0)
    o.add_argument("--detection-multiplier", type=float, default=3.0)
    o.add_argument("--sweep-interval", type=float, default=2.5)
    o.add_argument("--repl-ack-timeout", type=float, default=2.0)
    o.set_defaults(func=_cmd_orchestrator_serve)

    p = sub.add_parser("worker", help="worker process")
    wsub = p.add_subparsers(dest="worker_command", metavar="action", required=True)
    w = wsub.add_parser("serve", help="run a worker until signaled")
    w.add_argument(
        "--id", default=None, help="worker id; defaults to the saved or minted one"
    )
    w.add_argument("--heartbeat-interval", type=float, default=5.0)
    w.add_argument("--checkpoint-pause", type=float, default=6.0)
    w.add_argument("--register-retry", type=float, default=10.0)
    w.set_defaults(func=_cmd_worker_serve)

    p = sub.add_parser(
        "optimize", help="checkpoint schedule minimizing expected completion time"
    )
    p.add_argument("--mu", type=float, required=True, help="fault rate per second")
    p.add_argument("--T", type=float, required=True, help="total work in seconds")
    p.add_argument("--C", type=float, required=True, help="cost of one checkpoint in seconds")
    p.add_argument(
        "--table-max-n", type=int, default=None,
        help="also print expected times for N = 1..MAX segments",
    )
    p.set_defaults(func=_cmd_optimize)

    p = sub.add_parser("sim", help="deterministic simulation lab")
    ssub = p.add_subparsers(dest="sim_command", metavar="action", required=True)
    s = ssub.add_parser("run", help="run one scenario config for N trials")
    s.add_argument("--config", required=True, help="scenario JSON file")
    s.add_argument("--trials", type=int, default=1)
    s.add_argument("--seed", type=int, default=None, help="base seed (overrides config)")
    s.add_argument("--out", default="offq-out")
    s.set_defaults(func=_cmd_sim_run)
    s = ssub.add_parser("experiment", help="run a registered experiment suite")
    s.add_argument("name", help=f"one of: {', '.join(sorted(EXPERIMENTS))}")
    s.add_argument("--trials", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="offq-out")
    s.add_argument(
        "--plot-script", action="store_true", help="also emit a gnuplot script"
    )
    s.set_defaults(func=_cmd_sim_experiment)

    return parser


def main(
    argv: list[str] | None = None, stop_event: threading.Event | None = None
) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    args.stop_event = stop_event
    try:
        return args.func(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except SessionTimeout as exc:
        print(f"session timeout: {exc}", file=sys.stderr)
        return EXIT_TIMEOUT
    except (BrokerError, ConnectionError) as exc:
        print(f"broker error: {exc}", file=sys.stderr)
        return EXIT_NETWORK


if __name__ == "__main__":
    sys.exit(main())
