"""Command-line frontend: one-shot commands in process, serve commands on threads."""

import json
import socket
import threading
import time
from types import SimpleNamespace

import pytest

from offq.cli import main
from offq.simlab.runner import SimConfig, run_simulation
from offq.worker.programs import JobProgram

FAST_ORCH = [
    "--heartbeat-interval", "0.2",
    "--sweep-interval", "0.1",
    "--repl-ack-timeout", "0.5",
]
FAST_WORKER = [
    "--heartbeat-interval", "0.2",
    "--checkpoint-pause", "0.02",
    "--register-retry", "0.5",
]
SHORT = "busy_counter:steps=20,step_cost=0.01"
LONG = "busy_counter:steps=4000,step_cost=0.01"


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def wait_port(port, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            return
        except OSError:
            time.sleep(0.02)
    pytest.fail(f"port {port} never accepted")


@pytest.fixture
def live(tmp_path):
    """Broker, blob service, two orchestrators, two workers, all via the CLI."""
    broker_port, blob_port = free_port(), free_port()
    broker = f"127.0.0.1:{broker_port}"
    blob = f"127.0.0.1:{blob_port}"
    stops, threads = [], []

    def serve(argv):
        stop = threading.Event()
        t = threading.Thread(
            target=main, args=(argv,), kwargs={"stop_event": stop}, daemon=True
        )
        t.start()
        stops.append(stop)
        threads.append(t)
        return stop, t

    def base(identity="id.json"):
        return [
            "--broker", broker,
            "--identity", str(tmp_path / identity),
            "--timeout", "20",
        ]

    serve(["broker", "serve", "--port", str(broker_port)])
    serve(["blob", "serve", "--port", str(blob_port)])
    wait_port(broker_port)
    wait_port(blob_port)
    for name in ("o1", "o2"):
        serve(
            ["--broker", broker, "orchestrator", "serve", "--name", name,
             "--roster", "o1,o2", "--blob", blob] + FAST_ORCH
        )
    for n in (1, 2):
        serve(
            ["--broker", broker, "--identity", str(tmp_path / f"w{n}.json"),
             "worker", "serve"] + FAST_WORKER
        )
    yield SimpleNamespace(
        broker=broker, blob=blob, tmp=tmp_path, base=base, serve=serve
    )
    for stop in stops:
        stop.set()
    for t in threads:
        t.join(timeout=10)


def run_json(capsys, argv, expect=0):
    capsys.readouterr()
    code = main(argv)
    out = capsys.readouterr().out
    assert code == expect, f"exit {code}, output: {out}"
    return json.loads(out)


def wait_for_status(capsys, base, job_id, want, timeout=30.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        body = run_json(capsys, base + ["--format", "json", "status", job_id])
        if body["status"] == want:
            return body
        time.sleep(0.1)
    pytest.fail(f"job {job_id} never reached {want}")


class TestEndToEnd:
    def test_submit_status_download_roundtrip(self, live, capsys):
        base = live.base()
        body = run_json(
            capsys,
            base + ["--format", "json", "submit", "smoke", SHORT, "--segments", "2"],
        )
        assert body["status"] in ("queued", "running")
        job_id = body["job_id"]
        wait_for_status(capsys, base, job_id, "completed")
        dest = live.tmp / "result.json"
        assert main(base + ["download", job_id, str(dest)]) == 0
        result = json.loads(dest.read_text())
        sim = run_simulation(
            SimConfig(
                program=JobProgram("busy_counter", 20, 0.01),
                checkpoint_policy={"segments": 2},
                mode="model_faithful",
                seed=1,
            )
        )
        assert result == sim.result

    def test_submit_then_status_queued_or_running(self, live, capsys):
        base = live.base()
        body = run_json(capsys, base + ["--format", "json", "submit", "slow", LONG])
        status = run_json(
            capsys, base + ["--format", "json", "status", body["job_id"]]
        )
        assert status["status"] in ("queued", "running")
        assert main(base + ["cancel", body["job_id"]]) == 0

    def test_list_filter_completed(self, live, capsys):
        base = live.base()
        quick = run_json(capsys, base + ["--format", "json", "submit", "quick", SHORT])
        wait_for_status(capsys, base, quick["job_id"], "completed")
        slow = run_json(capsys, base + ["--format", "json", "submit", "slow", LONG])
        rows = run_json(capsys, base + ["--format", "json", "list", "--filter", "completed"])
        assert {r["status"] for r in rows} == {"completed"}
        listed = {r["job_id"] for r in rows}
        assert quick["job_id"] in listed
        assert slow["job_id"] not in listed
        assert main(base + ["cancel", slow["job_id"]]) == 0

    def test_cancel_then_list_canceled(self, live, capsys):
        base = live.base()
        body = run_json(capsys, base + ["--format", "json", "submit", "victim", LONG])
        canceled = run_json(
            capsys, base + ["--format", "json", "cancel", body["job_id"]]
        )
        assert canceled["status"] == "canceled"
        rows = run_json(capsys, base + ["--format", "json", "list", "--filter", "canceled"])
        assert body["job_id"] in {r["job_id"] for r in rows}

    def test_csv_format(self, live, capsys):
        base = live.base()
        run_json(capsys, base + ["--format", "json", "submit", "csvjob", SHORT])
        capsys.readouterr()
        assert main(base + ["--format", "csv", "list"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "job_id,name,status,created_at,assigned_worker,result_ref"
        assert len(lines) >= 2


class TestErrorPaths:
    def test_unknown_job_not_found_exit(self, live, capsys):
        assert main(live.base() + ["status", "0" * 32]) == 3

    def test_foreign_job_not_owner_exit(self, live, capsys):
        mine = live.base("alice.json") + ["--username", "alice"]
        theirs = live.base("mallory.json") + ["--username", "mallory"]
        body = run_json(capsys, mine + ["--format", "json", "submit", "owned", LONG])
        assert main(theirs + ["cancel", body["job_id"]]) == 4
        assert main(theirs + ["status", body["job_id"]]) == 4
        assert main(mine + ["cancel", body["job_id"]]) == 0

    def test_download_before_completion_invalid_state(self, live, capsys):
        base = live.base()
        body = run_json(capsys, base + ["--format", "json", "submit", "early", LONG])
        dest = live.tmp / "nope.json"
        assert main(base + ["download", body["job_id"], str(dest)]) == 6
        assert not dest.exists()
        assert main(base + ["cancel", body["job_id"]]) == 0

    def test_broker_unreachable_network_exit(self, tmp_path):
        argv = [
            "--broker", f"127.0.0.1:{free_port()}",
            "--identity", str(tmp_path / "id.json"),
            "list",
        ]
        assert main(argv) == 8

    def test_bad_program_spec_usage_exit(self, tmp_path):
        argv = [
            "--identity", str(tmp_path / "id.json"),
            "submit", "bad", "busy_counter:steps",
        ]
        assert main(argv) == 2


class TestServeLifecycle:
    def test_duplicate_orchestrator_name_startup_error(self, live):
        code = main(
            ["--broker", live.broker, "orchestrator", "serve", "--name", "o1",
             "--roster", "o1,o2", "--blob", live.blob]
        )
        assert code == 6

    def test_broker_port_in_use_startup_error(self, live):
        port = live.broker.rsplit(":", 1)[1]
        assert main(["broker", "serve", "--port", port]) == 6

    def test_worker_saved_id_reused(self, live, capsys):
        ident = live.tmp / "wid.json"
        argv = ["--broker", live.broker, "--identity", str(ident),
                "worker", "serve"] + FAST_WORKER
        stop1, t1 = live.serve(argv)
        deadline = time.monotonic() + 15
        while not ident.exists() and time.monotonic() < deadline:
            time.sleep(0.05)
        worker_id = json.loads(ident.read_text())["worker_id"]
        stop1.set()
        t1.join(timeout=10)
        live.serve(argv)
        seen = ""
        deadline = time.monotonic() + 15
        while time.monotonic() < deadline:
            seen += capsys.readouterr().err
            if seen.count(f"worker {worker_id} serving") >= 2:
                break
            time.sleep(0.05)
        assert seen.count(f"worker {worker_id} serving") >= 2
        assert json.loads(ident.read_text())["worker_id"] == worker_id

    def test_env_var_broker_override(self, live, capsys, monkeypatch):
        monkeypatch.setenv("OFFQ_BROKER", live.broker)
        argv = ["--identity", str(live.tmp / "env.json"), "--timeout", "20", "list"]
        assert main(argv) == 0


class TestOptimize:
    def test_known_plan(self, capsys):
        report = run_json(
            capsys,
            ["--format", "json", "optimize", "--mu", "0.003", "--T", "300",
             "--C", "6", "--table-max-n", "6"],
        )
        assert report["segments"] == 5
        assert report["checkpoints"] == 4
        assert report["interval_s"] == pytest.approx(60.0)
        assert report["expected_completion_s"] == pytest.approx(352.70, abs=0.01)
        by_n = {row["segments"]: row for row in report["table"]}
        assert by_n[6]["expected_completion_s"] == pytest.approx(353.67, abs=0.01)

    def test_zero_fault_rate_wants_no_checkpoints(self, capsys):
        report = run_json(
            capsys,
            ["--format", "json", "optimize", "--mu", "0", "--T", "300", "--C", "6"],
        )
        assert report["checkpoints"] == 0
        assert report["expected_completion_s"] == pytest.approx(300.0)

    def test_negative_args_usage_error(self, capsys):
        assert main(["optimize", "--mu", "0.003", "--T", "300", "--C", "-1"]) == 2
        assert main(["optimize", "--mu", "-0.1", "--T", "300", "--C", "6"]) == 2


class TestSim:
    def config(self, tmp_path, **extra):
        doc = {"program": "busy_counter:steps=300,step_cost=1"}
        doc.update(extra)
        path = tmp_path / "scenario.json"
        path.write_text(json.dumps(doc))
        return str(path)

    def test_run_same_seed_identical_csv(self, tmp_path, capsys):
        cfg = self.config(
            tmp_path, fault_rate_per_s=0.003, checkpoint_policy={"segments": 5}
        )
        for out in ("a", "b"):
            code = main(
                ["sim", "run", "--config", cfg, "--trials", "5", "--seed", "3",
                 "--out", str(tmp_path / out)]
            )
            assert code == 0
        assert (tmp_path / "a" / "runs.csv").read_bytes() == (
            tmp_path / "b" / "runs.csv"
        ).read_bytes()

    def test_bad_config_schema_error_with_field_path(self, tmp_path, capsys):
        cfg = self.config(tmp_path, mode=5)
        assert main(["sim", "run", "--config", cfg, "--out", str(tmp_path / "x")]) == 7
        assert "config error at mode" in capsys.readouterr().err

        cfg = self.config(tmp_path, no_such_knob=1)
        assert main(["sim", "run", "--config", cfg, "--out", str(tmp_path / "x")]) == 7
        assert "config error at no_such_knob" in capsys.readouterr().err

        missing = tmp_path / "empty.json"
        missing.write_text("{}")
        assert main(
            ["sim", "run", "--config", str(missing), "--out", str(tmp_path / "x")]
        ) == 7
        assert "config error at program" in capsys.readouterr().err

    def test_experiment_csv_has_three_arms(self, tmp_path, capsys):
        code = main(
            ["sim", "experiment", "optimal_frequency", "--trials", "3",
             "--seed", "5", "--out", str(tmp_path / "exp")]
        )
        assert code == 0
        csv = (tmp_path / "exp" / "optimal_frequency.csv").read_text()
        arms = {line.split(",")[0].rsplit("-", 1)[0] for line in csv.splitlines()[1:]}
        assert arms == {"bare", "every_50s", "sixteen_segments"}

    def test_experiment_same_seed_identical_csv(self, tmp_path, capsys):
        for out in ("e1", "e2"):
            code = main(
                ["sim", "experiment", "checkpoint_overhead", "--trials", "3",
                 "--seed", "9", "--out", str(tmp_path / out)]
            )
            assert code == 0
        a = (tmp_path / "e1" / "checkpoint_overhead.csv").read_bytes()
        b = (tmp_path / "e2" / "checkpoint_overhead.csv").read_bytes()
        assert a == b

    def test_unknown_experiment_usage_error_lists_names(self, capsys):
        assert main(["sim", "experiment", "nope", "--out", "x"]) == 2
        err = capsys.readouterr().err
        for name in ("checkpoint_overhead", "mu_sweep", "optimal_frequency"):
            assert name in err
