"""End-to-end simulation behavior: exactness, fidelity, faults, failover."""

import math

import pytest

from offq.ckptmath import expected_exec_time, expected_with_checkpoints
from offq.orchestrator.node import OrchestratorConfig, OrchestratorNode
from offq.simlab.client import ClientProfile, JobSpec, SimClient
from offq.simlab.energy import EnergyModel
from offq.simlab.kernel import SimKernel
from offq.simlab.runner import SimConfig, run_simulation
from offq.worker.node import WorkerConfig, WorkerNode
from offq.worker.programs import JobProgram

PROGRAM = JobProgram(kind="busy_counter", total_steps=300, step_cost_s=1.0, params={})


def faithful(**kw):
    return SimConfig(program=PROGRAM, mode="model_faithful", **kw)


def system(**kw):
    return SimConfig(program=PROGRAM, mode="system", **kw)


class TestFaithfulExactness:
    def test_bare_run_is_exact(self):
        record = run_simulation(faithful(seed=1))
        assert record.completed
        assert record.completion_s == 300.0
        assert record.checkpoints_taken == 0 and record.faults == 0

    def test_fifteen_checkpoints_cost_ninety_seconds(self):
        record = run_simulation(
            faithful(seed=1, checkpoint_policy={"segments": 16}, checkpoint_pause_s=6.0)
        )
        assert record.completed
        assert record.completion_s == 390.0
        assert record.checkpoints_taken == 15
        assert record.result_ready_count == 1

    def test_interval_policy_five_checkpoints(self):
        record = run_simulation(
            faithful(seed=2, checkpoint_policy={"interval_s": 50.0})
        )
        assert record.completion_s == 330.0
        assert record.checkpoints_taken == 5


class TestModelFidelity:
    @pytest.mark.parametrize("mu", [0.003, 0.01])
    def test_bare_mean_tracks_closed_form(self, mu):
        trials = 400
        total = 0.0
        for i in range(trials):
            record = run_simulation(
                faithful(seed=10_000 + i, fault_rate_per_s=mu)
            )
            assert record.completed
            total += record.completion_s
        mean = total / trials
        expected = expected_exec_time(mu, 300.0)
        assert abs(mean - expected) / expected < 0.08

    def test_checkpointed_mean_tracks_closed_form(self):
        mu, trials = 0.003, 400
        total = 0.0
        for i in range(trials):
            record = run_simulation(
                faithful(
                    seed=40_000 + i,
                    fault_rate_per_s=mu,
                    checkpoint_policy={"interval_s": 50.0},
                )
            )
            assert record.completed
            total += record.completion_s
        expected = expected_with_checkpoints(mu, 300.0, 6, 6.0)
        assert abs(total / trials - expected) / expected < 0.05

    @pytest.mark.parametrize("mu", [0.0, 0.003, 0.02])
    @pytest.mark.parametrize("policy", [None, {"interval_s": 50.0}, {"segments": 16}])
    def test_system_never_beats_faithful(self, mu, policy):
        for seed in (3, 11, 27, 55):
            ref = run_simulation(
                faithful(seed=seed, fault_rate_per_s=mu, checkpoint_policy=policy)
            )
            sys_record = run_simulation(
                system(seed=seed, fault_rate_per_s=mu, checkpoint_policy=policy)
            )
            assert ref.completed and sys_record.completed
            assert sys_record.completion_s >= ref.completion_s - 1e-9
            assert sys_record.faults == ref.faults

    def test_divergent_rate_hits_cutoff(self):
        record = run_simulation(
            faithful(seed=5, fault_rate_per_s=0.131, cutoff_s=100 * 300.0)
        )
        assert not record.completed
        assert record.completion_s is None
        assert record.virtual_end_s == pytest.approx(30_000.0)
        assert record.faults > 100


class TestDeterminism:
    def test_same_seed_same_record(self):
        config = system(seed=77, fault_rate_per_s=0.01, checkpoint_policy={"interval_s": 50.0})
        a = run_simulation(config)
        b = run_simulation(config)
        assert a == b

    def test_different_seeds_differ(self):
        a = run_simulation(faithful(seed=1, fault_rate_per_s=0.02))
        b = run_simulation(faithful(seed=2, fault_rate_per_s=0.02))
        assert a.completion_s != b.completion_s


class TestFailover:
    def test_worker_kill_recovers_with_standby(self):
        base = run_simulation(system(seed=42, checkpoint_policy={"interval_s": 50.0}))
        record = run_simulation(
            system(
                seed=42,
                checkpoint_policy={"interval_s": 50.0},
                workers=2,
                scripted_kills=((137.0, "w1"),),
                restart_killed_workers=False,
            )
        )
        assert record.completed
        assert record.result == base.result
        assert record.result_ready_count == 1
        # at most one checkpoint interval plus the detection timeout is redone
        assert record.reexecuted_s <= 50.0 + 15.0 + 1e-6
        assert record.completion_s > base.completion_s

    def test_worker_kill_recovers_by_restart(self):
        base = run_simulation(system(seed=42, checkpoint_policy={"interval_s": 50.0}))
        record = run_simulation(
            system(
                seed=45,
                checkpoint_policy={"interval_s": 50.0},
                workers=1,
                scripted_kills=((137.0, "w1"),),
            )
        )
        assert record.completed and record.result == base.result

    @pytest.mark.parametrize("kill_at", [0.012, 5.0, 120.0, 311.0])
    def test_primary_kill_mid_job_exactly_one_result(self, kill_at):
        record = run_simulation(
            system(
                seed=91,
                checkpoint_policy={"interval_s": 50.0},
                orchestrators=2,
                scripted_kills=((kill_at, "o1"),),
            )
        )
        assert record.completed
        assert record.result_ready_count == 1

    def test_kill_during_checkpoint_pause_loses_nothing(self):
        # checkpoints at multiples of ~50 s; the pause after the second one
        # spans roughly [106, 112] on seed 42's timeline
        record = run_simulation(
            system(
                seed=42,
                checkpoint_policy={"interval_s": 50.0},
                workers=2,
                scripted_kills=((108.0, "w1"),),
                restart_killed_workers=False,
            )
        )
        assert record.completed
        assert record.reexecuted_s <= 1e-6


class TestEnergy:
    def test_model_validation(self):
        with pytest.raises(ValueError):
            EnergyModel(p_idle_w=5.0, p_active_w=2.0)
        with pytest.raises(ValueError):
            EnergyModel().node_energy_j(total_s=10.0, busy_s=20.0)

    def test_energy_monotone_in_busy_and_total(self):
        model = EnergyModel()
        assert model.node_energy_j(100.0, 50.0) > model.node_energy_j(100.0, 10.0)
        assert model.node_energy_j(200.0, 50.0) > model.node_energy_j(100.0, 50.0)

    def test_run_energy_matches_model(self):
        record = run_simulation(faithful(seed=1, checkpoint_policy={"segments": 16}))
        model = EnergyModel()
        expected = model.fleet_energy_j(record.virtual_end_s, record.busy_by_node)
        assert record.energy_total_j == pytest.approx(expected)
        # worker busy time = steps + pauses
        assert record.busy_by_node["w1"] == pytest.approx(300.0 + 15 * 6.0)

    def test_longer_completion_costs_more_energy(self):
        quick = run_simulation(faithful(seed=3))
        slow = run_simulation(faithful(seed=3, checkpoint_policy={"segments": 16}))
        assert slow.energy_total_j > quick.energy_total_j


class TestCancelAndQueueing:
    def _scenario(self, specs, workers=1, seed=7):
        kernel = SimKernel(seed, delivery_latency_s=0.005)
        orch = OrchestratorNode(
            OrchestratorConfig(name="o1", roster=("o1",), blob_addr="sim")
        )
        kernel.add_node(orch)
        for i in range(workers):
            kernel.add_node(
                WorkerNode(WorkerConfig(worker_id=f"w{i + 1}", checkpoint_pause_s=6.0))
            )
        client = SimClient(ClientProfile(username="c1", jobs=tuple(specs)))
        kernel.add_node(client)
        return kernel, orch, client

    def test_cancel_running_job(self):
        spec = JobSpec(
            name="job",
            program=PROGRAM,
            checkpoint_policy={"interval_s": 50.0},
            cancel_at_s=130.0,
        )
        kernel, orch, client = self._scenario([spec])
        kernel.run(until=400.0)
        record = client.by_name["job"]
        assert record.completed_at is None
        job = orch.store.jobs[record.job_id]
        assert job.status == "canceled"
        assert any(s.get("status") == "canceled" for s in record.statuses)
        # worker stopped executing shortly after the cancel hit
        assert kernel.busy_s["w1"] < 200.0

    def test_two_jobs_one_worker_fifo(self):
        first = JobSpec(name="first", program=PROGRAM, submit_at_s=0.0)
        second = JobSpec(name="second", program=PROGRAM, submit_at_s=1.0)
        kernel, orch, client = self._scenario([first, second])
        kernel.run(until=1000.0, stop_when=client.all_done)
        a, b = client.by_name["first"], client.by_name["second"]
        assert a.completed_at is not None and b.completed_at is not None
        assert a.completed_at < b.completed_at
        # the second job waited for the worker, so it took roughly twice as long
        assert b.completed_at == pytest.approx(600.0, abs=2.0)

    def test_worker_idle_after_cancel_takes_next_job(self):
        first = JobSpec(
            name="first", program=PROGRAM, cancel_at_s=50.0, submit_at_s=0.0
        )
        second = JobSpec(name="second", program=PROGRAM, submit_at_s=1.0)
        kernel, orch, client = self._scenario([first, second])

        def second_done() -> bool:
            record = client.by_name.get("second")
            return record is not None and record.completed_at is not None

        kernel.run(until=1000.0, stop_when=second_done)
        second_rec = client.by_name["second"]
        assert second_rec.completed_at is not None
        # canceled at ~50, so the second job finishes near 50 + 300
        assert second_rec.completed_at == pytest.approx(351.0, abs=3.0)
