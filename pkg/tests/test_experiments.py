"""Experiment suite outputs: schemas, overlays, reruns, registry."""

import os

import pytest

from offq.simlab.experiments import (
    CSV_COLUMNS,
    checkpoint_overhead,
    mu_sweep,
    optimal_frequency,
    run_experiment_suite,
)


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestCheckpointOverhead:
    def test_means_and_delta(self, tmp_path):
        report = checkpoint_overhead(str(tmp_path), trials=3, seed=0)
        bare = report.arm("bare")
        ckpt = report.arm("sixteen_segments")
        assert bare.mean_completion_s == 300.0
        assert ckpt.mean_completion_s == 390.0
        assert ckpt.mean_completion_s - bare.mean_completion_s == 90.0
        assert bare.expected_completion_s == 300.0
        assert ckpt.expected_completion_s == 390.0
        assert ckpt.mean_energy_j > bare.mean_energy_j

    def test_csv_schema(self, tmp_path):
        report = checkpoint_overhead(str(tmp_path), trials=2, seed=0)
        lines = read(report.csv_path).decode().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 1 + 2 * 2
        first = dict(zip(CSV_COLUMNS, lines[1].split(",")))
        assert first["mode"] == "model_faithful"
        assert first["completion_s"] == "300.0"
        assert first["checkpoints"] == "0"

    def test_dat_mirror(self, tmp_path):
        report = checkpoint_overhead(str(tmp_path), trials=2, seed=0)
        csv_lines = read(report.csv_path).decode().splitlines()
        dat_lines = read(report.dat_path).decode().splitlines()
        assert len(dat_lines) == len(csv_lines)
        assert dat_lines[0].startswith("# run_id mode")
        assert dat_lines[1].split() == csv_lines[1].split(",")

    def test_plot_script_only_on_request(self, tmp_path):
        report = checkpoint_overhead(str(tmp_path), trials=1, seed=0)
        assert report.plot_path is None
        report = checkpoint_overhead(str(tmp_path), trials=1, seed=0, plot_script=True)
        assert report.plot_path is not None
        text = read(report.plot_path).decode()
        assert "plot" in text and "checkpoint_overhead.dat" in text


class TestOptimalFrequency:
    def test_arm_ordering_and_overlay(self, tmp_path):
        report = optimal_frequency(str(tmp_path), trials=200, seed=0)
        bare = report.arm("bare")
        every = report.arm("every_50s")
        sixteen = report.arm("sixteen_segments")
        assert every.mean_completion_s < sixteen.mean_completion_s
        assert sixteen.mean_completion_s < bare.mean_completion_s
        assert bare.expected_completion_s == pytest.approx(486.534, abs=1e-2)
        assert every.expected_completion_s == pytest.approx(353.668, abs=1e-2)
        assert sixteen.expected_completion_s == pytest.approx(398.598, abs=1e-2)
        assert every.segments == 6 and every.checkpoints == 5
        assert sixteen.segments == 16 and sixteen.checkpoints == 15

    def test_summary_file(self, tmp_path):
        report = optimal_frequency(str(tmp_path), trials=20, seed=3)
        lines = read(report.summary_path).decode().splitlines()
        assert lines[0].startswith("arm,mu,segments,")
        assert [ln.split(",")[0] for ln in lines[1:]] == [
            "bare",
            "every_50s",
            "sixteen_segments",
        ]


class TestMuSweep:
    def test_zero_rate_completes_at_t(self, tmp_path):
        report = mu_sweep(str(tmp_path), trials=3, seed=0, mus=(0.0,))
        arm = report.arm("mu_0")
        assert arm.completed == 3
        assert arm.mean_completion_s == 300.0

    def test_divergent_rate_hits_cutoff(self, tmp_path):
        report = mu_sweep(str(tmp_path), trials=2, seed=0, mus=(0.131,))
        arm = report.arm("mu_0.131")
        assert arm.completed == 0
        assert arm.mean_completion_s is None
        csv_lines = read(report.csv_path).decode().splitlines()
        row = dict(zip(CSV_COLUMNS, csv_lines[1].split(",")))
        assert row["completion_s"] == ""
        assert int(row["faults"]) > 100
        dat_row = read(report.dat_path).decode().splitlines()[1].split()
        assert dat_row[CSV_COLUMNS.index("completion_s")] == "nan"


class TestReruns:
    def test_rerun_is_byte_identical(self, tmp_path):
        a = checkpoint_overhead(str(tmp_path / "a"), trials=3, seed=9)
        b = checkpoint_overhead(str(tmp_path / "b"), trials=3, seed=9)
        for pa, pb in (
            (a.csv_path, b.csv_path),
            (a.dat_path, b.dat_path),
            (a.summary_path, b.summary_path),
        ):
            assert read(pa) == read(pb)

    def test_seed_changes_fault_runs(self, tmp_path):
        a = optimal_frequency(str(tmp_path / "a"), trials=5, seed=1)
        b = optimal_frequency(str(tmp_path / "b"), trials=5, seed=2)
        assert read(a.csv_path) != read(b.csv_path)


class TestRegistry:
    def test_dispatch_by_name(self, tmp_path):
        report = run_experiment_suite(
            "checkpoint_overhead", str(tmp_path), trials=1, seed=0
        )
        assert report.name == "checkpoint_overhead"
        assert os.path.exists(report.csv_path)

    def test_unknown_name_lists_registered(self, tmp_path):
        with pytest.raises(ValueError, match="checkpoint_overhead.*mu_sweep"):
            run_experiment_suite("nope", str(tmp_path))
