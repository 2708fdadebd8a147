import dataclasses
import json
from unittest import TestCase

import pytest

from fedlora.errors import ConfigError
from fedlora.evalkit import ComparisonTable
from fedlora.experiment import ExperimentPlan, run_experiment
from fedlora.fedproto import FedConfig
from fedlora.identity import Ledger
from fedlora.saving import verify_manifest

from .utils import require_socket, set_current_working_directory_to_temp_dir, slow


def test_baseline_only(config, tmp_path):
    bundle = run_experiment(ExperimentPlan(config, tmp_path, variants=["baseline"]))
    assert bundle.table.labels == ["baseline"]
    assert not (tmp_path / "ledger.jsonl").exists()
    assert not (tmp_path / "updates").exists()
    assert (tmp_path / "reports" / "baseline.json").is_file()
    assert sorted(path.name for path in (tmp_path / "shards").iterdir())[:2] == ["client_0-test.txt", "client_0-train.txt"]
    assert FedConfig.from_toml(tmp_path / "config.toml") == config
    assert verify_manifest(tmp_path) == []


def test_full_run(config, tmp_path):
    bundle = run_experiment(ExperimentPlan(config, tmp_path))
    labels = ["baseline", "single_client_0", "single_client_1", "single_client_2", "federated"]
    assert bundle.table.labels == labels
    assert sorted(path.stem for path in (tmp_path / "reports").glob("*.json")) == sorted(labels)

    ledger = Ledger.load(tmp_path / "ledger.jsonl")
    assert len(ledger) == config.rounds * config.clients
    assert Ledger.validate_file(tmp_path / "ledger.jsonl") is None

    for round in (1, 2):
        assert (tmp_path / "pca" / f"round-{round}" / "pca_points.csv").is_file()
        assert (tmp_path / "adapters" / f"global-round-{round}.bin").is_file()
    assert len((tmp_path / "round_log.jsonl").read_text().splitlines()) == 2
    assert len((tmp_path / "round_summary.jsonl").read_text().splitlines()) == 2

    table = ComparisonTable.from_csv((tmp_path / "comparison.csv").read_text())
    assert table.best_single in labels[1:4]
    assert table.delta("federated", "macro_acc", against="baseline") == pytest.approx(
        bundle.reports[-1].macro_acc - bundle.reports[0].macro_acc
    )

    with open(tmp_path / "manifest.json") as f:
        listed = json.load(f)["files"]
    assert "comparison.csv" in listed and "ledger.jsonl" in listed
    assert verify_manifest(tmp_path) == []


def test_rerun_is_byte_identical(config, tmp_path):
    variants = ["baseline", "single_client_1", "federated"]
    run_experiment(ExperimentPlan(config, tmp_path / "first", variants=variants))
    run_experiment(ExperimentPlan(config, tmp_path / "second", variants=variants))
    for name in ("comparison.csv", "ledger.jsonl", "round_summary.jsonl"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()


@slow
def test_parallel_single_client_matches_serial(config, tmp_path):
    serial = run_experiment(ExperimentPlan(config, tmp_path / "serial", variants=["single_client"]))
    parallel = run_experiment(
        ExperimentPlan(config, tmp_path / "parallel", variants=["single_client"], parallel_single_client=True, num_proc=2)
    )
    assert serial.table.to_csv() == parallel.table.to_csv()


class TestExperimentPlan(TestCase):
    def test_invalid_variants(self):
        with set_current_working_directory_to_temp_dir():
            for variants in ([], ["bogus"], ["single_client_3"], ["single_client_x"]):
                with self.assertRaises(ConfigError):
                    ExperimentPlan(FedConfig(), "out", variants=variants)

    def test_single_clients(self):
        with set_current_working_directory_to_temp_dir():
            plan = ExperimentPlan(FedConfig(), "out", variants=["single_client_2", "federated", "single_client_0"])
            self.assertEqual(plan.single_clients(), [0, 2])
            self.assertEqual(ExperimentPlan(FedConfig(), "out").single_clients(), [0, 1, 2])


@require_socket
def test_transports_give_identical_tables(config, tmp_path):
    config = dataclasses.replace(config, rounds=3)
    variants = ["baseline", "federated"]
    run_experiment(ExperimentPlan(config, tmp_path / "in_process", variants=variants))
    run_experiment(ExperimentPlan(dataclasses.replace(config, transport="socket"), tmp_path / "socket", variants=variants))
    assert (tmp_path / "in_process" / "comparison.csv").read_bytes() == (tmp_path / "socket" / "comparison.csv").read_bytes()


def _default_runs(tmp_path):
    for seed in range(5):
        config = FedConfig().with_seed(seed)
        yield run_experiment(ExperimentPlan(config, tmp_path / f"seed-{seed}"))


@slow
def test_federated_min_acc_beats_best_single_client(tmp_path):
    wins, h_mean_gaps = 0, []
    for bundle in _default_runs(tmp_path):
        table = bundle.table
        wins += table.delta("federated", "min_acc") >= 0.0
        h_mean_gaps.append(table.delta("federated", "h_mean"))
    assert wins >= 4
    assert sum(h_mean_gaps) / len(h_mean_gaps) >= -0.01


@slow
def test_round_one_dip_and_recovery(tmp_path):
    dips, recovered = 0, 0
    for bundle in _default_runs(tmp_path):
        first, last = bundle.round_log[0], bundle.round_log[-1]
        dips += first.round1_dip
        recovered += last.global_report.macro_acc >= first.global_report.macro_acc
    assert dips >= 1
    assert recovered >= 4
