import json

import pandas as pd
import pytest

from fedlora.commands.fedlora_cli import build_parser, main
from fedlora.fedproto import FedConfig, save_adapters
from fedlora.identity import KeyRegistry, Ledger
from fedlora.lora_model import init_adapters

from .utils import tiny_config


@pytest.fixture
def config_path(config, tmp_path):
    return str(config.to_toml(tmp_path / "tiny.toml"))


def test_no_command():
    assert main([]) == 1


def test_parser_defaults():
    args = build_parser().parse_args(["run", "--out", "bundle"])
    assert args.variants == ["baseline", "single_client", "federated"]
    assert not args.parallel
    assert args.config is None


def test_keygen(tmp_path):
    assert main(["keygen", "--client-id", "0", "--out", str(tmp_path)]) == 0
    assert main(["keygen", "--client-id", "1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "client_0.key").is_file()
    assert (tmp_path / "client_1.pub").is_file()
    assert KeyRegistry.load(tmp_path / "registry.json").client_ids == [0, 1]
    # a second key for a registered client conflicts
    assert main(["keygen", "--client-id", "1", "--out", str(tmp_path)]) == 1


def test_simulate_then_pca_and_ledger(config_path, tmp_path, capsys):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", config_path, "--out", str(out)]) == 0
    assert "round 2: accepted [0, 1, 2]" in capsys.readouterr().out
    assert len((out / "round_summary.jsonl").read_text().splitlines()) == 2
    assert sorted(path.name for path in (out / "updates" / "round-1").glob("*.bin")) == [
        "client_0.bin",
        "client_1.bin",
        "client_2.bin",
    ]

    assert main(["simulate", "--config", config_path, "--out", str(out)]) == 0
    assert len(Ledger.load(out / "ledger.jsonl")) == 6

    pca_dir = tmp_path / "pca"
    assert main(["pca", "--config", config_path, "--updates", str(out / "updates" / "round-2"), "--out", str(pca_dir)]) == 0
    assert list(pd.read_csv(pca_dir / "pca_points.csv")["client_id"]) == [0, 1, 2]

    ledger_path = out / "ledger.jsonl"
    assert main(["ledger", "--path", str(ledger_path)]) == 0
    lines = ledger_path.read_bytes().splitlines(keepends=True)
    entry = json.loads(lines[3])
    entry["reward"] = 1000
    lines[3] = json.dumps(entry, separators=(",", ":")).encode("utf-8") + b"\n"
    ledger_path.write_bytes(b"".join(lines))
    assert main(["ledger", "--path", str(ledger_path)]) == 1
    assert "broken at entry 3" in capsys.readouterr().out
    assert main(["ledger", "--path", str(tmp_path / "missing.jsonl")]) == 1


def test_eval(config, config_path, tmp_path):
    adapters = init_adapters(config.model_dims, rank=config.rank, alpha=config.alpha, seed=1)
    adapter_path = save_adapters(tmp_path / "federated.bin", adapters)
    csv_path = tmp_path / "table.csv"
    assert main(["eval", "--config", config_path, "--adapters", str(adapter_path), "--csv", str(csv_path)]) == 0
    table = pd.read_csv(csv_path)
    assert list(table["variant"]) == ["baseline", "federated"]
    # B = 0 leaves the base model unchanged
    assert table.loc[1, "delta_baseline_macro_acc"] == 0.0


def test_run_baseline(config_path, tmp_path, capsys):
    out = tmp_path / "bundle"
    assert main(["run", "--config", config_path, "--out", str(out), "--variants", "baseline"]) == 0
    assert (out / "comparison.csv").is_file()
    assert (out / "manifest.json").is_file()
    assert "baseline" in capsys.readouterr().out


def test_run_rejects_unknown_variant(config_path, tmp_path):
    assert main(["run", "--config", config_path, "--out", str(tmp_path / "x"), "--variants", "bogus"]) == 1


def test_config_round_trip(tmp_path):
    config = tiny_config(rounds=4, weighting="uniform", transport="socket")
    assert FedConfig.from_toml(config.to_toml(tmp_path / "c.toml")) == config


def test_seed_override(tmp_path, monkeypatch):
    path = tiny_config(seed=3).to_toml(tmp_path / "c.toml")
    monkeypatch.setenv("FEDLORA_SEED", "11")
    loaded = FedConfig.from_toml(path)
    assert loaded.seed == 11
    assert loaded.task.seed == 11


def test_model_table_and_unknown_keys(tmp_path, caplog):
    path = tmp_path / "c.toml"
    path.write_text('rounds = 2\nflavour = "x"\n[model]\nd = 8\nh = 12\n[task]\nclients = 2\nclient_sizes = [5, 7]\n')
    loaded = FedConfig.from_toml(path)
    assert (loaded.d, loaded.h, loaded.rounds, loaded.clients) == (8, 12, 2, 2)
    assert "flavour" in caplog.text
