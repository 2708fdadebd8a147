import argparse
import sys
from pathlib import Path

from fedlora import config as fed_constants
from fedlora.data import generate
from fedlora.errors import ConfigError, FedLoraError
from fedlora.evalkit import VariantKind, compare, evaluate_adapters, pca_updates
from fedlora.experiment import BASELINE, ExperimentPlan, run_experiment
from fedlora.fedproto import (
    FedConfig,
    build_base_model,
    connect_socket,
    load_adapters,
    load_frame,
    run_aggregator,
    run_client,
    save_adapters,
    simulate,
    update_from_message,
)
from fedlora.fedproto.transport import SocketListener
from fedlora.identity import ClientIdentity, KeyRegistry, Ledger
from fedlora.lora_model import AdapterSet
from fedlora.naming import round_dirname
from fedlora.saving import write_locked
from fedlora.utils import logging


logger = logging.get_logger(__name__)


def _load_config(args) -> FedConfig:
    path = args.config or fed_constants.DEFAULT_CONFIG_PATH
    return FedConfig.from_toml(path)


def _registry_path(args, fed_config: FedConfig) -> Path:
    path = getattr(args, "registry", None) or fed_config.registry_path
    if path is None:
        raise ConfigError("No key registry given; pass --registry or set 'registry_path' in the config")
    return Path(path)


def keygen(args) -> int:
    identity = ClientIdentity.generate(args.client_id)
    registry_path = Path(args.out) / fed_constants.REGISTRY_FILENAME
    registry = KeyRegistry.load(registry_path) if registry_path.exists() else KeyRegistry()
    registry.register(args.client_id, identity.public_key)
    private_path, public_path = identity.save(args.out)
    registry.save(registry_path)
    print(f"Wrote {private_path} and {public_path}; registered client {args.client_id} in {registry_path}")
    return 0


def aggregate(args) -> int:
    fed_config = _load_config(args)
    registry = KeyRegistry.load(_registry_path(args, fed_config))
    out = Path(args.out)
    ledger = Ledger.load(fed_config.ledger_path or out / fed_constants.LEDGER_FILENAME)
    listener = SocketListener(*fed_config.listen_host_port)
    try:
        result = run_aggregator(
            fed_config, listener, registry, ledger=ledger, updates_dir=out / fed_constants.UPDATES_DIRNAME
        )
    finally:
        listener.close()
    for record in result.rounds:
        save_adapters(
            out / fed_constants.ADAPTERS_DIRNAME / f"global-{round_dirname(record.round)}.bin",
            record.state.adapters,
            record.round,
        )
    result.write_summaries(out / fed_constants.ROUND_SUMMARY_FILENAME)
    print(f"Completed {len(result.rounds)} rounds; ledger balances {ledger.balances()}")
    return 0


def client(args) -> int:
    fed_config = _load_config(args)
    key_dir = args.keys or fed_config.key_dir
    if key_dir is None:
        raise ConfigError("No key directory given; pass --keys or set 'key_dir' in the config")
    identity = ClientIdentity.load(key_dir, args.client_id)
    shards = generate(fed_config.task)
    if not 0 <= args.client_id < len(shards):
        raise ConfigError(f"Client id {args.client_id} is outside [0, {len(shards)})")
    model = build_base_model(fed_config)
    connection = connect_socket(*fed_config.listen_host_port, timeout=fed_config.registration_timeout)
    adapters = run_client(fed_config, args.client_id, shards[args.client_id], connection, identity, model)
    if args.out:
        save_adapters(args.out, adapters, fed_config.rounds)
    print(f"Client {args.client_id} finished after {fed_config.rounds} rounds")
    return 0


def simulate_command(args) -> int:
    fed_config = _load_config(args)
    if args.transport:
        fed_config.transport = args.transport
    out = Path(args.out) if args.out else None
    ledger = Ledger()
    if out:
        ledger_path = out / fed_constants.LEDGER_FILENAME
        if ledger_path.exists():
            logger.warning(f"Starting a fresh ledger; removing {ledger_path}")
            ledger_path.unlink()
        ledger = Ledger(path=ledger_path)
    result = simulate(fed_config, ledger=ledger, updates_dir=out / fed_constants.UPDATES_DIRNAME if out else None)
    if out:
        result.write_summaries(out / fed_constants.ROUND_SUMMARY_FILENAME)
    for record in result.rounds:
        summary = record.summary()
        print(
            f"round {summary['round']}: accepted {summary['accepted']} stragglers {summary['stragglers']} "
            f"rejected {sorted(summary['rejected'])}"
        )
    return 0


def run(args) -> int:
    plan = ExperimentPlan(
        config=_load_config(args),
        output_dir=args.out,
        variants=args.variants,
        parallel_single_client=args.parallel,
        num_proc=args.num_proc,
    )
    bundle = run_experiment(plan)
    print(bundle.table.to_text(), end="")
    return 0


def _kind_for(label: str) -> VariantKind:
    if label.startswith("single_client"):
        return VariantKind.SINGLE_CLIENT
    return VariantKind.FEDERATED


def eval_command(args) -> int:
    fed_config = _load_config(args)
    shards = generate(fed_config.task)
    model = build_base_model(fed_config)
    reports = [evaluate_adapters(model, AdapterSet(), shards, label=BASELINE, kind=VariantKind.BASELINE)]
    for path in args.adapters:
        label = Path(path).stem
        reports.append(evaluate_adapters(model, load_adapters(path), shards, label=label, kind=_kind_for(label)))
    table = compare(reports)
    print(table.to_text(), end="")
    write_locked(args.csv, table.to_csv().encode("utf-8"))
    return 0


def pca_command(args) -> int:
    fed_config = _load_config(args)
    updates_dir = Path(args.updates)
    updates = []
    for path in sorted(updates_dir.glob("*.bin")):
        update, _ = update_from_message(load_frame(path), fed_config.alpha, fed_config.scaling_mode)
        updates.append(update)
    projection = pca_updates(updates)
    points, variance = projection.write(args.out or updates_dir)
    print(projection.points_frame().to_string(index=False))
    print(f"Wrote {points} and {variance}")
    return 0


def ledger_command(args) -> int:
    if not Path(args.path).is_file():
        print(f"No ledger at {args.path}")
        return 1
    broken = Ledger.validate_file(args.path)
    if broken is not None:
        print(f"Ledger {args.path} is broken at entry {broken}")
        return 1
    ledger = Ledger.load(args.path)
    print(f"Ledger {args.path} holds {len(ledger)} valid entries; balances {ledger.balances()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser("fedlora CLI tool", usage="fedlora <command> [<args>]")
    parser.add_argument("--verbosity", default=None, choices=sorted(logging.log_levels), help="Library log level.")
    subparsers = parser.add_subparsers(dest="command")

    def with_config(sub):
        sub.add_argument("--config", type=str, default=None, help="Path to a TOML experiment configuration.")
        return sub

    parser_keygen = subparsers.add_parser("keygen", help="Create a client key pair and register its public key.")
    parser_keygen.add_argument("--client-id", type=int, required=True)
    parser_keygen.add_argument("--out", type=str, required=True, help="Directory for key files and registry.json.")
    parser_keygen.set_defaults(func=keygen)

    parser_aggregate = with_config(subparsers.add_parser("aggregate", help="Run the aggregator over TCP."))
    parser_aggregate.add_argument("--registry", type=str, default=None, help="Path to registry.json.")
    parser_aggregate.add_argument("--out", type=str, default=".", help="Directory for the ledger and adapters.")
    parser_aggregate.set_defaults(func=aggregate)

    parser_client = with_config(subparsers.add_parser("client", help="Run one client over TCP."))
    parser_client.add_argument("--client-id", type=int, required=True)
    parser_client.add_argument("--keys", type=str, default=None, help="Directory holding client_<k>.key.")
    parser_client.add_argument("--out", type=str, default=None, help="File for the final local adapters.")
    parser_client.set_defaults(func=client)

    parser_simulate = with_config(subparsers.add_parser("simulate", help="Run every role in one process."))
    parser_simulate.add_argument("--transport", choices=["in_process", "socket"], default=None)
    parser_simulate.add_argument("--out", type=str, default=None)
    parser_simulate.set_defaults(func=simulate_command)

    parser_run = with_config(subparsers.add_parser("run", help="Run a full experiment and write the report bundle."))
    parser_run.add_argument("--out", type=str, required=True)
    parser_run.add_argument(
        "--variants", nargs="+", default=["baseline", "single_client", "federated"], help="Variants to run."
    )
    parser_run.add_argument("--parallel", action="store_true", help="Train single-client variants in parallel.")
    parser_run.add_argument("--num-proc", type=int, default=None)
    parser_run.set_defaults(func=run)

    parser_eval = with_config(subparsers.add_parser("eval", help="Compare adapter files against the base model."))
    parser_eval.add_argument("--adapters", nargs="+", required=True)
    parser_eval.add_argument("--csv", type=str, default=fed_constants.COMPARISON_CSV_FILENAME)
    parser_eval.set_defaults(func=eval_command)

    parser_pca = with_config(subparsers.add_parser("pca", help="PCA of the client updates of one round."))
    parser_pca.add_argument("--updates", type=str, required=True, help="Round directory of update frames.")
    parser_pca.add_argument("--out", type=str, default=None)
    parser_pca.set_defaults(func=pca_command)

    parser_ledger = subparsers.add_parser("ledger", help="Validate a reward ledger and print balances.")
    parser_ledger.add_argument("--path", type=str, required=True)
    parser_ledger.set_defaults(func=ledger_command)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbosity:
        logging.set_verbosity(args.verbosity)
    if not getattr(args, "func", None):
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except FedLoraError as err:
        logger.error(f"{args.command} failed: {err}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
