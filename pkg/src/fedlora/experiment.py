# Lint as: python3
"""End-to-end experiment runner.

An experiment pretrains the frozen base model, then runs any of three variants:

- `baseline`: the base model without adapters,
- `single_client_<k>`: LoRA trained on client `k`'s shard alone for as many local epochs as the federated run
  spends, evaluated on every client's test split,
- `federated`: the full aggregator/client protocol.

It writes a report bundle: per-variant reports, the comparison table, round logs, PCA files, the reward
ledger, adapter files and a manifest with a digest of every artifact.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from multiprocess import Pool

from . import config as fed_constants
from .data import ClientShard, export_shards, generate
from .errors import ConfigError, ExperimentError, FedLoraError
from .evalkit import (
    ComparisonTable,
    EvalReport,
    PcaProjection,
    RoundLogRecord,
    VariantKind,
    compare,
    evaluate_adapters,
    pca_updates,
    round_log,
    save_round_log,
)
from .fedproto import FedConfig, FederatedResult, build_base_model, local_train, make_optimizer, save_adapters, simulate
from .identity import Ledger
from .lora_model import AdapterSet, BaseModel, init_adapters
from .naming import round_dirname, variant_slug
from .saving import save, write_locked, write_manifest
from .utils.logging import get_logger


logger = get_logger(__name__)

BASELINE = "baseline"
FEDERATED = "federated"
SINGLE_CLIENT = "single_client"


def single_client_label(client_id: int) -> str:
    return f"{SINGLE_CLIENT}_{client_id}"


@dataclass
class ExperimentPlan:
    """What to run and where to put the results.

    Args:
        config ([`~fedlora.fedproto.FedConfig`]): experiment configuration.
        output_dir (`str` or `Path`): directory receiving the report bundle.
        variants (`list` of `str`): any of `baseline`, `federated`, `single_client` (every client) and
            `single_client_<k>`.
        parallel_single_client (`bool`): train the single-client variants in worker processes.
        num_proc (`int`, *optional*): number of worker processes, defaults to one per variant.
    """

    config: FedConfig
    output_dir: Path
    variants: Sequence[str] = (BASELINE, SINGLE_CLIENT, FEDERATED)
    parallel_single_client: bool = False
    num_proc: Optional[int] = None

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        if not self.variants:
            raise ConfigError("An experiment plan needs at least one variant")
        self.variants = tuple(self.variants)
        self.single_clients()
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as err:
            raise ConfigError(f"Output directory {self.output_dir} cannot be created: {err}") from err
        if not os.access(self.output_dir, os.W_OK):
            raise ConfigError(f"Output directory {self.output_dir} is not writable")

    def single_clients(self) -> List[int]:
        """Client ids whose single-client variant is requested, in ascending order."""
        client_ids = set()
        for variant in self.variants:
            if variant in (BASELINE, FEDERATED):
                continue
            if variant == SINGLE_CLIENT:
                client_ids.update(range(self.config.clients))
                continue
            prefix = SINGLE_CLIENT + "_"
            suffix = variant[len(prefix) :]
            if not variant.startswith(prefix) or not suffix.isdigit() or int(suffix) >= self.config.clients:
                raise ConfigError(
                    f"Unknown variant '{variant}'; use {BASELINE}, {FEDERATED}, {SINGLE_CLIENT} or "
                    f"{SINGLE_CLIENT}_<k> with k < {self.config.clients}"
                )
            client_ids.add(int(suffix))
        return sorted(client_ids)


@dataclass
class ExperimentBundle:
    """In-memory view of what [`run_experiment`] wrote."""

    output_dir: Path
    reports: List[EvalReport] = field(default_factory=list)
    table: Optional[ComparisonTable] = None
    round_log: List[RoundLogRecord] = field(default_factory=list)
    pca: Dict[int, PcaProjection] = field(default_factory=dict)
    federated: Optional[FederatedResult] = None
    ledger: Optional[Ledger] = None
    manifest: Optional[Path] = None


def train_single_client(
    config: FedConfig, model: BaseModel, shard: ClientShard, initial_adapters: AdapterSet
) -> AdapterSet:
    """LoRA trained on one shard for `rounds x local_epochs` epochs, with no aggregation in between."""
    adapters = initial_adapters
    opt = make_optimizer(config, shard.n_k)
    seed = config.client_seed(shard.client_id)
    for round in range(1, config.rounds + 1):
        adapters = local_train(model, adapters, shard.train, opt, config, seed, round)
    return adapters


def _train_single_client_star(args):
    return train_single_client(*args)


def _initial_adapters(config: FedConfig) -> AdapterSet:
    return init_adapters(
        config.model_dims,
        targets=config.targets,
        rank=config.rank,
        alpha=config.alpha,
        scaling_mode=config.scaling_mode,
        seed=config.adapter_seed(),
    )


def _save_report(report: EvalReport, reports_dir: Path) -> Path:
    return save(reports_dir / f"{variant_slug(report.label)}.json", **report.to_dict())


def _run_single_clients(
    plan: ExperimentPlan, model: BaseModel, shards: List[ClientShard], initial: AdapterSet
) -> List[Tuple[int, AdapterSet]]:
    client_ids = plan.single_clients()
    jobs = [(plan.config, model, shards[client_id], initial) for client_id in client_ids]
    if plan.parallel_single_client and len(jobs) > 1:
        logger.info(f"Training {len(jobs)} single-client variants in parallel")
        with Pool(processes=plan.num_proc or len(jobs)) as pool:
            trained = pool.map(_train_single_client_star, jobs)
        return list(zip(client_ids, trained))
    results = []
    for client_id, job in zip(client_ids, jobs):
        try:
            results.append((client_id, train_single_client(*job)))
        except FedLoraError as err:
            raise ExperimentError(
                f"Single-client variant failed: {err}", variant=single_client_label(client_id)
            ) from err
    return results


def _run_federated(plan: ExperimentPlan, model: BaseModel, shards: List[ClientShard], initial: AdapterSet, bundle):
    config = plan.config
    out = plan.output_dir
    ledger_path = Path(config.ledger_path) if config.ledger_path else out / fed_constants.LEDGER_FILENAME
    if ledger_path.exists():
        logger.warning(f"Starting a fresh ledger; removing {ledger_path}")
        ledger_path.unlink()
    ledger = Ledger(path=ledger_path)
    try:
        result = simulate(
            config,
            shards=shards,
            model=model,
            ledger=ledger,
            initial_adapters=initial,
            updates_dir=out / fed_constants.UPDATES_DIRNAME,
        )
    except FedLoraError as err:
        raise ExperimentError(
            f"Federated variant failed: {err}", variant=FEDERATED, round=getattr(err, "round", None)
        ) from err
    bundle.federated = result
    bundle.ledger = ledger

    adapters_dir = out / fed_constants.ADAPTERS_DIRNAME
    for record in result.rounds:
        save_adapters(adapters_dir / f"global-{round_dirname(record.round)}.bin", record.state.adapters, record.round)
        if len(record.updates) >= 2:
            projection = pca_updates(list(record.updates.values()))
            projection.write(out / "pca" / round_dirname(record.round))
            bundle.pca[record.round] = projection
        else:
            logger.warning(f"Round {record.round}: fewer than two accepted updates, no PCA written")
    result.write_summaries(out / fed_constants.ROUND_SUMMARY_FILENAME)

    bundle.round_log = round_log(result, model, shards)
    save_round_log(bundle.round_log, out / fed_constants.ROUND_LOG_FILENAME)

    report_round = config.effective_report_round
    return evaluate_adapters(
        model,
        result.global_adapters(report_round),
        shards,
        label=FEDERATED,
        kind=VariantKind.FEDERATED,
        round=report_round,
    )


def run_experiment(plan: ExperimentPlan) -> ExperimentBundle:
    """Run every variant of `plan` and write the report bundle.

    Results depend only on the configuration and its seeds; rerunning a plan rewrites byte-identical CSV
    files.

    Raises:
        ExperimentError: wrapping any failure, with the variant and, if known, the round it happened in.
    """
    config = plan.config
    out = plan.output_dir
    bundle = ExperimentBundle(output_dir=out)
    config.to_toml(out / fed_constants.CONFIG_FILENAME)

    shards = generate(config.task)
    export_shards(shards, out / fed_constants.SHARDS_DIRNAME)
    try:
        model = build_base_model(config)
    except FedLoraError as err:
        raise ExperimentError(f"Pretraining the base model failed: {err}", variant=BASELINE) from err
    initial = _initial_adapters(config)
    reports_dir = out / fed_constants.REPORTS_DIRNAME

    if BASELINE in plan.variants:
        bundle.reports.append(evaluate_adapters(model, AdapterSet(), shards, label=BASELINE, kind=VariantKind.BASELINE))

    for client_id, adapters in _run_single_clients(plan, model, shards, initial):
        label = single_client_label(client_id)
        save_adapters(out / fed_constants.ADAPTERS_DIRNAME / f"{label}.bin", adapters, config.rounds)
        bundle.reports.append(
            evaluate_adapters(model, adapters, shards, label=label, kind=VariantKind.SINGLE_CLIENT, client=client_id)
        )

    if FEDERATED in plan.variants:
        bundle.reports.append(_run_federated(plan, model, shards, initial, bundle))

    for report in bundle.reports:
        _save_report(report, reports_dir)
    bundle.table = compare(bundle.reports)
    write_locked(out / fed_constants.COMPARISON_CSV_FILENAME, bundle.table.to_csv().encode("utf-8"))
    write_locked(out / fed_constants.COMPARISON_TEXT_FILENAME, bundle.table.to_text().encode("utf-8"))
    bundle.manifest = write_manifest(out)
    logger.info(f"Experiment finished; {len(bundle.reports)} variants written to {out}")
    return bundle
