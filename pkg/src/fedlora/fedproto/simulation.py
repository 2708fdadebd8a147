# Lint as: python3
"""Run the aggregator and all clients of an experiment inside one process."""

from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Optional, Sequence

from ..data import ClientShard, generate
from ..errors import FedLoraError
from ..identity import ClientIdentity, KeyRegistry, Ledger
from ..lora_model import AdapterSet, BaseModel, pretrain_base
from ..utils.logging import get_logger
from .aggregator import FederatedResult, run_aggregator
from .client import ClientFaults, run_client
from .config import FedConfig
from .transport import make_listener


logger = get_logger(__name__)


def simulation_identities(config: FedConfig) -> Dict[int, ClientIdentity]:
    """Deterministic key pairs for every client of `config`."""
    return {
        client_id: ClientIdentity.from_seed(client_id, f"fedlora-client-{config.seed}-{client_id}".encode("utf-8"))
        for client_id in range(config.clients)
    }


def build_base_model(config: FedConfig) -> BaseModel:
    return pretrain_base(
        config.task,
        seed=config.pretrain_seed(),
        dims=config.model_dims,
        steps=config.pretrain_steps,
        lr=config.pretrain_lr,
    )


def simulate(
    config: FedConfig,
    shards: Optional[Sequence[ClientShard]] = None,
    model: Optional[BaseModel] = None,
    identities: Optional[Dict[int, ClientIdentity]] = None,
    registry: Optional[KeyRegistry] = None,
    faults: Optional[Dict[int, ClientFaults]] = None,
    ledger: Optional[Ledger] = None,
    initial_adapters: Optional[AdapterSet] = None,
    updates_dir=None,
) -> FederatedResult:
    """Run a whole federated experiment with every client in its own thread.

    The transport is `config.transport`; the socket transport binds an ephemeral port on the host of
    `config.listen_address`.

    Args:
        config ([`FedConfig`]): experiment configuration.
        shards (`list` of [`~fedlora.data.ClientShard`], *optional*): defaults to `generate(config.task)`.
        model ([`~fedlora.lora_model.BaseModel`], *optional*): frozen base model, pretrained from `config`
            when omitted.
        identities (`dict`, *optional*): client id to key pair, deterministic per seed when omitted.
        registry ([`~fedlora.identity.KeyRegistry`], *optional*): defaults to the identities' public keys.
        faults (`dict`, *optional*): client id to scripted [`ClientFaults`].

    Returns:
        [`FederatedResult`] with `client_adapters` holding every client's final local adapters.
    """
    shards = list(shards) if shards is not None else generate(config.task)
    model = model if model is not None else build_base_model(config)
    identities = identities or simulation_identities(config)
    if registry is None:
        registry = KeyRegistry({client_id: identity.public_key for client_id, identity in identities.items()})
    faults = faults or {}

    host, _ = config.listen_host_port
    listener = make_listener(config.transport, host=host, port=0)
    try:
        with ThreadPoolExecutor(max_workers=len(shards), thread_name_prefix="fedlora-client") as pool:
            futures = {
                shard.client_id: pool.submit(
                    run_client,
                    config,
                    shard.client_id,
                    shard,
                    listener.connect(timeout=config.registration_timeout),
                    identities[shard.client_id],
                    model,
                    faults.get(shard.client_id),
                )
                for shard in shards
            }
            result = run_aggregator(
                config,
                listener,
                registry,
                ledger=ledger,
                initial_adapters=initial_adapters,
                updates_dir=updates_dir,
            )
            for client_id, future in futures.items():
                try:
                    result.client_adapters[client_id] = future.result()
                except FedLoraError as err:
                    logger.error(f"Client {client_id} failed: {err}")
                    raise
    finally:
        listener.close()
    return result
