# Lint as: python3
"""Client side of the federated round protocol."""

from dataclasses import dataclass
from typing import FrozenSet, Optional, Sequence

from ..data import ClientShard, Example
from ..errors import FedConnectionError, IdentityError, InputError, ProtocolError
from ..identity import ClientIdentity
from ..linalg import derive_seed, rng_for
from ..lora_model import AdapterSet, BaseModel, loss_and_grads, train_step
from ..optimization import OptimizerState
from ..utils.logging import get_logger
from .config import FedConfig
from .messages import Message, MessageKind, adapters_from_message, update_message
from .transport import Connection


logger = get_logger(__name__)


@dataclass(frozen=True)
class ClientFaults:
    """Scripted misbehaviour for fault-handling tests.

    Args:
        silent_rounds: rounds in which the client trains but never uploads.
        forged_rounds: rounds in which the upload is signed with a key that is not the registered one.
    """

    silent_rounds: FrozenSet[int] = frozenset()
    forged_rounds: FrozenSet[int] = frozenset()


def make_optimizer(config: FedConfig, n_k: int) -> OptimizerState:
    """AdamW state whose linear decay spans every local step of the experiment."""
    return OptimizerState(
        lr=config.lr,
        total_steps=max(1, config.total_steps(n_k)),
        betas=config.betas,
        weight_decay=config.weight_decay,
    )


def local_train(
    model: BaseModel,
    adapters: AdapterSet,
    examples: Sequence[Example],
    opt: OptimizerState,
    config: FedConfig,
    seed: int,
    round: int,
) -> AdapterSet:
    """Train `adapters` for `config.local_epochs` epochs over `examples`.

    Micro-batches hold one example; gradients of `config.accumulation` consecutive micro-batches are summed
    and divided by `config.accumulation` before each optimizer step, so a short final group is scaled the
    same way. The example order of every epoch and every dropout mask derive from `seed` and `round`.
    """
    if not examples:
        raise InputError("Cannot train on an empty shard")
    n = len(examples)
    for epoch in range(config.local_epochs):
        order = rng_for(seed, round, epoch).permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, config.accumulation)):
            group = [examples[i] for i in order[start : start + config.accumulation]]
            result = loss_and_grads(
                model, adapters, group, dropout_seed=derive_seed(seed, round, epoch, step), dropout=config.dropout
            )
            # mean over the group times its size is the sum of the micro-batch gradients
            adapters, opt = train_step(adapters, result.grads.scaled(len(group)), opt, config.accumulation)
            losses.append(result.loss)
        logger.debug(f"Round {round} epoch {epoch}: mean training loss {sum(losses) / len(losses):.4f}")
    return adapters


def run_client(
    config: FedConfig,
    client_id: int,
    shard: ClientShard,
    connection: Connection,
    identity: ClientIdentity,
    model: BaseModel,
    faults: Optional[ClientFaults] = None,
) -> AdapterSet:
    """Register with the aggregator and take part in every round until `SHUTDOWN`.

    Each round the received global adapters become the starting point, are trained for `local_epochs`
    epochs over the shard's train split and are uploaded, signed, together with `n_k`. The optimizer moments
    carry over between rounds.

    Returns:
        The adapters after the client's last local training.

    Raises:
        IdentityError: if `identity` has no private key.
        ProtocolError: if the aggregator skips a round or reports an error.
        FedConnectionError: if the aggregator goes silent or disconnects before `SHUTDOWN`.
    """
    faults = faults or ClientFaults()
    if identity.private_key is None:
        raise IdentityError(f"Client {client_id} has no private key to sign updates with")
    if identity.client_id != client_id or shard.client_id != client_id:
        raise InputError(
            f"Identity of client {identity.client_id} and shard of client {shard.client_id} do not match client {client_id}"
        )
    impostor = ClientIdentity.from_seed(client_id, f"impostor-{client_id}".encode("utf-8"))
    seed = config.client_seed(client_id)
    opt = make_optimizer(config, shard.n_k)
    wait = config.registration_timeout + 2 * config.client_timeout

    def receive() -> Message:
        try:
            return connection.recv(timeout=wait)
        except TimeoutError as err:
            raise FedConnectionError(f"Aggregator silent for {wait} s", client_id=client_id) from err
        except FedConnectionError as err:
            raise FedConnectionError(f"Lost the aggregator: {err}", client_id=client_id) from err

    connection.send(Message(MessageKind.REGISTER, 0, client_id))
    ack = receive()
    if ack.kind is MessageKind.ERROR:
        raise ProtocolError(f"Registration of client {client_id} refused: {ack.header['reason']}")
    if ack.kind is not MessageKind.REGISTER_ACK:
        raise ProtocolError(f"Expected REGISTER_ACK, got {ack.kind.value}")
    logger.info(f"Client {client_id} registered with {shard.n_k} training examples")

    last_round = 0
    local: Optional[AdapterSet] = None
    try:
        while True:
            msg = receive()
            if msg.kind is MessageKind.ROUND_START:
                if msg.round != last_round + 1:
                    raise ProtocolError(f"Client {client_id} expected round {last_round + 1}, got {msg.round}")
                last_round = msg.round
                local = local_train(model, adapters_from_message(msg), shard.train, opt, config, seed, msg.round)
                if msg.round in faults.silent_rounds:
                    logger.info(f"Client {client_id} stays silent in round {msg.round}")
                    continue
                signer = impostor if msg.round in faults.forged_rounds else identity
                connection.send(update_message(msg.round, signer, shard.n_k, local))
            elif msg.kind is MessageKind.UPDATE_ACK:
                if not msg.header["accepted"]:
                    logger.warning(f"Client {client_id}: update of round {msg.round} rejected ({msg.header.get('reason')})")
            elif msg.kind is MessageKind.ROUND_COMPLETE:
                logger.debug(f"Client {client_id}: round {msg.round} complete")
            elif msg.kind is MessageKind.SHUTDOWN:
                break
            elif msg.kind is MessageKind.ERROR:
                raise ProtocolError(f"Aggregator reported an error to client {client_id}: {msg.header['reason']}")
            else:
                raise ProtocolError(f"Client {client_id} received unexpected {msg.kind.value}")
    finally:
        connection.close()
    return local
