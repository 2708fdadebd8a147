# Lint as: python3
"""Aggregator side of the federated round protocol.

One acceptor thread per client connection funnels incoming messages into a queue; the round state is owned
by the thread running [`run_aggregator`], which also performs aggregation. Each round walks through the
phases `broadcasting -> collecting -> aggregating -> done`:

- the current global adapters are broadcast (round 1 carries `B = 0` and a seeded `A`),
- updates are collected until every expected client has answered or the round deadline passes,
- signatures are verified and only verified updates are aggregated,
- every accepted update is credited in the reward ledger.

Clients that miss the deadline are stragglers for that round only.
"""

import enum
import json
import queue
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional

from .. import config as fed_constants
from ..aggregation import ClientUpdate, GlobalAdapterState, aggregate
from ..errors import FedConnectionError, ProtocolError, RoundFailureError
from ..identity import KeyRegistry, Ledger, verify_update
from ..lora_model import AdapterSet, init_adapters
from ..naming import client_name, round_dirname
from ..saving import write_locked
from ..utils.logging import get_logger
from .config import FedConfig
from .messages import (
    Message,
    MessageKind,
    error_message,
    round_start_message,
    save_frame,
    update_from_message,
)
from .transport import Connection, Listener


logger = get_logger(__name__)


class RoundPhase(str, enum.Enum):
    BROADCASTING = "broadcasting"
    COLLECTING = "collecting"
    AGGREGATING = "aggregating"
    DONE = "done"


_PHASE_ORDER = list(RoundPhase)


@dataclass
class RoundState:
    """Single-owner state of one round. Phases only move forward."""

    round: int
    expected_clients: FrozenSet[int]
    deadline: float
    received: Dict[int, ClientUpdate] = field(default_factory=dict)
    phase: RoundPhase = RoundPhase.BROADCASTING
    history: List[RoundPhase] = field(default_factory=lambda: [RoundPhase.BROADCASTING])

    def advance(self, phase: RoundPhase) -> None:
        phase = RoundPhase(phase)
        if _PHASE_ORDER.index(phase) <= _PHASE_ORDER.index(self.phase):
            raise ProtocolError(f"Round {self.round} cannot move from '{self.phase.value}' back to '{phase.value}'")
        self.phase = phase
        self.history.append(phase)

    def accept(self, update: ClientUpdate) -> None:
        if self.phase is not RoundPhase.COLLECTING:
            raise ProtocolError(f"Round {self.round} is not collecting updates (phase '{self.phase.value}')")
        if update.round != self.round:
            raise ProtocolError(f"Update for round {update.round} offered to round {self.round}")
        if update.client_id not in self.expected_clients:
            raise ProtocolError(f"Client {update.client_id} is not expected in round {self.round}")
        self.received[update.client_id] = update

    def remaining(self) -> float:
        return max(0.0, self.deadline - time.monotonic())


@dataclass
class RoundRecord:
    """Outcome of one completed round."""

    round: int
    state: GlobalAdapterState
    updates: Dict[int, ClientUpdate]
    stragglers: List[int]
    rejected: Dict[int, str]
    phases: List[str]

    def summary(self) -> dict:
        return {
            "round": self.round,
            "accepted": sorted(self.updates),
            "stragglers": list(self.stragglers),
            "rejected": {str(k): v for k, v in sorted(self.rejected.items())},
            "weights": {str(k): w for k, w in self.state.weights.items()},
            "residual_norms": dict(self.state.residual_norms),
            "phases": list(self.phases),
        }


@dataclass
class FederatedResult:
    """Everything a federated run produced. `client_adapters` is filled by [`simulate`]."""

    initial_adapters: AdapterSet
    rounds: List[RoundRecord] = field(default_factory=list)
    ledger: Ledger = field(default_factory=Ledger)
    sent: Counter = field(default_factory=Counter)
    received: Counter = field(default_factory=Counter)
    client_adapters: Dict[int, AdapterSet] = field(default_factory=dict)

    def global_adapters(self, round: int = 0) -> AdapterSet:
        """Global adapters after `round`; `0` selects the last completed round."""
        if not self.rounds:
            raise ProtocolError("No round has completed")
        if round == 0:
            return self.rounds[-1].state.adapters
        for record in self.rounds:
            if record.round == round:
                return record.state.adapters
        raise ProtocolError(f"Round {round} did not complete; completed rounds: {[r.round for r in self.rounds]}")

    def write_summaries(self, path) -> Path:
        lines = "".join(json.dumps(record.summary(), sort_keys=True) + "\n" for record in self.rounds)
        return write_locked(path, lines.encode("utf-8"))


class _Session:
    """Connections of the registered clients and the queue their reader threads feed."""

    def __init__(self):
        self.connections: Dict[int, Connection] = {}
        self.inbox: queue.Queue = queue.Queue()
        self.dead: set = set()

    def start_reader(self, client_id: int, connection: Connection) -> None:
        def read():
            while True:
                try:
                    msg = connection.recv(timeout=None)
                except (FedConnectionError, ProtocolError) as err:
                    self.inbox.put((client_id, err))
                    return
                self.inbox.put((client_id, msg))

        self.connections[client_id] = connection
        threading.Thread(target=read, name=f"fedlora-reader-{client_id}", daemon=True).start()

    @property
    def live(self) -> List[int]:
        return [client_id for client_id in sorted(self.connections) if client_id not in self.dead]

    def close(self) -> None:
        for connection in self.connections.values():
            connection.close()


class Aggregator:
    """Runs the round protocol over clients connecting to `listener`.

    Args:
        config ([`FedConfig`]): experiment configuration.
        listener ([`~fedproto.transport.Listener`]): where clients connect.
        registry ([`~fedlora.identity.KeyRegistry`]): public keys used to verify updates.
        ledger ([`~fedlora.identity.Ledger`], *optional*): reward ledger, in memory by default.
        initial_adapters ([`~fedlora.lora_model.AdapterSet`], *optional*): round-1 broadcast. Defaults to
            `init_adapters` seeded from the configuration, with `B = 0`.
        updates_dir (`str` or `Path`, *optional*): if given, accepted update frames are stored as
            `round-<t>/client_<k>.bin` below it.
    """

    def __init__(
        self,
        config: FedConfig,
        listener: Listener,
        registry: KeyRegistry,
        ledger: Optional[Ledger] = None,
        initial_adapters: Optional[AdapterSet] = None,
        updates_dir=None,
    ):
        self.config = config
        self.listener = listener
        self.registry = registry
        self.ledger = ledger if ledger is not None else Ledger()
        self.initial_adapters = initial_adapters or init_adapters(
            config.model_dims,
            targets=config.targets,
            rank=config.rank,
            alpha=config.alpha,
            scaling_mode=config.scaling_mode,
            seed=config.adapter_seed(),
        )
        self.updates_dir = Path(updates_dir) if updates_dir is not None else None
        self.session = _Session()
        self.result = FederatedResult(initial_adapters=self.initial_adapters, ledger=self.ledger)

    def _send(self, client_id: int, msg: Message) -> bool:
        if client_id in self.session.dead:
            return False
        try:
            self.session.connections[client_id].send(msg)
        except FedConnectionError as err:
            logger.error(f"Lost connection to client {client_id} while sending {msg.kind.value}: {err}")
            self.session.dead.add(client_id)
            return False
        self.result.sent[msg.kind.value] += 1
        return True

    def register_clients(self) -> List[int]:
        """Accept `REGISTER` messages until every client is known or the registration timeout passes."""
        expected = set(range(self.config.clients))
        deadline = time.monotonic() + self.config.registration_timeout
        while expected - set(self.session.connections):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            try:
                connection = self.listener.accept(timeout=remaining)
                msg = connection.recv(timeout=max(remaining, 0.01))
            except (TimeoutError, FedConnectionError, ProtocolError) as err:
                logger.warning(f"Registration attempt failed: {err}")
                continue
            self.result.received[msg.kind.value] += 1
            client_id = msg.sender_id
            if msg.kind is not MessageKind.REGISTER or client_id not in expected or client_id in self.session.connections:
                reason = f"Unexpected {msg.kind.value} from client {client_id} during registration"
                logger.warning(reason)
                try:
                    connection.send(error_message(0, fed_constants.AGGREGATOR_ID, reason))
                except FedConnectionError:
                    pass
                connection.close()
                continue
            connection.send(Message(MessageKind.REGISTER_ACK, 0, fed_constants.AGGREGATOR_ID))
            self.result.sent[MessageKind.REGISTER_ACK.value] += 1
            self.session.start_reader(client_id, connection)
            logger.info(f"Registered client {client_id}")
        registered = sorted(self.session.connections)
        if not registered:
            logger.error("No client registered before the registration timeout")
            raise FedConnectionError("No client registered before the registration timeout")
        missing = sorted(expected - set(registered))
        if missing:
            logger.warning(f"Clients {missing} did not register; they will be stragglers in every round")
        return registered

    def _handle_update(self, state: RoundState, client_id: int, msg: Message, rejected: Dict[int, str]) -> None:
        def ack(accepted: bool, reason: str = "ok"):
            header = {"accepted": accepted, "reason": reason}
            self._send(client_id, Message(MessageKind.UPDATE_ACK, msg.round, fed_constants.AGGREGATOR_ID, header=header))

        if msg.round != state.round:
            logger.warning(f"Ignoring update of client {client_id} for round {msg.round} during round {state.round}")
            ack(False, "stale-round" if msg.round < state.round else "future-round")
            return
        if client_id in state.received or client_id in rejected:
            ack(False, "duplicate")
            return
        if msg.sender_id != client_id:
            reason = "sender-mismatch"
        else:
            try:
                update, canonical = update_from_message(msg, self.config.alpha, self.config.scaling_mode)
                layout = [(p.target, p.a.shape, p.b.shape) for p in update.adapters]
                if layout != [(p.target, p.a.shape, p.b.shape) for p in self.initial_adapters]:
                    raise ProtocolError("adapter layout does not match the session")
                reason = verify_update(self.registry, update, canonical).reason
            except (ProtocolError, ValueError, ArithmeticError) as err:
                reason = f"malformed: {err}"
        if reason != "ok":
            logger.warning(f"Rejected update from client {client_id} in round {state.round}: {reason}")
            rejected[client_id] = reason
            ack(False, reason)
            return
        state.accept(update)
        if self.updates_dir is not None:
            save_frame(self.updates_dir / round_dirname(state.round) / f"{client_name(client_id)}.bin", msg)
        logger.info(f"Accepted update from client {client_id} in round {state.round} (n_k={update.n_k})")
        ack(True)

    def _collect(self, state: RoundState) -> Dict[int, str]:
        rejected: Dict[int, str] = {}
        while True:
            waiting = state.expected_clients - set(state.received) - set(rejected) - self.session.dead
            if not waiting:
                break
            try:
                client_id, item = self.session.inbox.get(timeout=state.remaining())
            except queue.Empty:
                break
            if isinstance(item, Exception):
                logger.error(f"Connection to client {client_id} failed: {item}")
                self.session.dead.add(client_id)
                continue
            self.result.received[item.kind.value] += 1
            if item.kind is MessageKind.UPDATE:
                self._handle_update(state, client_id, item, rejected)
            else:
                logger.debug(f"Ignoring {item.kind.value} from client {client_id} while collecting")
        return rejected

    def run_round(self, round: int, adapters: AdapterSet) -> RoundRecord:
        live = self.session.live
        if not live:
            raise FedConnectionError("Every client connection has been lost")
        state = RoundState(
            round=round,
            expected_clients=frozenset(range(self.config.clients)),
            deadline=time.monotonic() + self.config.client_timeout,
        )
        broadcast = round_start_message(round, adapters)
        for client_id in live:
            self._send(client_id, broadcast)
        logger.info(f"Round {round}: broadcast global adapters to clients {live}")

        state.advance(RoundPhase.COLLECTING)
        rejected = self._collect(state)
        stragglers = sorted(state.expected_clients - set(state.received) - set(rejected))
        if stragglers:
            logger.warning(f"Round {round}: stragglers {stragglers} are excluded from aggregation")

        state.advance(RoundPhase.AGGREGATING)
        if not state.received:
            logger.error(f"Round {round}: no verified update arrived, aborting")
            raise RoundFailureError(
                f"Round {round} received no verified update", round=round, partial_result=self.result
            )
        global_state = aggregate(
            list(state.received.values()),
            mode=self.config.weighting,
            rank=self.config.rank,
            strategy=self.config.merge_strategy,
        )
        for client_id in sorted(state.received):
            self.ledger.credit(round, client_id, self.config.reward_per_update)

        state.advance(RoundPhase.DONE)
        record = RoundRecord(
            round=round,
            state=global_state,
            updates=dict(sorted(state.received.items())),
            stragglers=stragglers,
            rejected=dict(rejected),
            phases=[phase.value for phase in state.history],
        )
        complete = Message(
            MessageKind.ROUND_COMPLETE,
            round,
            fed_constants.AGGREGATOR_ID,
            header={"accepted": sorted(state.received), "stragglers": stragglers, "rejected": sorted(rejected)},
        )
        for client_id in self.session.live:
            self._send(client_id, complete)
        logger.info(f"Round {round} done: accepted {sorted(state.received)}, weights {global_state.weights}")
        return record

    def run(self) -> FederatedResult:
        try:
            self.register_clients()
            adapters = self.initial_adapters
            for round in range(1, self.config.rounds + 1):
                record = self.run_round(round, adapters)
                self.result.rounds.append(record)
                adapters = record.state.adapters
            for client_id in self.session.live:
                self._send(client_id, Message(MessageKind.SHUTDOWN, self.config.rounds, fed_constants.AGGREGATOR_ID))
        finally:
            self.session.close()
        return self.result


def run_aggregator(
    config: FedConfig,
    listener: Listener,
    registry: KeyRegistry,
    ledger: Optional[Ledger] = None,
    initial_adapters: Optional[AdapterSet] = None,
    updates_dir=None,
) -> FederatedResult:
    """Run all rounds of a federated experiment as the aggregator.

    Returns:
        [`FederatedResult`] with one [`RoundRecord`] per round.

    Raises:
        RoundFailureError: when a round ends without any verified update; `partial_result` holds the
            rounds completed so far.
        FedConnectionError: when no client registers or every connection is lost.
    """
    return Aggregator(
        config, listener, registry, ledger=ledger, initial_adapters=initial_adapters, updates_dir=updates_dir
    ).run()
