# flake8: noqa
from .aggregator import Aggregator, FederatedResult, RoundPhase, RoundRecord, RoundState, run_aggregator
from .client import ClientFaults, local_train, make_optimizer, run_client
from .config import FedConfig
from .messages import (
    Message,
    MessageKind,
    decode,
    decode_adapters,
    encode,
    encode_adapters,
    load_adapters,
    load_frame,
    quantize,
    save_adapters,
    save_frame,
    update_from_message,
)
from .simulation import build_base_model, simulate, simulation_identities
from .transport import InProcessListener, SocketListener, connect_socket, make_listener
