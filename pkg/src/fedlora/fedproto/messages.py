# Lint as: python3
"""Length-prefixed wire messages and the adapter tensor codec.

A frame on the wire is

    [4-byte big-endian frame length][4-byte big-endian header length][UTF-8 JSON header][tensor block]

The JSON header always carries `kind`, `round` and `sender_id`. `ROUND_START` and `UPDATE` messages also
carry a `tensor_manifest`, an ordered list of `{target, which, rows, cols}` entries describing the tensor
block: the row-major little-endian float32 values of every listed matrix, concatenated in manifest order.
"""

import base64
import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .. import config
from ..aggregation import ClientUpdate
from ..errors import FramingError, ProtocolError
from ..identity import ClientIdentity, canonical_bytes, sign_update
from ..lora_model import AdapterPair, AdapterSet, InjectionTarget, ScalingMode
from ..saving import write_locked


_LENGTH = struct.Struct(">I")
_WIRE_DTYPE = np.dtype("<f4")


class MessageKind(str, enum.Enum):
    REGISTER = "REGISTER"
    REGISTER_ACK = "REGISTER_ACK"
    ROUND_START = "ROUND_START"
    UPDATE = "UPDATE"
    UPDATE_ACK = "UPDATE_ACK"
    ROUND_COMPLETE = "ROUND_COMPLETE"
    SHUTDOWN = "SHUTDOWN"
    ERROR = "ERROR"


PAYLOAD_KINDS = frozenset({MessageKind.ROUND_START, MessageKind.UPDATE})

REQUIRED_HEADER_KEYS = {
    MessageKind.UPDATE: ("n_k", "signature", "tensor_manifest"),
    MessageKind.ROUND_START: ("tensor_manifest", "scaling_mode", "alpha", "rank"),
    MessageKind.UPDATE_ACK: ("accepted",),
    MessageKind.ERROR: ("reason",),
}

RESERVED_HEADER_KEYS = ("kind", "round", "sender_id")


@dataclass
class Message:
    """One protocol message.

    `header` holds the kind-specific JSON fields; `kind`, `round` and `sender_id` are stored as attributes
    and merged into the JSON header on the wire. `tensor_payload` is present exactly for `ROUND_START` and
    `UPDATE`.
    """

    kind: MessageKind
    round: int
    sender_id: int
    header: Dict[str, Any] = field(default_factory=dict)
    tensor_payload: Optional[bytes] = None

    def __post_init__(self):
        try:
            self.kind = MessageKind(self.kind)
        except ValueError:
            raise ProtocolError(f"Unknown message kind {self.kind!r}") from None
        if not all(isinstance(value, (int, np.integer)) for value in (self.round, self.sender_id)):
            raise ProtocolError(f"round and sender_id must be integers, got {self.round!r} and {self.sender_id!r}")
        self.round = int(self.round)
        self.sender_id = int(self.sender_id)
        if not isinstance(self.header, dict):
            raise ProtocolError(f"Header must be a mapping, got {type(self.header).__name__}")
        clash = [key for key in RESERVED_HEADER_KEYS if key in self.header]
        if clash:
            raise ProtocolError(f"Header keys {clash} are reserved")
        try:
            # normalize to what JSON gives back, so that decode(encode(m)) == m
            self.header = json.loads(json.dumps(self.header, allow_nan=False))
        except (TypeError, ValueError) as err:
            raise ProtocolError(f"Header of {self.kind.value} message is not JSON serializable: {err}") from err
        missing = [key for key in REQUIRED_HEADER_KEYS.get(self.kind, ()) if key not in self.header]
        if missing:
            raise ProtocolError(f"{self.kind.value} message is missing header keys {missing}")
        if self.kind in PAYLOAD_KINDS:
            if self.tensor_payload is None:
                raise ProtocolError(f"{self.kind.value} message requires a tensor payload")
            self.tensor_payload = bytes(self.tensor_payload)
            expected = manifest_nbytes(self.header["tensor_manifest"])
            if len(self.tensor_payload) != expected:
                raise FramingError(
                    f"{self.kind.value} payload holds {len(self.tensor_payload)} bytes, manifest describes {expected}"
                )
        elif self.tensor_payload is not None:
            raise ProtocolError(f"{self.kind.value} message must not carry a tensor payload")


def manifest_nbytes(manifest) -> int:
    if not isinstance(manifest, list):
        raise ProtocolError(f"tensor_manifest must be a list, got {type(manifest).__name__}")
    total = 0
    for entry in manifest:
        try:
            rows, cols = int(entry["rows"]), int(entry["cols"])
        except (KeyError, TypeError, ValueError, OverflowError):
            raise ProtocolError(f"Malformed tensor_manifest entry {entry!r}") from None
        if rows < 0 or cols < 0:
            raise ProtocolError(f"Negative tensor dimensions in manifest entry {entry!r}")
        total += rows * cols * _WIRE_DTYPE.itemsize
    return total


def encode(msg: Message) -> bytes:
    """Serialize `msg` into one length-prefixed frame."""
    header = {"kind": msg.kind.value, "round": msg.round, "sender_id": msg.sender_id, **msg.header}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = msg.tensor_payload or b""
    frame = _LENGTH.pack(len(header_bytes)) + header_bytes + payload
    if len(frame) > config.MAX_FRAME_SIZE:
        raise FramingError(f"Frame of {len(frame)} bytes exceeds the limit of {config.MAX_FRAME_SIZE}")
    return _LENGTH.pack(len(frame)) + frame


def frame_length(prefix: bytes) -> int:
    """Length announced by a 4-byte frame prefix."""
    if len(prefix) != _LENGTH.size:
        raise FramingError(f"Truncated frame prefix: {len(prefix)} of {_LENGTH.size} bytes")
    (length,) = _LENGTH.unpack(prefix)
    if length > config.MAX_FRAME_SIZE:
        raise FramingError(f"Announced frame of {length} bytes exceeds the limit of {config.MAX_FRAME_SIZE}")
    return length


def decode(data: bytes) -> Message:
    """Parse one complete frame produced by [`encode`].

    Raises:
        FramingError: on a truncated frame, trailing bytes, or a payload that does not match its manifest.
        ProtocolError: on an unknown kind, malformed JSON or missing header keys.
    """
    data = bytes(data)
    length = frame_length(data[: _LENGTH.size])
    frame = data[_LENGTH.size :]
    if len(frame) != length:
        raise FramingError(f"Frame announces {length} bytes but {len(frame)} are present")
    if length < _LENGTH.size:
        raise FramingError(f"Frame of {length} bytes is too short to hold a header length")
    (header_length,) = _LENGTH.unpack(frame[: _LENGTH.size])
    header_end = _LENGTH.size + header_length
    if header_end > length:
        raise FramingError(f"Header of {header_length} bytes overruns a frame of {length} bytes")
    try:
        header = json.loads(frame[_LENGTH.size : header_end].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as err:
        raise ProtocolError(f"Malformed message header: {err}") from err
    if not isinstance(header, dict):
        raise ProtocolError("Message header must be a JSON object")
    missing = [key for key in RESERVED_HEADER_KEYS if key not in header]
    if missing:
        raise ProtocolError(f"Message header is missing {missing}")
    kind, round, sender_id = (header.pop(key) for key in RESERVED_HEADER_KEYS)
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise ProtocolError(f"Unknown message kind {kind!r}") from None
    payload = frame[header_end:]
    if kind in PAYLOAD_KINDS:
        return Message(kind, round, sender_id, header=header, tensor_payload=payload)
    if payload:
        raise FramingError(f"{kind.value} message carries {len(payload)} unexpected payload bytes")
    return Message(kind, round, sender_id, header=header)


def encode_adapters(adapters: AdapterSet) -> Tuple[List[Dict[str, Any]], bytes]:
    """Tensor manifest and float32 block of `adapters`, `A` before `B` for each target in canonical order."""
    manifest, chunks = [], []
    for pair in adapters:
        for which, matrix in (("A", pair.a), ("B", pair.b)):
            rows, cols = matrix.shape
            manifest.append({"target": pair.target.value, "which": which, "rows": rows, "cols": cols})
            chunks.append(np.ascontiguousarray(matrix, dtype=_WIRE_DTYPE).tobytes())
    return manifest, b"".join(chunks)


def decode_adapters(manifest, block: bytes, alpha: float, scaling_mode) -> AdapterSet:
    """Rebuild the float64 adapters described by `manifest` from the wire block."""
    if len(block) != manifest_nbytes(manifest):
        raise FramingError(f"Tensor block holds {len(block)} bytes, manifest describes {manifest_nbytes(manifest)}")
    factors: Dict[InjectionTarget, Dict[str, np.ndarray]] = {}
    offset = 0
    for entry in manifest:
        rows, cols = int(entry["rows"]), int(entry["cols"])
        count = rows * cols
        values = np.frombuffer(block, dtype=_WIRE_DTYPE, count=count, offset=offset)
        offset += count * _WIRE_DTYPE.itemsize
        try:
            target = InjectionTarget(entry["target"])
        except (KeyError, ValueError):
            raise ProtocolError(f"Unknown adapter target in manifest entry {entry!r}") from None
        which = entry.get("which")
        if which not in ("A", "B"):
            raise ProtocolError(f"Manifest entry {entry!r} must name factor 'A' or 'B'")
        slot = factors.setdefault(target, {})
        if which in slot:
            raise ProtocolError(f"Factor {target.value}.{which} appears twice in the manifest")
        slot[which] = values.reshape(rows, cols).astype(np.float64)
    incomplete = [target.value for target, slot in factors.items() if set(slot) != {"A", "B"}]
    if incomplete:
        raise ProtocolError(f"Manifest lacks an A or B factor for targets {incomplete}")
    return AdapterSet.from_pairs(
        AdapterPair(target, a=slot["A"], b=slot["B"], alpha=alpha, scaling_mode=ScalingMode(scaling_mode))
        for target, slot in factors.items()
    )


def quantize(adapters: AdapterSet) -> AdapterSet:
    """The values `adapters` take after one trip over the wire."""
    manifest, block = encode_adapters(adapters)
    return decode_adapters(manifest, block, adapters.alpha, adapters.scaling_mode)


def round_start_message(round: int, adapters: AdapterSet, sender_id: int = config.AGGREGATOR_ID) -> Message:
    manifest, block = encode_adapters(adapters)
    header = {
        "tensor_manifest": manifest,
        "scaling_mode": adapters.scaling_mode.value,
        "alpha": float(adapters.alpha),
        "rank": int(adapters.rank),
    }
    return Message(MessageKind.ROUND_START, round, sender_id, header=header, tensor_payload=block)


def adapters_from_message(msg: Message) -> AdapterSet:
    """Global adapters carried by a `ROUND_START` message."""
    if msg.kind is not MessageKind.ROUND_START:
        raise ProtocolError(f"Expected a ROUND_START message, got {msg.kind.value}")
    adapters = decode_adapters(
        msg.header["tensor_manifest"], msg.tensor_payload, msg.header["alpha"], msg.header["scaling_mode"]
    )
    if adapters.rank != msg.header["rank"]:
        raise ProtocolError(f"ROUND_START announces rank {msg.header['rank']} but carries rank {adapters.rank}")
    return adapters


def update_message(round: int, identity: ClientIdentity, n_k: int, adapters: AdapterSet) -> Message:
    """Signed `UPDATE` message; the signature covers the exact wire tensor block."""
    manifest, block = encode_adapters(adapters)
    signature = sign_update(identity, canonical_bytes(round, identity.client_id, n_k, block))
    header = {
        "n_k": int(n_k),
        "signature": base64.b64encode(signature).decode("ascii"),
        "tensor_manifest": manifest,
    }
    return Message(MessageKind.UPDATE, round, identity.client_id, header=header, tensor_payload=block)


def update_from_message(msg: Message, alpha: float, scaling_mode) -> Tuple[ClientUpdate, bytes]:
    """[`ClientUpdate`] carried by an `UPDATE` message and the canonical bytes its signature must cover.

    `alpha` and `scaling_mode` are session settings and are not repeated in updates.
    """
    if msg.kind is not MessageKind.UPDATE:
        raise ProtocolError(f"Expected an UPDATE message, got {msg.kind.value}")
    try:
        signature = base64.b64decode(msg.header["signature"], validate=True)
        n_k = int(msg.header["n_k"])
    except (ValueError, TypeError) as err:
        raise ProtocolError(f"Malformed UPDATE header from client {msg.sender_id}: {err}") from err
    adapters = decode_adapters(msg.header["tensor_manifest"], msg.tensor_payload, alpha, scaling_mode)
    try:
        update = ClientUpdate(client_id=msg.sender_id, round=msg.round, n_k=n_k, adapters=adapters, signature=signature)
    except ValueError as err:
        raise ProtocolError(str(err)) from err
    try:
        canonical = canonical_bytes(msg.round, msg.sender_id, n_k, msg.tensor_payload)
    except struct.error as err:
        raise ProtocolError(f"UPDATE header of client {msg.sender_id} does not fit the signed layout: {err}") from err
    return update, canonical


def error_message(round: int, sender_id: int, reason: str) -> Message:
    return Message(MessageKind.ERROR, round, sender_id, header={"reason": reason})


def save_frame(path, msg: Message) -> Path:
    """Write one encoded frame to `path`."""
    return write_locked(path, encode(msg))


def load_frame(path) -> Message:
    return decode(Path(path).read_bytes())


def save_adapters(path, adapters: AdapterSet, round: int = 0) -> Path:
    """Persist `adapters` as a `ROUND_START` frame, the format `fedlora eval --adapters` reads."""
    return save_frame(path, round_start_message(round, adapters))


def load_adapters(path) -> AdapterSet:
    """Adapters stored by [`save_adapters`]. Update frames are read with [`update_from_message`]."""
    msg = load_frame(path)
    if msg.kind is MessageKind.ROUND_START:
        return adapters_from_message(msg)
    raise ProtocolError(f"{path} holds a {msg.kind.value} frame, not stored adapters")
