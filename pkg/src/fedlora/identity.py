# Lint as: python3
"""Client identities, update signatures and the reward ledger.

Every client owns an Ed25519 key pair whose public half is registered once under its client id. Updates are
signed over their canonical bytes and verified by the aggregator before aggregation. Accepted updates are
credited in an append-only, hash-chained JSON-lines ledger.
"""

import base64
import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Tuple, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from filelock import FileLock

from . import config
from .errors import IdentityError, LedgerError
from .naming import client_name
from .utils.logging import get_logger


logger = get_logger(__name__)

PathLike = Union[str, Path]

GENESIS_HASH = "00" * 32


def canonical_bytes(round: int, client_id: int, n_k: int, tensor_block: bytes) -> bytes:
    """Signed payload of an update: big-endian `round ‖ client_id ‖ n_k` followed by the wire tensor block."""
    return struct.pack(">QqQ", int(round), int(client_id), int(n_k)) + bytes(tensor_block)


def _raw_public_bytes(public_key: Ed25519PublicKey) -> bytes:
    return public_key.public_bytes(encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw)


@dataclass
class ClientIdentity:
    """A client's key pair. `private_key` is only present on the client side."""

    client_id: int
    public_key: bytes
    private_key: Optional[Ed25519PrivateKey] = None

    @classmethod
    def generate(cls, client_id: int) -> "ClientIdentity":
        private_key = Ed25519PrivateKey.generate()
        return cls(client_id=client_id, public_key=_raw_public_bytes(private_key.public_key()), private_key=private_key)

    @classmethod
    def from_seed(cls, client_id: int, seed: bytes) -> "ClientIdentity":
        """Deterministic key pair from a 32-byte seed, for simulations and tests."""
        private_key = Ed25519PrivateKey.from_private_bytes(hashlib.sha256(seed).digest())
        return cls(client_id=client_id, public_key=_raw_public_bytes(private_key.public_key()), private_key=private_key)

    def key_paths(self, directory: PathLike) -> Tuple[Path, Path]:
        directory = Path(directory)
        name = client_name(self.client_id)
        return directory / f"{name}.{config.PRIVATE_KEY_SUFFIX}", directory / f"{name}.{config.PUBLIC_KEY_SUFFIX}"

    def save(self, directory: PathLike) -> Tuple[Path, Path]:
        """Write `client_<k>.key` (PKCS8 PEM) and `client_<k>.pub` (base64 raw public key)."""
        if self.private_key is None:
            raise IdentityError(f"No private key to save for client {self.client_id}")
        Path(directory).mkdir(parents=True, exist_ok=True)
        private_path, public_path = self.key_paths(directory)
        pem = self.private_key.private_bytes(
            encoding=serialization.Encoding.PEM,
            format=serialization.PrivateFormat.PKCS8,
            encryption_algorithm=serialization.NoEncryption(),
        )
        private_path.write_bytes(pem)
        private_path.chmod(0o600)
        public_path.write_text(base64.b64encode(self.public_key).decode("ascii") + "\n", encoding="ascii")
        return private_path, public_path

    @classmethod
    def load(cls, directory: PathLike, client_id: int) -> "ClientIdentity":
        """Load the key pair written by [`ClientIdentity.save`].

        Raises:
            IdentityError: if the private key file is missing or not an Ed25519 key.
        """
        private_path, _ = cls(client_id=client_id, public_key=b"").key_paths(directory)
        if not private_path.exists():
            raise IdentityError(f"Missing private key for client {client_id} at {private_path}")
        private_key = serialization.load_pem_private_key(private_path.read_bytes(), password=None)
        if not isinstance(private_key, Ed25519PrivateKey):
            raise IdentityError(f"Key at {private_path} is not an Ed25519 private key")
        return cls(client_id=client_id, public_key=_raw_public_bytes(private_key.public_key()), private_key=private_key)


def sign_update(identity: ClientIdentity, canonical: bytes) -> bytes:
    """Detached Ed25519 signature over `canonical`.

    Raises:
        IdentityError: if `identity` holds no private key.
    """
    if identity.private_key is None:
        raise IdentityError(f"Client {identity.client_id} has no private key to sign with")
    return identity.private_key.sign(canonical)


class KeyRegistry:
    """Client id to public key map, persisted as JSON `{"<client_id>": "<base64 key>"}`."""

    def __init__(self, keys: Optional[Dict[int, bytes]] = None):
        self._keys: Dict[int, bytes] = {}
        for client_id, key in (keys or {}).items():
            self.register(client_id, key)

    def __contains__(self, client_id) -> bool:
        return int(client_id) in self._keys

    def __len__(self) -> int:
        return len(self._keys)

    @property
    def client_ids(self) -> List[int]:
        return sorted(self._keys)

    def register(self, client_id: int, public_key: bytes) -> None:
        """Register `public_key` for `client_id`. Registering the same key twice is a no-op.

        Raises:
            IdentityError: if the id already holds a different key, or the key is not 32 bytes.
        """
        client_id = int(client_id)
        public_key = bytes(public_key)
        if len(public_key) != 32:
            raise IdentityError(f"Ed25519 public keys are 32 bytes, got {len(public_key)} for client {client_id}")
        existing = self._keys.get(client_id)
        if existing is not None and existing != public_key:
            raise IdentityError(f"Client {client_id} is already registered with a different key")
        self._keys[client_id] = public_key

    def public_key(self, client_id: int) -> Optional[Ed25519PublicKey]:
        key = self._keys.get(int(client_id))
        return None if key is None else Ed25519PublicKey.from_public_bytes(key)

    def to_dict(self) -> Dict[str, str]:
        return {str(client_id): base64.b64encode(self._keys[client_id]).decode("ascii") for client_id in self.client_ids}

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(path) + ".lock"):
            with open(path, "w", encoding="utf-8") as f:
                json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, path: PathLike) -> "KeyRegistry":
        logger.info(f"Loading key registry from {path}")
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        return cls({int(client_id): base64.b64decode(key) for client_id, key in raw.items()})


class Verification(NamedTuple):
    accepted: bool
    reason: str


def verify_update(registry: KeyRegistry, update, canonical: bytes) -> Verification:
    """Accept iff `update.signature` is valid for `canonical` under the key registered for `update.client_id`."""
    public_key = registry.public_key(update.client_id)
    if public_key is None:
        return Verification(False, "unknown-identity")
    try:
        public_key.verify(bytes(update.signature), canonical)
    except InvalidSignature:
        return Verification(False, "bad-signature")
    return Verification(True, "ok")


def entry_digest(index: int, round: int, client_id: int, reward: int, prev_hash: str) -> str:
    payload = struct.pack(">QQqQ", index, round, client_id, reward) + bytes.fromhex(prev_hash)
    return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class LedgerEntry:
    index: int
    round: int
    client_id: int
    reward: int
    prev_hash: str
    entry_hash: str

    def expected_hash(self) -> str:
        return entry_digest(self.index, self.round, self.client_id, self.reward, self.prev_hash)

    def to_line(self) -> bytes:
        return json.dumps(asdict(self), separators=(",", ":")).encode("utf-8") + b"\n"

    @classmethod
    def from_line(cls, raw: bytes) -> "LedgerEntry":
        data = json.loads(raw.decode("utf-8"))
        if not isinstance(data, dict) or set(data) != {f for f in cls.__dataclass_fields__}:
            raise ValueError(f"Unexpected ledger fields {data}")
        return cls(**data)


class Ledger:
    """Append-only reward ledger; every entry hashes its predecessor.

    Args:
        path (`str` or `Path`, *optional*): JSON-lines file that every credit is appended to.
    """

    def __init__(self, path: Optional[PathLike] = None, entries: Optional[List[LedgerEntry]] = None):
        self.path = Path(path) if path is not None else None
        self.entries: List[LedgerEntry] = list(entries or [])

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[LedgerEntry]:
        return iter(self.entries)

    @property
    def head(self) -> str:
        return self.entries[-1].entry_hash if self.entries else GENESIS_HASH

    def validate(self) -> Optional[int]:
        """Index of the first broken entry, or `None` if the whole chain is intact."""
        prev_hash = GENESIS_HASH
        for i, entry in enumerate(self.entries):
            try:
                intact = entry.index == i and entry.prev_hash == prev_hash and entry.entry_hash == entry.expected_hash()
            except (ValueError, TypeError, struct.error):
                intact = False
            if not intact:
                return i
            prev_hash = entry.entry_hash
        return None

    def credit(self, round: int, client_id: int, reward: int = config.DEFAULT_REWARD_PER_UPDATE) -> LedgerEntry:
        """Append a reward for an accepted update.

        Raises:
            LedgerError: if the chain is already broken.
        """
        broken = self.validate()
        if broken is not None:
            raise LedgerError(f"Refusing to append to a ledger broken at index {broken}", index=broken)
        index = len(self.entries)
        prev_hash = self.head
        entry = LedgerEntry(
            index=index,
            round=int(round),
            client_id=int(client_id),
            reward=int(reward),
            prev_hash=prev_hash,
            entry_hash=entry_digest(index, int(round), int(client_id), int(reward), prev_hash),
        )
        self.entries.append(entry)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with FileLock(str(self.path) + ".lock"):
                with open(self.path, "ab") as f:
                    f.write(entry.to_line())
        logger.info(f"Credited {entry.reward} to client {entry.client_id} for round {entry.round} (entry {index})")
        return entry

    def balances(self) -> Dict[int, int]:
        totals: Dict[int, int] = {}
        for entry in self.entries:
            totals[entry.client_id] = totals.get(entry.client_id, 0) + entry.reward
        return dict(sorted(totals.items()))

    @staticmethod
    def validate_file(path: PathLike) -> Optional[int]:
        """Index of the first line of `path` that is not an intact, canonically serialized chain entry."""
        _, broken = Ledger._parse(Path(path).read_bytes())
        return broken

    @staticmethod
    def _parse(raw: bytes):
        lines = raw.split(b"\n")
        if lines and lines[-1] == b"":
            lines = lines[:-1]
        entries: List[LedgerEntry] = []
        prev_hash = GENESIS_HASH
        for i, line in enumerate(lines):
            try:
                entry = LedgerEntry.from_line(line)
                intact = (
                    entry.to_line() == line + b"\n"
                    and entry.index == i
                    and entry.prev_hash == prev_hash
                    and entry.entry_hash == entry.expected_hash()
                )
            except (ValueError, TypeError, UnicodeDecodeError, struct.error):
                intact = False
            if not intact:
                return entries, i
            entries.append(entry)
            prev_hash = entry.entry_hash
        return entries, None

    @classmethod
    def load(cls, path: PathLike) -> "Ledger":
        """Load and validate a ledger file; a missing file is an empty ledger.

        Raises:
            LedgerError: with the first broken `index` if the chain does not validate.
        """
        path = Path(path)
        if not path.exists():
            return cls(path=path)
        entries, broken = cls._parse(path.read_bytes())
        if broken is not None:
            raise LedgerError(f"Ledger {path} is corrupted at entry {broken}", index=broken)
        return cls(path=path, entries=entries)
