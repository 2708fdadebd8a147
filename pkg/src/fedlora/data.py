# Lint as: python3
"""Synthetic non-IID classification task split across federated clients.

Three heterogeneity axes are reproduced:

- dialect (feature) skew: every client mixes the full vocabulary with its own vocabulary slice,
- label (format) skew: every client mixes a uniform class prior with a prior peaked on its home classes,
- size imbalance: `client_sizes` sets the number of training examples per client.

The label of an example is the majority token class of its sequence (ties go to the lowest class), where
the class of a token is fixed by a seeded xxhash permutation. A window of planted tokens carries the
intended class so labels follow the client prior, and a fraction of labels is flipped as noise.
"""

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import xxhash

from .errors import ConfigError, InputError
from .linalg import rng_for
from .naming import client_name, filepath_for_split
from .utils.logging import get_logger


logger = get_logger(__name__)

_TRAIN_STREAM = 0
_TEST_STREAM = 1
_POOL_STREAM = 2
_REPARTITION_STREAM = 3


class Example(NamedTuple):
    tokens: np.ndarray
    label: int


@dataclass
class TaskSpec:
    """Synthetic task and its partition into `clients` shards.

    Args:
        vocab (`int`): vocabulary size.
        classes (`int`): number of classes.
        seq_len (`int`): tokens per example.
        clients (`int`): number of clients `K`.
        client_sizes (`tuple` of `int`): training examples per client.
        dialect_shift (`float`): weight of the client vocabulary slice in `[0, 1]`.
        label_skew (`float`): weight of the client-peaked class prior in `[0, 1]`.
        seed (`int`): generation seed.
        label_noise (`float`): probability that a label is replaced by another class.
        window (`int`): number of planted positions carrying the intended class.
        test_fraction (`float`): test split size as a fraction of `n_k`.
        min_test (`int`): minimum test split size.
    """

    vocab: int = 64
    classes: int = 8
    seq_len: int = 12
    clients: int = 3
    client_sizes: Tuple[int, ...] = (274, 102, 335)
    dialect_shift: float = 0.8
    label_skew: float = 0.7
    seed: int = 0
    label_noise: float = 0.05
    window: int = 4
    test_fraction: float = 0.125
    min_test: int = 8

    def __post_init__(self):
        self.client_sizes = tuple(int(n) for n in self.client_sizes)
        if self.clients < 1:
            raise ConfigError(f"'clients' must be at least 1, got {self.clients}")
        if len(self.client_sizes) != self.clients:
            raise ConfigError(
                f"'client_sizes' must hold one size per client, got {len(self.client_sizes)} for {self.clients} clients"
            )
        if any(n < 1 for n in self.client_sizes):
            raise ConfigError(f"Every client size must be at least 1, got {self.client_sizes}")
        for name in ("dialect_shift", "label_skew", "label_noise"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"'{name}' must lie in [0, 1], got {value}")
        if self.classes < 2:
            raise ConfigError(f"'classes' must be at least 2, got {self.classes}")
        if not 1 <= self.window <= self.seq_len:
            raise ConfigError(f"'window' must lie in [1, seq_len={self.seq_len}], got {self.window}")
        if self.label_skew == 1.0 and self.classes < self.clients:
            raise ConfigError(
                f"label_skew=1 needs a distinct dominant class per client but classes={self.classes} < clients={self.clients}"
            )
        if self.dialect_shift > 0 and self.vocab // self.clients < self.classes:
            raise ConfigError(
                f"Each client vocabulary slice ({self.vocab // self.clients} tokens) must cover all {self.classes} classes"
            )

    def to_dict(self) -> dict:
        data = asdict(self)
        data["client_sizes"] = list(self.client_sizes)
        return data


@dataclass
class ClientShard:
    client_id: int
    train: List[Example] = field(default_factory=list)
    test: List[Example] = field(default_factory=list)

    @property
    def n_k(self) -> int:
        return len(self.train)


def token_classes(task: TaskSpec) -> np.ndarray:
    """Class of every token id: `perm[t mod classes]` with `perm` ordered by xxhash of the class ids."""
    order = sorted(range(task.classes), key=lambda c: xxhash.xxh64_intdigest(str(c).encode(), seed=task.seed))
    perm = np.asarray(order, dtype=np.int64)
    return perm[np.arange(task.vocab) % task.classes]


def vocab_slice(task: TaskSpec, client_id: int) -> Tuple[int, int]:
    width = task.vocab // task.clients
    return client_id * width, (client_id + 1) * width


def token_distribution(task: TaskSpec, client_id: int) -> np.ndarray:
    """Token probabilities of a client: `(1 - shift) * uniform + shift * uniform(client slice)`."""
    probs = np.full(task.vocab, (1.0 - task.dialect_shift) / task.vocab)
    start, stop = vocab_slice(task, client_id)
    probs[start:stop] += task.dialect_shift / (stop - start)
    return probs


def home_classes(task: TaskSpec, client_id: int) -> List[int]:
    homes = [c for c in range(task.classes) if c % task.clients == client_id]
    return homes or [client_id % task.classes]


def label_distribution(task: TaskSpec, client_id: int) -> np.ndarray:
    """Class prior of a client: `(1 - skew) * uniform + skew * uniform(home classes)`."""
    probs = np.full(task.classes, (1.0 - task.label_skew) / task.classes)
    homes = home_classes(task, client_id)
    probs[homes] += task.label_skew / len(homes)
    return probs


def majority_class(tokens: np.ndarray, classes_of_tokens: np.ndarray, classes: int) -> np.ndarray:
    """Majority token class per row of `tokens`, ties broken by the lowest class index."""
    tokens = np.atleast_2d(tokens)
    counts = np.zeros((tokens.shape[0], classes), dtype=np.int64)
    np.add.at(counts, (np.arange(tokens.shape[0])[:, None], classes_of_tokens[tokens]), 1)
    return np.argmax(counts, axis=1)


def _inverse_cdf(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs)
    cdf /= cdf[-1]
    return np.minimum(np.searchsorted(cdf, uniforms, side="right"), len(probs) - 1)


def _draw_examples(task: TaskSpec, client_id: int, n: int, stream: int) -> List[Example]:
    rng = rng_for(task.seed, client_id, stream)
    # all uniforms are drawn up front so that knobs change values, not the random stream
    u_label = rng.random(n)
    u_tokens = rng.random((n, task.seq_len))
    u_window = rng.random((n, task.window))
    u_noise = rng.random(n)
    noise_offsets = rng.integers(1, task.classes, size=n)

    classes_of_tokens = token_classes(task)
    token_probs = token_distribution(task, client_id)
    intended = _inverse_cdf(label_distribution(task, client_id), u_label)
    tokens = _inverse_cdf(token_probs, u_tokens)
    for c in np.unique(intended):
        rows = intended == c
        planted_probs = np.where(classes_of_tokens == c, token_probs, 0.0)
        tokens[rows, : task.window] = _inverse_cdf(planted_probs, u_window[rows])

    labels = majority_class(tokens, classes_of_tokens, task.classes)
    flipped = u_noise < task.label_noise
    labels = np.where(flipped, (labels + noise_offsets) % task.classes, labels)
    return [Example(tokens=np.ascontiguousarray(tokens[i]), label=int(labels[i])) for i in range(n)]


def holdout_size(task: TaskSpec, n_k: int) -> int:
    return max(task.min_test, int(math.ceil(task.test_fraction * n_k)))


def generate(task: TaskSpec) -> List[ClientShard]:
    """Generate one shard per client.

    Train and test splits come from independent random streams of the task seed, so identical specs give
    bit-identical shards.
    """
    shards = []
    for client_id, n_k in enumerate(task.client_sizes):
        shard = ClientShard(
            client_id=client_id,
            train=_draw_examples(task, client_id, n_k, _TRAIN_STREAM),
            test=_draw_examples(task, client_id, holdout_size(task, n_k), _TEST_STREAM),
        )
        logger.debug(f"Generated {client_name(client_id)}: {shard.n_k} train, {len(shard.test)} test examples")
        shards.append(shard)
    return shards


def pooled(shards: Sequence[ClientShard], seed: int = 0) -> List[Example]:
    """Concatenate the train splits of all shards and shuffle them with `seed`."""
    if not shards:
        raise InputError("pooled() needs at least one shard")
    examples = [example for shard in shards for example in shard.train]
    order = rng_for(seed, _POOL_STREAM).permutation(len(examples))
    return [examples[i] for i in order]


def pooled_test(shards: Sequence[ClientShard]) -> List[Example]:
    return [example for shard in shards for example in shard.test]


def repartition(examples: Sequence[Example], sizes: Sequence[int], seed: int = 0) -> List[List[Example]]:
    """Split `examples` uniformly at random into consecutive groups of the given sizes."""
    if sum(sizes) > len(examples):
        raise InputError(f"Cannot draw {sum(sizes)} examples from {len(examples)}")
    order = rng_for(seed, _REPARTITION_STREAM).permutation(len(examples))
    groups, start = [], 0
    for size in sizes:
        groups.append([examples[i] for i in order[start : start + size]])
        start += size
    return groups


def stack_examples(examples: Sequence[Example]) -> Tuple[np.ndarray, np.ndarray]:
    """Return `(tokens, labels)` arrays of shapes `(N, seq_len)` and `(N,)`."""
    if not examples:
        raise InputError("Cannot stack an empty list of examples")
    tokens = np.stack([np.asarray(example.tokens, dtype=np.int64) for example in examples])
    labels = np.asarray([int(example.label) for example in examples], dtype=np.int64)
    return tokens, labels


def label_histogram(examples: Sequence[Example], classes: int) -> np.ndarray:
    """Normalized label frequencies."""
    counts = np.bincount([int(example.label) for example in examples], minlength=classes).astype(np.float64)
    return counts / max(counts.sum(), 1.0)


def token_histogram(examples: Sequence[Example], vocab: int) -> np.ndarray:
    """Normalized token frequencies over all positions."""
    tokens = np.concatenate([np.asarray(example.tokens) for example in examples])
    counts = np.bincount(tokens, minlength=vocab).astype(np.float64)
    return counts / max(counts.sum(), 1.0)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def export_shards(shards: Sequence[ClientShard], directory, splits: Optional[Sequence[str]] = None) -> List[Path]:
    """Write shards as text files, one example per line: space separated token ids, a tab, the label.

    Files are named `client_<k>-<split>.txt`.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for shard in shards:
        for split in splits or ("train", "test"):
            path = Path(filepath_for_split(client_name(shard.client_id), split, directory, "txt"))
            with open(path, "w", encoding="utf-8") as f:
                for example in getattr(shard, split):
                    f.write(" ".join(str(int(t)) for t in example.tokens) + f"\t{int(example.label)}\n")
            written.append(path)
    return written


def read_examples(path) -> List[Example]:
    """Inverse of the per-split files written by [`export_shards`]."""
    examples = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            tokens, label = line.rstrip("\n").split("\t")
            examples.append(Example(tokens=np.asarray([int(t) for t in tokens.split()], dtype=np.int64), label=int(label)))
    return examples
