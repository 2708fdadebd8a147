# Lint as: python3
"""Frozen toy transformer block classifier with LoRA adapters.

The block is single-head self-attention followed by a gated MLP, both with residual connections, then
mean pooling over positions and a linear head. Every projection can carry a LoRA adapter:

    y = x Wᵀ + dropout(s · (x Aᵀ) Bᵀ)

where `s` is `alpha / rank` (or `alpha`, see [`ScalingMode`]). Backpropagation is written out by hand; it
yields gradients for adapter factors and, during pretraining only, for the base weights.
"""

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError, ShapeError
from .linalg import as_matrix, derive_seed, matmul, random_init, rng_for
from .optimization import OptimizerState, adamw_update
from .utils.logging import get_logger, tqdm


logger = get_logger(__name__)


class InjectionTarget(str, enum.Enum):
    Q = "q"
    K = "k"
    V = "v"
    O = "o"  # noqa: E741
    GATE = "gate"
    UP = "up"
    DOWN = "down"


ALL_TARGETS: Tuple[InjectionTarget, ...] = tuple(InjectionTarget)


class ScalingMode(str, enum.Enum):
    ALPHA_OVER_R = "alpha_over_r"
    ALPHA = "alpha"


def lora_scale(alpha: float, rank: int, mode=ScalingMode.ALPHA_OVER_R) -> float:
    mode = ScalingMode(mode)
    if mode is ScalingMode.ALPHA:
        return float(alpha)
    return float(alpha) / rank


@dataclass(frozen=True)
class ModelDims:
    vocab: int = 64
    d: int = 16
    h: int = 32
    classes: int = 8
    seq_len: int = 12

    def __post_init__(self):
        for name in ("vocab", "d", "h", "classes", "seq_len"):
            if getattr(self, name) < 1:
                raise ShapeError(f"Model dimension '{name}' must be positive, got {getattr(self, name)}")

    def target_shape(self, target) -> Tuple[int, int]:
        """`(d_out, d_in)` of the base matrix an adapter on `target` attaches to."""
        target = InjectionTarget(target)
        if target in (InjectionTarget.GATE, InjectionTarget.UP):
            return self.h, self.d
        if target is InjectionTarget.DOWN:
            return self.d, self.h
        return self.d, self.d


_BASE_WEIGHTS = ("embed", "wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "w_head")
_TARGET_WEIGHT = {
    InjectionTarget.Q: "wq",
    InjectionTarget.K: "wk",
    InjectionTarget.V: "wv",
    InjectionTarget.O: "wo",
    InjectionTarget.GATE: "w_gate",
    InjectionTarget.UP: "w_up",
    InjectionTarget.DOWN: "w_down",
}


@dataclass(frozen=True)
class BaseModel:
    """Frozen base weights. Arrays are made read-only on construction."""

    embed: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    w_head: np.ndarray
    dims: ModelDims

    def __post_init__(self):
        expected = self.expected_shapes(self.dims)
        for name in _BASE_WEIGHTS:
            weight = as_matrix(getattr(self, name), name).copy()
            if weight.shape != expected[name]:
                raise ShapeError(f"Base weight '{name}' has shape {weight.shape}, expected {expected[name]}")
            weight.setflags(write=False)
            object.__setattr__(self, name, weight)

    @staticmethod
    def expected_shapes(dims: ModelDims) -> Dict[str, Tuple[int, int]]:
        return {
            "embed": (dims.vocab, dims.d),
            "wq": (dims.d, dims.d),
            "wk": (dims.d, dims.d),
            "wv": (dims.d, dims.d),
            "wo": (dims.d, dims.d),
            "w_gate": (dims.h, dims.d),
            "w_up": (dims.h, dims.d),
            "w_down": (dims.d, dims.h),
            "w_head": (dims.classes, dims.d),
        }

    def weight(self, target) -> np.ndarray:
        return getattr(self, _TARGET_WEIGHT[InjectionTarget(target)])

    def weights(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _BASE_WEIGHTS}

    def to_bytes(self) -> bytes:
        """Concatenated raw bytes of every weight, in a fixed order."""
        return b"".join(getattr(self, name).tobytes() for name in _BASE_WEIGHTS)

    @classmethod
    def initialize(cls, dims: ModelDims, seed: int) -> "BaseModel":
        fan_in = {
            "embed": 1,
            "wq": dims.d,
            "wk": dims.d,
            "wv": dims.d,
            "wo": dims.d,
            "w_gate": dims.d,
            "w_up": dims.d,
            "w_down": dims.h,
            "w_head": dims.d,
        }
        shapes = cls.expected_shapes(dims)
        weights = {
            name: random_init(*shapes[name], std=1.0 / math.sqrt(fan_in[name]), seed=derive_seed(seed, i))
            for i, name in enumerate(_BASE_WEIGHTS)
        }
        return cls(dims=dims, **weights)


@dataclass(frozen=True)
class AdapterPair:
    """LoRA factors `a` of shape `(rank, d_in)` and `b` of shape `(d_out, rank)` for one target."""

    target: InjectionTarget
    a: np.ndarray
    b: np.ndarray
    alpha: float
    scaling_mode: ScalingMode = ScalingMode.ALPHA_OVER_R

    def __post_init__(self):
        object.__setattr__(self, "target", InjectionTarget(self.target))
        object.__setattr__(self, "scaling_mode", ScalingMode(self.scaling_mode))
        a = as_matrix(self.a, f"{self.target.value}.A").copy()
        b = as_matrix(self.b, f"{self.target.value}.B").copy()
        if a.shape[0] != b.shape[1]:
            raise ShapeError(
                f"Adapter '{self.target.value}' has A with {a.shape[0]} rows but B with {b.shape[1]} columns"
            )
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def scale(self) -> float:
        return lora_scale(self.alpha, self.rank, self.scaling_mode)

    @property
    def shape(self) -> Tuple[int, int]:
        """`(d_out, d_in)` of the matrix this pair updates."""
        return self.b.shape[0], self.a.shape[1]

    def delta(self) -> np.ndarray:
        """Effective update `s · B A`."""
        return self.scale * matmul(self.b, self.a)

    def replace(self, a=None, b=None) -> "AdapterPair":
        return AdapterPair(
            target=self.target,
            a=self.a if a is None else a,
            b=self.b if b is None else b,
            alpha=self.alpha,
            scaling_mode=self.scaling_mode,
        )


@dataclass(frozen=True)
class AdapterSet:
    """Adapters for the configured targets. All pairs share rank, alpha and scaling mode.

    Gradients with respect to the factors are represented as an `AdapterSet` as well.
    """

    pairs: Mapping[InjectionTarget, AdapterPair] = field(default_factory=dict)

    def __post_init__(self):
        ordered = {}
        for target in ALL_TARGETS:
            if target in self.pairs:
                pair = self.pairs[target]
                if pair.target is not target:
                    raise ShapeError(f"Pair for target '{pair.target.value}' stored under '{target.value}'")
                ordered[target] = pair
        unknown = set(InjectionTarget(t) for t in self.pairs) - set(ordered)
        if unknown:
            raise ShapeError(f"Unknown targets {unknown}")
        settings = {(p.rank, p.alpha, p.scaling_mode) for p in ordered.values()}
        if len(settings) > 1:
            raise ShapeError(f"Adapters in one set must share rank, alpha and scaling mode, got {settings}")
        object.__setattr__(self, "pairs", ordered)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs.values())

    def __contains__(self, target):
        return InjectionTarget(target) in self.pairs

    def __getitem__(self, target) -> AdapterPair:
        return self.pairs[InjectionTarget(target)]

    def get(self, target) -> Optional[AdapterPair]:
        return self.pairs.get(InjectionTarget(target))

    @property
    def targets(self) -> Tuple[InjectionTarget, ...]:
        return tuple(self.pairs)

    @property
    def rank(self) -> Optional[int]:
        return next(iter(self.pairs.values())).rank if self.pairs else None

    @property
    def alpha(self) -> Optional[float]:
        return next(iter(self.pairs.values())).alpha if self.pairs else None

    @property
    def scaling_mode(self) -> Optional[ScalingMode]:
        return next(iter(self.pairs.values())).scaling_mode if self.pairs else None

    @property
    def scale(self) -> Optional[float]:
        return next(iter(self.pairs.values())).scale if self.pairs else None

    @classmethod
    def from_pairs(cls, pairs: Iterable[AdapterPair]) -> "AdapterSet":
        return cls({pair.target: pair for pair in pairs})

    def parameters(self) -> Dict[str, np.ndarray]:
        """Flat `{"<target>.A": a, "<target>.B": b}` view in canonical order."""
        params = {}
        for pair in self:
            params[f"{pair.target.value}.A"] = pair.a
            params[f"{pair.target.value}.B"] = pair.b
        return params

    def with_parameters(self, params: Mapping[str, np.ndarray]) -> "AdapterSet":
        return AdapterSet.from_pairs(
            pair.replace(a=params[f"{pair.target.value}.A"], b=params[f"{pair.target.value}.B"]) for pair in self
        )

    def map(self, fn) -> "AdapterSet":
        return self.with_parameters({name: fn(value) for name, value in self.parameters().items()})

    def __add__(self, other: "AdapterSet") -> "AdapterSet":
        if self.targets != other.targets:
            raise ShapeError(f"Cannot add adapter sets over {self.targets} and {other.targets}")
        other_params = other.parameters()
        return self.with_parameters({name: value + other_params[name] for name, value in self.parameters().items()})

    def scaled(self, factor: float) -> "AdapterSet":
        return self.map(lambda value: value * factor)

    def zeros_like(self) -> "AdapterSet":
        return self.map(np.zeros_like)

    def to_bytes(self) -> bytes:
        return b"".join(value.tobytes() for value in self.parameters().values())


def init_adapters(
    dims: ModelDims,
    targets: Sequence = ALL_TARGETS,
    rank: int = 8,
    alpha: float = 32.0,
    scaling_mode=ScalingMode.ALPHA_OVER_R,
    seed: int = 0,
) -> AdapterSet:
    """Standard LoRA start: `A ~ Gaussian(0, 1/d_in)` and `B = 0`, so the effective update is zero."""
    if rank < 1:
        raise ShapeError(f"rank must be at least 1, got {rank}")
    pairs = []
    for target in targets:
        target = InjectionTarget(target)
        d_out, d_in = dims.target_shape(target)
        a = random_init(rank, d_in, std=1.0 / math.sqrt(d_in), seed=derive_seed(seed, ALL_TARGETS.index(target)))
        pairs.append(AdapterPair(target, a=a, b=np.zeros((d_out, rank)), alpha=alpha, scaling_mode=scaling_mode))
    return AdapterSet.from_pairs(pairs)


def adapted_matrix(base: np.ndarray, pair: AdapterPair) -> np.ndarray:
    """`W + s · B A`."""
    base = as_matrix(base, "base")
    if base.shape != pair.shape:
        raise ShapeError(f"Adapter '{pair.target.value}' of shape {pair.shape} does not fit base {base.shape}")
    return base + pair.delta()


class _Linear(NamedTuple):
    x: np.ndarray
    t: Optional[np.ndarray]
    mask: Optional[np.ndarray]


@dataclass
class ForwardCache:
    """Activations kept for the backward pass."""

    tokens: np.ndarray
    x0: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    z: np.ndarray
    x1: np.ndarray
    gate: np.ndarray
    up: np.ndarray
    act: np.ndarray
    pooled: np.ndarray
    linears: Dict[InjectionTarget, _Linear]


class ForwardResult(NamedTuple):
    logits: np.ndarray
    cache: ForwardCache


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x, axis=-1):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _dropout_mask(rng, shape, rate):
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def _linear(x, weight, pair: Optional[AdapterPair], mask):
    y = x @ weight.T
    if pair is None:
        return y, _Linear(x=x, t=None, mask=None)
    t = x @ pair.a.T
    branch = pair.scale * (t @ pair.b.T)
    if mask is not None:
        branch = branch * mask
    return y + branch, _Linear(x=x, t=t, mask=mask)


def _check_tokens(model: BaseModel, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim not in (1, 2) or tokens.shape[-1] != model.dims.seq_len:
        raise InputError(f"Token sequences must have length seq_len={model.dims.seq_len}, got shape {tokens.shape}")
    if tokens.size and not np.issubdtype(tokens.dtype, np.integer):
        raise InputError(f"Token ids must be integers, got dtype {tokens.dtype}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.dims.vocab):
        raise InputError(f"Token ids must lie in [0, {model.dims.vocab}), got range [{tokens.min()}, {tokens.max()}]")
    return tokens.astype(np.int64)


def forward(
    model: BaseModel,
    adapters: AdapterSet,
    tokens,
    dropout_seed: Optional[int] = None,
    dropout: float = 0.1,
) -> ForwardResult:
    """Run the adapted block on one sequence (shape `(seq_len,)`) or a batch (shape `(N, seq_len)`).

    Dropout with rate `dropout` is applied to the LoRA branch outputs only, and only when `dropout_seed`
    is given.

    Returns:
        [`ForwardResult`] with logits of shape `(classes,)` or `(N, classes)` and the activation cache.

    Raises:
        InputError: on out-of-vocabulary tokens or a wrong sequence length.
    """
    tokens = _check_tokens(model, tokens)
    single = tokens.ndim == 1
    batch = tokens[None, :] if single else tokens
    n, length = batch.shape
    rng = rng_for(dropout_seed, 1) if dropout_seed is not None and dropout > 0 else None

    masks = {}
    for target in ALL_TARGETS:
        if rng is not None and target in adapters:
            masks[target] = _dropout_mask(rng, (n, length, model.dims.target_shape(target)[0]), dropout)

    linears = {}

    def project(x, target):
        y, record = _linear(x, model.weight(target), adapters.get(target), masks.get(target))
        linears[target] = record
        return y

    x0 = model.embed[batch]
    q = project(x0, InjectionTarget.Q)
    k = project(x0, InjectionTarget.K)
    v = project(x0, InjectionTarget.V)
    scores = (q @ k.transpose(0, 2, 1)) / math.sqrt(model.dims.d)
    probs = _softmax(scores)
    z = probs @ v
    x1 = x0 + project(z, InjectionTarget.O)
    gate = project(x1, InjectionTarget.GATE)
    up = project(x1, InjectionTarget.UP)
    act = gate * _sigmoid(gate) * up
    x2 = x1 + project(act, InjectionTarget.DOWN)
    pooled = x2.mean(axis=1)
    logits = pooled @ model.w_head.T

    cache = ForwardCache(
        tokens=batch, x0=x0, q=q, k=k, v=v, probs=probs, z=z, x1=x1, gate=gate, up=up, act=act, pooled=pooled,
        linears=linears,
    )
    return ForwardResult(logits=logits[0] if single else logits, cache=cache)


def _linear_backward(dy, weight, pair, record: _Linear, base_grads, name, pair_grads):
    dx = dy @ weight
    if base_grads is not None:
        base_grads[name] += np.einsum("nlo,nli->oi", dy, record.x)
    if pair is not None:
        dbranch = dy if record.mask is None else dy * record.mask
        db = pair.scale * np.einsum("nlo,nlr->or", dbranch, record.t)
        dt = pair.scale * (dbranch @ pair.b)
        da = np.einsum("nlr,nli->ri", dt, record.x)
        dx = dx + dt @ pair.a
        pair_grads[pair.target] = (da, db)
    return dx


def _backward(model: BaseModel, adapters: AdapterSet, cache: ForwardCache, dlogits, with_base: bool):
    dims = model.dims
    base_grads = {name: np.zeros_like(w) for name, w in model.weights().items()} if with_base else None
    pair_grads = {}

    def back(dy, target):
        return _linear_backward(
            dy, model.weight(target), adapters.get(target), cache.linears[target], base_grads,
            _TARGET_WEIGHT[target], pair_grads,
        )

    if with_base:
        base_grads["w_head"] += dlogits.T @ cache.pooled
    dpooled = dlogits @ model.w_head
    length = cache.x0.shape[1]
    dx2 = np.repeat(dpooled[:, None, :] / length, length, axis=1)

    dx1 = dx2.copy()
    dact = back(dx2, InjectionTarget.DOWN)
    sig = _sigmoid(cache.gate)
    silu = cache.gate * sig
    dgate = dact * cache.up * sig * (1.0 + cache.gate * (1.0 - sig))
    dup = dact * silu
    dx1 += back(dgate, InjectionTarget.GATE)
    dx1 += back(dup, InjectionTarget.UP)

    dx0 = dx1.copy()
    dz = back(dx1, InjectionTarget.O)
    dprobs = dz @ cache.v.transpose(0, 2, 1)
    dv = cache.probs.transpose(0, 2, 1) @ dz
    dscores = cache.probs * (dprobs - np.sum(dprobs * cache.probs, axis=-1, keepdims=True))
    dscores /= math.sqrt(dims.d)
    dq = dscores @ cache.k
    dk = dscores.transpose(0, 2, 1) @ cache.q
    dx0 += back(dq, InjectionTarget.Q)
    dx0 += back(dk, InjectionTarget.K)
    dx0 += back(dv, InjectionTarget.V)

    if with_base:
        np.add.at(base_grads["embed"], cache.tokens, dx0)

    grads = AdapterSet.from_pairs(
        pair.replace(a=pair_grads[pair.target][0], b=pair_grads[pair.target][1]) for pair in adapters
    )
    return grads, base_grads


def _cross_entropy(logits, labels):
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    losses = log_norm - shifted[np.arange(len(labels)), labels]
    probs = _softmax(logits, axis=1)
    dlogits = probs
    dlogits[np.arange(len(labels)), labels] -= 1.0
    return float(np.mean(losses)), dlogits / len(labels)


def _stack_batch(batch, classes):
    if len(batch) == 0:
        raise InputError("loss_and_grads needs a non-empty batch")
    tokens = np.stack([np.asarray(tokens) for tokens, _ in batch])
    labels = np.asarray([int(label) for _, label in batch], dtype=np.int64)
    if labels.min() < 0 or labels.max() >= classes:
        raise InputError(f"Labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    return tokens, labels


class LossAndGrads(NamedTuple):
    loss: float
    grads: AdapterSet


def loss_and_grads(
    model: BaseModel,
    adapters: AdapterSet,
    batch: Sequence[Tuple[Sequence[int], int]],
    dropout_seed: Optional[int] = None,
    dropout: float = 0.1,
) -> LossAndGrads:
    """Mean cross-entropy over `batch` and its gradients with respect to the adapter factors.

    Base weights receive no gradient. Pass `dropout_seed=None` (the default) for exact gradients, as used by
    finite-difference checks.

    Raises:
        InputError: if `batch` is empty.
    """
    tokens, labels = _stack_batch(batch, model.dims.classes)
    result = forward(model, adapters, tokens, dropout_seed=dropout_seed, dropout=dropout)
    loss, dlogits = _cross_entropy(result.logits, labels)
    grads, _ = _backward(model, adapters, result.cache, dlogits, with_base=False)
    return LossAndGrads(loss=loss, grads=grads)


def predict(model: BaseModel, adapters: AdapterSet, tokens) -> np.ndarray:
    """Argmax class per sequence, ties broken by the lowest class index. Dropout is disabled."""
    logits = forward(model, adapters, np.atleast_2d(np.asarray(tokens)), dropout_seed=None).logits
    return np.argmax(logits, axis=1)


def accumulate(grads: Sequence[AdapterSet]) -> AdapterSet:
    """Sum of micro-batch gradients, to be passed to [`train_step`] with `accumulation=len(grads)`."""
    if not grads:
        raise InputError("Nothing to accumulate")
    total = grads[0]
    for g in grads[1:]:
        total = total + g
    return total


def train_step(
    adapters: AdapterSet, grads: AdapterSet, opt: OptimizerState, accumulation: int = 1
) -> Tuple[AdapterSet, OptimizerState]:
    """Apply one AdamW step to the adapter factors.

    Args:
        adapters ([`AdapterSet`]): current factors.
        grads ([`AdapterSet`]): sum of `accumulation` micro-batch mean-loss gradients.
        opt ([`OptimizerState`]): optimizer state, updated in place and returned.
        accumulation (`int`): number of micro-batches summed into `grads`.

    Raises:
        ScheduleError: once the configured step budget is exhausted.
    """
    if accumulation < 1:
        raise ValueError(f"accumulation must be at least 1, got {accumulation}")
    params = adapters.parameters()
    grad_params = {name: value / accumulation for name, value in grads.parameters().items()}
    new_params = adamw_update(params, grad_params, opt)
    return adapters.with_parameters(new_params), opt


def pretrain_base(
    task,
    seed: int,
    dims: Optional[ModelDims] = None,
    steps: int = 400,
    lr: float = 1e-2,
    batch_size: int = 16,
) -> BaseModel:
    """Train every base weight on the pooled distribution of `task`, then freeze.

    Args:
        task ([`~fedlora.data.TaskSpec`]): task whose pooled train splits are used.
        seed (`int`): seed for initialization and minibatch sampling.
        dims ([`ModelDims`], *optional*): model dimensions; `vocab`, `classes` and `seq_len` come from `task`.
        steps (`int`): number of AdamW steps. `0` returns the random initialization.
        lr (`float`): initial learning rate, decayed linearly to 0.
        batch_size (`int`): examples per step.
    """
    from .data import generate, pooled, stack_examples

    dims = dims or ModelDims()
    dims = ModelDims(vocab=task.vocab, d=dims.d, h=dims.h, classes=task.classes, seq_len=task.seq_len)
    model = BaseModel.initialize(dims, seed=derive_seed(seed, 0))
    if steps == 0:
        return model

    tokens, labels = stack_examples(pooled(generate(task), seed=seed))
    params = {name: np.array(w) for name, w in model.weights().items()}
    opt = OptimizerState(lr=lr, total_steps=steps)
    rng = rng_for(seed, 2)
    no_adapters = AdapterSet()
    for _ in tqdm(range(steps), desc="Pretraining base", leave=False):
        idx = rng.integers(0, len(labels), size=min(batch_size, len(labels)))
        current = BaseModel(dims=dims, **params)
        result = forward(current, no_adapters, tokens[idx], dropout_seed=None)
        _, dlogits = _cross_entropy(result.logits, labels[idx])
        _, base_grads = _backward(current, no_adapters, result.cache, dlogits, with_base=True)
        params = adamw_update(params, base_grads, opt)
    logger.info(f"Pretrained base model for {steps} steps on {len(labels)} pooled examples")
    return BaseModel(dims=dims, **params)


def flatten_delta(adapters: AdapterSet) -> np.ndarray:
    """Concatenated effective updates `s · B A` of all targets, in canonical target order."""
    return np.concatenate([pair.delta().ravel() for pair in adapters]) if len(adapters) else np.zeros(0)
