# Lint as: python3
"""Adapter-only federated averaging.

Each client update is turned back into its effective update `s · B_k A_k`, the updates are averaged with
sample or uniform weights, and the average is re-factorized into rank-`r` factors by truncated SVD so
clients can resume low-rank training from it.
"""

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import AggregationError, ProtocolError, RankError, ShapeError
from .linalg import canonical_signs, frobenius_norm, truncated_svd
from .lora_model import AdapterPair, AdapterSet, InjectionTarget, lora_scale
from .utils.logging import get_logger


logger = get_logger(__name__)


class WeightingMode(str, enum.Enum):
    SAMPLE_WEIGHTED = "sample_weighted"
    UNIFORM = "uniform"


class MergeStrategy(str, enum.Enum):
    SVD = "svd"
    FACTOR_AVERAGE = "factor_average"


@dataclass(frozen=True)
class ClientUpdate:
    """Adapters uploaded by one client for one round, with its training sample count."""

    client_id: int
    round: int
    n_k: int
    adapters: AdapterSet
    signature: bytes = b""

    def __post_init__(self):
        if self.n_k < 1:
            raise ValueError(f"n_k must be at least 1, got {self.n_k} for client {self.client_id}")


@dataclass(frozen=True)
class GlobalAdapterState:
    """Aggregated adapters of a round.

    `residual_norms` maps target names to the Frobenius norm of what the re-factorization dropped from the
    averaged update; `weights` maps client ids to the aggregation weights used.
    """

    round: int
    adapters: AdapterSet
    residual_norms: Dict[str, float] = field(default_factory=dict)
    weights: Dict[int, float] = field(default_factory=dict)


def reconstruct_delta(update: ClientUpdate, target) -> np.ndarray:
    """Effective update `s · B_k A_k` of `update` on `target`.

    Raises:
        ShapeError: if the update carries no adapter for `target`.
    """
    pair = update.adapters.get(target)
    if pair is None:
        raise ShapeError(f"Update from client {update.client_id} has no adapter for target '{InjectionTarget(target).value}'")
    return pair.delta()


def renormalize_weights(responding: Mapping[int, int], mode=WeightingMode.SAMPLE_WEIGHTED) -> Dict[int, float]:
    """Aggregation weights over the responding clients only.

    Args:
        responding (`dict`): client id to sample count `n_k` for every client whose update is used.
        mode ([`WeightingMode`]): `n_k / N` weights or uniform `1 / K` weights.

    Returns:
        `dict` from client id (ascending) to weight; the weights sum to 1.

    Raises:
        AggregationError: if no client responded.
    """
    mode = WeightingMode(mode)
    if not responding:
        raise AggregationError("Cannot weight an empty set of responding clients")
    client_ids = sorted(responding)
    if mode is WeightingMode.UNIFORM:
        return {client_id: 1.0 / len(client_ids) for client_id in client_ids}
    total = sum(int(responding[client_id]) for client_id in client_ids)
    return {client_id: int(responding[client_id]) / total for client_id in client_ids}


def _validate(updates: Sequence[ClientUpdate]) -> List[ClientUpdate]:
    if not updates:
        raise AggregationError("Cannot aggregate an empty list of updates")
    rounds = {update.round for update in updates}
    if len(rounds) > 1:
        raise ProtocolError(f"Updates from different rounds cannot be aggregated together: {sorted(rounds)}")
    ordered = sorted(updates, key=lambda update: update.client_id)
    ids = [update.client_id for update in ordered]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"Duplicate client ids in updates: {ids}")
    reference = ordered[0].adapters
    layout = [(p.target, p.a.shape, p.b.shape, p.alpha, p.scaling_mode) for p in reference]
    for update in ordered[1:]:
        other = [(p.target, p.a.shape, p.b.shape, p.alpha, p.scaling_mode) for p in update.adapters]
        if other != layout:
            raise ShapeError(
                f"Update from client {update.client_id} does not match the adapter layout of client {ordered[0].client_id}"
            )
    return ordered


def mean_deltas(
    updates: Sequence[ClientUpdate], mode=WeightingMode.SAMPLE_WEIGHTED
) -> Dict[InjectionTarget, np.ndarray]:
    """Weighted mean of the reconstructed updates per target, summed in ascending client id order."""
    ordered = _validate(updates)
    weights = renormalize_weights({u.client_id: u.n_k for u in ordered}, mode)
    means = {}
    for target in ordered[0].adapters.targets:
        total = np.zeros(ordered[0].adapters[target].shape)
        for update in ordered:
            total = total + weights[update.client_id] * reconstruct_delta(update, target)
        means[target] = total
    return means


def refactorize(delta: np.ndarray, rank: int, template: AdapterPair):
    """Rank-`rank` factors `(A', B')` with `s · B' A'` the best rank-`rank` approximation of `delta`.

    Singular vector signs are fixed so that the largest-magnitude entry of every left singular vector is
    non-negative. Returns `(pair, residual_norm)`.
    """
    svd = truncated_svd(delta, rank)
    u, vt = canonical_signs(svd.u, svd.vt, anchor="u")
    # the scale of the re-factorized pair follows its own rank
    scale = lora_scale(template.alpha, rank, template.scaling_mode)
    root = np.sqrt(svd.singular_values / scale)
    b = u * root
    a = root[:, None] * vt
    residual = frobenius_norm(delta - svd.reconstruct())
    return template.replace(a=a, b=b), residual


def aggregate(
    updates: Sequence[ClientUpdate],
    mode=WeightingMode.SAMPLE_WEIGHTED,
    rank: Optional[int] = None,
    strategy=MergeStrategy.SVD,
) -> GlobalAdapterState:
    """Merge client updates into the global adapters of their round.

    Args:
        updates (`list` of [`ClientUpdate`]): verified updates of one round.
        mode ([`WeightingMode`]): `sample_weighted` (`n_k / N`) or `uniform` (`1 / K`).
        rank (`int`, *optional*): rank of the re-factorized adapters, defaults to the update rank.
        strategy ([`MergeStrategy`]): `svd` averages the reconstructed updates and re-factorizes them,
            `factor_average` averages the `A` and `B` factors directly.

    Raises:
        AggregationError: if `updates` is empty.
        ProtocolError: if the updates belong to different rounds or repeat a client.
        ShapeError: if the adapter layouts differ.
        RankError: if `rank` is out of range, or differs from the update rank under `factor_average`.
    """
    mode = WeightingMode(mode)
    strategy = MergeStrategy(strategy)
    ordered = _validate(updates)
    rank = rank or ordered[0].adapters.rank
    if strategy is MergeStrategy.FACTOR_AVERAGE and rank != ordered[0].adapters.rank:
        raise RankError(f"factor_average keeps the update rank {ordered[0].adapters.rank}, got rank={rank}")
    weights = renormalize_weights({u.client_id: u.n_k for u in ordered}, mode)
    means = mean_deltas(ordered, mode)

    pairs, residuals = [], {}
    for target, mean in means.items():
        template = ordered[0].adapters[target]
        if strategy is MergeStrategy.SVD:
            pair, residual = refactorize(mean, rank, template)
        else:
            a = np.zeros_like(template.a)
            b = np.zeros_like(template.b)
            for update in ordered:
                a = a + weights[update.client_id] * update.adapters[target].a
                b = b + weights[update.client_id] * update.adapters[target].b
            pair = template.replace(a=a, b=b)
            residual = frobenius_norm(mean - pair.delta())
        pairs.append(pair)
        residuals[target.value] = residual

    state = GlobalAdapterState(
        round=ordered[0].round, adapters=AdapterSet.from_pairs(pairs), residual_norms=residuals, weights=weights
    )
    logger.info(
        f"Aggregated round {state.round} over clients {list(weights)} ({mode.value}, {strategy.value}); "
        f"max residual {max(residuals.values()) if residuals else math.nan:.3e}"
    )
    return state
