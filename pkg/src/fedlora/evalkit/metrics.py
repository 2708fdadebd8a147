# Lint as: python3
"""Per-client accuracy and the fairness aggregates Macro-Acc, Min-Acc and H-mean.

Accuracies are fractions in [0, 1] throughout; rendering as percentages happens in the comparison table.
"""

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Sequence

import numpy as np

from ..data import ClientShard, Example, stack_examples
from ..errors import InputError
from ..lora_model import AdapterSet, BaseModel, predict
from ..utils.logging import get_logger


logger = get_logger(__name__)

# slack for the AM-HM ordering under floating point
_ORDER_TOLERANCE = 1e-12


class VariantKind(str, enum.Enum):
    BASELINE = "baseline"
    SINGLE_CLIENT = "single_client"
    FEDERATED = "federated"
    LOCAL = "local"


def accuracy(model: BaseModel, adapters: AdapterSet, examples: Sequence[Example]) -> float:
    """Fraction of `examples` whose argmax prediction matches the label. Dropout is disabled.

    Raises:
        InputError: if `examples` is empty.
    """
    if len(examples) == 0:
        raise InputError("Cannot compute accuracy on an empty split")
    tokens, labels = stack_examples(examples)
    predictions = predict(model, adapters, tokens)
    return float(np.count_nonzero(predictions == labels)) / len(labels)


def aggregate_metrics(per_client_acc: Mapping[int, float]) -> Dict[str, float]:
    """Macro-Acc, Min-Acc and H-mean of per-client accuracies.

    - `macro_acc = (1/K) Σ acc_k`
    - `min_acc = min_k acc_k`
    - `h_mean = K / Σ (1/acc_k)`, defined as 0 when any `acc_k` is 0

    Sums are exactly rounded, so the result does not depend on the order of the clients.

    Args:
        per_client_acc (`dict`): client id to accuracy in [0, 1].

    Returns:
        `dict` with keys `macro_acc`, `min_acc` and `h_mean`.

    Raises:
        InputError: if `per_client_acc` is empty or holds values outside [0, 1].

    Example:

    ```py
    >>> aggregate_metrics({0: 0.5846, 1: 0.4101, 2: 0.3402})
    {'macro_acc': 0.4449666..., 'min_acc': 0.3402, 'h_mean': 0.4231...}
    ```
    """
    if not per_client_acc:
        raise InputError("aggregate_metrics needs at least one client accuracy")
    values = [float(v) for v in per_client_acc.values()]
    bad = [v for v in values if not 0.0 <= v <= 1.0]
    if bad:
        raise InputError(f"Accuracies must lie in [0, 1], got {bad}")
    k = len(values)
    macro = math.fsum(values) / k
    if min(values) == 0.0:
        h_mean = 0.0
    else:
        h_mean = k / math.fsum(1.0 / v for v in values)
    return {"macro_acc": macro, "min_acc": min(values), "h_mean": h_mean}


@dataclass(frozen=True)
class EvalReport:
    """Accuracies of one model variant on every client's test split.

    `zero_accuracy` flags that some client scored 0, in which case `h_mean` is 0 by convention.
    """

    label: str
    per_client_acc: Dict[int, float]
    macro_acc: float
    min_acc: float
    h_mean: float
    kind: str = VariantKind.BASELINE.value
    zero_accuracy: bool = False
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", VariantKind(self.kind).value)
        object.__setattr__(
            self, "per_client_acc", {int(k): float(v) for k, v in sorted(self.per_client_acc.items())}
        )
        if self.min_acc != min(self.per_client_acc.values()):
            raise ValueError(f"Report '{self.label}': min_acc {self.min_acc} is not the smallest client accuracy")
        if not self.zero_accuracy and not (
            self.min_acc - _ORDER_TOLERANCE <= self.h_mean <= self.macro_acc + _ORDER_TOLERANCE
        ):
            raise ValueError(
                f"Report '{self.label}': expected min_acc <= h_mean <= macro_acc, got "
                f"{self.min_acc}, {self.h_mean}, {self.macro_acc}"
            )

    @classmethod
    def from_accuracies(cls, label: str, per_client_acc: Mapping[int, float], kind=VariantKind.BASELINE, **metadata):
        metrics = aggregate_metrics(per_client_acc)
        zero = min(per_client_acc.values()) == 0.0
        if zero:
            logger.warning(f"Report '{label}': a client has accuracy 0, H-mean set to 0 by convention")
        return cls(
            label=label,
            per_client_acc=dict(per_client_acc),
            kind=VariantKind(kind).value,
            zero_accuracy=zero,
            metadata={key: str(value) for key, value in metadata.items()},
            **metrics,
        )

    @property
    def client_ids(self):
        return list(self.per_client_acc)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "kind": self.kind,
            "per_client_acc": {str(k): v for k, v in self.per_client_acc.items()},
            "macro_acc": self.macro_acc,
            "min_acc": self.min_acc,
            "h_mean": self.h_mean,
            "zero_accuracy": self.zero_accuracy,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        data = dict(data)
        data["per_client_acc"] = {int(k): float(v) for k, v in data["per_client_acc"].items()}
        return cls(**data)


def evaluate_adapters(
    model: BaseModel,
    adapters: AdapterSet,
    shards: Sequence[ClientShard],
    label: str,
    kind=VariantKind.BASELINE,
    **metadata,
) -> EvalReport:
    """[`EvalReport`] of `adapters` over the test split of every shard."""
    per_client = {shard.client_id: accuracy(model, adapters, shard.test) for shard in shards}
    report = EvalReport.from_accuracies(label, per_client, kind=kind, **metadata)
    logger.info(
        f"{label}: macro {report.macro_acc:.4f}, min {report.min_acc:.4f}, h-mean {report.h_mean:.4f}"
    )
    return report
