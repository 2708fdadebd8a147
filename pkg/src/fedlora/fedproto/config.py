# Lint as: python3
""" FedConfig records everything needed to reproduce a federated experiment.
"""

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import toml

from .. import config
from ..aggregation import MergeStrategy, WeightingMode
from ..data import TaskSpec
from ..errors import ConfigError
from ..linalg import derive_seed
from ..lora_model import ALL_TARGETS, InjectionTarget, ModelDims, ScalingMode
from ..utils.logging import get_logger


logger = get_logger(__name__)

TRANSPORTS = ("in_process", "socket")


@dataclass
class FedConfig:
    """Full configuration of a federated LoRA experiment.

    Training defaults follow the reference setup at toy scale: 3 rounds of 1 local epoch, AdamW with betas
    (0.9, 0.999) and linear decay, micro-batches of 1 with 4-step accumulation, LoRA rank 8, alpha 32 and
    dropout 0.1 on the q/k/v/o and gate/up/down projections. The learning rate is 3e-3 because the toy model
    is many orders of magnitude smaller than billion-parameter backbones.

    Note: `local_epochs=0` is accepted for protocol tests; clients then upload what they received.
    """

    rounds: int = 3
    local_epochs: int = 1
    rank: int = 8
    alpha: float = 32.0
    scaling_mode: str = ScalingMode.ALPHA_OVER_R.value
    weighting: str = WeightingMode.SAMPLE_WEIGHTED.value
    merge_strategy: str = MergeStrategy.SVD.value
    targets: Tuple[str, ...] = tuple(t.value for t in ALL_TARGETS)
    dropout: float = 0.1
    lr: float = 3e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    accumulation: int = 4
    client_timeout: float = config.DEFAULT_CLIENT_TIMEOUT
    registration_timeout: float = config.DEFAULT_REGISTRATION_TIMEOUT
    seed: int = 0
    pretrain_steps: int = 400
    pretrain_lr: float = 1e-2
    reward_per_update: int = config.DEFAULT_REWARD_PER_UPDATE
    report_round: int = 0
    d: int = 16
    h: int = 32
    task: TaskSpec = field(default_factory=TaskSpec)
    transport: str = "in_process"
    listen_address: str = config.DEFAULT_LISTEN_ADDRESS
    registry_path: Optional[str] = None
    key_dir: Optional[str] = None
    ledger_path: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.task, dict):
            self.task = TaskSpec(**self.task)
        self.targets = tuple(InjectionTarget(t).value for t in self.targets)
        self.betas = tuple(float(b) for b in self.betas)
        if self.rounds < 1:
            raise ConfigError(f"'rounds' must be at least 1, got {self.rounds}")
        if self.local_epochs < 0:
            raise ConfigError(f"'local_epochs' must be non-negative, got {self.local_epochs}")
        if self.local_epochs == 0:
            logger.warning("local_epochs=0: clients will upload the adapters they receive without training")
        if self.rank < 1:
            raise ConfigError(f"'rank' must be at least 1, got {self.rank}")
        if self.rank > min(self.d, self.h):
            raise ConfigError(f"'rank'={self.rank} exceeds the smallest projection dimension {min(self.d, self.h)}")
        if not self.targets:
            raise ConfigError("At least one injection target is required")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"'dropout' must lie in [0, 1), got {self.dropout}")
        if self.accumulation < 1:
            raise ConfigError(f"'accumulation' must be at least 1, got {self.accumulation}")
        if self.client_timeout <= 0 or self.registration_timeout <= 0:
            raise ConfigError("Timeouts must be positive")
        if not 0 <= self.report_round <= self.rounds:
            raise ConfigError(f"'report_round' must lie in [0, rounds={self.rounds}], got {self.report_round}")
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"'transport' has to be one of {TRANSPORTS}, got {self.transport}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"'betas' must be two values in [0, 1), got {self.betas}")
        for name, enum_cls in (
            ("scaling_mode", ScalingMode),
            ("weighting", WeightingMode),
            ("merge_strategy", MergeStrategy),
        ):
            try:
                setattr(self, name, enum_cls(getattr(self, name)).value)
            except ValueError:
                raise ConfigError(
                    f"'{name}' has to be one of {[m.value for m in enum_cls]}, got {getattr(self, name)}"
                ) from None

    @property
    def model_dims(self) -> ModelDims:
        return ModelDims(vocab=self.task.vocab, d=self.d, h=self.h, classes=self.task.classes, seq_len=self.task.seq_len)

    @property
    def clients(self) -> int:
        return self.task.clients

    @property
    def effective_report_round(self) -> int:
        return self.report_round or self.rounds

    @property
    def listen_host_port(self) -> Tuple[str, int]:
        host, _, port = self.listen_address.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"'listen_address' must look like host:port, got {self.listen_address}")
        return host, int(port)

    def pretrain_seed(self) -> int:
        return derive_seed(self.seed, 1)

    def adapter_seed(self) -> int:
        return derive_seed(self.seed, 2)

    def client_seed(self, client_id: int) -> int:
        return derive_seed(self.seed, 3, client_id)

    def total_steps(self, n_k: int) -> int:
        """Optimizer steps of a client over the whole experiment."""
        return self.rounds * self.local_epochs * math.ceil(n_k / self.accumulation)

    def with_seed(self, seed: int) -> "FedConfig":
        return dataclasses.replace(self, seed=seed, task=dataclasses.replace(self.task, seed=seed))

    def to_dict(self) -> dict:
        data = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "task"}
        data["targets"] = list(self.targets)
        data["betas"] = list(self.betas)
        data = {key: value for key, value in data.items() if value is not None}
        data["task"] = self.task.to_dict()
        return data

    @classmethod
    def from_dict(cls, fed_config_dict: dict) -> "FedConfig":
        field_names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(fed_config_dict) - field_names - {"model"}
        if unknown:
            logger.warning(f"Ignoring unknown configuration keys {sorted(unknown)}")
        kwargs = {k: v for k, v in fed_config_dict.items() if k in field_names}
        # a [model] table may carry the block width and MLP width
        for key, value in fed_config_dict.get("model", {}).items():
            if key in ("d", "h"):
                kwargs[key] = value
        if "task" in kwargs:
            task_fields = {f.name for f in dataclasses.fields(TaskSpec)}
            task_unknown = set(kwargs["task"]) - task_fields
            if task_unknown:
                logger.warning(f"Ignoring unknown task keys {sorted(task_unknown)}")
            kwargs["task"] = TaskSpec(**{k: v for k, v in kwargs["task"].items() if k in task_fields})
        try:
            fed_config = cls(**kwargs)
        except TypeError as err:
            raise ConfigError(f"Invalid configuration: {err}") from err
        seed = config.seed_override()
        if seed is not None:
            logger.info(f"FEDLORA_SEED={seed} overrides the configured seed {fed_config.seed}")
            fed_config = fed_config.with_seed(seed)
        return fed_config

    @classmethod
    def from_toml(cls, path) -> "FedConfig":
        """Load a configuration from a TOML file.

        Example:

        ```py
        >>> fed_config = FedConfig.from_toml("configs/default.toml")
        ```
        """
        logger.info(f"Loading configuration from {path}")
        try:
            raw = toml.load(str(path))
        except toml.TomlDecodeError as err:
            raise ConfigError(f"Could not parse {path}: {err}") from err
        return cls.from_dict(raw)

    def to_toml(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            toml.dump(self.to_dict(), f)
        return path
