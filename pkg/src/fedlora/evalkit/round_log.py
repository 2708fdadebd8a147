# Lint as: python3
"""Per-round dynamics of a federated run."""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

from ..data import ClientShard
from ..lora_model import BaseModel
from ..saving import write_locked
from .metrics import EvalReport, VariantKind, evaluate_adapters


@dataclass
class RoundLogRecord:
    """Global and pre-aggregation local reports of one round.

    `round1_dip` is set on the round-1 record when the first global model has a lower Macro-Acc than the best
    local model that went into it.
    """

    round: int
    global_report: EvalReport
    local_reports: Dict[int, EvalReport]
    residual_norms: Dict[str, float]
    accepted: List[int] = field(default_factory=list)
    stragglers: List[int] = field(default_factory=list)
    rejected: Dict[int, str] = field(default_factory=dict)
    round1_dip: bool = False

    @property
    def best_local(self) -> EvalReport:
        # lowest client id wins ties
        return max(self.local_reports.values(), key=lambda report: report.macro_acc)

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "global_report": self.global_report.to_dict(),
            "local_reports": {str(k): v.to_dict() for k, v in self.local_reports.items()},
            "residual_norms": dict(self.residual_norms),
            "accepted": list(self.accepted),
            "stragglers": list(self.stragglers),
            "rejected": {str(k): v for k, v in self.rejected.items()},
            "round1_dip": self.round1_dip,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RoundLogRecord":
        return cls(
            round=int(data["round"]),
            global_report=EvalReport.from_dict(data["global_report"]),
            local_reports={int(k): EvalReport.from_dict(v) for k, v in data["local_reports"].items()},
            residual_norms={k: float(v) for k, v in data["residual_norms"].items()},
            accepted=[int(k) for k in data.get("accepted", [])],
            stragglers=[int(k) for k in data.get("stragglers", [])],
            rejected={int(k): v for k, v in data.get("rejected", {}).items()},
            round1_dip=bool(data["round1_dip"]),
        )


def round_log(result, model: BaseModel, shards: Sequence[ClientShard]) -> List[RoundLogRecord]:
    """One record per completed round of `result`, a [`~fedlora.fedproto.FederatedResult`].

    Every report is measured on the test splits of all `shards`.
    """
    records = []
    for record in result.rounds:
        global_report = evaluate_adapters(
            model, record.state.adapters, shards, label=f"global_round_{record.round}", kind=VariantKind.FEDERATED
        )
        local_reports = {
            client_id: evaluate_adapters(
                model, update.adapters, shards, label=f"local_{client_id}_round_{record.round}", kind=VariantKind.LOCAL
            )
            for client_id, update in sorted(record.updates.items())
        }
        entry = RoundLogRecord(
            round=record.round,
            global_report=global_report,
            local_reports=local_reports,
            residual_norms=dict(record.state.residual_norms),
            accepted=sorted(record.updates),
            stragglers=list(record.stragglers),
            rejected=dict(record.rejected),
        )
        if record.round == 1:
            entry.round1_dip = global_report.macro_acc < entry.best_local.macro_acc
        records.append(entry)
    return records


def save_round_log(records: Sequence[RoundLogRecord], path) -> Path:
    """Write `records` as JSON lines."""
    lines = "".join(json.dumps(record.to_dict(), sort_keys=True) + "\n" for record in records)
    return write_locked(path, lines.encode("utf-8"))


def load_round_log(path) -> List[RoundLogRecord]:
    with open(path, encoding="utf-8") as f:
        return [RoundLogRecord.from_dict(json.loads(line)) for line in f if line.strip()]
