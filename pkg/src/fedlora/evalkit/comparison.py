# Lint as: python3
"""Comparison tables across model variants."""

import io
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from ..errors import InputError
from .metrics import EvalReport, VariantKind


METRICS = ("macro_acc", "min_acc", "h_mean")
_FLAG_COLUMNS = ("is_baseline", "is_best_single")
_FIRST_VALUE_COLUMN = 2 + len(_FLAG_COLUMNS)


def _client_column(client_id: int) -> str:
    return f"acc_client_{client_id}"


@dataclass
class ComparisonTable:
    """One row per variant: per-client and aggregate accuracies, and their deltas.

    Columns `delta_baseline_*` compare against the baseline variant, `delta_best_single_*` against the
    single-client variant with the highest Macro-Acc (NaN when the table holds no single-client variant).
    """

    frame: pd.DataFrame
    baseline: str
    best_single: Optional[str]

    @property
    def labels(self) -> List[str]:
        return list(self.frame["variant"])

    def row(self, label: str) -> pd.Series:
        matches = self.frame[self.frame["variant"] == label]
        if matches.empty:
            raise KeyError(f"No variant '{label}' in the comparison table")
        return matches.iloc[0]

    def delta(self, label: str, metric: str, against: str = "best_single") -> float:
        """Difference of `metric` between `label` and the `baseline` or `best_single` variant."""
        return float(self.row(label)[f"delta_{against}_{metric}"])

    def to_csv(self) -> str:
        """Shortest round-trip float CSV; [`ComparisonTable.from_csv`] reads it back unchanged."""
        return self.frame.to_csv(index=False)

    @classmethod
    def from_csv(cls, text: str) -> "ComparisonTable":
        frame = pd.read_csv(io.StringIO(text), float_precision="round_trip", keep_default_na=False, na_values=[""])
        frame["variant"] = frame["variant"].astype(str)
        frame["kind"] = frame["kind"].astype(str)
        for column in _FLAG_COLUMNS:
            frame[column] = frame[column].astype(bool)
        for column in frame.columns[_FIRST_VALUE_COLUMN:]:
            frame[column] = frame[column].astype(np.float64)
        baseline = frame.loc[frame["is_baseline"], "variant"]
        best = frame.loc[frame["is_best_single"], "variant"]
        return cls(frame=frame, baseline=baseline.iloc[0], best_single=best.iloc[0] if len(best) else None)

    def to_text(self) -> str:
        """Aligned table with accuracies and deltas in percent, two decimals."""
        shown = self.frame.copy()
        for column in shown.columns[_FIRST_VALUE_COLUMN:]:
            shown[column] = shown[column].map(_percent_delta if column.startswith("delta") else _percent)
        return shown.to_string(index=False) + "\n"


def _percent(value) -> str:
    return "" if pd.isna(value) else f"{100.0 * value:.2f}"


def _percent_delta(value) -> str:
    return "" if pd.isna(value) else f"{100.0 * value:+.2f}"


def compare(reports: Sequence[EvalReport], baseline: Optional[str] = None) -> ComparisonTable:
    """Tabulate `reports` with deltas against a baseline and against the best single-client variant.

    Args:
        reports (`list` of [`EvalReport`]): one report per variant, all over the same clients.
        baseline (`str`, *optional*): label of the reference variant. Defaults to the first report of kind
            `baseline`, else the first report.

    Raises:
        InputError: if `reports` is empty, labels repeat, or the reports cover different clients.

    Example:

    ```py
    >>> table = compare([baseline_report, single_0_report, federated_report])
    >>> print(table.to_text())
    ```
    """
    if not reports:
        raise InputError("compare needs at least one report")
    labels = [report.label for report in reports]
    if len(set(labels)) != len(labels):
        raise InputError(f"Variant labels must be unique, got {labels}")
    clients = reports[0].client_ids
    for report in reports[1:]:
        if report.client_ids != clients:
            raise InputError(
                f"Report '{report.label}' covers clients {report.client_ids}, '{reports[0].label}' covers {clients}"
            )

    if baseline is None:
        baseline_report = next((r for r in reports if r.kind == VariantKind.BASELINE.value), reports[0])
    else:
        matches = [r for r in reports if r.label == baseline]
        if not matches:
            raise InputError(f"Baseline '{baseline}' is not among the reports {labels}")
        baseline_report = matches[0]
    singles = [r for r in reports if r.kind == VariantKind.SINGLE_CLIENT.value]
    # first one wins ties
    best_single = max(singles, key=lambda r: r.macro_acc) if singles else None

    rows = []
    for report in reports:
        row = {
            "variant": report.label,
            "kind": report.kind,
            "is_baseline": report is baseline_report,
            "is_best_single": report is best_single,
        }
        for client_id in clients:
            row[_client_column(client_id)] = report.per_client_acc[client_id]
        for metric in METRICS:
            row[metric] = getattr(report, metric)
        for client_id in clients:
            row[f"delta_baseline_client_{client_id}"] = (
                report.per_client_acc[client_id] - baseline_report.per_client_acc[client_id]
            )
        for metric in METRICS:
            row[f"delta_baseline_{metric}"] = getattr(report, metric) - getattr(baseline_report, metric)
        for metric in METRICS:
            row[f"delta_best_single_{metric}"] = (
                getattr(report, metric) - getattr(best_single, metric) if best_single is not None else np.nan
            )
        rows.append(row)
    frame = pd.DataFrame(rows)
    return ComparisonTable(
        frame=frame,
        baseline=baseline_report.label,
        best_single=best_single.label if best_single is not None else None,
    )
