# Lint as: python3
"""Principal component view of how far client adapter updates spread apart."""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from .. import config
from ..aggregation import ClientUpdate
from ..errors import InputError
from ..linalg import canonical_signs, truncated_svd
from ..lora_model import flatten_delta
from ..saving import write_locked


@dataclass(frozen=True)
class PcaProjection:
    """Client updates projected on their top two principal directions.

    `explained_variance` holds the sample variance along each direction; `total_variance` is the summed
    variance over all coordinates. Directions beyond the data's rank are reported with zero variance.
    """

    points: Dict[int, Tuple[float, float]]
    explained_variance: Tuple[float, float]
    total_variance: float
    components: np.ndarray

    @property
    def client_ids(self) -> List[int]:
        return list(self.points)

    @property
    def explained_variance_ratio(self) -> Tuple[float, float]:
        if self.total_variance == 0.0:
            return (0.0, 0.0)
        return tuple(v / self.total_variance for v in self.explained_variance)

    def points_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(client_id, pc1, pc2) for client_id, (pc1, pc2) in self.points.items()],
            columns=["client_id", "pc1", "pc2"],
        )

    def variance_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "component": ["pc1", "pc2"],
                "explained_variance": list(self.explained_variance),
                "explained_variance_ratio": list(self.explained_variance_ratio),
            }
        )

    def write(self, directory) -> Tuple[Path, Path]:
        """Write `pca_points.csv` and `pca_variance.csv` into `directory`."""
        directory = Path(directory)
        points = write_locked(
            directory / config.PCA_POINTS_FILENAME, self.points_frame().to_csv(index=False).encode("utf-8")
        )
        variance = write_locked(
            directory / config.PCA_VARIANCE_FILENAME, self.variance_frame().to_csv(index=False).encode("utf-8")
        )
        return points, variance


def pca_updates(updates: Sequence[ClientUpdate]) -> PcaProjection:
    """Project every client's reconstructed update `s · B A`, flattened across targets, onto two components.

    The vectors are centered across clients and decomposed by SVD of the `K x P` centered matrix. Each
    principal direction is signed so that its largest-magnitude loading is non-negative. Updates are
    ordered by client id, so the result does not depend on the order of `updates`.

    Raises:
        InputError: if fewer than two updates are given or their flattened sizes differ.
    """
    if len(updates) < 2:
        raise InputError(f"PCA needs at least two client updates, got {len(updates)}")
    ordered = sorted(updates, key=lambda update: update.client_id)
    vectors = [flatten_delta(update.adapters) for update in ordered]
    sizes = {vector.size for vector in vectors}
    if len(sizes) != 1:
        raise InputError(f"Client updates flatten to different sizes {sorted(sizes)}")
    data = np.stack(vectors)
    centered = data - data.mean(axis=0)
    k = min(2, *centered.shape)
    svd = truncated_svd(centered, k)
    _, components = canonical_signs(svd.u, svd.vt, anchor="vt")
    coordinates = centered @ components.T
    variance = svd.singular_values**2 / (len(ordered) - 1)
    if k < 2:
        coordinates = np.hstack([coordinates, np.zeros((len(ordered), 2 - k))])
        variance = np.concatenate([variance, np.zeros(2 - k)])
    total = float(np.sum(centered**2) / (len(ordered) - 1))
    points = {update.client_id: (float(row[0]), float(row[1])) for update, row in zip(ordered, coordinates)}
    return PcaProjection(
        points=points,
        explained_variance=(float(variance[0]), float(variance[1])),
        total_variance=total,
        components=components,
    )


def load_points(path) -> Dict[int, Tuple[float, float]]:
    frame = pd.read_csv(path, float_precision="round_trip")
    return {int(row.client_id): (float(row.pc1), float(row.pc2)) for row in frame.itertuples(index=False)}
