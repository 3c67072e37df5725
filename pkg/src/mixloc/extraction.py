"""Iterative extraction of sound-associated regions from a weighted grid.

Per sample, the loop repeatedly

  1. selects the cell with the highest remaining similarity value and reads
     its weighted feature vector,
  2. scores every cell against that vector (foreground response) and against
     the background probe (background response),
  3. marks the region where foreground strictly beats background, skipping
     cells already claimed by an earlier region and forcing the selected
     cell in so the loop always makes progress,
  4. zeroes the region in a private working copy of the similarity map,

until the remaining maximum drops to the threshold or the iteration cap is
hit.  Regions collected for one sample are pairwise disjoint by
construction of step 4.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatchError
from .grids import CellIndex, FeatureGrid, SimilarityMap


@dataclass(frozen=True)
class ExtractionConfig:
    """Loop threshold and iteration cap.

    ``epsilon`` defaults to 1/(h*w), the mean of a self-normalized map, so
    only above-average cells seed iterations; ``t_max`` defaults to h*w.
    Leave either as None to use the grid-derived default.
    """

    epsilon: Optional[float] = None
    t_max: Optional[int] = None

    def __post_init__(self):
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.t_max is not None and self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max}")

    def resolve(self, height: int, width: int) -> tuple[float, int]:
        cells = height * width
        eps = self.epsilon if self.epsilon is not None else 1.0 / cells
        cap = self.t_max if self.t_max is not None else cells
        return eps, cap


@dataclass(frozen=True)
class IterationRecord:
    """One extracted cell: where it was, its vector, and its carved region."""

    step: int
    cell: CellIndex
    cell_vector: np.ndarray  # (c,)
    region: np.ndarray  # (h, w) bool
    peak_value: float
    fg_response: np.ndarray  # (h, w) inner products against cell_vector


@dataclass(frozen=True)
class ObjectBank:
    """Ordered records extracted from one sample."""

    sample: int
    records: list[IterationRecord]

    @property
    def iteration_count(self) -> int:
        return len(self.records)


def extract_regions(
    f_hat: FeatureGrid,
    self_maps: SimilarityMap,
    probe_vectors: np.ndarray,
    cfg: ExtractionConfig = ExtractionConfig(),
) -> list[ObjectBank]:
    """Run the carving loop independently for every sample.

    ``probe_vectors`` holds one background probe per sample, shape (B, c).
    The caller's similarity map is never mutated; each sample loop works on
    a private copy.
    """
    probe_vectors = np.asarray(probe_vectors, dtype=np.float64)
    if self_maps.data.shape != f_hat.data.shape[:3]:
        raise DimensionMismatchError(
            f"similarity shape {self_maps.data.shape} does not match "
            f"grid {f_hat.data.shape[:3]}"
        )
    if probe_vectors.shape != (f_hat.batch, f_hat.channels):
        raise DimensionMismatchError(
            f"probe shape {probe_vectors.shape} does not match "
            f"({f_hat.batch}, {f_hat.channels})"
        )
    eps, cap = cfg.resolve(f_hat.height, f_hat.width)
    banks = []
    for b in range(f_hat.batch):
        banks.append(_extract_sample(b, f_hat.data[b], self_maps.data[b], probe_vectors[b], eps, cap))
    return banks


def _extract_sample(
    sample: int,
    features: np.ndarray,  # (h, w, c)
    similarity: np.ndarray,  # (h, w)
    probe: np.ndarray,  # (c,)
    eps: float,
    cap: int,
) -> ObjectBank:
    working = similarity.copy()
    width = working.shape[1]
    bg_response = features @ probe  # constant across iterations
    carved = np.zeros(working.shape, dtype=bool)
    records: list[IterationRecord] = []
    for step in range(cap):
        flat = int(np.argmax(working))  # row-major first-occurrence tie-break
        row, col = divmod(flat, width)
        peak = float(working[row, col])
        if not peak > eps:
            break
        cell_vector = features[row, col].copy()
        fg_response = features @ cell_vector
        # Ties go to background; already-localized cells stay with their
        # earlier region so regions of one sample are pairwise disjoint.
        region = (fg_response > bg_response) & ~carved
        region[row, col] = True  # forced inclusion guarantees progress
        carved |= region
        working[region] = 0.0
        records.append(
            IterationRecord(
                step=step,
                cell=CellIndex(sample, row, col),
                cell_vector=cell_vector,
                region=region,
                peak_value=peak,
                fg_response=fg_response,
            )
        )
    return ObjectBank(sample=sample, records=records)
