"""Value types and elementary tensor operations for audio-visual feature grids.

A visual scene is a batch of h x w grids of c-dimensional cell features; the
audio side is one c-dimensional embedding per sample.  Everything downstream
(similarity maps, region extraction, grouping, losses) is built from the four
small operations in this module.

All value types are immutable after construction: the wrapped arrays are
copied to float64 and marked read-only, so instances can be shared freely
across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionMismatchError

# Vectors with a norm below this are treated as zero in cosine computations.
ZERO_NORM_EPS = 1e-12


def _freeze(data, shape_hint: str) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{shape_hint} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureGrid:
    """Batch of visual feature grids, shape (B, h, w, c), row-major."""

    data: np.ndarray

    def __post_init__(self):
        arr = _freeze(self.data, "FeatureGrid")
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise DimensionMismatchError(
                f"FeatureGrid expects (B, h, w, c) with positive dims, got {arr.shape}"
            )
        object.__setattr__(self, "data", arr)

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@dataclass(frozen=True)
class AudioEmbedding:
    """One pooled audio vector per sample, shape (B, c)."""

    data: np.ndarray

    def __post_init__(self):
        arr = _freeze(self.data, "AudioEmbedding")
        if arr.ndim != 2 or min(arr.shape) < 1:
            raise DimensionMismatchError(
                f"AudioEmbedding expects (B, c) with positive dims, got {arr.shape}"
            )
        object.__setattr__(self, "data", arr)

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SimilarityMap:
    """Per-cell audio-visual correspondence field, shape (B, h, w)."""

    data: np.ndarray

    def __post_init__(self):
        arr = _freeze(self.data, "SimilarityMap")
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise DimensionMismatchError(
                f"SimilarityMap expects (B, h, w) with positive dims, got {arr.shape}"
            )
        object.__setattr__(self, "data", arr)

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


class CellIndex(NamedTuple):
    """Location of one grid cell inside a batch."""

    sample: int
    row: int
    col: int


def cosine_sim(a, b) -> float:
    """Cosine similarity of two equal-length vectors.

    Returns 0.0 when either vector has norm below ``ZERO_NORM_EPS``; padded
    synthetic grids legitimately contain zero cells and must not produce NaN.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatchError(
            f"cosine_sim expects two equal-length vectors, got {a.shape} and {b.shape}"
        )
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def gap(features: FeatureGrid) -> AudioEmbedding:
    """Global average pooling: channelwise mean over all h*w cells per sample."""
    return AudioEmbedding(features.data.mean(axis=(1, 2)))


def inner_product_map(features: FeatureGrid, probe: np.ndarray) -> SimilarityMap:
    """Per-cell inner product against one probe vector per sample.

    out[b, i, j] = <features[b, i, j, :], probe[b]>.  Unlike cosine maps the
    result is not normalized to [-1, 1].
    """
    probe = np.asarray(probe, dtype=np.float64)
    if probe.shape != (features.batch, features.channels):
        raise DimensionMismatchError(
            f"probe shape {probe.shape} does not match grid "
            f"({features.batch}, {features.channels})"
        )
    return SimilarityMap(np.einsum("bijc,bc->bij", features.data, probe))


def argmax_cell(smap: SimilarityMap, sample: int) -> tuple[CellIndex, float]:
    """Cell with the maximum value in one sample plane.

    Ties break to the smallest row-major linear index so results are
    reproducible across platforms.
    """
    if not 0 <= sample < smap.batch:
        raise IndexError(f"sample {sample} out of range for batch {smap.batch}")
    plane = smap.data[sample]
    flat = int(np.argmax(plane))  # first occurrence wins on ties
    row, col = divmod(flat, smap.width)
    return CellIndex(sample, row, col), float(plane[row, col])
