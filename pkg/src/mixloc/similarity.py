"""Sound-associated region localization: similarity maps, masks, probes.

The normalized similarity map of sample pair (n, m) divides every raw
cosine Sim(F[n, i, j], a[m]) by the sample's self-pair normalizer

    D_n = sum_ij Sim(F[n, i, j], a[n]),

so a self-pair plane sums to exactly 1.  Cross-pair planes (n != m) reuse
the n-th normalizer on purpose; they are only consumed inside the
contrastive loss.

Downstream products:

* soft mask      M = sigmoid((S_self - alpha) / omega)
* weighted grid  F_hat[b, i, j, :] = S_self[b, i, j] * F[b, i, j, :]
* background probe  mean visual feature over cells whose mask value falls
  below ``background_cut`` (the "not an object" reference vector)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateNormalizationError, DimensionMismatchError
from .grids import ZERO_NORM_EPS, AudioEmbedding, FeatureGrid, SimilarityMap

# A self-pair normalizer with |D_n| at or below this is refused rather than
# clamped; it only occurs for pathological feature fields.
DEGENERATE_DENOM_EPS = 1e-9


@dataclass(frozen=True)
class SarlConfig:
    """Mask and background-split hyperparameters.

    ``alpha`` centers the sigmoid, ``omega`` sets its sharpness, and a cell
    counts as background when its mask value is below ``background_cut``.
    """

    alpha: float = 0.65
    omega: float = 0.03
    background_cut: float = 0.5

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError(f"omega must be positive, got {self.omega}")
        if not 0 < self.background_cut < 1:
            raise ValueError(
                f"background_cut must lie in (0, 1), got {self.background_cut}"
            )


@dataclass(frozen=True)
class SoftMask:
    """Sigmoid foreground mask, shape (B, h, w), values in the sigmoid range.

    Mathematically every entry lies strictly inside (0, 1); at float64 the
    sigmoid saturates to exactly 0.0 or 1.0 for |argument| beyond ~745, so
    construction accepts the closed interval.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise DimensionMismatchError(f"SoftMask expects (B, h, w), got {arr.shape}")
        if not np.all((arr >= 0.0) & (arr <= 1.0)):
            raise ValueError("SoftMask entries must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class BackgroundProbe:
    """Per-sample mean background feature, plus a flag for empty backgrounds.

    When no cell of a sample falls below the background cut, the vector is
    zero and ``empty`` is set for that sample.
    """

    vectors: np.ndarray  # (B, c)
    empty: np.ndarray  # (B,) bool


def _unit_cells(data: np.ndarray) -> np.ndarray:
    """Normalize along the last axis; vectors under the norm guard become 0."""
    norms = np.linalg.norm(data, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(norms < ZERO_NORM_EPS, 0.0, data / np.where(norms == 0, 1.0, norms))
    return unit


def raw_cosine_field(visual: FeatureGrid, audio: AudioEmbedding) -> np.ndarray:
    """All-pairs raw cosine tensor, shape (B, B, h, w): [n, m] = cells of
    image n against audio of sample m."""
    if visual.channels != audio.channels:
        raise DimensionMismatchError(
            f"channel mismatch: grid has {visual.channels}, audio has {audio.channels}"
        )
    if visual.batch != audio.batch:
        raise DimensionMismatchError(
            f"batch mismatch: grid has {visual.batch}, audio has {audio.batch}"
        )
    unit_v = _unit_cells(visual.data)
    unit_a = _unit_cells(audio.data)
    return np.einsum("nijc,mc->nmij", unit_v, unit_a)


def self_normalizers(raw: np.ndarray) -> np.ndarray:
    """Per-sample normalizer D_n = sum of the self-pair raw cosines."""
    batch = raw.shape[0]
    denom = np.array([raw[n, n].sum() for n in range(batch)])
    bad = np.abs(denom) <= DEGENERATE_DENOM_EPS
    if np.any(bad):
        raise DegenerateNormalizationError(
            f"self-pair cosine sum is degenerate for sample(s) {np.flatnonzero(bad).tolist()}"
        )
    return denom


def sim_map(
    visual: FeatureGrid,
    audio: AudioEmbedding,
    image_sample: int,
    audio_sample: int,
) -> np.ndarray:
    """Normalized similarity plane of image ``image_sample`` against audio
    ``audio_sample``, shape (h, w)."""
    if visual.channels != audio.channels:
        raise DimensionMismatchError(
            f"channel mismatch: grid has {visual.channels}, audio has {audio.channels}"
        )
    unit_v = _unit_cells(visual.data[image_sample])
    raw_self = unit_v @ _unit_cells(audio.data[image_sample])
    denom = raw_self.sum()
    if abs(denom) <= DEGENERATE_DENOM_EPS:
        raise DegenerateNormalizationError(
            f"self-pair cosine sum {denom:.3e} is degenerate for sample {image_sample}"
        )
    if audio_sample == image_sample:
        return raw_self / denom
    raw_cross = unit_v @ _unit_cells(audio.data[audio_sample])
    return raw_cross / denom


def self_similarity_maps(visual: FeatureGrid, audio: AudioEmbedding) -> SimilarityMap:
    """All self-pair planes at once; each plane sums to 1."""
    raw = raw_cosine_field(visual, audio)
    denom = self_normalizers(raw)
    planes = np.stack([raw[n, n] / denom[n] for n in range(visual.batch)])
    return SimilarityMap(planes)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def soft_mask(self_plane: np.ndarray, cfg: SarlConfig) -> np.ndarray:
    """Elementwise sigmoid((s - alpha) / omega) over one self-pair plane."""
    return sigmoid((np.asarray(self_plane, dtype=np.float64) - cfg.alpha) / cfg.omega)


def soft_masks(self_maps: SimilarityMap, cfg: SarlConfig) -> SoftMask:
    return SoftMask(soft_mask(self_maps.data, cfg))


def sound_assoc_features(visual: FeatureGrid, self_maps: SimilarityMap) -> FeatureGrid:
    """Reweight every cell feature by its similarity value: F_hat = S * F."""
    if self_maps.data.shape != visual.data.shape[:3]:
        raise DimensionMismatchError(
            f"similarity shape {self_maps.data.shape} does not match "
            f"grid {visual.data.shape[:3]}"
        )
    return FeatureGrid(visual.data * self_maps.data[..., None])


def background_cells(self_maps: SimilarityMap, cfg: SarlConfig) -> np.ndarray:
    """Boolean (B, h, w) field of cells whose mask value is below the cut."""
    return soft_mask(self_maps.data, cfg) < cfg.background_cut


def negative_vector(
    visual: FeatureGrid, self_maps: SimilarityMap, cfg: SarlConfig
) -> BackgroundProbe:
    """Mean visual feature over background cells, per sample."""
    bg = background_cells(self_maps, cfg)
    vectors = np.zeros((visual.batch, visual.channels))
    empty = np.zeros(visual.batch, dtype=bool)
    for b in range(visual.batch):
        picked = visual.data[b][bg[b]]
        if picked.shape[0] == 0:
            empty[b] = True
        else:
            vectors[b] = picked.mean(axis=0)
    return BackgroundProbe(vectors=vectors, empty=empty)
