"""Synthetic scenes with planted ground truth, plus a naive reference pipeline.

A scene is a grid whose cells carry a background prototype vector except
inside K disjoint rectangles, which carry per-source prototypes; the audio
embedding is the mean of the source prototypes.  Prototypes are drawn
orthonormal, which meets any non-negative cosine-margin requirement exactly
and makes noiseless scenes analytically predictable.

``reference_identify`` re-implements the whole localization pipeline in
plain scalar loops (no vectorization, no union-find; transitive closure for
clustering).  It exists purely as an independent cross-check for the
optimized pipeline and shares none of its code.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateNormalizationError, FileFormatError
from .extraction import ExtractionConfig
from .fileio import (
    read_audio_embedding,
    read_feature_grid,
    write_audio_embedding,
    write_feature_grid,
)
from .grids import AudioEmbedding, CellIndex, FeatureGrid
from .grouping import GroupConfig, ObjectGroup, ObjectGrouping
from .similarity import SarlConfig

_PLACEMENT_ATTEMPTS = 200
_PLACEMENT_RESTARTS = 20


@dataclass(frozen=True)
class SynthConfig:
    """Scene shape, source-count distribution, margins, and noise level."""

    height: int = 7
    width: int = 7
    channels: int = 32
    count_values: tuple[int, ...] = (1, 2, 3)
    count_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    rect_min: int = 2
    rect_max: int = 3
    source_cos_max: float = 0.2
    background_cos_max: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1:
            raise ConfigError("grid dimensions must be positive")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if len(self.count_values) != len(self.count_weights) or not self.count_values:
            raise ConfigError("count_values and count_weights must align and be non-empty")
        if any(k < 0 for k in self.count_values):
            raise ConfigError("source counts must be >= 0")
        if any(w <= 0 for w in self.count_weights):
            raise ConfigError("count weights must be positive")
        if not 1 <= self.rect_min <= self.rect_max <= min(self.height, self.width):
            raise ConfigError(
                f"rectangle sizes {self.rect_min}..{self.rect_max} do not fit a "
                f"{self.height}x{self.width} grid"
            )
        # Prototypes are built orthonormal, which realizes cosine 0 between
        # every pair; negative margins would need obtuse sets and larger
        # counts than the generator supports.
        if not 0 <= self.source_cos_max < 1 or self.background_cos_max < 0:
            raise ConfigError("cosine margins must satisfy 0 <= source < 1, 0 <= background")
        needed = max(self.count_values) + (2 if self.source_cos_max > 0 else 1)
        if self.channels < needed:
            raise ConfigError(
                f"channels={self.channels} cannot host {needed} disjoint prototype channels"
            )


@dataclass(frozen=True)
class SceneTruth:
    """Planted ground truth of one scene."""

    count: int
    masks: list[np.ndarray]  # K maps, (h, w) bool, pairwise disjoint
    prototypes: np.ndarray  # (K, c) source feature vectors
    background: np.ndarray  # (c,)
    audio_components: np.ndarray  # (K, c)
    seed: int


def scene_seed(base_seed: int, index: int) -> int:
    """Derive the per-scene seed of scene ``index`` in a dataset."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, dtype=np.uint64)[0])


def _prototype_rows(rng: np.random.Generator, k: int, dim: int, source_cos: float) -> np.ndarray:
    """Background plus k unit source prototypes on disjoint signed channels.

    Every source pair shares exactly ``source_cos`` through one common
    channel; the background channel is disjoint from everything, so
    source/background dot products are exactly 0.0 in floating point. That
    exactness keeps noiseless scenes analytically predictable; a
    QR-of-Gaussian construction leaves ~1e-17 residuals that turn strict
    foreground/background comparisons into rounding-noise coin flips.
    Returns (k + 1, dim): row 0 is the background.
    """
    shared = source_cos > 0
    picked = rng.choice(dim, size=k + 1 + int(shared), replace=False)
    signs = rng.integers(0, 2, size=k + 1 + int(shared)) * 2 - 1
    rows = np.zeros((k + 1, dim))
    rows[0, picked[0]] = signs[0]  # background
    own = np.sqrt(1.0 - source_cos)
    for s in range(k):
        rows[s + 1, picked[1 + int(shared) + s]] = own * signs[1 + int(shared) + s]
        if shared:
            rows[s + 1, picked[1]] = np.sqrt(source_cos) * signs[1]
    return rows


def _place_rectangles(rng: np.random.Generator, cfg: SynthConfig, k: int) -> list[np.ndarray]:
    for _ in range(_PLACEMENT_RESTARTS):
        occupied = np.zeros((cfg.height, cfg.width), dtype=bool)
        masks: list[np.ndarray] = []
        for _ in range(k):
            placed = False
            for _ in range(_PLACEMENT_ATTEMPTS):
                rh = int(rng.integers(cfg.rect_min, cfg.rect_max + 1))
                rw = int(rng.integers(cfg.rect_min, cfg.rect_max + 1))
                top = int(rng.integers(0, cfg.height - rh + 1))
                left = int(rng.integers(0, cfg.width - rw + 1))
                if occupied[top : top + rh, left : left + rw].any():
                    continue
                mask = np.zeros((cfg.height, cfg.width), dtype=bool)
                mask[top : top + rh, left : left + rw] = True
                occupied |= mask
                masks.append(mask)
                placed = True
                break
            if not placed:
                break
        if len(masks) == k:
            return masks
    raise ConfigError(
        f"could not place {k} disjoint {cfg.rect_min}..{cfg.rect_max} rectangles "
        f"on a {cfg.height}x{cfg.width} grid"
    )


def generate_scene(cfg: SynthConfig, seed: int) -> tuple[FeatureGrid, AudioEmbedding, SceneTruth]:
    """One synthetic scene; bit-identical for identical (cfg, seed)."""
    rng = np.random.default_rng(seed)
    k = int(rng.choice(cfg.count_values, p=np.asarray(cfg.count_weights) / sum(cfg.count_weights)))
    vectors = _prototype_rows(rng, k, cfg.channels, cfg.source_cos_max)
    background, prototypes = vectors[0], vectors[1:]
    masks = _place_rectangles(rng, cfg, k)

    features = np.tile(background, (cfg.height, cfg.width, 1))
    for mask, proto in zip(masks, prototypes):
        features[mask] = proto
    if cfg.noise_sigma > 0:
        features = features + cfg.noise_sigma * rng.standard_normal(features.shape)

    audio = prototypes.mean(axis=0) if k > 0 else background.copy()
    truth = SceneTruth(
        count=k,
        masks=masks,
        prototypes=prototypes,
        background=background,
        audio_components=prototypes.copy(),
        seed=int(seed),
    )
    return FeatureGrid(features[None]), AudioEmbedding(audio[None]), truth


def generate_batch(
    cfg: SynthConfig, n: int, base_seed: int
) -> list[tuple[FeatureGrid, AudioEmbedding, SceneTruth]]:
    return [generate_scene(cfg, scene_seed(base_seed, i)) for i in range(n)]


# ---------------------------------------------------------------------------
# Naive reference pipeline (scalar loops throughout, on one sample).
# ---------------------------------------------------------------------------


def _naive_cosine(x, y) -> float:
    dot = sq_x = sq_y = 0.0
    for k in range(len(x)):
        dot += x[k] * y[k]
        sq_x += x[k] * x[k]
        sq_y += y[k] * y[k]
    nx = math.sqrt(sq_x)
    ny = math.sqrt(sq_y)
    if nx < 1e-12 or ny < 1e-12:
        return 0.0
    return dot / (nx * ny)


def _naive_dot(x, y) -> float:
    total = 0.0
    for k in range(len(x)):
        total += x[k] * y[k]
    return total


def reference_identify(
    visual: FeatureGrid,
    audio: AudioEmbedding,
    sample: int = 0,
    sarl_cfg: SarlConfig = SarlConfig(),
    extraction_cfg: ExtractionConfig = ExtractionConfig(),
    group_cfg: GroupConfig = GroupConfig(),
) -> ObjectGrouping:
    """Loop-based re-implementation of similarity -> extraction -> grouping.

    Matches the optimized pipeline rule for rule: the 1e-12 cosine norm
    guard, the 1e-9 normalizer refusal, row-major argmax tie-breaks, strict
    foreground-over-background comparisons with forced inclusion of the
    selected cell, strict threshold comparisons in both grouping stages, and
    components ordered by their smallest record index.
    """
    h, w, c = visual.height, visual.width, visual.channels
    cells = visual.data[sample]
    l_a = audio.data[sample]

    raw = [[_naive_cosine(cells[i][j], l_a) for j in range(w)] for i in range(h)]
    denom = 0.0
    for i in range(h):
        for j in range(w):
            denom += raw[i][j]
    if abs(denom) <= 1e-9:
        raise DegenerateNormalizationError(f"degenerate normalizer {denom:.3e}")
    smap = [[raw[i][j] / denom for j in range(w)] for i in range(h)]

    # background probe from mask-below-cut cells
    bg_sum = [0.0] * c
    bg_count = 0
    for i in range(h):
        for j in range(w):
            z = (smap[i][j] - sarl_cfg.alpha) / sarl_cfg.omega
            if z >= 0:
                mask_val = 1.0 / (1.0 + math.exp(-z))
            else:
                ez = math.exp(z)
                mask_val = ez / (1.0 + ez)
            if mask_val < sarl_cfg.background_cut:
                for k in range(c):
                    bg_sum[k] += cells[i][j][k]
                bg_count += 1
    probe = [v / bg_count for v in bg_sum] if bg_count else [0.0] * c

    f_hat = [
        [[smap[i][j] * cells[i][j][k] for k in range(c)] for j in range(w)]
        for i in range(h)
    ]

    eps, cap = extraction_cfg.resolve(h, w)
    working = [row[:] for row in smap]
    carved = [[False] * w for _ in range(h)]
    records = []  # (cell, vector, region, peak)
    for _ in range(cap):
        best_i = best_j = 0
        best_val = working[0][0]
        for i in range(h):
            for j in range(w):
                if working[i][j] > best_val:
                    best_val = working[i][j]
                    best_i, best_j = i, j
        if not best_val > eps:
            break
        vector = f_hat[best_i][best_j][:]
        region = [[False] * w for _ in range(h)]
        for i in range(h):
            for j in range(w):
                if carved[i][j]:
                    continue
                if _naive_dot(f_hat[i][j], vector) > _naive_dot(f_hat[i][j], probe):
                    region[i][j] = True
        region[best_i][best_j] = True
        for i in range(h):
            for j in range(w):
                if region[i][j]:
                    carved[i][j] = True
                    working[i][j] = 0.0
        records.append(((best_i, best_j), vector, region, best_val))

    kept, discarded = [], []
    for t, (_, vector, _, _) in enumerate(records):
        if _naive_cosine(vector, probe) > group_cfg.tau1:
            discarded.append(t)
        else:
            kept.append(t)

    # transitive closure of the tau2 threshold graph
    n = len(kept)
    adjacency = [[False] * n for _ in range(n)]
    for a in range(n):
        adjacency[a][a] = True
        for b in range(a + 1, n):
            if _naive_cosine(records[kept[a]][1], records[kept[b]][1]) > group_cfg.tau2:
                adjacency[a][b] = adjacency[b][a] = True
    for mid in range(n):
        for a in range(n):
            if adjacency[a][mid]:
                for b in range(n):
                    if adjacency[mid][b]:
                        adjacency[a][b] = True

    assigned = [False] * n
    objects = []
    for a in range(n):
        if assigned[a]:
            continue
        members = [kept[b] for b in range(n) if adjacency[a][b]]
        for b in range(n):
            if adjacency[a][b]:
                assigned[b] = True
        members.sort()
        anchor = members[0]
        for t in members:
            if records[t][3] > records[anchor][3]:
                anchor = t
        fused = np.zeros((h, w), dtype=bool)
        for t in members:
            for i in range(h):
                for j in range(w):
                    if records[t][2][i][j]:
                        fused[i, j] = True
        objects.append(
            ObjectGroup(member_records=members, anchor_record=anchor, fused_map=fused)
        )
    return ObjectGrouping(objects=objects, discarded=sorted(discarded))


# ---------------------------------------------------------------------------
# Scene persistence.
# ---------------------------------------------------------------------------


def rle_encode(mask: np.ndarray) -> list[list[list[int]]]:
    """Per-row run-length encoding: each row becomes [[start, length], ...]."""
    rows = []
    for row in np.asarray(mask, dtype=bool):
        runs = []
        start = None
        for j, val in enumerate(row):
            if val and start is None:
                start = j
            elif not val and start is not None:
                runs.append([start, j - start])
                start = None
        if start is not None:
            runs.append([start, len(row) - start])
        rows.append(runs)
    return rows


def rle_decode(rows: list, width: int) -> np.ndarray:
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, runs in enumerate(rows):
        for start, length in runs:
            mask[i, start : start + length] = True
    return mask


def save_scene(directory, features: FeatureGrid, audio: AudioEmbedding, truth: SceneTruth) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_feature_grid(directory / "features.fgrid", features)
    write_audio_embedding(directory / "audio.aemb", audio)
    doc = {
        "count": truth.count,
        "height": features.height,
        "width": features.width,
        "seed": truth.seed,
        "masks": [rle_encode(m) for m in truth.masks],
        "prototypes": np.asarray(truth.prototypes).tolist(),
        "background": np.asarray(truth.background).tolist(),
        "audio_components": np.asarray(truth.audio_components).tolist(),
    }
    (directory / "truth.json").write_text(
        json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"
    )


def load_scene(directory) -> tuple[FeatureGrid, AudioEmbedding, SceneTruth]:
    directory = Path(directory)
    features = read_feature_grid(directory / "features.fgrid")
    audio = read_audio_embedding(directory / "audio.aemb")
    try:
        doc = json.loads((directory / "truth.json").read_text())
        channels = features.channels
        truth = SceneTruth(
            count=int(doc["count"]),
            masks=[rle_decode(rows, int(doc["width"])) for rows in doc["masks"]],
            prototypes=np.asarray(doc["prototypes"], dtype=np.float64).reshape(-1, channels),
            background=np.asarray(doc["background"], dtype=np.float64),
            audio_components=np.asarray(doc["audio_components"], dtype=np.float64).reshape(
                -1, channels
            ),
            seed=int(doc["seed"]),
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{directory}/truth.json: {exc}") from exc
    return features, audio, truth
