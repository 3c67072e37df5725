"""End-to-end localization: similarity maps -> region extraction -> grouping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .extraction import ExtractionConfig, ObjectBank, extract_regions
from .grids import AudioEmbedding, FeatureGrid, SimilarityMap
from .grouping import GroupConfig, ObjectGrouping, group_bank, score_map
from .similarity import (
    BackgroundProbe,
    SarlConfig,
    negative_vector,
    self_similarity_maps,
    sound_assoc_features,
)


@dataclass(frozen=True)
class LocalizationResult:
    """Everything the pipeline produced for one batch."""

    self_maps: SimilarityMap
    weighted: FeatureGrid
    probe: BackgroundProbe
    banks: list[ObjectBank]
    groupings: list[ObjectGrouping]

    def object_score_maps(self, sample: int) -> list[np.ndarray]:
        bank = self.banks[sample]
        return [score_map(bank, obj) for obj in self.groupings[sample].objects]

    def counts(self) -> list[int]:
        return [g.count for g in self.groupings]


def localize_batch(
    visual: FeatureGrid,
    audio: AudioEmbedding,
    sarl_cfg: SarlConfig = SarlConfig(),
    extraction_cfg: ExtractionConfig = ExtractionConfig(),
    group_cfg: GroupConfig = GroupConfig(),
) -> LocalizationResult:
    self_maps = self_similarity_maps(visual, audio)
    weighted = sound_assoc_features(visual, self_maps)
    probe = negative_vector(visual, self_maps, sarl_cfg)
    banks = extract_regions(weighted, self_maps, probe.vectors, extraction_cfg)
    groupings = [group_bank(bank, probe.vectors[b], group_cfg) for b, bank in enumerate(banks)]
    return LocalizationResult(
        self_maps=self_maps,
        weighted=weighted,
        probe=probe,
        banks=banks,
        groupings=groupings,
    )
