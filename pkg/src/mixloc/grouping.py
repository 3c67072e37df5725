"""Turn a bank of extracted cells into distinct objects.

Three stages per sample: discard bank entries that look like background
(cosine against the background probe above ``tau1``), merge the remaining
cells into objects (union-find over the graph whose edges are pairwise
cosines above ``tau2``), and fuse every object's per-iteration regions into
one localization map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .extraction import ObjectBank
from .grids import CellIndex, cosine_sim
from .losses import OscBatchStructure, OscGroup
from .similarity import BackgroundProbe


class UnionFind:
    """Disjoint sets over 0..n-1 with path compression and union by rank."""

    def __init__(self, n: int):
        self._parent = list(range(n))
        self._rank = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self._parent[root] != root:
            root = self._parent[root]
        while self._parent[x] != root:  # path compression
            self._parent[x], x = root, self._parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self._rank[ra] < self._rank[rb]:
            ra, rb = rb, ra
        self._parent[rb] = ra
        if self._rank[ra] == self._rank[rb]:
            self._rank[ra] += 1

    def components(self) -> list[list[int]]:
        """Members grouped by root, each sorted, ordered by smallest member."""
        by_root: dict[int, list[int]] = {}
        for x in range(len(self._parent)):
            by_root.setdefault(self.find(x), []).append(x)
        return sorted(by_root.values(), key=lambda members: members[0])


@dataclass(frozen=True)
class GroupConfig:
    """Cosine thresholds: above ``tau1`` against the background probe a cell
    is discarded; above ``tau2`` between two cells they join one object."""

    tau1: float = 0.7
    tau2: float = 0.6

    def __post_init__(self):
        for name, value in (("tau1", self.tau1), ("tau2", self.tau2)):
            if not 0 < value < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")


@dataclass(frozen=True)
class ObjectGroup:
    """One identified object: its bank records and fused localization map."""

    member_records: list[int]
    anchor_record: int
    fused_map: np.ndarray  # (h, w) bool


@dataclass(frozen=True)
class ObjectGrouping:
    """Grouping result for one sample."""

    objects: list[ObjectGroup]
    discarded: list[int]

    @property
    def count(self) -> int:
        return len(self.objects)


@dataclass(frozen=True)
class GroupCellRefs:
    """Grid-cell provenance of one emitted loss group.

    Coordinates reference cells of the weighted feature grid;
    ``include_probe`` marks that the background probe vector is appended as
    the final negative.
    """

    anchor: CellIndex
    positives: list[CellIndex] = field(default_factory=list)
    negatives: list[CellIndex] = field(default_factory=list)
    include_probe: bool = True


def filter_background(
    bank: ObjectBank, probe_vector: np.ndarray, cfg: GroupConfig
) -> tuple[list[int], list[int]]:
    """Split bank record indices into (kept, discarded) via ``tau1``."""
    kept, discarded = [], []
    for t, record in enumerate(bank.records):
        if cosine_sim(record.cell_vector, probe_vector) > cfg.tau1:
            discarded.append(t)
        else:
            kept.append(t)
    return kept, discarded


def cluster_cells(vectors, cfg: GroupConfig) -> list[list[int]]:
    """Partition vector indices into connected components of the ``tau2``
    threshold graph."""
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    n = len(vectors)
    uf = UnionFind(n)
    for i in range(n):
        for j in range(i + 1, n):
            if cosine_sim(vectors[i], vectors[j]) > cfg.tau2:
                uf.union(i, j)
    return uf.components() if n else []


def assemble_objects(
    bank: ObjectBank,
    kept: list[int],
    partition: list[list[int]],
    discarded: list[int],
) -> ObjectGrouping:
    """Build the per-object view: members, anchor, fused map.

    ``partition`` indexes into ``kept``.  The anchor is the member with the
    highest peak value (earliest iteration on ties); fused maps OR the
    members' disjoint regions.
    """
    objects = []
    for component in partition:
        members = sorted(kept[i] for i in component)
        anchor = max(members, key=lambda t: (bank.records[t].peak_value, -t))
        fused = np.zeros_like(bank.records[members[0]].region, dtype=bool)
        for t in members:
            fused |= bank.records[t].region
        objects.append(
            ObjectGroup(member_records=members, anchor_record=anchor, fused_map=fused)
        )
    return ObjectGrouping(objects=objects, discarded=sorted(discarded))


def group_bank(bank: ObjectBank, probe_vector: np.ndarray, cfg: GroupConfig) -> ObjectGrouping:
    """filter_background + cluster_cells + assemble_objects in one call."""
    kept, discarded = filter_background(bank, probe_vector, cfg)
    partition = cluster_cells([bank.records[t].cell_vector for t in kept], cfg)
    return assemble_objects(bank, kept, partition, discarded)


def score_map(bank: ObjectBank, group: ObjectGroup) -> np.ndarray:
    """Continuous relevance map of one object: the max foreground response
    over its member records, zeroed outside the fused map."""
    stacked = np.stack([bank.records[t].fg_response for t in group.member_records])
    return np.where(group.fused_map, stacked.max(axis=0), 0.0)


def build_osc_structure(
    banks: list[ObjectBank],
    groupings: list[ObjectGrouping],
    probe: BackgroundProbe,
) -> tuple[OscBatchStructure, list[list[GroupCellRefs]]]:
    """Emit the clustering-loss structure for a batch, with cell provenance.

    Per object: the anchor record's vector anchors the group, co-members are
    positives, and negatives collect the other objects' members, the
    discarded background-like records, and (when the sample has any
    background cells) the background probe vector itself.
    """
    batch_groups: list[list[OscGroup]] = []
    batch_refs: list[list[GroupCellRefs]] = []
    for b, (bank, grouping) in enumerate(zip(banks, groupings)):
        use_probe = not bool(probe.empty[b])
        sample_groups: list[OscGroup] = []
        sample_refs: list[GroupCellRefs] = []
        for k, obj in enumerate(grouping.objects):
            positives = [t for t in obj.member_records if t != obj.anchor_record]
            negatives: list[int] = []
            for other_idx, other in enumerate(grouping.objects):
                if other_idx != k:
                    negatives.extend(other.member_records)
            negatives.extend(grouping.discarded)
            negatives.sort()
            neg_vectors = [bank.records[t].cell_vector for t in negatives]
            if use_probe:
                neg_vectors.append(probe.vectors[b])
            channels = bank.records[obj.anchor_record].cell_vector.shape[0]
            sample_groups.append(
                OscGroup(
                    anchor=bank.records[obj.anchor_record].cell_vector,
                    positives=np.array(
                        [bank.records[t].cell_vector for t in positives]
                    ).reshape(-1, channels),
                    negatives=np.array(neg_vectors).reshape(-1, channels),
                )
            )
            sample_refs.append(
                GroupCellRefs(
                    anchor=bank.records[obj.anchor_record].cell,
                    positives=[bank.records[t].cell for t in positives],
                    negatives=[bank.records[t].cell for t in negatives],
                    include_probe=use_probe,
                )
            )
        batch_groups.append(sample_groups)
        batch_refs.append(sample_refs)
    return OscBatchStructure(groups=batch_groups), batch_refs
