"""Desk-scale training of linear projections under the combined objective.

Raw scene features (c_raw channels) and raw audio embeddings are mapped
through trainable matrices W_v and W_a into the working space where the
localization pipeline runs.  Each forward pass recomputes the discrete
pipeline structure (background cell set, extracted cells, group
memberships); gradients flow only through the continuous quantities while
that structure is held fixed, and the parameters follow SGD with momentum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateNormalizationError, NumericalInstabilityError
from .extraction import ExtractionConfig
from .fileio import read_checkpoint, write_checkpoint
from .grids import AudioEmbedding, FeatureGrid
from .grouping import GroupCellRefs, GroupConfig, build_osc_structure
from .losses import (
    LossValue,
    OscBatchStructure,
    OscGroup,
    avc_from_cache,
    osc_loss,
    sim_backward,
    sim_forward,
)
from .metrics import EvalCase, ciou_at, counting_accuracy
from .pipeline import localize_batch
from .similarity import SarlConfig, background_cells
from .synth import SceneTruth


@dataclass(frozen=True)
class LossSettings:
    """Pipeline hyperparameters plus the objective weights."""

    sarl: SarlConfig = SarlConfig()
    extraction: ExtractionConfig = ExtractionConfig()
    group: GroupConfig = GroupConfig()
    lambda1: float = 1.0
    lambda2: float = 1.0


@dataclass
class ProjectionParams:
    """Trainable visual and audio projections, both (c_raw, c)."""

    w_visual: np.ndarray
    w_audio: np.ndarray

    @classmethod
    def initialize(cls, c_raw: int, c: int, seed: int) -> "ProjectionParams":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(c_raw)
        return cls(
            w_visual=scale * rng.standard_normal((c_raw, c)),
            w_audio=scale * rng.standard_normal((c_raw, c)),
        )

    def copy(self) -> "ProjectionParams":
        return ProjectionParams(self.w_visual.copy(), self.w_audio.copy())

    def save(self, path) -> None:
        write_checkpoint(path, self.w_visual, self.w_audio)

    @classmethod
    def load(cls, path) -> "ProjectionParams":
        w_visual, w_audio = read_checkpoint(path)
        return cls(w_visual=w_visual, w_audio=w_audio)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    steps: int = 200
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        # the cross-clip term of the contrastive loss needs at least 2 clips
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")


@dataclass(frozen=True)
class FrozenStructure:
    """Discrete pipeline skeleton held constant while differentiating."""

    background: np.ndarray  # (B, h, w) bool
    groups: list[list[GroupCellRefs]]


@dataclass(frozen=True)
class ComposedLossResult:
    total: LossValue  # gradients keyed w_visual / w_audio when requested
    avc_value: float
    osc_value: float
    structure: FrozenStructure


def project_batch(
    params: ProjectionParams, raw_visual: FeatureGrid, raw_audio: AudioEmbedding
) -> tuple[FeatureGrid, AudioEmbedding]:
    return (
        FeatureGrid(np.einsum("bijr,rc->bijc", raw_visual.data, params.w_visual)),
        AudioEmbedding(raw_audio.data @ params.w_audio),
    )


def capture_structure(
    visual: FeatureGrid, audio: AudioEmbedding, settings: LossSettings
) -> FrozenStructure:
    """Run the discrete pipeline once and freeze its decisions."""
    result = localize_batch(visual, audio, settings.sarl, settings.extraction, settings.group)
    _, refs = build_osc_structure(result.banks, result.groupings, result.probe)
    return FrozenStructure(
        background=background_cells(result.self_maps, settings.sarl),
        groups=refs,
    )


def _osc_groups_from_structure(
    structure: FrozenStructure,
    weighted_cells: np.ndarray,  # (B, h, w, c) current S * F values
    probe_vectors: np.ndarray,  # (B, c) current background means
) -> OscBatchStructure:
    batch_groups: list[list[OscGroup]] = []
    for b, sample_refs in enumerate(structure.groups):
        sample_groups = []
        for ref in sample_refs:
            channels = weighted_cells.shape[-1]
            negatives = [weighted_cells[b, ci.row, ci.col] for ci in ref.negatives]
            if ref.include_probe:
                negatives.append(probe_vectors[b])
            sample_groups.append(
                OscGroup(
                    anchor=weighted_cells[b, ref.anchor.row, ref.anchor.col],
                    positives=np.array(
                        [weighted_cells[b, ci.row, ci.col] for ci in ref.positives]
                    ).reshape(-1, channels),
                    negatives=np.array(negatives).reshape(-1, channels),
                )
            )
        batch_groups.append(sample_groups)
    return OscBatchStructure(groups=batch_groups)


def composed_loss(
    params: ProjectionParams,
    raw_visual: FeatureGrid,
    raw_audio: AudioEmbedding,
    settings: LossSettings = LossSettings(),
    structure: Optional[FrozenStructure] = None,
    compute_grad: bool = False,
) -> ComposedLossResult:
    """Full objective of the projected batch, with hand-chained gradients
    with respect to ``w_visual`` and ``w_audio``.

    Passing ``structure`` re-evaluates the objective on a previously frozen
    skeleton (used by finite-difference probes and descent checks);
    otherwise the skeleton is recomputed from the current projections.
    """
    visual, audio = project_batch(params, raw_visual, raw_audio)
    if structure is None:
        structure = capture_structure(visual, audio, settings)

    cache = sim_forward(visual, audio)
    batch, h, w, c = cache.shape
    s_self = cache.self_planes().reshape(batch, h, w)
    weighted = visual.data * s_self[..., None]

    n_bg = structure.background.reshape(batch, -1).sum(axis=1)
    probe_vectors = np.zeros((batch, c))
    for b in range(batch):
        if n_bg[b]:
            probe_vectors[b] = visual.data[b][structure.background[b]].mean(axis=0)

    avc_value, d_smaps = avc_from_cache(cache, settings.sarl, compute_grad)
    osc_structure = _osc_groups_from_structure(structure, weighted, probe_vectors)
    osc = osc_loss(osc_structure, compute_grad=compute_grad)
    value = settings.lambda1 * avc_value + settings.lambda2 * osc.value

    if not compute_grad:
        return ComposedLossResult(LossValue(value), avc_value, osc.value, structure)

    # Scatter clustering-loss gradients back onto weighted cells and probes.
    d_weighted = np.zeros_like(weighted)
    d_probe = np.zeros((batch, c))
    for b, sample_refs in enumerate(structure.groups):
        for k, ref in enumerate(sample_refs):
            ga = osc.gradients[f"sample{b}/group{k}/anchor"]
            gp = osc.gradients[f"sample{b}/group{k}/positives"]
            gn = osc.gradients[f"sample{b}/group{k}/negatives"]
            d_weighted[b, ref.anchor.row, ref.anchor.col] += ga
            for row, ci in zip(gp, ref.positives):
                d_weighted[b, ci.row, ci.col] += row
            for row, ci in zip(gn[: len(ref.negatives)], ref.negatives):
                d_weighted[b, ci.row, ci.col] += row
            if ref.include_probe:
                d_probe[b] += gn[-1]

    # weighted = S * F: split the cotangent between the grid and the map.
    d_visual = settings.lambda2 * d_weighted * s_self[..., None]
    d_s_osc = settings.lambda2 * np.einsum("bijc,bijc->bij", d_weighted, visual.data)
    for b in range(batch):
        if n_bg[b]:
            d_visual[b][structure.background[b]] += settings.lambda2 * d_probe[b] / n_bg[b]

    d_smaps = settings.lambda1 * d_smaps
    idx = np.arange(batch)
    d_smaps[idx, idx, :] += d_s_osc.reshape(batch, -1)
    d_visual_sim, d_audio = sim_backward(cache, d_smaps)
    d_visual += d_visual_sim

    grads = {
        "w_visual": np.einsum("bijr,bijc->rc", raw_visual.data, d_visual),
        "w_audio": raw_audio.data.T @ d_audio,
    }
    total = LossValue(value, gradients=grads)
    return ComposedLossResult(total, avc_value, osc.value, structure)


@dataclass
class StepTrace:
    step: int
    total: float
    avc: float
    osc: float


@dataclass
class TrainResult:
    params: ProjectionParams
    loss_trace: list[StepTrace] = field(default_factory=list)
    metric_curve: list[dict] = field(default_factory=list)


def train_step(
    params: ProjectionParams,
    velocity: Optional[dict[str, np.ndarray]],
    raw_visual: FeatureGrid,
    raw_audio: AudioEmbedding,
    cfg: TrainConfig,
    settings: LossSettings = LossSettings(),
) -> tuple[ProjectionParams, dict[str, np.ndarray], ComposedLossResult]:
    """One SGD-with-momentum update: v <- mu v + g, p <- p - lr v.

    Raises NumericalInstabilityError when the objective, its gradients, or
    the updated parameters stop being finite (including a degenerate
    similarity normalizer caused by diverged projections).
    """
    try:
        result = composed_loss(
            params, raw_visual, raw_audio, settings, structure=None, compute_grad=True
        )
    except DegenerateNormalizationError as exc:
        raise NumericalInstabilityError(f"optimization diverged: {exc}") from exc
    grads = result.total.gradients
    if velocity is None:
        velocity = {k: np.zeros_like(v) for k, v in grads.items()}
    new_params = params.copy()
    for key, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericalInstabilityError(f"non-finite gradient in block {key}")
        velocity[key] = cfg.momentum * velocity[key] + grad
        block = getattr(new_params, key)
        block -= cfg.learning_rate * velocity[key]
        if not np.all(np.isfinite(block)):
            raise NumericalInstabilityError(f"non-finite parameters in block {key}")
    return new_params, velocity, result


Scene = tuple[FeatureGrid, AudioEmbedding, SceneTruth]


def stack_scenes(scenes: Sequence[Scene]) -> tuple[FeatureGrid, AudioEmbedding]:
    visual = FeatureGrid(np.concatenate([s[0].data for s in scenes], axis=0))
    audio = AudioEmbedding(np.concatenate([s[1].data for s in scenes], axis=0))
    return visual, audio


def evaluate_params(
    params: ProjectionParams, scenes: Sequence[Scene], settings: LossSettings = LossSettings()
) -> dict:
    """Held-out counting accuracy and CIoU@0.3 under the given projections."""
    visual, audio = stack_scenes(scenes)
    projected_v, projected_a = project_batch(params, visual, audio)
    result = localize_batch(
        projected_v, projected_a, settings.sarl, settings.extraction, settings.group
    )
    cases = []
    for b, (_, _, truth) in enumerate(scenes):
        grouping = result.groupings[b]
        cases.append(
            EvalCase(
                pred_maps=[obj.fused_map for obj in grouping.objects],
                true_masks=list(truth.masks),
                pred_scores=result.object_score_maps(b),
            )
        )
    return {
        "counting_accuracy": counting_accuracy(cases),
        "ciou@0.3": ciou_at(cases),
    }


def train_run(
    train_scenes: Sequence[Scene],
    holdout_scenes: Sequence[Scene],
    cfg: TrainConfig,
    settings: LossSettings = LossSettings(),
    init_params: Optional[ProjectionParams] = None,
) -> TrainResult:
    """SGD over shuffled batches of the training scenes.

    Held-out metrics are recorded before the first step and again at every
    epoch boundary (one epoch = one pass over the training scenes) and after
    the final step.  Deterministic for a fixed config and scene list.
    """
    if len(train_scenes) < cfg.batch_size:
        raise ValueError(
            f"need at least batch_size={cfg.batch_size} training scenes, "
            f"got {len(train_scenes)}"
        )
    c_raw = train_scenes[0][0].channels
    params = (init_params or ProjectionParams.initialize(c_raw, c_raw // 2, cfg.seed)).copy()
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(params=params)
    result.metric_curve.append({"step": 0, **evaluate_params(params, holdout_scenes, settings)})

    velocity: Optional[dict[str, np.ndarray]] = None
    order: list[int] = []
    steps_per_epoch = max(1, len(train_scenes) // cfg.batch_size)
    for step in range(cfg.steps):
        if len(order) < cfg.batch_size:
            order = rng.permutation(len(train_scenes)).tolist()
        picked = [train_scenes[i] for i in order[: cfg.batch_size]]
        order = order[cfg.batch_size :]
        raw_visual, raw_audio = stack_scenes(picked)
        params, velocity, loss = train_step(
            params, velocity, raw_visual, raw_audio, cfg, settings
        )
        result.loss_trace.append(
            StepTrace(step=step + 1, total=loss.total.value, avc=loss.avc_value, osc=loss.osc_value)
        )
        if (step + 1) % steps_per_epoch == 0 or step + 1 == cfg.steps:
            result.metric_curve.append(
                {"step": step + 1, **evaluate_params(params, holdout_scenes, settings)}
            )
    result.params = params
    return result
