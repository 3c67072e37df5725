"""Multi-source sound localization on feature grids.

Given per-cell visual features and a pooled audio embedding, the pipeline
builds a normalized audio-visual similarity map, iteratively carves out
candidate object regions, clusters them into distinct sound-making objects,
and scores the result with class-agnostic localization metrics.  A synthetic
scene generator with planted ground truth and trainable feature projections
make the whole chain testable end to end at desk scale.
"""

from .errors import (
    ConfigError,
    DegenerateNormalizationError,
    DimensionMismatchError,
    FileFormatError,
    MixlocError,
    NumericalInstabilityError,
)
from .extraction import ExtractionConfig, IterationRecord, ObjectBank, extract_regions
from .grids import (
    AudioEmbedding,
    CellIndex,
    FeatureGrid,
    SimilarityMap,
    argmax_cell,
    cosine_sim,
    gap,
    inner_product_map,
)
from .grouping import (
    GroupConfig,
    ObjectGroup,
    ObjectGrouping,
    UnionFind,
    assemble_objects,
    build_osc_structure,
    cluster_cells,
    filter_background,
    group_bank,
    score_map,
)
from .losses import (
    GradCheckReport,
    LossValue,
    OscBatchStructure,
    OscGroup,
    avc_loss,
    avc_terms,
    grad_check,
    osc_loss,
    total_loss,
)
from .metrics import (
    EvalCase,
    EvalReport,
    MatchResult,
    ap_map,
    auc_score,
    best_assignment,
    cap_piap,
    ciou_at,
    counting_accuracy,
    evaluate_cases,
    iou,
    match_objects,
)
from .pipeline import LocalizationResult, localize_batch
from .similarity import (
    BackgroundProbe,
    SarlConfig,
    SoftMask,
    negative_vector,
    self_similarity_maps,
    sim_map,
    soft_mask,
    soft_masks,
    sound_assoc_features,
)
from .synth import SceneTruth, SynthConfig, generate_batch, generate_scene, reference_identify
from .training import (
    LossSettings,
    ProjectionParams,
    TrainConfig,
    composed_loss,
    evaluate_params,
    train_run,
    train_step,
)

__version__ = "0.1.0"
