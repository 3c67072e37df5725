"""Training objectives: contrastive map loss, clustering loss, gradient checks.

Both losses are differentiable end to end in their continuous inputs; the
gradients here are derived by hand (no autodiff) and validated against
central finite differences in the test suite.

Contrastive loss over a batch of B clips, with Q = h*w cells per grid:

    pos_n  = <M_n, S_nn> / |M_n|
    neg_n  = <1 - M_n, S_nn> / |1 - M_n|  +  (1/Q) * sum_{m != n} <1, S_nm>
    loss   = -(1/B) * sum_n log( exp(pos_n) / (exp(pos_n) + exp(neg_n)) )

where S_nm is the normalized similarity plane of image n against audio m,
M_n the soft mask of the self plane, and |M| the soft mask sum (not a
binarized count).

Clustering loss over per-sample object groups (anchor A, positive cell
vectors P, negative cell vectors N):

    C_p = mean_p cos(A, p)   (:= 1 when P is empty)
    C_n = mean_v cos(A, v)   (:= 0 when N is empty)
    loss = (1/B) * sum_b sum_k [ (1 - C_p) + C_n ] / K_b

Discrete structure (which cells form which group, the background cell set)
is always treated as constant under differentiation; gradients flow only
through the continuous quantities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericalInstabilityError
from .grids import ZERO_NORM_EPS, AudioEmbedding, FeatureGrid
from .similarity import (
    SarlConfig,
    raw_cosine_field,
    self_normalizers,
    sigmoid,
)

# Denominators |M| and |1 - M| are floored here so fully saturated masks
# yield a zero term instead of 0/0; realistic inputs never reach the floor.
_MASS_FLOOR = np.finfo(np.float64).tiny

# Relative-error floor for gradient checking: disagreements on gradients
# smaller than this are measured against the floor, not the gradient.
REL_ERROR_FLOOR = 1e-6


@dataclass(frozen=True)
class LossValue:
    """A scalar objective plus optional gradients by parameter-block name."""

    value: float
    gradients: Optional[dict[str, np.ndarray]] = None

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise NumericalInstabilityError(f"loss value {self.value} is not finite")


@dataclass(frozen=True)
class OscGroup:
    """One clustered object: anchor cell vector, positives, negatives.

    ``positives`` holds the other cell vectors of the same object (the anchor
    itself is excluded); ``negatives`` holds cell vectors of other objects
    and of the background.  Either may be empty, shape (0, c).
    """

    anchor: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        anchor = np.asarray(self.anchor, dtype=np.float64)
        pos = np.asarray(self.positives, dtype=np.float64).reshape(-1, anchor.shape[0])
        neg = np.asarray(self.negatives, dtype=np.float64).reshape(-1, anchor.shape[0])
        for name, arr in (("anchor", anchor), ("positives", pos), ("negatives", neg)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"OscGroup {name} contains non-finite entries")
        object.__setattr__(self, "anchor", anchor)
        object.__setattr__(self, "positives", pos)
        object.__setattr__(self, "negatives", neg)


@dataclass(frozen=True)
class OscBatchStructure:
    """Per-sample lists of object groups; samples may have zero groups."""

    groups: list[list[OscGroup]] = field(default_factory=list)

    @property
    def batch(self) -> int:
        return len(self.groups)


# ---------------------------------------------------------------------------
# Shared forward / backward pass through the normalized similarity tensor.
# ---------------------------------------------------------------------------


@dataclass
class SimCache:
    """Intermediates of the normalized similarity forward pass.

    ``smaps[n, m, q]`` is the plane of image n against audio m over the Q
    flattened cells; ``denom[n]`` the self-pair normalizer.
    """

    shape: tuple[int, int, int, int]  # (B, h, w, c)
    unit_x: np.ndarray  # (B, Q, c)
    unit_a: np.ndarray  # (B, c)
    xnorm: np.ndarray  # (B, Q)
    anorm: np.ndarray  # (B,)
    raw: np.ndarray  # (B, B, Q)
    denom: np.ndarray  # (B,)
    smaps: np.ndarray  # (B, B, Q)

    @property
    def cells(self) -> int:
        return self.unit_x.shape[1]

    def self_planes(self) -> np.ndarray:
        b = self.smaps.shape[0]
        return self.smaps[np.arange(b), np.arange(b)]


def sim_forward(visual: FeatureGrid, audio: AudioEmbedding) -> SimCache:
    b, h, w, c = visual.data.shape
    raw4 = raw_cosine_field(visual, audio)  # (B, B, h, w)
    raw = raw4.reshape(b, b, h * w)
    denom = self_normalizers(raw4)
    smaps = raw / denom[:, None, None]
    xnorm = np.linalg.norm(visual.data.reshape(b, h * w, c), axis=-1)
    anorm = np.linalg.norm(audio.data, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit_x = np.where(
            xnorm[..., None] < ZERO_NORM_EPS,
            0.0,
            visual.data.reshape(b, h * w, c) / np.where(xnorm[..., None] == 0, 1.0, xnorm[..., None]),
        )
        unit_a = np.where(
            anorm[:, None] < ZERO_NORM_EPS,
            0.0,
            audio.data / np.where(anorm[:, None] == 0, 1.0, anorm[:, None]),
        )
    return SimCache(
        shape=(b, h, w, c),
        unit_x=unit_x,
        unit_a=unit_a,
        xnorm=xnorm,
        anorm=anorm,
        raw=raw,
        denom=denom,
        smaps=smaps,
    )


def sim_backward(cache: SimCache, d_smaps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pull a cotangent on the normalized planes back to (visual, audio).

    Returns gradients shaped like the visual grid (B, h, w, c) and the audio
    matrix (B, c).  Accounts for the quotient rule through the shared
    self-pair normalizer and for the cell / audio normalizations, with zero
    gradient at norm-guarded vectors.
    """
    b, h, w, c = cache.shape
    d_raw = d_smaps / cache.denom[:, None, None]
    d_denom = -np.einsum("nmq,nmq->n", d_smaps, cache.smaps) / cache.denom
    idx = np.arange(b)
    d_raw[idx, idx, :] += d_denom[:, None]

    d_unit_x = np.einsum("nmq,mc->nqc", d_raw, cache.unit_a)
    d_unit_a = np.einsum("nmq,nqc->mc", d_raw, cache.unit_x)

    # d(v / |v|) applied to cotangent g is (g - <g, v_hat> v_hat) / |v|.
    proj_x = np.einsum("nqc,nqc->nq", d_unit_x, cache.unit_x)
    with np.errstate(invalid="ignore", divide="ignore"):
        d_x = np.where(
            cache.xnorm[..., None] < ZERO_NORM_EPS,
            0.0,
            (d_unit_x - proj_x[..., None] * cache.unit_x)
            / np.where(cache.xnorm[..., None] == 0, 1.0, cache.xnorm[..., None]),
        )
        proj_a = np.einsum("mc,mc->m", d_unit_a, cache.unit_a)
        d_a = np.where(
            cache.anorm[:, None] < ZERO_NORM_EPS,
            0.0,
            (d_unit_a - proj_a[:, None] * cache.unit_a)
            / np.where(cache.anorm[:, None] == 0, 1.0, cache.anorm[:, None]),
        )
    return d_x.reshape(b, h, w, c), d_a


# ---------------------------------------------------------------------------
# Audio-visual contrastive loss.
# ---------------------------------------------------------------------------


def _avc_forward(cache: SimCache, cfg: SarlConfig):
    q = cache.cells
    s_self = cache.self_planes()  # (B, Q)
    mask = sigmoid((s_self - cfg.alpha) / cfg.omega)
    mass = np.maximum(mask.sum(axis=1), _MASS_FLOOR)
    anti = np.maximum((1.0 - mask).sum(axis=1), _MASS_FLOOR)
    pos = np.einsum("nq,nq->n", mask, s_self) / mass
    neg_within = np.einsum("nq,nq->n", 1.0 - mask, s_self) / anti
    cross_total = cache.smaps.sum(axis=2)  # (B, B), [n, m]
    neg_cross = (cross_total.sum(axis=1) - np.diag(cross_total)) / q
    neg = neg_within + neg_cross
    return s_self, mask, mass, anti, pos, neg_within, neg


def avc_terms(
    visual: FeatureGrid, audio: AudioEmbedding, cfg: SarlConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (pos, neg) logits of the contrastive loss; handy for probes."""
    cache = sim_forward(visual, audio)
    _, _, _, _, pos, _, neg = _avc_forward(cache, cfg)
    return pos, neg


def avc_from_cache(cache: SimCache, cfg: SarlConfig, compute_grad: bool = False):
    """Contrastive loss value plus (optionally) its cotangent on the
    normalized similarity tensor, for callers that share a SimCache."""
    batch = cache.shape[0]
    q = cache.cells
    s_self, mask, mass, anti, pos, neg_within, neg = _avc_forward(cache, cfg)
    margin = pos - neg
    # -log(exp(p) / (exp(p) + exp(n))) == log(1 + exp(n - p)), computed stably.
    value = float(np.logaddexp(0.0, -margin).mean())
    if not compute_grad:
        return value, None

    d_pos = -sigmoid(-margin) / batch  # (B,)
    d_neg = -d_pos
    d_self = d_pos[:, None] * mask / mass[:, None] + d_neg[:, None] * (1.0 - mask) / anti[:, None]
    d_mask = (
        d_pos[:, None] * (s_self - pos[:, None]) / mass[:, None]
        + d_neg[:, None] * (neg_within[:, None] - s_self) / anti[:, None]
    )
    d_self += d_mask * mask * (1.0 - mask) / cfg.omega

    d_smaps = np.tile((d_neg / q)[:, None, None], (1, batch, q))
    idx = np.arange(batch)
    d_smaps[idx, idx, :] = d_self
    return value, d_smaps


def avc_loss(
    visual: FeatureGrid,
    audio: AudioEmbedding,
    cfg: SarlConfig,
    compute_grad: bool = False,
) -> LossValue:
    """Audio-visual contrastive loss over a batch, optionally with gradients
    for blocks ``visual`` (B, h, w, c) and ``audio`` (B, c)."""
    cache = sim_forward(visual, audio)
    value, d_smaps = avc_from_cache(cache, cfg, compute_grad)
    if not compute_grad:
        return LossValue(value)
    d_visual, d_audio = sim_backward(cache, d_smaps)
    return LossValue(value, gradients={"visual": d_visual, "audio": d_audio})


# ---------------------------------------------------------------------------
# Object clustering loss.
# ---------------------------------------------------------------------------


def _cosine_with_grads(a: np.ndarray, x: np.ndarray):
    """cos(a, x) plus its gradients in both arguments (0 at guarded norms)."""
    na = np.linalg.norm(a)
    nx = np.linalg.norm(x)
    if na < ZERO_NORM_EPS or nx < ZERO_NORM_EPS:
        return 0.0, np.zeros_like(a), np.zeros_like(x)
    cos = float(np.dot(a, x) / (na * nx))
    da = x / (na * nx) - cos * a / (na * na)
    dx = a / (na * nx) - cos * x / (nx * nx)
    return cos, da, dx


def _group_term(group: OscGroup, compute_grad: bool):
    """(1 - C_p) + C_n for one group, with optional raw vector gradients."""
    n_pos = group.positives.shape[0]
    n_neg = group.negatives.shape[0]
    d_anchor = np.zeros_like(group.anchor) if compute_grad else None
    d_pos = np.zeros_like(group.positives) if compute_grad else None
    d_neg = np.zeros_like(group.negatives) if compute_grad else None

    c_pos = 1.0  # an object with no companion cells is a perfect cluster
    if n_pos:
        total = 0.0
        for i in range(n_pos):
            cos, da, dx = _cosine_with_grads(group.anchor, group.positives[i])
            total += cos
            if compute_grad:
                d_anchor -= da / n_pos
                d_pos[i] = -dx / n_pos
        c_pos = total / n_pos

    c_neg = 0.0
    if n_neg:
        total = 0.0
        for j in range(n_neg):
            cos, da, dx = _cosine_with_grads(group.anchor, group.negatives[j])
            total += cos
            if compute_grad:
                d_anchor += da / n_neg
                d_neg[j] = dx / n_neg
        c_neg = total / n_neg

    return (1.0 - c_pos) + c_neg, d_anchor, d_pos, d_neg


def osc_loss(structure: OscBatchStructure, compute_grad: bool = False) -> LossValue:
    """Object clustering loss; gradient blocks are keyed
    ``sample{b}/group{k}/{anchor,positives,negatives}``."""
    batch = structure.batch
    if batch == 0:
        return LossValue(0.0, gradients={} if compute_grad else None)
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for b, sample_groups in enumerate(structure.groups):
        k_b = len(sample_groups)
        if k_b == 0:
            continue
        for k, group in enumerate(sample_groups):
            term, d_anchor, d_pos, d_neg = _group_term(group, compute_grad)
            total += term / k_b
            if compute_grad:
                scale = 1.0 / (batch * k_b)
                grads[f"sample{b}/group{k}/anchor"] = scale * d_anchor
                grads[f"sample{b}/group{k}/positives"] = scale * d_pos
                grads[f"sample{b}/group{k}/negatives"] = scale * d_neg
    value = total / batch
    return LossValue(value, gradients=grads if compute_grad else None)


def total_loss(avc: LossValue, osc: LossValue, lambda1: float, lambda2: float) -> LossValue:
    """Weighted sum of the two objectives; gradients combine linearly when
    both inputs carry them."""
    value = lambda1 * avc.value + lambda2 * osc.value
    if avc.gradients is None or osc.gradients is None:
        return LossValue(value)
    combined: dict[str, np.ndarray] = {}
    for key in set(avc.gradients) | set(osc.gradients):
        parts = []
        if key in avc.gradients:
            parts.append(lambda1 * avc.gradients[key])
        if key in osc.gradients:
            parts.append(lambda2 * osc.gradients[key])
        combined[key] = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return LossValue(value, gradients=combined)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    block_errors: dict[str, float]
    coords_checked: int


def grad_check(
    fn: Callable[[dict[str, np.ndarray]], LossValue],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    coords_per_block: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare the analytic gradients of ``fn`` against central differences.

    ``fn`` receives a parameter dict and must return a LossValue whose
    gradients cover every key in ``params``.  Blocks larger than
    ``coords_per_block`` are probed on a seeded coordinate subsample.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if coords_per_block < 64:
        raise ValueError(f"coords_per_block must be at least 64, got {coords_per_block}")
    base = fn({k: v.copy() for k, v in params.items()})
    if base.gradients is None:
        raise ValueError("fn must return analytic gradients for grad_check")
    missing = set(params) - set(base.gradients)
    if missing:
        raise ValueError(f"fn returned no gradients for blocks {sorted(missing)}")

    rng = np.random.default_rng(seed)
    block_errors: dict[str, float] = {}
    checked = 0
    for name in sorted(params):
        block = np.asarray(params[name], dtype=np.float64)
        analytic = np.asarray(base.gradients[name], dtype=np.float64).reshape(block.size)
        size = block.size
        if size <= coords_per_block:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, size=coords_per_block, replace=False))
        worst = 0.0
        for coord in coords:
            probe = {k: v.copy() for k, v in params.items()}
            flat = probe[name].reshape(-1)
            original = flat[coord]
            flat[coord] = original + step
            f_plus = fn(probe).value
            flat[coord] = original - step
            f_minus = fn(probe).value
            flat[coord] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalInstabilityError(
                    f"non-finite loss while probing {name}[{coord}]"
                )
            fd = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(analytic[coord]), abs(fd), REL_ERROR_FLOOR)
            worst = max(worst, abs(analytic[coord] - fd) / denom)
            checked += 1
        block_errors[name] = worst
    max_rel = max(block_errors.values()) if block_errors else 0.0
    return GradCheckReport(
        max_rel_error=max_rel,
        tolerance=tolerance,
        passed=max_rel < tolerance,
        block_errors=block_errors,
        coords_checked=checked,
    )
