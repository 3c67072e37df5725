"""Localization metrics: IoU success rates, AUC, ranking AP, counting.

Multi-source metrics are class-agnostic: predictions and ground-truth
sources are paired by a one-to-one assignment (maximizing total IoU, or
total AP for the permutation-invariant variant), and unmatched ground-truth
sources count as failures.

All rates and precisions returned here live in [0, 1].
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DimensionMismatchError

# Above this many objects per side, assignment switches from exhaustive
# permutation search to the Hungarian algorithm (both are exact).
EXHAUSTIVE_LIMIT = 6

# IoU thresholds for the area-under-curve success rate: 0.05 .. 0.95.
AUC_THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 20))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary maps.

    Two empty maps agree perfectly (1.0); exactly one empty map scores 0.0.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass(frozen=True)
class MatchResult:
    """One-to-one partial assignment between predictions and truths."""

    pairs: list[tuple[int, int]]  # (pred_index, truth_index)
    unmatched_pred: list[int]
    unmatched_truth: list[int]
    total_score: float


def best_assignment(matrix: np.ndarray, exhaustive_limit: int = EXHAUSTIVE_LIMIT) -> MatchResult:
    """Maximize the total score of a one-to-one partial assignment.

    Rows are predictions, columns truths.  Small problems are solved by
    exhaustive search over injections (first-found lexicographic order wins
    ties); larger ones by the Hungarian algorithm.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    n_pred, n_truth = matrix.shape if matrix.ndim == 2 else (0, 0)
    if n_pred == 0 or n_truth == 0:
        return MatchResult(
            pairs=[],
            unmatched_pred=list(range(n_pred)),
            unmatched_truth=list(range(n_truth)),
            total_score=0.0,
        )
    if max(n_pred, n_truth) <= exhaustive_limit:
        pairs = _exhaustive_assignment(matrix)
    else:
        rows, cols = linear_sum_assignment(-matrix)
        pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda pt: pt[1])
    matched_p = {p for p, _ in pairs}
    matched_t = {t for _, t in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_pred=[p for p in range(n_pred) if p not in matched_p],
        unmatched_truth=[t for t in range(n_truth) if t not in matched_t],
        total_score=float(sum(matrix[p, t] for p, t in pairs)),
    )


def _exhaustive_assignment(matrix: np.ndarray) -> list[tuple[int, int]]:
    n_pred, n_truth = matrix.shape
    best_total = -np.inf
    best_pairs: list[tuple[int, int]] = []
    if n_pred <= n_truth:
        for perm in itertools.permutations(range(n_truth), n_pred):
            total = sum(matrix[p, perm[p]] for p in range(n_pred))
            if total > best_total:
                best_total = total
                best_pairs = [(p, perm[p]) for p in range(n_pred)]
    else:
        for perm in itertools.permutations(range(n_pred), n_truth):
            total = sum(matrix[perm[t], t] for t in range(n_truth))
            if total > best_total:
                best_total = total
                best_pairs = [(perm[t], t) for t in range(n_truth)]
    return sorted(best_pairs, key=lambda pt: pt[1])


@dataclass(frozen=True)
class EvalCase:
    """Predicted objects of one scene against its ground truth."""

    pred_maps: list[np.ndarray]  # each (h, w) bool
    true_masks: list[np.ndarray]  # each (h, w) bool
    pred_scores: Optional[list[np.ndarray]] = None  # each (h, w) float


def iou_matrix(case: EvalCase) -> np.ndarray:
    out = np.zeros((len(case.pred_maps), len(case.true_masks)))
    for p, pred in enumerate(case.pred_maps):
        for t, truth in enumerate(case.true_masks):
            out[p, t] = iou(pred, truth)
    return out


def match_objects(case: EvalCase) -> MatchResult:
    """IoU-optimal pairing of predicted objects and ground-truth sources."""
    return best_assignment(iou_matrix(case))


def matched_truth_ious(cases: Sequence[EvalCase]) -> list[float]:
    """Per ground-truth source: IoU with its matched prediction, 0 if none."""
    values = []
    for case in cases:
        matrix = iou_matrix(case)
        match = best_assignment(matrix)
        by_truth = {t: matrix[p, t] for p, t in match.pairs}
        values.extend(by_truth.get(t, 0.0) for t in range(len(case.true_masks)))
    return values


def ciou_at(cases: Sequence[EvalCase], threshold: float = 0.3) -> float:
    """Fraction of ground-truth sources whose matched prediction reaches the
    IoU threshold; unmatched sources count as failures."""
    values = matched_truth_ious(cases)
    if not values:
        return 0.0
    return float(np.mean([v >= threshold for v in values]))


def iou_success_rates(
    cases: Sequence[EvalCase], thresholds: Sequence[float]
) -> dict[float, float]:
    values = matched_truth_ious(cases)
    if not values:
        return {float(t): 0.0 for t in thresholds}
    arr = np.asarray(values)
    return {float(t): float(np.mean(arr >= t)) for t in thresholds}


def auc_score(cases: Sequence[EvalCase], thresholds: Sequence[float] = AUC_THRESHOLDS) -> float:
    """Mean IoU success rate over the threshold grid (normalized area under
    the success-rate curve)."""
    rates = iou_success_rates(cases, thresholds)
    return float(np.mean(list(rates.values())))


def ap_map(scores: np.ndarray, truth: np.ndarray) -> float:
    """All-points average precision of a cell ranking against a binary mask.

    Cells are ranked by descending score with ties broken by row-major
    index.  An empty truth mask scores 0.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=bool).reshape(-1)
    if scores.shape != truth.shape:
        raise DimensionMismatchError(
            f"score/truth sizes differ: {scores.shape} vs {truth.shape}"
        )
    n_truth = int(truth.sum())
    if n_truth == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if truth[idx]:
            hits += 1
            total += hits / rank
    return total / n_truth


def _require_scores(case: EvalCase) -> list[np.ndarray]:
    if case.pred_scores is None or len(case.pred_scores) != len(case.pred_maps):
        raise ValueError("per-object score maps are required for AP-based metrics")
    return case.pred_scores


def cap_piap(cases: Sequence[EvalCase]) -> tuple[float, float]:
    """Class-agnostic AP means over ground-truth sources.

    The first value pairs objects by the IoU-optimal assignment; the second
    re-pairs them to maximize total AP, making it invariant to how
    predictions happen to be ordered or matched.  Unmatched sources score 0.
    """
    cap_values: list[float] = []
    piap_values: list[float] = []
    for case in cases:
        n_truth = len(case.true_masks)
        if n_truth == 0:
            continue
        scores = _require_scores(case)
        ap_matrix = np.zeros((len(case.pred_maps), n_truth))
        for p, score in enumerate(scores):
            for t, truth in enumerate(case.true_masks):
                ap_matrix[p, t] = ap_map(score, truth)
        iou_match = best_assignment(iou_matrix(case))
        by_truth = {t: ap_matrix[p, t] for p, t in iou_match.pairs}
        cap_values.extend(by_truth.get(t, 0.0) for t in range(n_truth))
        ap_match = best_assignment(ap_matrix)
        by_truth = {t: ap_matrix[p, t] for p, t in ap_match.pairs}
        piap_values.extend(by_truth.get(t, 0.0) for t in range(n_truth))
    if not cap_values:
        return 0.0, 0.0
    return float(np.mean(cap_values)), float(np.mean(piap_values))


def overall_ap(cases: Sequence[EvalCase]) -> float:
    """Scene-level AP: the combined score map (cellwise max over objects)
    ranked against the union of the truth masks.  Scenes without any
    ground-truth source are skipped."""
    values = []
    for case in cases:
        if not case.true_masks:
            continue
        union_truth = np.logical_or.reduce([np.asarray(m, bool) for m in case.true_masks])
        if not union_truth.any():
            continue
        scores = _require_scores(case)
        if scores:
            combined = np.maximum.reduce([np.asarray(s, float) for s in scores])
        else:
            combined = np.zeros(union_truth.shape)
        values.append(ap_map(combined, union_truth))
    return float(np.mean(values)) if values else 0.0


def counting_accuracy(cases: Sequence[EvalCase]) -> float:
    """Fraction of scenes whose predicted object count is exactly right."""
    if not cases:
        return 0.0
    return float(np.mean([len(c.pred_maps) == len(c.true_masks) for c in cases]))


@dataclass(frozen=True)
class EvalReport:
    ap: float
    iou_at: dict[float, float]
    auc: float
    ciou_at_03: float
    cap: float
    piap: float
    counting_accuracy: float

    def to_json_dict(self) -> dict:
        out = {
            "ap": self.ap,
            "auc": self.auc,
            "ciou@0.3": self.ciou_at_03,
            "cap": self.cap,
            "piap": self.piap,
            "counting_accuracy": self.counting_accuracy,
        }
        for threshold, rate in sorted(self.iou_at.items()):
            out[f"iou@{threshold:g}"] = rate
        return out


def evaluate_cases(
    cases: Sequence[EvalCase],
    iou_thresholds: Sequence[float] = (0.5,),
    auc_thresholds: Sequence[float] = AUC_THRESHOLDS,
    ciou_threshold: float = 0.3,
) -> EvalReport:
    cap, piap = cap_piap(cases)
    return EvalReport(
        ap=overall_ap(cases),
        iou_at=iou_success_rates(cases, iou_thresholds),
        auc=auc_score(cases, auc_thresholds),
        ciou_at_03=ciou_at(cases, ciou_threshold),
        cap=cap,
        piap=piap,
        counting_accuracy=counting_accuracy(cases),
    )
