"""Localization metric suite against brute-force oracles."""

import numpy as np
import pytest

from mixloc import (
    DimensionMismatchError,
    EvalCase,
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
from mixloc.metrics import AUC_THRESHOLDS, iou_success_rates, overall_ap

from reference import ref_average_precision, ref_best_assignment_total, ref_iou


def mask(rows, h=4, w=4):
    m = np.zeros((h, w), dtype=bool)
    for i, j in rows:
        m[i, j] = True
    return m


class TestIou:
    def test_identical(self):
        m = mask([(0, 0), (1, 1)])
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        assert iou(mask([(0, 0)]), mask([(1, 1)])) == 0.0

    def test_hand_value(self):
        # 2x2: top row vs left column share one cell of three
        a = np.array([[True, True], [False, False]])
        b = np.array([[True, False], [True, False]])
        assert iou(a, b) == pytest.approx(1 / 3, abs=1e-15)

    def test_empty_conventions(self):
        empty = np.zeros((2, 2), dtype=bool)
        assert iou(empty, empty) == 1.0
        assert iou(empty, mask([(0, 0)], 2, 2)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            iou(np.zeros((2, 2), bool), np.zeros((3, 3), bool))

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            a = rng.random((3, 3)) > 0.5
            b = rng.random((3, 3)) > 0.5
            assert iou(a, b) == pytest.approx(ref_iou(a, b), abs=1e-15)


class TestAssignment:
    def test_swapped_predictions_cross(self):
        truth1, truth2 = mask([(0, 0)]), mask([(3, 3)])
        case = EvalCase(pred_maps=[truth2, truth1], true_masks=[truth1, truth2])
        result = match_objects(case)
        assert result.pairs == [(1, 0), (0, 1)]
        assert result.total_score == pytest.approx(2.0)

    def test_partial_assignment(self):
        truth1, truth2 = mask([(0, 0)]), mask([(3, 3)])
        case = EvalCase(pred_maps=[truth1], true_masks=[truth1, truth2])
        result = match_objects(case)
        assert result.pairs == [(0, 0)]
        assert result.unmatched_truth == [1]
        assert result.unmatched_pred == []

    def test_empty_sides(self):
        result = best_assignment(np.zeros((0, 3)))
        assert result.pairs == []
        assert result.unmatched_truth == [0, 1, 2]

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n_pred = int(rng.integers(1, 7))
        n_truth = int(rng.integers(1, 7))
        matrix = rng.random((n_pred, n_truth))
        got = best_assignment(matrix)
        want_total, _ = ref_best_assignment_total(matrix)
        assert got.total_score == pytest.approx(want_total, abs=1e-12)

    def test_hungarian_path_agrees_with_exhaustive(self):
        rng = np.random.default_rng(99)
        for _ in range(20):
            matrix = rng.random((4, 5))
            exhaustive = best_assignment(matrix, exhaustive_limit=6)
            hungarian = best_assignment(matrix, exhaustive_limit=1)
            assert hungarian.total_score == pytest.approx(
                exhaustive.total_score, abs=1e-12
            )


class TestCiou:
    def test_exact_predictions(self):
        truths = [mask([(0, 0)]), mask([(2, 2)])]
        cases = [EvalCase(pred_maps=list(truths), true_masks=list(truths))]
        assert ciou_at(cases) == 1.0

    def test_no_predictions(self):
        cases = [EvalCase(pred_maps=[], true_masks=[mask([(0, 0)])])]
        assert ciou_at(cases) == 0.0

    def test_three_of_four(self):
        good = mask([(0, 0), (0, 1)])
        off_by_half = mask([(2, 2), (2, 3)])  # vs truth sharing one cell: IoU 1/3
        truths_a = [good, mask([(3, 0)])]
        preds_a = [good, mask([(3, 0)])]
        truth_b = mask([(2, 2), (2, 3), (3, 3)])  # IoU with off_by_half = 2/4
        cases = [
            EvalCase(pred_maps=preds_a, true_masks=truths_a),
            EvalCase(pred_maps=[off_by_half], true_masks=[truth_b, mask([(0, 3)])]),
        ]
        # matched IoUs: 1.0, 1.0, 0.5, unmatched -> 0 : three of four reach 0.3
        assert ciou_at(cases, 0.3) == pytest.approx(0.75)


class TestApMap:
    def test_perfect_separation(self):
        truth = mask([(0, 0), (0, 1)], 2, 2)
        scores = np.array([[0.9, 0.8], [0.1, 0.2]])
        assert ap_map(scores, truth) == 1.0

    def test_anti_ranked_half_truth(self):
        # 2x2, two truth cells ranked last: (1/3 + 2/4) / 2
        truth = mask([(0, 0), (0, 1)], 2, 2)
        scores = np.array([[0.1, 0.2], [0.9, 0.8]])
        assert ap_map(scores, truth) == pytest.approx((1 / 3 + 2 / 4) / 2, abs=1e-12)

    def test_uniform_scores_tie_break_by_index(self):
        rng = np.random.default_rng(3)
        truth = rng.random((3, 3)) > 0.5
        scores = np.full((3, 3), 0.5)
        want = ref_average_precision([0.5] * 9, truth.reshape(-1).tolist())
        assert ap_map(scores, truth) == pytest.approx(want, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        truth = rng.random((3, 4)) > 0.6
        scores = rng.random((3, 4))
        want = ref_average_precision(scores.reshape(-1).tolist(), truth.reshape(-1).tolist())
        assert ap_map(scores, truth) == pytest.approx(want, abs=1e-12)

    def test_empty_truth_is_zero(self):
        assert ap_map(np.ones((2, 2)), np.zeros((2, 2), bool)) == 0.0


class TestCapPiap:
    def _perfect_case(self, crossed=False):
        truths = [mask([(0, 0)]), mask([(2, 2)])]
        scores = [t.astype(float) for t in truths]
        preds = list(truths)
        if crossed:
            preds = preds[::-1]
            scores = scores[::-1]
        return EvalCase(pred_maps=preds, true_masks=truths, pred_scores=scores)

    def test_perfect_scores(self):
        cap, piap = cap_piap([self._perfect_case()])
        assert cap == 1.0 and piap == 1.0

    def test_swapped_perfect_predictions(self):
        cap, piap = cap_piap([self._perfect_case(crossed=True)])
        assert cap == 1.0 and piap == 1.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force_two_objects(self, seed):
        rng = np.random.default_rng(200 + seed)
        truths = [rng.random((3, 3)) > 0.5 for _ in range(2)]
        preds = [rng.random((3, 3)) > 0.5 for _ in range(2)]
        scores = [rng.random((3, 3)) for _ in range(2)]
        case = EvalCase(pred_maps=preds, true_masks=truths, pred_scores=scores)
        cap, piap = cap_piap([case])

        ap_matrix = np.array(
            [[ap_map(s, t) for t in truths] for s in scores]
        )
        iou_matrix = np.array([[iou(p, t) for t in truths] for p in preds])
        identity = ap_matrix[0, 0] + ap_matrix[1, 1]
        crossed = ap_matrix[0, 1] + ap_matrix[1, 0]
        want_piap = max(identity, crossed) / 2
        ident_iou = iou_matrix[0, 0] + iou_matrix[1, 1]
        cross_iou = iou_matrix[0, 1] + iou_matrix[1, 0]
        want_cap = (identity if ident_iou >= cross_iou else crossed) / 2
        # exhaustive search keeps the first tied assignment (identity first)
        assert piap == pytest.approx(want_piap, abs=1e-12)
        assert cap == pytest.approx(want_cap, abs=1e-12)

    def test_piap_at_least_cap(self):
        rng = np.random.default_rng(33)
        for _ in range(30):
            cases = []
            for _ in range(3):
                n_t = int(rng.integers(1, 4))
                n_p = int(rng.integers(0, 4))
                cases.append(
                    EvalCase(
                        pred_maps=[rng.random((3, 3)) > 0.5 for _ in range(n_p)],
                        true_masks=[rng.random((3, 3)) > 0.4 for _ in range(n_t)],
                        pred_scores=[rng.random((3, 3)) for _ in range(n_p)],
                    )
                )
            cap, piap = cap_piap(cases)
            assert piap >= cap - 1e-12

    def test_invariant_to_prediction_relabeling(self):
        rng = np.random.default_rng(34)
        truths = [rng.random((3, 3)) > 0.5 for _ in range(3)]
        preds = [rng.random((3, 3)) > 0.5 for _ in range(3)]
        scores = [rng.random((3, 3)) for _ in range(3)]
        base = cap_piap([EvalCase(preds, truths, scores)])
        perm = [2, 0, 1]
        shuffled = cap_piap(
            [EvalCase([preds[i] for i in perm], truths, [scores[i] for i in perm])]
        )
        assert shuffled == pytest.approx(base, abs=1e-12)


class TestAuc:
    def test_all_perfect(self):
        truths = [mask([(0, 0)])]
        cases = [EvalCase(pred_maps=list(truths), true_masks=list(truths))]
        assert auc_score(cases) == 1.0

    def test_all_zero(self):
        cases = [EvalCase(pred_maps=[], true_masks=[mask([(0, 0)])])]
        assert auc_score(cases) == 0.0

    def test_exact_half_iou_grid_count(self):
        # IoU exactly 0.5 passes thresholds 0.05..0.50: 10 of 19
        pred = mask([(0, 0)])
        truth = mask([(0, 0), (0, 1)])
        cases = [EvalCase(pred_maps=[pred], true_masks=[truth])]
        assert iou(pred, truth) == 0.5
        assert auc_score(cases) == pytest.approx(10 / 19, abs=1e-12)

    def test_non_increasing_in_threshold(self):
        rng = np.random.default_rng(35)
        cases = [
            EvalCase(
                pred_maps=[rng.random((3, 3)) > 0.5],
                true_masks=[rng.random((3, 3)) > 0.5],
            )
            for _ in range(10)
        ]
        rates = iou_success_rates(cases, AUC_THRESHOLDS)
        values = [rates[t] for t in sorted(rates)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestCountingAccuracy:
    def test_all_correct(self):
        m = mask([(0, 0)])
        cases = [EvalCase(pred_maps=[m], true_masks=[m])] * 3
        assert counting_accuracy(cases) == 1.0

    def test_half_correct(self):
        m = mask([(0, 0)])
        good = EvalCase(pred_maps=[m], true_masks=[m])
        bad = EvalCase(pred_maps=[], true_masks=[m])
        assert counting_accuracy([good, bad]) == 0.5

    def test_matches_naive_comparison(self):
        rng = np.random.default_rng(36)
        cases = []
        for _ in range(50):
            k_true = int(rng.integers(0, 4))
            k_pred = int(rng.integers(0, 4))
            m = mask([(0, 0)])
            cases.append(
                EvalCase(pred_maps=[m] * k_pred, true_masks=[m] * k_true)
            )
        want = np.mean(
            [len(c.pred_maps) == len(c.true_masks) for c in cases]
        )
        assert counting_accuracy(cases) == pytest.approx(float(want))


class TestEvalReport:
    def test_report_keys_and_ranges(self):
        truths = [mask([(0, 0)]), mask([(2, 2)])]
        scores = [t.astype(float) for t in truths]
        cases = [EvalCase(pred_maps=list(truths), true_masks=list(truths), pred_scores=scores)]
        report = evaluate_cases(cases)
        doc = report.to_json_dict()
        assert set(doc) == {"ap", "auc", "ciou@0.3", "cap", "piap", "counting_accuracy", "iou@0.5"}
        assert all(0.0 <= v <= 1.0 for v in doc.values())
        assert doc["ciou@0.3"] == 1.0
        assert doc["counting_accuracy"] == 1.0
        assert doc["ap"] == 1.0

    def test_overall_ap_skips_empty_scenes(self):
        empty_case = EvalCase(pred_maps=[], true_masks=[], pred_scores=[])
        truth = mask([(1, 1)])
        full_case = EvalCase(
            pred_maps=[truth], true_masks=[truth], pred_scores=[truth.astype(float)]
        )
        assert overall_ap([empty_case, full_case]) == 1.0
