import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infocal import metrics

import _oracles as oracle


class FixedModel:
    """Returns preset class probabilities: one for the full input, one per ablation pattern."""

    def __init__(self, full, by_mask):
        self.full, self.by_mask = np.asarray(full), by_mask

    def class_probs(self, ids, masks):
        masks = np.asarray(masks)
        if np.all(masks == 1):
            return self.full
        return np.asarray(self.by_mask[tuple(masks.astype(int))])


class TestSpans:
    def test_normalize_merges_overlaps_and_touching(self):
        assert metrics.normalize_spans([(5, 7), (0, 2), (1, 3), (3, 4)]) == [(0, 4), (5, 7)]

    @pytest.mark.parametrize("bad", [[(3, 3)], [(-1, 2)], [(0, 9)]])
    def test_normalize_rejects(self, bad):
        with pytest.raises(ValueError):
            metrics.normalize_spans(bad, length=5)

    def test_mask_round_trip(self):
        mask = np.array([1, 1, 0, 0, 1, 0, 1])
        spans = metrics.mask_to_spans(mask)
        assert spans == [(0, 2), (4, 5), (6, 7)]
        assert np.array_equal(metrics.spans_to_mask(spans, 7), mask.astype(bool))

    @pytest.mark.parametrize("mask, count", [([0, 0, 0], 0), ([1, 1, 1], 1), ([1, 0, 1, 0, 1], 3), ([0, 1, 1, 0], 1)])
    def test_segment_count(self, mask, count):
        assert metrics.segment_count(mask) == count


class TestTokenPrf:
    def test_hand_example(self):
        p, r, f = metrics.token_prf([(2, 5)], [(3, 6)])
        assert (p, r, f) == pytest.approx((2 / 3, 2 / 3, 2 / 3), abs=0)

    def test_identity(self):
        assert metrics.token_prf([(1, 4), (6, 8)], [(1, 4), (6, 8)]) == (1.0, 1.0, 1.0)

    @pytest.mark.parametrize(
        "pred, gold, expected",
        [([], [], (1.0, 1.0, 1.0)), ([], [(0, 2)], (0.0, 0.0, 0.0)), ([(0, 2)], [], (0.0, 1.0, 0.0)), ([(0, 1)], [(2, 3)], (0.0, 0.0, 0.0))],
    )
    def test_empty_conventions(self, pred, gold, expected):
        assert metrics.token_prf(pred, gold) == expected

    def test_matches_set_counting_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            pred, gold = oracle.random_spans(rng, n, 4), oracle.random_spans(rng, n, 4)
            expected = oracle.token_prf(metrics.spans_to_mask(pred, n), metrics.spans_to_mask(gold, n))
            assert metrics.token_prf(pred, gold) == expected

    @given(st.lists(st.booleans(), min_size=1, max_size=20), st.lists(st.booleans(), min_size=1, max_size=20))
    def test_swap_exchanges_precision_and_recall(self, a, b):
        n = min(len(a), len(b))
        sa, sb = metrics.mask_to_spans(a[:n]), metrics.mask_to_spans(b[:n])
        p, r, f = metrics.token_prf(sa, sb)
        p2, r2, f2 = metrics.token_prf(sb, sa)
        if sa and sb:
            assert (p, r, f) == (r2, p2, f2)

    def test_corpus_is_micro_averaged(self):
        p, r, _ = metrics.corpus_token_prf([[(0, 1)], [(0, 4)]], [[(0, 1)], [(0, 2)]])
        assert p == pytest.approx(3 / 5) and r == pytest.approx(1.0)

    def test_corpus_length_mismatch(self):
        with pytest.raises(ValueError):
            metrics.corpus_token_prf([[]], [[], []])


class TestIouF1:
    def test_low_overlap(self):
        assert metrics.iou_f1([[(0, 4)]], [[(2, 6)]]) == 0.0

    def test_high_overlap(self):
        assert metrics.iou_f1([[(1, 5)]], [[(2, 5)]]) == 1.0

    def test_iou_value(self):
        assert metrics.iou((0, 4), (2, 6)) == pytest.approx(2 / 6)
        assert metrics.iou((1, 5), (2, 5)) == pytest.approx(3 / 4)

    def test_equal_sets(self):
        spans = [[(0, 2), (5, 9)], [(3, 4)]]
        assert metrics.iou_f1(spans, spans) == 1.0

    def test_greedy_would_be_suboptimal(self):
        # best IOU pairs the middle prediction with the first gold span; a maximum matching pairs both
        pred = [(0, 4), (2, 6)]
        gold = [(2, 5), (0, 3)]
        assert metrics.iou_matches(pred, gold) == 2

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            preds, golds = [], []
            for _ in range(int(rng.integers(1, 4))):
                n = int(rng.integers(2, 25))
                preds.append(oracle.random_spans(rng, n, 4))
                golds.append(oracle.random_spans(rng, n, 4))
            assert metrics.iou_f1(preds, golds) == oracle.iou_f1(preds, golds)


class TestAuprc:
    def test_perfect_ranking(self):
        assert metrics.auprc([0.9, 0.1, 0.8, 0.2], [1, 0, 1, 0]) == 1.0

    @pytest.mark.parametrize("k, n", [(1, 4), (3, 7), (5, 5)])
    def test_all_tied(self, k, n):
        gold = [1] * k + [0] * (n - k)
        assert metrics.auprc(np.full(n, 0.3), gold) == pytest.approx(k / n, abs=1e-12)

    def test_no_positives_is_absent(self):
        assert metrics.auprc([0.1, 0.2], [0, 0]) is None

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics.auprc([0.1, 0.2], [1])

    def test_matches_threshold_enumeration(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            n = int(rng.integers(1, 13))
            gold = rng.integers(0, 2, size=n)
            gold[rng.integers(n)] = 1
            scores = np.round(rng.uniform(size=n), int(rng.integers(1, 3)))
            assert metrics.auprc(scores, gold) == pytest.approx(oracle.auprc(scores, gold), abs=1e-9)

    @given(st.lists(st.integers(-50, 50), min_size=2, max_size=12), st.integers(0, 1000))
    @settings(max_examples=60)
    def test_monotone_invariance(self, scores, seed):
        gold = np.random.default_rng(seed).integers(0, 2, size=len(scores))
        gold[0] = 1
        s = np.array(scores) / 10
        assert metrics.auprc(s, gold) == pytest.approx(metrics.auprc(np.exp(s) * 3 + 1, gold), abs=1e-12)


class TestFaithfulness:
    def test_comprehensiveness_arithmetic(self):
        model = FixedModel([0.1, 0.9], {(0, 1, 1): [0.8, 0.2]})
        assert metrics.comprehensiveness(model, [4, 5, 6], [1, 0, 0]) == pytest.approx(0.7)

    def test_sufficiency_arithmetic(self):
        model = FixedModel([0.1, 0.9], {(1, 0, 0): [0.05, 0.95]})
        assert metrics.sufficiency(model, [4, 5, 6], [1, 0, 0]) == pytest.approx(-0.05)

    def test_empty_rationale(self):
        model = FixedModel([0.3, 0.7], {(0, 0, 0): [0.6, 0.4]})
        assert metrics.comprehensiveness(model, [1, 2, 3], [0, 0, 0]) == 0.0
        assert metrics.sufficiency(model, [1, 2, 3], [0, 0, 0]) == pytest.approx(0.3)

    def test_full_rationale(self):
        model = FixedModel([0.3, 0.7], {(0, 0, 0): [0.6, 0.4]})
        assert metrics.sufficiency(model, [1, 2, 3], [1, 1, 1]) == 0.0
        assert metrics.comprehensiveness(model, [1, 2, 3], [1, 1, 1]) == pytest.approx(0.3)

    def test_uses_full_input_prediction(self):
        # class 0 wins on the full input even though the ablated input prefers class 1
        model = FixedModel([0.6, 0.4], {(0, 1): [0.1, 0.9]})
        assert metrics.comprehensiveness(model, [1, 2], [1, 0]) == pytest.approx(0.5)


class TestSelectionAndReport:
    def test_micro_average(self):
        assert metrics.selection_percentage([[1, 0], [1, 1, 1, 0, 0, 0]]) == pytest.approx(50.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            metrics.selection_percentage([])

    def test_report_text_marks_absent(self):
        report = metrics.MetricsReport(comprehensiveness=0.25, sufficiency=0.0, n_instances=3)
        text = report.to_text()
        assert "token_f1 = absent" in text and "comprehensiveness = 0.25" in text
        assert len(report.csv_header().split(",")) == len(report.csv_row().split(","))


def test_metrics_are_pure():
    rng = np.random.default_rng(3)
    scores, gold = rng.uniform(size=10), rng.integers(0, 2, size=10)
    gold[0] = 1
    before = scores.copy()
    assert metrics.auprc(scores, gold) == metrics.auprc(scores, gold)
    assert np.array_equal(scores, before)
