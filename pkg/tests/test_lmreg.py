import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infocal.corpus import SynthSpec, build_vocab, generate_synthetic
from infocal.diffcore import AdamState, Tape, adam_step
from infocal.diffcore import tensor as T
from infocal.lmreg import (
    ContinuousLm,
    LmConfig,
    NegSampler,
    fit_bilinear_scores,
    lm_quasi_prob,
    lm_regularizer,
    perplexity,
    pretrain_loss,
    regularizer_from_scores,
    theorem1_check,
)

from _gradcheck import check

LN2 = math.log(2.0)


def make_lm(vocab=8, seed=0, dim=6):
    return ContinuousLm(LmConfig(vocab, dim, dim, dim, seed=seed))


def premise_lm(rng, n, dim=12):
    """An LM whose true-token scores on a random sequence are set to large positive targets."""
    lm = make_lm(vocab=20, seed=int(rng.integers(1 << 30)), dim=dim)
    ids = rng.integers(0, 20, size=n)
    fit_bilinear_scores(lm, ids, rng.uniform(6.0, 9.0, size=n))
    return lm, ids


class TestScorer:
    def test_causal(self):
        lm = make_lm()
        base = np.array([[1, 2, 3, 4, 5, 6]])
        ref = [h.data.copy() for h in lm.hidden_states(base)]
        for t in range(6):
            changed = base.copy()
            changed[0, t] = 7
            hs = lm.hidden_states(changed)
            for i in range(t + 1):
                assert np.array_equal(hs[i].data, ref[i])

    def test_quasi_prob_in_unit_interval(self):
        lm = make_lm()
        s = lm.score_array(np.array([[1, 2, 3, 0, 7]]))
        p = 1 / (1 + np.exp(-s))
        assert np.all((p > 0) & (p < 1))

    def test_zero_mask_gives_half(self):
        lm = make_lm()
        e = lm.outputs.table.data[3]
        assert lm_quasi_prob(lm, [1, 2], 0.0 * e).item() == 0.5

    def test_full_mask_matches_scorer(self):
        lm = make_lm()
        ids = np.array([1, 2, 3])
        s = lm.score_array(ids[None])[0, 2]
        p = lm_quasi_prob(lm, ids[:2], lm.outputs.table.data[3]).item()
        assert p == pytest.approx(1 / (1 + math.exp(-s)), rel=1e-6)

    def test_monotone_in_mask_for_positive_score(self):
        lm = make_lm()
        ids = np.array([4, 1, 6])
        fit_bilinear_scores(lm, ids, [1.5, 2.0, 3.0])
        e = lm.outputs.table.data[6]
        vals = [lm_quasi_prob(lm, ids[:2], m * e).item() for m in np.linspace(0, 1, 11)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            make_lm().score_array(np.array([[8]]))


class TestNegSampler:
    @pytest.mark.parametrize("smoothing", [1.0, 0.75])
    def test_distribution(self, smoothing):
        s = NegSampler([0, 3, 10, 1], smoothing)
        assert s.probs.sum() == pytest.approx(1.0)
        assert np.all(s.probs > 0)

    def test_smoothing_flattens(self):
        raw, smooth = NegSampler([1, 100]), NegSampler([1, 100], 0.75)
        assert smooth.probs[0] > raw.probs[0]


class TestPretrainLoss:
    def test_zero_scores(self):
        lm = make_lm()
        lm.bilinear.M.data[...] = 0
        loss = pretrain_loss(lm, NegSampler(np.ones(8)), np.array([[1, 2, 3]]), 5, 0)
        assert loss.item() == pytest.approx(2 * LN2, rel=1e-6)

    def test_confident_scores_drive_loss_to_zero(self):
        # one-token vocabulary plus a second token that only ever appears as a negative
        lm = make_lm(vocab=2)
        ids = np.zeros((1, 4), dtype=int)
        fit_bilinear_scores(lm, ids[0], np.full(4, 30.0))
        lm.outputs.table.data[1] = -lm.outputs.table.data[0]
        sampler = NegSampler([0, 10**9])
        assert pretrain_loss(lm, sampler, ids, 3, 0).item() < 1e-3

    @pytest.mark.parametrize("k", [0, -2])
    def test_needs_negatives(self, k):
        with pytest.raises(ValueError):
            pretrain_loss(make_lm(), NegSampler(np.ones(8)), np.array([[1]]), k)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            pretrain_loss(make_lm(), NegSampler(np.ones(8)), np.zeros((1, 0), dtype=int))

    @pytest.mark.parametrize("seed", range(5))
    def test_decreases_on_repeating_corpus(self, seed):
        lm = make_lm(vocab=5, seed=seed, dim=8)
        corpus = np.tile([2, 3, 4], (4, 4))
        sampler = NegSampler(np.bincount(corpus.ravel(), minlength=5))
        state, rng, trace = AdamState(lr=1e-2), np.random.default_rng(seed), []
        for _ in range(200):
            with Tape() as tape:
                loss = pretrain_loss(lm, sampler, corpus, 5, rng)
            tape.backward(loss)
            adam_step(state, lm.params())
            trace.append(loss.item())
        assert np.mean(trace[-20:]) < 0.9 * np.mean(trace[:20])


class TestRegularizer:
    def test_all_ones_is_nll(self):
        lm = make_lm()
        ids = np.array([[1, 5, 2, 7]])
        s = lm.score_array(ids)
        nll = float(np.sum(np.logaddexp(0.0, -s)))
        assert lm_regularizer(lm, ids, np.ones((1, 4))).item() == pytest.approx(nll, rel=1e-6)

    def test_all_zeros_is_ln2(self):
        lm = make_lm()
        assert lm_regularizer(lm, np.array([[1, 5, 2, 7]]), np.zeros((1, 4))).item() == pytest.approx(LN2, rel=1e-6)

    def test_masks_out_of_range(self):
        with pytest.raises(ValueError):
            lm_regularizer(make_lm(), np.array([[1, 2]]), np.array([[0.5, 1.5]]))

    def test_gradient_in_every_mask(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=(2, 6)) * 3
        masks = rng.uniform(0.1, 0.9, size=(2, 6))
        assert check(lambda m: regularizer_from_scores(scores, m), [masks]) < 1e-3
        with Tape() as tape:
            m = T.parameter(masks)
            loss = regularizer_from_scores(scores, m)
        assert np.all(tape.backward(loss)[m] != 0)

    def test_frozen_lm_gets_no_gradient(self):
        lm = make_lm()
        with Tape() as tape:
            m = T.parameter(np.full((1, 3), 0.5))
            loss = lm_regularizer(lm, np.array([[1, 2, 3]]), m)
        grads = tape.backward(loss)
        assert set(grads) == {m}

    def test_consecutive_block_beats_scattered_placements(self):
        rng = np.random.default_rng(11)
        lm, ids = premise_lm(rng, 8)
        eps = 0.02
        s = lm.score_array(ids[None])[0]
        hi, lo = 1 - eps / 2, eps / 2

        def value(bits):
            m = np.where(np.array(bits) == 1, hi, lo)
            return regularizer_from_scores(s[None], m[None]).item()

        consecutive = [value([0] * a + [1, 1, 1] + [0] * (5 - a)) for a in range(1, 5)]
        scattered = []
        for pos in itertools.combinations(range(1, 7), 3):
            bits = [1 if i in pos else 0 for i in range(8)]
            if sum(1 for i in range(1, 8) if bits[i] and not bits[i - 1]) > 1:
                scattered.append(value(bits))
        assert max(consecutive) < min(scattered)


class TestOrderingCheck:
    def test_uniform_masked_probabilities(self):
        # scores on a constant grid give identical masked-token probabilities
        report = theorem1_check(lambda ids: np.full(len(ids), 7.0), np.arange(6), eps=0.02, delta=0.9, k=2)
        assert report.holds and not report.violations and report.n_comparisons > 0

    def test_premises_violated(self):
        lm, ids = premise_lm(np.random.default_rng(0), 6)
        report = theorem1_check(lm, ids, eps=0.5, delta=0.9)
        assert report.verdict == "premises not satisfied" and report.failed_premises

    def test_low_scores_fail_premises(self):
        report = theorem1_check(lambda ids: np.full(len(ids), 0.2), np.arange(6), eps=0.02, delta=0.9)
        assert report.verdict == "premises not satisfied"

    def test_all_selected_is_vacuous(self):
        lm, ids = premise_lm(np.random.default_rng(1), 5)
        report = theorem1_check(lm, ids, eps=0.02, delta=0.9, k=5)
        assert report.holds and report.n_configurations == 1 and report.n_comparisons == 0

    def test_negative_score_fails_probability_floor(self):
        scores = np.array([7.0, 7.0, 7.0, -40.0, 7.0, 7.0, 7.0])
        report = theorem1_check(lambda ids: scores, np.arange(7), eps=0.02, delta=0.9)
        assert report.verdict == "premises not satisfied"

    @pytest.mark.parametrize("seed", range(10))
    def test_random_constructions(self, seed):
        rng = np.random.default_rng(seed)
        lm, ids = premise_lm(rng, int(rng.integers(4, 9)))
        report = theorem1_check(lm, ids, eps=0.02, delta=0.9)
        assert report.verdict == "holds", report.failed_premises or report.violations[:2]


class TestPerplexity:
    def test_half_everywhere(self):
        lm = make_lm()
        lm.bilinear.M.data[...] = 0
        assert perplexity(lm, [[1, 2, 3], [4, 5]]) == pytest.approx(2.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            perplexity(make_lm(), [])

    def test_trained_beats_untrained_on_held_out(self):
        from infocal import training as tr

        corpus = generate_synthetic(SynthSpec(n_instances=400, seed=3))
        train, held = corpus[:300], corpus[300:]
        vocab = build_vocab(train)
        hp = tr.Hyperparams(lm_epochs=2, emb_dim=16, hidden=16, batch_size=32, seed=3)
        d_train, d_held = tr.encode_corpus(train, vocab), tr.encode_corpus(held, vocab)
        lm = tr.build_lm(len(vocab), hp)
        before = perplexity(lm, d_held.seqs)
        tr.pretrain_lm(lm, d_train, vocab, hp, d_held)
        assert lm.pretrained
        assert perplexity(lm, d_held.seqs) < before


@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_regularizer_is_nonnegative(masks, seed):
    scores = np.random.default_rng(seed).normal(size=len(masks)) * 4
    assert regularizer_from_scores(scores, np.array(masks)).item() >= 0
