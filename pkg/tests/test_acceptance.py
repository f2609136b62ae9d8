"""Acceptance criteria, one verdict line each (see the terminal summary)."""

import hashlib
import time

import numpy as np
import pytest
from scipy import special, stats

from infocal import cli, metrics
from infocal.corpus import SynthSpec, generate_synthetic, save_jsonl
from infocal.diffcore import Tensor
from infocal.diffcore import tensor as T
from infocal.lmreg import theorem1_check
from infocal.model import BEER_PRIOR, IbPrior, PredictorOutput, gumbel_noise, loss_ib, loss_mi, loss_sp, neg_mi_surrogate, relaxed_masks

import _desk_scale as desk
import _oracles as oracle
from _acceptance_log import record
from _cases import LOSS_CASES, PRIMITIVE_CASES, loss_d_case
from _gradcheck import check, check_params
from test_lmreg import premise_lm

GRAD_TOL = 1e-3
GRAD_BUDGET_S = 300.0
N_GRAD_CASES = 100


def test_gradient_suite():
    start = time.perf_counter()
    worst = {}
    for kind, make in sorted(PRIMITIVE_CASES.items()):
        rng = np.random.default_rng(sum(map(ord, kind)))
        worst[kind] = max(check(*make(rng)) for _ in range(N_GRAD_CASES))
    for name, make in sorted(LOSS_CASES.items()):
        rng = np.random.default_rng(sum(map(ord, name)))
        worst[name] = max(check(*make(rng)) for _ in range(N_GRAD_CASES))
    rng = np.random.default_rng(7)
    worst["L_d"] = max(check_params(*loss_d_case(rng)) for _ in range(N_GRAD_CASES))
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if v >= GRAD_TOL}
    passed = not bad and elapsed < GRAD_BUDGET_S
    record("1 gradient suite", passed,
           f"{len(worst)} checks x {N_GRAD_CASES} cases, worst rel err {max(worst.values()):.2e}, {elapsed:.0f}s"
           + (f", failing {sorted(bad)}" if bad else ""))
    assert passed, bad or elapsed


def stratified_kl(mu, sigma, n, rng):
    """Monte Carlo KL(N(mu, sigma^2) || N(0, 1)) with one uniform draw per probability stratum."""
    u = (np.arange(n) + rng.random(n)) / n
    x = mu + sigma * special.ndtri(u)
    return float(np.mean(stats.norm.logpdf(x, mu, sigma) - stats.norm.logpdf(x)))


def test_closed_form_kl_matches_sampling():
    rng = np.random.default_rng(11)
    errors = []
    for _ in range(50):
        mu, sigma = rng.uniform(-2, 2), rng.uniform(0.2, 3.0)
        with T.precision("float64"):
            closed = loss_mi([[mu]], [[sigma]]).item()
        sampled = stratified_kl(mu, sigma, 100_000, rng)
        errors.append(abs(closed - sampled) / abs(sampled))
    worst = max(errors)
    record("2 closed-form KL vs sampling", worst < 0.02, f"50 pairs, 1e5 samples, worst rel err {worst:.2e}")
    assert worst < 0.02


def test_ib_matches_direct_kl():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(1000):
        p, r1 = rng.uniform(1e-3, 1 - 1e-3), rng.uniform(1e-3, 1 - 1e-3)
        with T.precision("float64"):
            got = loss_ib([[p]], IbPrior.from_select_rate(r1)).item()
        worst = max(worst, abs(got - stats.entropy([1 - p, p], [1 - r1, r1])))
    with T.precision("float64"):
        derived = loss_ib([[0.5]], BEER_PRIOR).item()
    passed = worst < 1e-6 and round(derived, 4) == 2.7612
    record("3 L_ib vs direct KL", passed, f"1000 pairs, worst abs err {worst:.1e}; p=0.5 at (0.999, 0.001) gives {derived:.4f}")
    assert passed


def test_gumbel_selection_calibration():
    rng = np.random.default_rng(13)
    gaps = {}
    for p in (0.1, 0.3, 0.5, 0.7, 0.9):
        for tau in (0.1, 0.5, 1.0):
            noise = gumbel_noise(rng, (1, 10_000))
            masks = relaxed_masks(Tensor(np.full((1, 10_000), p)), tau, noise).data
            gaps[(p, tau)] = abs(float(np.mean(masks > 0.5)) - p)
    worst = max(gaps.values())
    record("4 Gumbel calibration", worst <= 0.02, f"15 (p, tau) settings, 1e4 draws, worst gap {worst:.4f}")
    assert worst <= 0.02


def _metric_oracle_mismatches(rng) -> dict:
    bad = {"token_prf": 0, "iou_f1": 0, "auprc": 0}
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        pred, gold = oracle.random_spans(rng, n, 4), oracle.random_spans(rng, n, 4)
        if metrics.token_prf(pred, gold) != oracle.token_prf(metrics.spans_to_mask(pred, n), metrics.spans_to_mask(gold, n)):
            bad["token_prf"] += 1
        if metrics.iou_f1([pred], [gold]) != oracle.iou_f1([pred], [gold]):
            bad["iou_f1"] += 1
        labels = rng.integers(0, 2, size=n)
        labels[rng.integers(n)] = 1
        scores = np.round(rng.uniform(size=n), int(rng.integers(1, 3)))
        if abs(metrics.auprc(scores, labels) - oracle.auprc(scores, labels)) > 1e-9:
            bad["auprc"] += 1
    return bad


def test_metric_oracles():
    bad = _metric_oracle_mismatches(np.random.default_rng(14))
    hand = {
        "token prf 2/3": metrics.token_prf([(2, 5)], [(3, 6)]) == (2 / 3, 2 / 3, 2 / 3),
        "iou below half": metrics.iou_f1([[(0, 4)]], [[(2, 6)]]) == 0.0,
        "iou above half": metrics.iou_f1([[(1, 5)]], [[(2, 5)]]) == 1.0,
        "auprc perfect ranking": metrics.auprc([0.9, 0.1, 0.8, 0.2], [1, 0, 1, 0]) == 1.0,
    }
    passed = not any(bad.values()) and all(hand.values())
    record("5 metric oracles", passed, f"1000 instances, mismatches {bad}, hand examples {sum(hand.values())}/{len(hand)}")
    assert passed


def test_consecutive_selection_ordering():
    rng = np.random.default_rng(15)
    built, skipped, comparisons, violations = 0, 0, 0, 0
    while built < 100:
        lm, ids = premise_lm(rng, int(rng.integers(4, 11)))
        report = theorem1_check(lm, ids, eps=0.02, delta=0.9)
        if report.verdict == "premises not satisfied":
            skipped += 1
            continue
        built += 1
        comparisons += report.n_comparisons
        violations += len(report.violations)
    record("6 consecutive-selection ordering", violations == 0,
           f"100 constructions (n 4-10, {skipped} draws skipped on premises), {comparisons} comparisons, {violations} violations")
    assert violations == 0


def test_surrogate_equals_predictor_loss():
    rng = np.random.default_rng(16)
    worst = 0.0
    for _ in range(100):
        b, c = int(rng.integers(1, 33)), int(rng.integers(2, 6))
        dist = rng.dirichlet(np.ones(c), size=b)
        y = rng.integers(0, c, size=b)
        with T.precision("float64"):
            direct = loss_sp(PredictorOutput(Tensor(np.zeros((b, 1))), Tensor(dist)), y).item()
            surrogate = neg_mi_surrogate(Tensor(dist), y).item()
        worst = max(worst, abs(direct - surrogate) / max(abs(direct), 1e-12))
    record("7 surrogate equals L_sp", worst < 1e-12, f"100 batches, worst rel diff {worst:.1e}")
    assert worst < 1e-12


# -- desk-scale end to end ----------------------------------------------------

F1_TARGET = 0.75
BASELINE_MARGIN = 0.3
RUN_BUDGET_S = 600.0


def _per_seed(variant, key):
    return [desk.all_runs()[s][variant][key] for s in desk.SEEDS]


@pytest.mark.slow
def test_desk_scale_end_to_end():
    f1 = desk.median("full", "f1")
    margin = float(np.median(np.subtract(_per_seed("full", "f1"), _per_seed("full", "random_f1"))))
    slowest = max(_per_seed("full", "seconds"))
    passed = f1 >= F1_TARGET and margin >= BASELINE_MARGIN and slowest < RUN_BUDGET_S
    record("8 desk-scale end to end", passed,
           f"median F1 {f1:.3f} (per seed {np.round(_per_seed('full', 'f1'), 3).tolist()}), "
           f"median margin over random {margin:.3f}, slowest run {slowest:.0f}s")
    assert passed


@pytest.mark.slow
def test_ablation_directions():
    recall_full, recall_noadv = desk.median("full", "recall"), desk.median("no_adv", "recall")
    frag_full, frag_nolm = desk.median("full", "fragments"), desk.median("no_lm", "fragments")
    recall_ok, frag_ok = recall_full > recall_noadv, frag_nolm > frag_full
    record("9 ablation directions", recall_ok and frag_ok,
           f"median recall full {recall_full:.3f} vs no-adv {recall_noadv:.3f} ({'ok' if recall_ok else 'wrong'}); "
           f"median segments no-lm {frag_nolm:.3f} vs full {frag_full:.3f} ({'ok' if frag_ok else 'wrong'})")
    assert recall_ok and frag_ok


@pytest.mark.slow
def test_faithfulness_signs():
    comp, suff = desk.median("full", "comprehensiveness"), desk.median("full", "sufficiency")
    passed = comp > 0.2 and suff < 0.05
    record("11 faithfulness signs", passed, f"median comprehensiveness {comp:.3f}, median sufficiency {suff:.3f}")
    assert passed


# -- reproducibility -----------------------------------------------------------

SMALL = ["--emb-dim", "10", "--hidden", "10", "--feature-dim", "8", "--batch-size", "16"]


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_rerun_from_manifest_is_bit_identical(tmp_path):
    corpus = generate_synthetic(SynthSpec(n_instances=300, min_len=10, max_len=16, seed=3))
    for name, part in (("train", corpus.instances[:200]), ("dev", corpus.instances[200:250]), ("test", corpus.instances[250:])):
        save_jsonl(part, tmp_path / f"{name}.jsonl")
    assert cli.main(["pretrain-lm", "--corpus", str(tmp_path / "train.jsonl"), "--lm-epochs", "1",
                     "--output-dir", str(tmp_path), "--run-name", "lm", *SMALL]) == 0
    assert cli.main(["train", "--corpus", str(tmp_path / "train.jsonl"), "--dev-corpus", str(tmp_path / "dev.jsonl"),
                     "--test-corpus", str(tmp_path / "test.jsonl"), "--lm-checkpoint", str(tmp_path / "lm" / "lm.ical"),
                     "--epochs", "2", "--output-dir", str(tmp_path), "--run-name", "first", *SMALL]) == 0
    first = tmp_path / "first"
    assert cli.main(["train", "--config", str(first / "manifest.txt"), "--output-dir", str(tmp_path), "--run-name", "again"]) == 0
    names = ("best.ical", "final.ical", "epochs.csv", "metrics_dev.txt", "metrics_dev.csv", "metrics_test.txt", "metrics_test.csv")
    differing = [n for n in names if _digest(first / n) != _digest(tmp_path / "again" / n)]
    record("10 rerun determinism", not differing, f"{len(names)} artifacts compared" + (f", differing {differing}" if differing else ", all identical"))
    assert not differing
