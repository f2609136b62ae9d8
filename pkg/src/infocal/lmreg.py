"""Continuous-form language model and the mask-aware fluency regularizer.

The LM scores a target *vector* ``v`` after a prefix with the quasi-probability
``sigmoid(h^T M v)``, where ``h`` summarizes the prefix with a forward-only
recurrent encoder. Because the score is defined for any vector, a soft-masked
embedding ``m_i * e_i`` can be scored directly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import tensor as T
from .diffcore.layers import Bilinear, Embedding, GRUCell, Module
from .diffcore.tensor import Tensor


@dataclass
class LmConfig:
    vocab_size: int
    emb_dim: int = 32
    hidden: int = 32
    out_dim: int = 32
    seed: int = 0


class ContinuousLm(Module):
    """Causal scorer: ``h_i`` depends on ``x_<i`` only (a start vector precedes ``x_1``)."""

    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        # row ``vocab_size`` is the start-of-sequence input
        self.inputs = self.add_child("inputs", Embedding(rng, cfg.vocab_size + 1, cfg.emb_dim))
        self.rnn = self.add_child("rnn", GRUCell(rng, cfg.emb_dim, cfg.hidden))
        self.outputs = self.add_child("outputs", Embedding(rng, cfg.vocab_size, cfg.out_dim))
        self.bilinear = self.add_child("bilinear", Bilinear(rng, cfg.hidden, cfg.out_dim))
        self.pretrained = False

    @property
    def bos(self) -> int:
        return self.cfg.vocab_size

    def hidden_states(self, ids, valid=None) -> list[Tensor]:
        """``h_t`` for every position t, each of shape ``[B, hidden]``."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {self.cfg.vocab_size})")
        shifted = np.concatenate([np.full((ids.shape[0], 1), self.bos), ids[:, :-1]], axis=1)
        steps = [self.inputs(shifted[:, t]) for t in range(ids.shape[1])]
        return self.rnn.run(steps, valid)

    def state_after(self, prefix) -> Tensor:
        """Hidden state used to score the token that follows ``prefix``."""
        prefix = np.asarray(prefix, dtype=np.int64).reshape(1, -1)
        ids = np.concatenate([prefix, np.zeros((1, 1), dtype=np.int64)], axis=1)
        return self.hidden_states(ids)[-1]

    def scores(self, ids, valid=None) -> Tensor:
        """Bilinear scores ``h_t^T M e_{x_t}`` as a ``[B, T]`` tensor."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        hs = T.stack(self.hidden_states(ids, valid), axis=1)
        hm = self.bilinear.project(hs)
        e = self.outputs(ids)
        return T.sum(T.mul(hm, e), axis=-1)

    def score_array(self, ids, valid=None) -> np.ndarray:
        """Scores as a plain array; nothing is recorded for the LM parameters."""
        with T.Tape():
            s = self.scores(ids, valid)
        return s.data.copy()


class NegSampler:
    """Unigram negative sampler ``p(x_j) ~ count_j ** smoothing``; zero counts are floored to 1."""

    def __init__(self, counts, smoothing: float = 1.0):
        counts = np.maximum(np.asarray(counts, dtype=np.float64), 1.0)
        w = counts ** smoothing
        self.probs = w / w.sum()

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        return rng.choice(len(self.probs), size=shape, p=self.probs)


def lm_quasi_prob(lm: ContinuousLm, prefix, target) -> Tensor:
    """``sigmoid(h^T M target)`` where ``target`` is a (possibly scaled) output embedding."""
    h = lm.state_after(prefix)
    v = T.reshape(T.as_tensor(target), (-1, 1))
    return T.sigmoid(T.reshape(T.matmul(lm.bilinear.project(h), v), ()))


def pretrain_loss(lm: ContinuousLm, sampler: NegSampler, ids, k: int = 5, rng=None, valid=None) -> Tensor:
    """Negative-sampling loss, averaged over valid positions.

    Per position: ``-[log s(h^T M e_i) + mean_k log s(-h^T M e_j)]`` with
    ``j ~ p(x_j)``.
    """
    if k < 1:
        raise ValueError("pretrain_loss: need at least one negative per position")
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    if ids.size == 0:
        raise ValueError("pretrain_loss: empty batch")
    if valid is None:
        valid = np.ones(ids.shape, dtype=bool)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    B, L = ids.shape
    hs = T.stack(lm.hidden_states(ids, valid), axis=1)
    hm = lm.bilinear.project(hs)
    pos = T.sum(T.mul(hm, lm.outputs(ids)), axis=-1)
    negs = sampler.sample(rng, (B, L, k))
    e_neg = lm.outputs(negs)
    neg = T.sum(T.mul(T.reshape(hm, (B, L, 1, -1)), e_neg), axis=-1)
    pos_term = T.log(T.sigmoid(pos))
    neg_term = T.mean(T.log(T.sigmoid(T.mul(neg, -1.0))), axis=-1)
    w = valid.astype(pos.data.dtype)
    total = T.sum(T.mul(T.add(pos_term, neg_term), w))
    return T.mul(total, -1.0 / max(w.sum(), 1.0))


def regularizer_from_scores(scores, masks, valid=None) -> Tensor:
    """``-sum_i m_{i-1} log sigmoid(m_i s_i)`` with ``m_0 = 1``; batch mean of per-sequence sums."""
    s = T.as_tensor(scores)
    m = T.as_tensor(masks)
    if m.ndim == 1:
        m = T.reshape(m, (1, -1))
        s = T.reshape(s, (1, -1))
        if valid is not None:
            valid = np.asarray(valid)[None, :]
    if m.shape != s.shape:
        raise T.ShapeError("lm_regularizer", s.shape, m.shape)
    B = m.shape[0]
    prev = T.concat([np.ones((B, 1), dtype=m.data.dtype), m[:, :-1]], axis=1)
    terms = T.mul(prev, T.log(T.sigmoid(T.mul(m, s))))
    if valid is not None:
        terms = T.mul(terms, np.asarray(valid, dtype=terms.data.dtype))
    return T.mul(T.sum(terms), -1.0 / B)


def lm_regularizer(lm: ContinuousLm, ids, masks, valid=None) -> Tensor:
    """Fluency penalty on soft masks. The LM is frozen: gradients reach the masks only."""
    m = T.as_tensor(masks)
    if np.any((m.data < 0) | (m.data > 1)):
        raise ValueError("lm_regularizer: masks must lie in [0, 1]")
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    return regularizer_from_scores(lm.score_array(ids, valid), masks, valid)


def perplexity(lm: ContinuousLm, corpus) -> float:
    """Quasi-perplexity ``exp(mean -log sigmoid(h^T M e))`` over every token.

    The quasi-probabilities are not normalized over the vocabulary, so this is
    only comparable between LMs of this family.
    """
    seqs = [np.asarray(s, dtype=np.int64) for s in corpus if len(s)]
    if not seqs:
        raise ValueError("perplexity: empty corpus")
    total, count = 0.0, 0
    for s in seqs:
        sc = lm.score_array(s[None, :])[0].astype(np.float64)
        total += float(np.sum(np.logaddexp(0.0, -sc)))
        count += len(s)
    return math.exp(total / count)


def fit_bilinear_scores(lm: ContinuousLm, ids, targets) -> None:
    """Set ``M`` to the minimum-norm solution making the true-token scores of ``ids`` equal ``targets``."""
    ids = np.asarray(ids, dtype=np.int64).reshape(1, -1)
    with T.Tape():
        hs = np.stack([h.data[0] for h in lm.hidden_states(ids)]).astype(np.float64)
    es = lm.outputs.table.data[ids[0]].astype(np.float64)
    # score_t = vec(M) . vec(h_t e_t^T)
    A = np.einsum("ti,tj->tij", hs, es).reshape(len(hs), -1)
    vec, *_ = np.linalg.lstsq(A, np.asarray(targets, dtype=np.float64), rcond=None)
    lm.bilinear.M.data = vec.reshape(lm.bilinear.M.shape).astype(lm.bilinear.M.data.dtype)


# -- ordering check ---------------------------------------------------------


@dataclass
class OrderingReport:
    verdict: str
    failed_premises: list[str] = field(default_factory=list)
    n_configurations: int = 0
    n_comparisons: int = 0
    violations: list[dict] = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return self.verdict == "holds"


def _segments(bits) -> int:
    bits = np.asarray(bits, dtype=int)
    return int(bits[0] + np.sum((bits[1:] == 1) & (bits[:-1] == 0))) if len(bits) else 0


def _loss_table(scores: np.ndarray, mask_matrix: np.ndarray) -> np.ndarray:
    s = scores[None, :]
    prev = np.concatenate([np.ones((mask_matrix.shape[0], 1)), mask_matrix[:, :-1]], axis=1)
    return -(prev * -np.logaddexp(0.0, -mask_matrix * s)).sum(axis=1)


def theorem1_check(lm, token_ids, eps: float, delta: float, k: int | None = None) -> OrderingReport:
    """Exhaustively test that consecutive selections beat scattered ones.

    Selected tokens get mask ``1 - eps/2`` and unselected ``eps/2``. Two
    orderings are tested for every selection count (or just ``k``):

    * interior placements (first and last token unselected): every
      single-segment selection scores strictly below every multi-segment one;
    * the two local moves: filling a one-token gap instead of extending a
      segment into free space, and moving an isolated first token into a gap.

    ``lm`` is a :class:`ContinuousLm` or a callable returning the true-token
    scores for ``token_ids``. Premises are checked first; if any fails the
    verdict is ``"premises not satisfied"``.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    n = len(ids)
    if callable(lm) and not isinstance(lm, ContinuousLm):
        s = np.asarray(lm(ids), dtype=np.float64)
    else:
        s = lm.score_array(ids[None, :])[0].astype(np.float64)
    hi, lo = 1.0 - eps / 2.0, eps / 2.0

    failed = []
    if not (0.0 < eps and 3.0 * eps < 1.0):
        failed.append(f"eps={eps} does not satisfy 0 < eps << 1 - eps (need 3*eps < 1)")
    if not (0.0 < delta < 1.0):
        failed.append(f"delta={delta} outside (0, 1)")
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))  # noqa: E731
    p_masked = sig(lo * s)
    p_sel = sig(hi * s)
    if n and p_masked.max() - p_masked.min() >= eps:
        failed.append("masked-token quasi-probabilities differ by eps or more")
    if n and p_sel.min() < delta:
        failed.append(f"selected-token quasi-probability {p_sel.min():.4g} below floor delta={delta}")
    if n and not failed:
        B = -np.log(p_masked)
        C = -np.log(p_sel)
        l_max = max(B.max(), C.max())
        # ordering margins: leading term must dominate spread, selected costs and mask leakage
        global_margin = hi * (2 * B.min() - B.max() - (n - 1) * C.max()) - lo * n * l_max
        local_margin = (hi - lo) * (B.min() - C.max()) - (B.max() - B.min()) - C.max() - (1 - hi) * B.max()
        if global_margin <= 0 or local_margin <= 0:
            failed.append("selected-token costs too large relative to masked-token cost (ordering margin <= 0)")
    if failed:
        return OrderingReport("premises not satisfied", failed)

    codes = np.arange(2 ** n)
    bits = ((codes[:, None] >> np.arange(n)[None, :]) & 1).astype(np.int64)
    masks = np.where(bits == 1, hi, lo)
    losses = _loss_table(s, masks)
    counts = bits.sum(axis=1)
    segs = np.array([_segments(b) for b in bits])

    report = OrderingReport("holds")
    ks = [k] if k is not None else list(range(1, n + 1))
    for kk in ks:
        sel = counts == kk
        report.n_configurations += int(sel.sum())
        interior = sel & (bits[:, 0] == 0) & (bits[:, -1] == 0)
        cons = np.flatnonzero(interior & (segs == 1))
        scat = np.flatnonzero(interior & (segs > 1))
        if len(cons) and len(scat):
            report.n_comparisons += len(cons) * len(scat)
            worst_c = cons[np.argmax(losses[cons])]
            best_s = scat[np.argmin(losses[scat])]
            if losses[worst_c] >= losses[best_s]:
                report.violations.append(_violation("consecutive-vs-scattered", bits, losses, worst_c, best_s))
        for a, b, kind in _local_moves(bits, sel, n):
            report.n_comparisons += 1
            if losses[a] >= losses[b]:
                report.violations.append(_violation(kind, bits, losses, a, b))
    if report.violations:
        report.verdict = "violated"
    return report


def _local_moves(bits, sel, n):
    """Yield (better, worse, kind) index pairs predicted by the two local inequalities."""
    on = bits == 1
    for kpos, q in itertools.permutations(range(1, n - 1), 2):
        if abs(kpos - q) < 2:
            continue
        # fill gap at kpos (neighbours selected) vs extend the segment ending at q-1 into q
        cond = sel & on[:, kpos] & on[:, kpos - 1] & on[:, kpos + 1] & ~on[:, q] & on[:, q - 1] & ~on[:, q + 1]
        for a in np.flatnonzero(cond):
            b = a ^ (1 << kpos) ^ (1 << q)
            yield a, b, "fill-gap-vs-extend"
    for kpos in range(3, n - 1):
        # isolated first token moved into a one-token gap
        cond = sel & on[:, 0] & ~on[:, 1] & ~on[:, kpos] & on[:, kpos - 1] & on[:, kpos + 1]
        for a in np.flatnonzero(cond):
            b = a ^ 1 ^ (1 << kpos)
            yield b, a, "move-isolated-first-into-gap"


def _violation(kind, bits, losses, better, worse) -> dict:
    return {
        "kind": kind,
        "expected_lower": bits[better].tolist(),
        "expected_higher": bits[worse].tolist(),
        "loss_lower": float(losses[better]),
        "loss_higher": float(losses[worse]),
    }
