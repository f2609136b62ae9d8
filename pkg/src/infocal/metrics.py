"""Rationale evaluation: token P/R/F1, IOU F1, AUPRC, comprehensiveness, sufficiency.

All functions are pure. Span sets are half-open ``[start, end)`` token
intervals; :func:`normalize_spans` merges overlapping or touching intervals
so a span set is equivalent to a set of token positions partitioned into
maximal runs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

IOU_THRESHOLD = 0.5

Span = tuple[int, int]


def normalize_spans(spans: Iterable[Sequence[int]], length: int | None = None) -> list[Span]:
    out: list[list[int]] = []
    for s, e in sorted((int(a), int(b)) for a, b in spans):
        if s >= e or s < 0 or (length is not None and e > length):
            raise ValueError(f"span [{s}, {e}) invalid" + (f" for length {length}" if length is not None else ""))
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [(s, e) for s, e in out]


def mask_to_spans(mask) -> list[Span]:
    m = np.asarray(mask).astype(bool)
    spans, start = [], None
    for i, v in enumerate(m):
        if v and start is None:
            start = i
        elif not v and start is not None:
            spans.append((start, i))
            start = None
    if start is not None:
        spans.append((start, len(m)))
    return spans


def spans_to_mask(spans: Iterable[Sequence[int]], length: int) -> np.ndarray:
    m = np.zeros(length, dtype=bool)
    for s, e in spans:
        m[s:e] = True
    return m


def _tokens(spans) -> set[int]:
    return {i for s, e in spans for i in range(s, e)}


def _prf(overlap: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    if n_pred == 0:
        p = 1.0 if n_gold == 0 else 0.0
    else:
        p = overlap / n_pred
    r = 1.0 if n_gold == 0 else overlap / n_gold
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


def token_prf(pred, gold) -> tuple[float, float, float]:
    """Token-level precision, recall and F1 between two span sets.

    Empty conventions: P = 1 when both are empty, 0 when only pred is
    empty; R = 1 when gold is empty; F1 = 0 when P + R = 0.
    """
    a, b = _tokens(pred), _tokens(gold)
    return _prf(len(a & b), len(a), len(b))


def corpus_token_prf(preds, golds) -> tuple[float, float, float]:
    """Micro-averaged token P/R/F1 over a list of instances."""
    overlap = n_pred = n_gold = 0
    for p, g in zip(preds, golds, strict=True):
        a, b = _tokens(p), _tokens(g)
        overlap += len(a & b)
        n_pred += len(a)
        n_gold += len(b)
    return _prf(overlap, n_pred, n_gold)


def iou(a: Span, b: Span) -> float:
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union else 0.0


def _max_matching(adj: list[list[int]], n_right: int) -> int:
    match_right = [-1] * n_right

    def augment(u, seen):
        for v in adj[u]:
            if v in seen:
                continue
            seen.add(v)
            if match_right[v] < 0 or augment(match_right[v], seen):
                match_right[v] = u
                return True
        return False

    return sum(augment(u, set()) for u in range(len(adj)))


def iou_matches(pred: Sequence[Span], gold: Sequence[Span], threshold: float = IOU_THRESHOLD) -> int:
    """Size of a maximum one-to-one matching between spans with IOU >= threshold.

    Candidate edges are tried in descending IOU order, so a greedy matching is
    kept whenever it is already maximum.
    """
    adj = []
    for p in pred:
        cands = [(iou(p, g), j) for j, g in enumerate(gold)]
        adj.append([j for v, j in sorted(cands, key=lambda x: (-x[0], x[1])) if v >= threshold])
    return _max_matching(adj, len(gold))


def iou_f1(preds: Sequence[Sequence[Span]], golds: Sequence[Sequence[Span]], threshold: float = IOU_THRESHOLD) -> float:
    """Span-level F1 where a predicted span counts as correct if it matches a gold span at IOU >= 0.5."""
    tp = n_pred = n_gold = 0
    for p, g in zip(preds, golds, strict=True):
        p, g = normalize_spans(p), normalize_spans(g)
        tp += iou_matches(p, g, threshold)
        n_pred += len(p)
        n_gold += len(g)
    precision = tp / n_pred if n_pred else (1.0 if n_gold == 0 else 0.0)
    recall = tp / n_gold if n_gold else 1.0
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def auprc(scores, gold) -> float | None:
    """Area under the precision-recall curve by step-wise summation.

    Thresholds sweep every distinct score from high to low; at each one the
    recall gain is weighted by the precision there. Returns None when gold
    has no positives.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(gold).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError(f"auprc: {s.shape} scores vs {y.shape} labels")
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each group of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    recall = tp_at / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def _faithfulness_probs(model, ids, mask, keep_rationale: bool):
    """Probability of the full-input prediction on the full and on the ablated input.

    ``model.class_probs(ids, masks)`` must return class probabilities for a
    single sequence; tokens are masked (embeddings zeroed), not deleted.
    """
    mask = np.asarray(mask, dtype=np.float64)
    full = np.asarray(model.class_probs(ids, np.ones_like(mask)))
    y = int(np.argmax(full))
    ablated = mask if keep_rationale else 1.0 - mask
    part = np.asarray(model.class_probs(ids, ablated))
    return float(full[y]), float(part[y])


def comprehensiveness(model, ids, mask) -> float:
    """``p(y|x) - p(y|x without rationale)`` for the class predicted on the full input."""
    full, part = _faithfulness_probs(model, ids, mask, keep_rationale=False)
    return full - part


def sufficiency(model, ids, mask) -> float:
    """``p(y|x) - p(y|rationale only)`` for the class predicted on the full input."""
    full, part = _faithfulness_probs(model, ids, mask, keep_rationale=True)
    return full - part


def selection_percentage(masks) -> float:
    """Micro-averaged share of selected tokens, in percent."""
    masks = [np.asarray(m).astype(bool) for m in masks]
    total = sum(len(m) for m in masks)
    if not masks or total == 0:
        raise ValueError("selection_percentage: empty corpus")
    return 100.0 * sum(int(m.sum()) for m in masks) / total


def segment_count(mask) -> int:
    return len(mask_to_spans(mask))


@dataclass
class MetricsReport:
    token_p: float | None = None
    token_r: float | None = None
    token_f1: float | None = None
    iou_f1: float | None = None
    auprc: float | None = None
    comprehensiveness: float | None = None
    sufficiency: float | None = None
    selection_percentage: float | None = None
    n_instances: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.as_dict().items())

    def csv_header(self) -> str:
        return ",".join(self.as_dict())

    def csv_row(self) -> str:
        return ",".join(_fmt(v) for v in self.as_dict().values())


def _fmt(v) -> str:
    if v is None:
        return "absent"
    if isinstance(v, float):
        return repr(v)
    return str(v)
