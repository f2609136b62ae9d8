"""Corpus loading, vocabulary construction and the planted-rationale generator."""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAX_SEQ_LEN = 1000
PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Instance:
    tokens: tuple[str, ...]
    label: int | float
    rationales: tuple[tuple[int, int], ...] | None = None
    tag: str | None = None
    uid: str | None = None

    def to_json(self) -> dict:
        obj: dict = {"tokens": list(self.tokens), "label": self.label}
        if self.rationales is not None:
            obj["rationales"] = [list(r) for r in self.rationales]
        if self.tag is not None:
            obj["tag"] = self.tag
        if self.uid is not None:
            obj["id"] = self.uid
        return obj


@dataclass
class Corpus:
    instances: list[Instance]
    errors: list[tuple[int, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i):
        return self.instances[i]

    @property
    def has_rationales(self) -> bool:
        return any(inst.rationales is not None for inst in self.instances)


def _parse(obj, lineno: int, regression: bool | None) -> Instance:
    if not isinstance(obj, dict):
        raise CorpusError(f"line {lineno}: expected a JSON object")
    for key in ("tokens", "label"):
        if key not in obj:
            raise CorpusError(f"line {lineno}: missing required field {key!r}")
    tokens = obj["tokens"]
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise CorpusError(f"line {lineno}: 'tokens' must be a list of strings")
    label = obj["label"]
    if isinstance(label, bool) or not isinstance(label, (int, float)):
        raise CorpusError(f"line {lineno}: 'label' must be a number")
    if isinstance(label, float) and label.is_integer() and not regression:
        label = int(label)
    if isinstance(label, float) and not 0.0 <= label <= 1.0:
        raise CorpusError(f"line {lineno}: real-valued label {label} outside [0, 1]")
    if isinstance(label, int) and label < 0:
        raise CorpusError(f"line {lineno}: negative class index {label}")
    spans = None
    if obj.get("rationales") is not None:
        spans = []
        for r in obj["rationales"]:
            if not (isinstance(r, list) and len(r) == 2 and all(isinstance(v, int) for v in r)):
                raise CorpusError(f"line {lineno}: rationale {r!r} is not a [start, end) pair")
            start, end = r
            if not 0 <= start < end <= len(tokens):
                raise CorpusError(f"line {lineno}: rationale [{start}, {end}) out of bounds for {len(tokens)} tokens")
            spans.append((start, end))
        spans = tuple(spans)
    if len(tokens) > MAX_SEQ_LEN:
        log.warning("line %d: truncating %d tokens to %d", lineno, len(tokens), MAX_SEQ_LEN)
        tokens = tokens[:MAX_SEQ_LEN]
        if spans is not None:
            spans = tuple((s, min(e, MAX_SEQ_LEN)) for s, e in spans if s < MAX_SEQ_LEN)
    return Instance(tuple(tokens), label, spans, obj.get("tag"), obj.get("id"))


def load_jsonl(path: str | os.PathLike, regression: bool | None = None) -> Corpus:
    """Read one instance per line; bad lines are reported in ``Corpus.errors``."""
    instances, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                instances.append(_parse(json.loads(line), lineno, regression))
            except json.JSONDecodeError as exc:
                errors.append((lineno, f"line {lineno}: invalid JSON ({exc.msg})"))
            except CorpusError as exc:
                errors.append((lineno, str(exc)))
    if not instances:
        raise CorpusError(f"{path}: no instances" + (f" ({len(errors)} malformed lines)" if errors else ""))
    for _, msg in errors:
        log.warning("%s: %s", path, msg)
    return Corpus(instances, errors)


def canonical_line(inst: Instance) -> str:
    return json.dumps(inst.to_json(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def save_jsonl(corpus: Corpus | Iterable[Instance], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in corpus:
            fh.write(canonical_line(inst) + "\n")


FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a_64(data: bytes, h: int = FNV_OFFSET) -> int:
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def corpus_hash(corpus: Corpus | Iterable[Instance]) -> str:
    h = FNV_OFFSET
    for inst in corpus:
        h = fnv1a_64((canonical_line(inst) + "\n").encode("utf-8"), h)
    return f"{h:016x}"


# -- vocabulary -------------------------------------------------------------


class Vocab:
    def __init__(self, tokens: Sequence[str], counts: Sequence[int]):
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.counts = np.asarray(counts, dtype=np.int64)

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.stoi.get(t, UNK) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_json(self) -> dict:
        return {"tokens": self.itos, "counts": self.counts.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        return cls(obj["tokens"], obj["counts"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, ensure_ascii=False)

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def hash(self) -> str:
        return f"{fnv1a_64(json.dumps(self.itos, ensure_ascii=False).encode('utf-8')):016x}"


def build_vocab(corpus: Corpus | Iterable[Instance], min_freq: int = 1) -> Vocab:
    """Ids sorted by descending frequency, ties broken lexicographically; PAD=0, UNK=1."""
    counts = Counter(t for inst in corpus for t in inst.tokens)
    if not counts:
        raise CorpusError("build_vocab: empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    unk_count = sum(c for t, c in counts.items() if c < min_freq)
    return Vocab([PAD_TOKEN, UNK_TOKEN] + kept, [0, unk_count] + [counts[t] for t in kept])


def split_corpus(corpus: Corpus, seed: int = 0, ratios=(8, 1, 1)) -> tuple[Corpus, Corpus, Corpus]:
    """Seeded shuffle split, 8:1:1 by default."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    total = sum(ratios)
    n_train = len(corpus) * ratios[0] // total
    n_dev = len(corpus) * ratios[1] // total
    parts = np.split(order, [n_train, n_train + n_dev])
    return tuple(Corpus([corpus.instances[i] for i in p]) for p in parts)


# -- synthetic planted-rationale task --------------------------------------


@dataclass
class SynthSpec:
    """Planted-pattern classification task.

    Every instance is filler text with exactly one class pattern planted at a
    random position; the pattern's span is the gold rationale. With
    ``shared_pattern_tokens`` the patterns of all classes draw their end
    tokens from one pool, so the class is determined only by the
    combination; ``connector`` puts one fixed uninformative token in the
    middle of every pattern. ``noise_rate`` replaces each filler with a
    single pattern-pool token with that probability (never completing a
    pattern), which makes single-token evidence unreliable.
    ``evidence_reliability`` < 1 swaps each non-connector pattern token, with
    probability ``1 - evidence_reliability``, for the token at the same
    position in a pattern of another class; every token then carries partial
    evidence and the whole span carries more than any one token.
    """

    vocab_size: int = 200
    min_len: int = 20
    max_len: int = 40
    n_instances: int = 5000
    n_classes: int = 2
    trigger_len: int = 2
    patterns_per_class: int = 4
    shared_pattern_tokens: bool = False
    connector: bool = False
    noise_rate: float = 0.0
    evidence_reliability: float = 1.0
    seed: int = 0
    patterns: dict[int, list[tuple[str, ...]]] | None = None


# settings of the desk-scale end-to-end task (the CLI's synth defaults)
DESK_TASK = dict(vocab_size=200, min_len=20, max_len=40, n_classes=2, trigger_len=4, patterns_per_class=2)


def _make_patterns(spec: SynthSpec, rng) -> tuple[dict[int, list[tuple[str, ...]]], list[str]]:
    ends = spec.trigger_len - (1 if spec.connector else 0)
    if ends < 1:
        raise CorpusError("trigger_len too short for a connector pattern")
    patterns: dict[int, list[tuple[str, ...]]] = {}
    if spec.shared_pattern_tokens:
        pool = [f"k{i}" for i in range(2 * spec.patterns_per_class)]
        combos = set()
        while len(combos) < spec.n_classes * spec.patterns_per_class:
            combos.add(tuple(rng.choice(pool, size=ends, replace=False).tolist()))
        combos = sorted(combos)
        order = rng.permutation(len(combos))
        for c in range(spec.n_classes):
            patterns[c] = [combos[j] for j in order[c * spec.patterns_per_class:(c + 1) * spec.patterns_per_class]]
    else:
        pool = [f"k{i}" for i in range(spec.n_classes * spec.patterns_per_class * ends)]
        it = iter(pool)
        for c in range(spec.n_classes):
            patterns[c] = [tuple(next(it) for _ in range(ends)) for _ in range(spec.patterns_per_class)]
    if spec.connector:
        mid = ends // 2 if ends > 1 else 1
        patterns = {c: [p[:mid] + ("and",) + p[mid:] for p in ps] for c, ps in patterns.items()}
        pool = pool + ["and"]
    return patterns, pool


def generate_synthetic(spec: SynthSpec) -> Corpus:
    if not 0.0 <= spec.noise_rate <= 1.0:
        raise CorpusError(f"noise_rate {spec.noise_rate} outside [0, 1]")
    if not 0.0 < spec.evidence_reliability <= 1.0:
        raise CorpusError(f"evidence_reliability {spec.evidence_reliability} outside (0, 1]")
    if spec.min_len > spec.max_len:
        raise CorpusError(f"min_len {spec.min_len} exceeds max_len {spec.max_len}")
    rng = np.random.default_rng(spec.seed)
    if spec.patterns is not None:
        patterns = {int(c): [tuple(p) for p in ps] for c, ps in spec.patterns.items()}
        pool = sorted({t for ps in patterns.values() for p in ps for t in p})
    else:
        patterns, pool = _make_patterns(spec, rng)
    all_patterns = {p: c for c, ps in patterns.items() for p in ps}
    if len(all_patterns) != sum(len(ps) for ps in patterns.values()):
        raise CorpusError("trigger patterns must be disjoint across classes")
    width = max(len(p) for p in all_patterns)
    if width > spec.min_len:
        raise CorpusError(f"trigger of length {width} longer than min_len {spec.min_len}")
    n_fill = spec.vocab_size - len(pool)
    if n_fill < 2:
        raise CorpusError("vocab_size too small for the trigger pool")
    fillers = np.array([f"w{i}" for i in range(n_fill)])
    pool_arr = np.array(pool)

    out = []
    labels = np.arange(spec.n_instances) % spec.n_classes
    rng.shuffle(labels)
    for idx, label in enumerate(labels):
        label = int(label)
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        pat = patterns[label][int(rng.integers(len(patterns[label])))]
        if spec.evidence_reliability < 1.0:
            pat = _corrupt_pattern(pat, label, patterns, spec.evidence_reliability, rng)
        start = int(rng.integers(0, length - len(pat) + 1))
        toks = fillers[rng.integers(0, n_fill, size=length)].tolist()
        if spec.noise_rate > 0:
            noisy = rng.random(length) < spec.noise_rate
            for i in np.flatnonzero(noisy):
                toks[i] = str(pool_arr[rng.integers(len(pool_arr))])
        toks[start:start + len(pat)] = list(pat)
        _scrub_extra_patterns(toks, start, len(pat), all_patterns, fillers, rng)
        out.append(Instance(tuple(toks), label, ((start, start + len(pat)),), uid=f"synth-{idx}"))
    return Corpus(out)


def _corrupt_pattern(pat, label, patterns, reliability, rng):
    others = [p for c, ps in patterns.items() if c != label for p in ps if len(p) == len(pat)]
    if not others:
        return pat
    out = list(pat)
    for j, tok in enumerate(pat):
        if tok != "and" and rng.random() >= reliability:
            out[j] = others[int(rng.integers(len(others)))][j]
    return tuple(out)


def _scrub_extra_patterns(toks, start, width, all_patterns, fillers, rng):
    """Replace noise tokens that accidentally form (or overlap) a full pattern outside the plant."""
    changed = True
    while changed:
        changed = False
        for p in all_patterns:
            w = len(p)
            for i in range(len(toks) - w + 1):
                if i == start and w == width:
                    continue
                if tuple(toks[i:i + w]) == p:
                    for j in range(i, i + w):
                        if not start <= j < start + width:
                            toks[j] = str(fillers[rng.integers(len(fillers))])
                            changed = True
                            break
                    else:
                        continue
                    break
