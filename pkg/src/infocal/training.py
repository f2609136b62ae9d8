"""Loss composition, alternating generator/discriminator optimization and inference."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import metrics
from .corpus import PAD, Corpus, Vocab
from .diffcore import tensor as T
from .diffcore.optim import AdamState, adam_step
from .diffcore.tensor import Tape
from .lmreg import ContinuousLm, LmConfig, NegSampler, perplexity, pretrain_loss, regularizer_from_scores
from .model import (
    CLASSIFICATION,
    REGRESSION,
    IbPrior,
    InfoCalModel,
    ModelConfig,
    loss_d,
    loss_g,
    loss_guide,
    loss_ib,
    loss_mi,
    loss_sp,
)

log = logging.getLogger(__name__)

LOSS_NAMES = ("L_sp", "L_ib", "L_guide", "L_mi", "L_g", "L_d", "L_lm", "J_total")


@dataclass
class Hyperparams:
    lambda_ib: float = 0.0003
    lambda_g: float = 1.0
    lambda_mi: float = 0.1
    lambda_lm: float = 0.005
    prior_select: float = 0.001
    tau: float = 1.0
    tau_final: float | None = None
    lr: float = 1e-3
    selector_lr: float | None = None
    d_lr: float = 1e-3
    d_steps: int = 1
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0
    task_mode: str = CLASSIFICATION
    emb_dim: int = 32
    hidden: int = 32
    feature_dim: int = 32
    lm_epochs: int = 3
    lm_lr: float = 3e-3
    neg_k: int = 5
    neg_smoothing: float = 1.0
    min_dev_precision: float = 0.0
    sampled_inference: bool = False

    def __post_init__(self):
        for name in ("lambda_ib", "lambda_g", "lambda_mi", "lambda_lm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau <= 0 or (self.tau_final is not None and self.tau_final <= 0):
            raise ValueError("temperatures must be positive")
        if self.task_mode not in (CLASSIFICATION, REGRESSION):
            raise ValueError(f"unknown task mode {self.task_mode!r}")

    @property
    def prior(self) -> IbPrior:
        return IbPrior.from_select_rate(self.prior_select)

    def tau_at(self, epoch: int) -> float:
        if self.tau_final is None or self.epochs <= 1:
            return self.tau
        frac = min(epoch, self.epochs - 1) / (self.epochs - 1)
        return self.tau * (self.tau_final / self.tau) ** frac


BEER_HYPERPARAMS = dict(lambda_ib=0.0003, lambda_g=1.0, lambda_mi=0.1, lambda_lm=0.005, prior_select=0.001)
# desk-scale planted-pattern task; tuned separately from the real-data presets
SYNTH_HYPERPARAMS = dict(
    lambda_ib=0.001, lambda_g=0.3, lambda_mi=0.01, lambda_lm=0.005, prior_select=0.1,
    lr=3e-3, selector_lr=3e-4, d_lr=3e-4, epochs=8,
)
LEGAL_HYPERPARAMS = dict(lambda_ib=0.05, lambda_g=1.0, lambda_mi=0.5, lambda_lm=0.005, prior_select=0.1)


@dataclass(frozen=True)
class AblationFlags:
    disable_adv: bool = False
    disable_lm: bool = False
    disable_ib: bool = False

    def effective(self, hp: Hyperparams) -> Hyperparams:
        """Hyperparameters with the disabled terms' weights set to zero."""
        changes = {}
        if self.disable_adv:
            changes["lambda_g"] = 0.0
        if self.disable_lm:
            changes["lambda_lm"] = 0.0
        if self.disable_ib:
            changes["lambda_ib"] = 0.0
        return Hyperparams(**{**asdict(hp), **changes})


@dataclass
class LossBreakdown:
    L_sp: float = 0.0
    L_ib: float = 0.0
    L_guide: float = 0.0
    L_mi: float = 0.0
    L_g: float = 0.0
    L_d: float = 0.0
    L_lm: float = 0.0
    J_total: float = 0.0

    def recompose(self, hp: Hyperparams) -> float:
        adv = hp.lambda_g * self.L_g + self.L_guide + hp.lambda_mi * self.L_mi
        return self.L_sp + hp.lambda_ib * self.L_ib + adv + hp.lambda_lm * self.L_lm

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    ids: np.ndarray
    valid: np.ndarray
    labels: np.ndarray
    index: np.ndarray
    lm_scores: np.ndarray | None = None


def pad_batch(seqs, labels, index, lm_scores=None) -> Batch:
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), PAD, dtype=np.int64)
    valid = np.zeros((len(seqs), L), dtype=bool)
    sc = None if lm_scores is None else np.zeros((len(seqs), L), dtype=np.float32)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        valid[i, : len(s)] = True
        if sc is not None:
            sc[i, : len(s)] = lm_scores[i]
    return Batch(ids, valid, np.asarray(labels), np.asarray(index), sc)


@dataclass
class Encoded:
    """A corpus converted to id arrays."""

    seqs: list[np.ndarray]
    labels: np.ndarray
    golds: list[list[tuple[int, int]] | None]
    uids: list[str]

    def __len__(self):
        return len(self.seqs)


def encode_corpus(corpus: Corpus, vocab: Vocab, task_mode: str = CLASSIFICATION) -> Encoded:
    seqs = [vocab.encode(inst.tokens) for inst in corpus]
    dtype = np.float64 if task_mode == REGRESSION else np.int64
    labels = np.array([inst.label for inst in corpus], dtype=dtype)
    golds = [None if inst.rationales is None else list(inst.rationales) for inst in corpus]
    uids = [inst.uid if inst.uid is not None else str(i) for i, inst in enumerate(corpus)]
    return Encoded(seqs, labels, golds, uids)


def iterate_batches(data: Encoded, batch_size: int, rng: np.random.Generator | None = None, chunk: int = 20):
    """Length-bucketed batches; order is shuffled when ``rng`` is given."""
    n = len(data)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    lengths = np.array([len(s) for s in data.seqs])
    batches = []
    span = batch_size * chunk
    for start in range(0, n, span):
        part = order[start:start + span]
        part = part[np.argsort(lengths[part], kind="stable")]
        batches.extend(part[i:i + batch_size] for i in range(0, len(part), batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return [b for b in batches if len(b)]


# -- language model pretraining --------------------------------------------


def pretrain_lm(lm: ContinuousLm, data: Encoded, vocab: Vocab, hp: Hyperparams, held_out: Encoded | None = None):
    """Negative-sampling pretraining; returns per-epoch (loss, quasi-perplexity) rows."""
    rng = np.random.default_rng(hp.seed + 1)
    sampler = NegSampler(vocab.counts, hp.neg_smoothing)
    state = AdamState(lr=hp.lm_lr)
    rows = []
    for epoch in range(hp.lm_epochs):
        losses = []
        for idx in iterate_batches(data, hp.batch_size, rng):
            batch = pad_batch([data.seqs[i] for i in idx], data.labels[idx], idx)
            with Tape() as tape:
                loss = pretrain_loss(lm, sampler, batch.ids, hp.neg_k, rng, batch.valid)
            tape.backward(loss)
            if adam_step(state, lm.params()):
                losses.append(loss.item())
        eval_set = held_out if held_out is not None and len(held_out) else data
        ppl = perplexity(lm, eval_set.seqs[:500])
        rows.append({"epoch": epoch + 1, "loss": float(np.mean(losses)) if losses else math.nan, "quasi_perplexity": ppl})
        log.info("lm epoch %d loss %.4f quasi-ppl %.3f", epoch + 1, rows[-1]["loss"], ppl)
    lm.pretrained = True
    return rows


def build_lm(vocab_size: int, hp: Hyperparams) -> ContinuousLm:
    return ContinuousLm(LmConfig(vocab_size, hp.emb_dim, hp.hidden, hp.emb_dim, seed=hp.seed + 7))


def build_model(vocab_size: int, n_classes: int, hp: Hyperparams) -> InfoCalModel:
    return InfoCalModel(
        ModelConfig(vocab_size, n_classes, hp.task_mode, hp.emb_dim, hp.hidden, hp.feature_dim, seed=hp.seed)
    )


# -- generator / discriminator ----------------------------------------------


@dataclass
class GeneratorPass:
    total: T.Tensor
    breakdown: LossBreakdown
    z_real: np.ndarray
    z_fake: np.ndarray


def total_generator_loss(batch: Batch, model: InfoCalModel, hp: Hyperparams, rng: np.random.Generator,
                         lm: ContinuousLm | None = None, tau: float | None = None) -> GeneratorPass:
    """``J_total = L_sp + l_ib L_ib + (l_g L_g + L_guide + l_mi L_mi) + l_lm L_lm``.

    Must run inside a tape. The discriminator is evaluated for ``L_g`` but the
    caller only updates generator parameters from the resulting gradients.
    ``hp`` is expected to already carry any ablation zeroing.
    """
    if hp.lambda_lm > 0 and batch.lm_scores is None:
        if lm is None or not lm.pretrained:
            raise ValueError("lambda_lm > 0 requires a pretrained language model")
        batch.lm_scores = lm.score_array(batch.ids, batch.valid)
    tau = hp.tau if tau is None else tau
    sel = model.select(batch.ids, tau, rng, batch.valid)
    pred = model.predict_sp(batch.ids, sel.masks, batch.valid)
    guide = model.guide(batch.ids, rng, batch.valid)

    l_sp = loss_sp(pred, batch.labels, hp.task_mode)
    l_ib = loss_ib(sel.probs, hp.prior, batch.valid)
    l_guide = loss_guide(guide, batch.labels, hp.task_mode)
    l_mi = loss_mi(guide.mu, guide.sigma)
    l_g = loss_g(model.discriminator, pred.features)
    if batch.lm_scores is not None:
        l_lm = regularizer_from_scores(batch.lm_scores, sel.masks, batch.valid)
    else:
        l_lm = T.Tensor(0.0)

    # weighted sum in float64 so the logged total matches its parts to 1e-6
    with T.precision("float64"):
        l_sp, l_ib, l_guide, l_mi, l_g, l_lm = (T.astype(x, np.float64) for x in (l_sp, l_ib, l_guide, l_mi, l_g, l_lm))
        adv = T.add(T.add(T.mul(l_g, hp.lambda_g), l_guide), T.mul(l_mi, hp.lambda_mi))
        total = T.add(T.add(T.add(l_sp, T.mul(l_ib, hp.lambda_ib)), adv), T.mul(l_lm, hp.lambda_lm))

    br = LossBreakdown(
        L_sp=l_sp.item(), L_ib=l_ib.item(), L_guide=l_guide.item(), L_mi=l_mi.item(),
        L_g=l_g.item(), L_lm=l_lm.item(), J_total=total.item(),
    )
    return GeneratorPass(total, br, guide.z.data.copy(), pred.features.data.copy())


@dataclass
class EpochLog:
    epoch: int
    losses: dict
    n_batches: int
    n_skipped: int
    val_metric: float | None = None

    def row(self) -> dict:
        return {"epoch": self.epoch, **{k: self.losses.get(k, math.nan) for k in LOSS_NAMES}, "val_metric": self.val_metric}


class Trainer:
    """Runs the alternating optimization for one model.

    Per batch: compute ``J_total`` and ``L_d`` from the same forward pass,
    update the selector, predictor and guider, then update the discriminator
    on the recorded (constant) feature vectors.
    """

    def __init__(self, model: InfoCalModel, hp: Hyperparams, flags: AblationFlags = AblationFlags(),
                 lm: ContinuousLm | None = None):
        self.model = model
        self.hp = hp
        self.flags = flags
        self.eff = flags.effective(hp)
        if self.eff.lambda_lm > 0 and (lm is None or not lm.pretrained):
            raise ValueError("lambda_lm > 0 requires a pretrained language model")
        self.lm = lm
        self.gen_state = AdamState(lr=hp.lr)
        self.sel_state = AdamState(lr=hp.lr if hp.selector_lr is None else hp.selector_lr)
        self.disc_state = AdamState(lr=hp.d_lr)
        self.rng = np.random.default_rng(hp.seed + 11)
        self.epoch = 0
        self._lm_cache: dict[int, np.ndarray] = {}
        self.batch_logs: list[LossBreakdown] = []

    def _scores_for(self, data: Encoded, idx) -> list[np.ndarray] | None:
        if self.eff.lambda_lm <= 0:
            return None
        key = id(data)
        out = []
        missing = [i for i in idx if (key, int(i)) not in self._lm_cache]
        if missing:
            b = pad_batch([data.seqs[i] for i in missing], data.labels[missing], missing)
            sc = self.lm.score_array(b.ids, b.valid)
            for row, i in enumerate(missing):
                self._lm_cache[(key, int(i))] = sc[row, : len(data.seqs[i])]
        for i in idx:
            out.append(self._lm_cache[(key, int(i))])
        return out

    def train_step(self, batch: Batch, tau: float) -> LossBreakdown | None:
        with Tape() as tape:
            gp = total_generator_loss(batch, self.model, self.eff, self.rng, tau=tau)
        br = gp.breakdown
        if not math.isfinite(br.J_total):
            log.warning("non-finite J_total in batch %s; skipped", batch.index[:4].tolist())
            return None
        grads = tape.backward(gp.total)
        if not all(np.all(np.isfinite(grads[p])) for p in self.model.generator_params() if p in grads):
            log.warning("non-finite gradient in batch %s; skipped", batch.index[:4].tolist())
            return None
        adam_step(self.sel_state, self.model.selector.params(), grads)
        adam_step(self.gen_state, self.model.predictor.params() + self.model.guider.params(), grads)
        if self.flags.disable_adv:
            br.L_d = loss_d(self.model.discriminator, gp.z_real, gp.z_fake).item()
            return br
        for step in range(max(1, self.hp.d_steps)):
            with Tape() as dtape:
                ld = loss_d(self.model.discriminator, gp.z_real, gp.z_fake)
            if step == 0:
                br.L_d = ld.item()
            if not math.isfinite(ld.item()):
                log.warning("non-finite L_d; discriminator step skipped")
                break
            dgrads = dtape.backward(ld)
            adam_step(self.disc_state, self.model.discriminator_params(), dgrads)
        return br

    def train_epoch(self, data: Encoded) -> EpochLog:
        if len(data) == 0:
            raise ValueError("train_epoch: empty corpus")
        tau = self.hp.tau_at(self.epoch)
        sums = {k: 0.0 for k in LOSS_NAMES}
        n_ok = n_skip = 0
        for idx in iterate_batches(data, self.hp.batch_size, self.rng):
            batch = pad_batch([data.seqs[i] for i in idx], data.labels[idx], idx, self._scores_for(data, idx))
            br = self.train_step(batch, tau)
            if br is None:
                n_skip += 1
                continue
            n_ok += 1
            self.batch_logs.append(br)
            for k, v in br.as_dict().items():
                sums[k] += v
        self.epoch += 1
        means = {k: (v / n_ok if n_ok else math.nan) for k, v in sums.items()}
        return EpochLog(self.epoch, means, n_ok, n_skip)


# -- inference ----------------------------------------------------------------


@dataclass
class Rationale:
    mask: np.ndarray
    probs: np.ndarray
    prediction: np.ndarray


def extract_rationale(model: InfoCalModel, token_ids, sampled: bool = False, rng=None, tau: float = 1.0) -> Rationale:
    """Binarize selector probabilities at 0.5 and predict from the masked input."""
    ids = np.asarray(token_ids, dtype=np.int64).reshape(1, -1)
    probs = model.selection_probs(ids).data[0].astype(np.float64)
    if sampled:
        sel = model.select(ids, tau, rng)
        mask = (sel.masks.data[0] > 0.5).astype(np.float64)
    else:
        mask = (probs >= 0.5).astype(np.float64)
    dist = model.predict_sp(ids, mask).distribution.data[0]
    return Rationale(mask.astype(np.int64), probs, np.array(dist, dtype=np.float64))


@dataclass
class Extraction:
    uids: list[str]
    masks: list[np.ndarray]
    probs: list[np.ndarray]
    predictions: list[np.ndarray]
    p_full: list[np.ndarray] = field(default_factory=list)
    p_rationale: list[np.ndarray] = field(default_factory=list)
    p_complement: list[np.ndarray] = field(default_factory=list)


def _predict_batch(model, batch: Batch, masks: np.ndarray) -> np.ndarray:
    d = model.predict_sp(batch.ids, masks.astype(np.float32), batch.valid).distribution.data
    if model.cfg.task_mode == REGRESSION:
        return np.stack([1.0 - d, d], axis=1)
    return d


def extract_corpus(model: InfoCalModel, data: Encoded, batch_size: int = 64, sampled: bool = False,
                   seed: int = 0, tau: float = 1.0) -> Extraction:
    """Batched :func:`extract_rationale` plus the three forward passes used for faithfulness."""
    rng = np.random.default_rng(seed)
    n = len(data)
    out = Extraction([], [None] * n, [None] * n, [None] * n, [None] * n, [None] * n, [None] * n)
    out.uids = list(data.uids)
    for idx in iterate_batches(data, batch_size):
        b = pad_batch([data.seqs[i] for i in idx], data.labels[idx], idx)
        probs = model.selection_probs(b.ids, b.valid).data.astype(np.float64)
        if sampled:
            m = model.select(b.ids, tau, rng, b.valid).masks.data > 0.5
        else:
            m = probs >= 0.5
        m = (m & b.valid).astype(np.float64)
        full = _predict_batch(model, b, b.valid.astype(np.float64))
        rat = _predict_batch(model, b, m)
        comp = _predict_batch(model, b, (1.0 - m) * b.valid)
        for row, i in enumerate(idx):
            L = len(data.seqs[i])
            out.masks[i] = m[row, :L].astype(np.int64)
            out.probs[i] = probs[row, :L]
            out.predictions[i] = rat[row]
            out.p_full[i] = full[row]
            out.p_rationale[i] = rat[row]
            out.p_complement[i] = comp[row]
    return out


def evaluate(model: InfoCalModel, data: Encoded, batch_size: int = 64, sampled: bool = False) -> tuple[metrics.MetricsReport, Extraction]:
    ex = extract_corpus(model, data, batch_size, sampled)
    report = metrics.MetricsReport(n_instances=len(data))
    report.selection_percentage = metrics.selection_percentage(ex.masks)
    have_gold = [i for i, g in enumerate(data.golds) if g is not None]
    if have_gold:
        preds = [metrics.mask_to_spans(ex.masks[i]) for i in have_gold]
        golds = [metrics.normalize_spans(data.golds[i]) for i in have_gold]
        report.token_p, report.token_r, report.token_f1 = metrics.corpus_token_prf(preds, golds)
        report.iou_f1 = metrics.iou_f1(preds, golds)
        scores = np.concatenate([ex.probs[i] for i in have_gold])
        gold_tokens = np.concatenate([metrics.spans_to_mask(data.golds[i], len(ex.probs[i])) for i in have_gold])
        report.auprc = metrics.auprc(scores, gold_tokens)
    if model.cfg.task_mode == CLASSIFICATION:
        comp, suff = [], []
        for i in range(len(data)):
            y = int(np.argmax(ex.p_full[i]))
            comp.append(ex.p_full[i][y] - ex.p_complement[i][y])
            suff.append(ex.p_full[i][y] - ex.p_rationale[i][y])
        report.comprehensiveness = float(np.mean(comp))
        report.sufficiency = float(np.mean(suff))
    return report, ex


def selection_score(report: metrics.MetricsReport, min_precision: float = 0.0) -> float:
    """Dev-set model selection: best recall among checkpoints meeting a precision floor, else F1."""
    if report.token_f1 is None:
        return -math.inf
    if min_precision > 0:
        return report.token_r if report.token_p >= min_precision else -math.inf
    return report.token_f1


def random_baseline_masks(data: Encoded, rate: float, seed: int = 0) -> list[np.ndarray]:
    """Independent Bernoulli(rate) selections matched to a selection percentage."""
    rng = np.random.default_rng(seed)
    return [(rng.random(len(s)) < rate).astype(np.int64) for s in data.seqs]


def hyperparam_items(hp: Hyperparams) -> dict:
    return {f.name: getattr(hp, f.name) for f in fields(hp)}


@dataclass
class FitResult:
    logs: list[EpochLog]
    best_epoch: int
    best_score: float
    best_state: dict[str, np.ndarray]
    final_state: dict[str, np.ndarray]


def fit(trainer: Trainer, train: Encoded, dev: Encoded | None = None, epochs: int | None = None,
        on_epoch=None) -> FitResult:
    """Train for a fixed epoch budget, keeping the parameters that score best on ``dev``.

    Without gold spans on ``dev`` the last epoch is kept.
    """
    epochs = trainer.hp.epochs if epochs is None else epochs
    logs: list[EpochLog] = []
    best = (-math.inf, 0, None)
    for _ in range(epochs):
        lg = trainer.train_epoch(train)
        if dev is not None and len(dev):
            report, _ = evaluate(trainer.model, dev)
            lg.val_metric = report.token_f1
            score = selection_score(report, trainer.hp.min_dev_precision)
        else:
            score = -math.inf
        if best[2] is None or score > best[0]:
            best = (score, lg.epoch, _snapshot(trainer.model))
        logs.append(lg)
        if on_epoch is not None:
            on_epoch(lg)
    if not math.isfinite(best[0]):
        best = (best[0], logs[-1].epoch, _snapshot(trainer.model))
    return FitResult(logs, best[1], best[0], best[2], _snapshot(trainer.model))


def _snapshot(model: InfoCalModel) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_arrays().items()}
