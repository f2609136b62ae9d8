"""Selector, predictor, guider and discriminator networks and their losses.

All networks take right-padded id batches ``ids[B, T]`` with a boolean
``valid[B, T]``; padded positions never influence a result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import tensor as T
from .diffcore.layers import Linear, Module, SequenceEncoder
from .diffcore.tensor import Tensor

PROB_EPS = 1e-6
SIGMA_FLOOR = 1e-6

CLASSIFICATION = "classification"
REGRESSION = "regression"


@dataclass(frozen=True)
class IbPrior:
    """Variational prior over the per-token selection variable."""

    r0: float = 0.999
    r1: float = 0.001

    def __post_init__(self):
        if not (0.0 < self.r1 < 1.0 and 0.0 < self.r0 < 1.0):
            raise ValueError(f"degenerate prior r0={self.r0}, r1={self.r1}")
        if abs(self.r0 + self.r1 - 1.0) > 1e-9:
            raise ValueError(f"prior must sum to 1, got {self.r0 + self.r1}")

    @classmethod
    def from_select_rate(cls, r1: float) -> "IbPrior":
        return cls(1.0 - r1, r1)


BEER_PRIOR = IbPrior(0.999, 0.001)
LEGAL_PRIOR = IbPrior(0.9, 0.1)


@dataclass
class ModelConfig:
    vocab_size: int
    n_classes: int = 2
    task_mode: str = CLASSIFICATION
    emb_dim: int = 32
    hidden: int = 32
    feature_dim: int = 32
    seed: int = 0

    @property
    def n_out(self) -> int:
        return 1 if self.task_mode == REGRESSION else self.n_classes


@dataclass
class SelectorOutput:
    probs: Tensor
    masks: Tensor
    noise: np.ndarray = field(repr=False)


@dataclass
class PredictorOutput:
    features: Tensor
    distribution: Tensor


@dataclass
class GuiderOutput:
    mu: Tensor
    sigma: Tensor
    z: Tensor
    distribution: Tensor
    noise: np.ndarray = field(repr=False)


@dataclass
class DiscriminatorOutput:
    prob_real: Tensor


def _as_batch(ids, valid=None):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
        if valid is not None:
            valid = np.asarray(valid, dtype=bool)[None, :]
    if valid is None:
        valid = np.ones(ids.shape, dtype=bool)
    return ids, np.asarray(valid, dtype=bool)


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(size=tuple(shape) + (2,))
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def relaxed_masks(probs: Tensor, tau: float, noise: np.ndarray) -> Tensor:
    """Two-class Gumbel-softmax over {select, skip}; returns the select coordinate.

    ``noise[..., 0]`` and ``noise[..., 1]`` are the Gumbel draws for the
    select and skip classes.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    select = T.add(T.log(probs), noise[..., 0])
    skip = T.add(T.log(T.sub(1.0, probs)), noise[..., 1])
    return T.sigmoid(T.mul(T.sub(select, skip), 1.0 / tau))


class Selector(Module):
    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.encoder = self.add_child("encoder", SequenceEncoder(rng, cfg.vocab_size, cfg.emb_dim, cfg.hidden))
        self.scorer = self.add_child("scorer", Linear(rng, 2 * cfg.hidden + cfg.emb_dim, 1))

    def probs(self, ids: np.ndarray, valid: np.ndarray) -> Tensor:
        steps = self.encoder.embed_steps(ids)
        states, _ = self.encoder.rnn(steps, valid)
        feats = T.stack([T.concat([s, e], axis=-1) for s, e in zip(states, steps)], axis=1)
        logits = T.reshape(self.scorer(feats), ids.shape)
        return T.clip(T.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)


class Predictor(Module):
    """Encoder over (optionally masked) embeddings plus a linear feature layer."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.encoder = self.add_child("encoder", SequenceEncoder(rng, cfg.vocab_size, cfg.emb_dim, cfg.hidden))
        self.feature = self.add_child("feature", Linear(rng, 2 * cfg.hidden, cfg.feature_dim))

    def __call__(self, ids, valid, masks: Tensor | None = None) -> Tensor:
        _, summary = self.encoder(ids, valid, masks)
        return self.feature(summary)


class Head(Module):
    """Shared output layer ``W_p z + b_p`` with softmax or sigmoid."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.task_mode = cfg.task_mode
        self.out = self.add_child("out", Linear(rng, cfg.feature_dim, cfg.n_out))

    def __call__(self, z: Tensor) -> Tensor:
        logits = self.out(z)
        if self.task_mode == REGRESSION:
            return T.reshape(T.sigmoid(logits), (logits.shape[0],))
        return T.softmax(logits)


class Guider(Module):
    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.body = self.add_child("body", Predictor(rng, cfg))
        self.mean = self.add_child("mean", Linear(rng, cfg.feature_dim, cfg.feature_dim))
        self.std = self.add_child("std", Linear(rng, cfg.feature_dim, cfg.feature_dim))

    def __call__(self, ids, valid, noise: np.ndarray):
        h = self.body(ids, valid)
        mu = self.mean(h)
        sigma = T.add(T.softplus(self.std(h)), SIGMA_FLOOR)
        z = T.add(T.mul(sigma, noise), mu)
        return mu, sigma, z


class Discriminator(Module):
    """Two-layer feed-forward net; the output layer starts at zero so D = 0.5."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.feature_dim = cfg.feature_dim
        self.hidden = self.add_child("hidden", Linear(rng, cfg.feature_dim, cfg.feature_dim))
        self.out = self.add_child("out", Linear(rng, cfg.feature_dim, 1, zero=True))

    def __call__(self, z) -> DiscriminatorOutput:
        z = T.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.feature_dim:
            raise T.ShapeError("discriminate", z.shape, (None, self.feature_dim))
        logit = self.out(T.tanh(self.hidden(z)))
        prob = T.clip(T.sigmoid(T.reshape(logit, (z.shape[0],))), PROB_EPS, 1.0 - PROB_EPS)
        return DiscriminatorOutput(prob)


class InfoCalModel(Module):
    """Selector-predictor plus guider and discriminator.

    Parameter names carry the prefixes ``selector.``, ``predictor.``,
    ``guider.`` and ``discriminator.``; the output layer shared by predictor
    and guider lives at ``predictor.head``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.selector = self.add_child("selector", Selector(rng, cfg))
        self.predictor = self.add_child("predictor", Predictor(rng, cfg))
        self.head = self.predictor.add_child("head", Head(rng, cfg))
        self.guider = self.add_child("guider", Guider(rng, cfg))
        self.discriminator = self.add_child("discriminator", Discriminator(rng, cfg))

    def generator_params(self) -> list[Tensor]:
        return self.selector.params() + self.predictor.params() + self.guider.params()

    def discriminator_params(self) -> list[Tensor]:
        return self.discriminator.params()

    # -- operations ---------------------------------------------------------

    def selection_probs(self, ids, valid=None) -> Tensor:
        ids, valid = _as_batch(ids, valid)
        if ids.shape[1] == 0:
            raise ValueError("select: empty sequence")
        return self.selector.probs(ids, valid)

    def select(self, ids, tau: float, rng=None, valid=None, noise: np.ndarray | None = None) -> SelectorOutput:
        if tau <= 0:
            raise ValueError(f"select: temperature must be positive, got {tau}")
        ids, valid = _as_batch(ids, valid)
        probs = self.selection_probs(ids, valid)
        if noise is None:
            noise = gumbel_noise(_rng(rng), ids.shape)
        masks = relaxed_masks(probs, tau, noise)
        masks = T.mul(masks, valid.astype(masks.data.dtype))
        return SelectorOutput(probs, masks, noise)

    def predict_sp(self, ids, masks, valid=None) -> PredictorOutput:
        ids, valid = _as_batch(ids, valid)
        masks = T.as_tensor(masks)
        if masks.ndim == 1:
            masks = T.reshape(masks, (1, -1))
        if masks.shape != ids.shape:
            raise T.ShapeError("predict_sp", ids.shape, masks.shape)
        z = self.predictor(ids, valid, masks)
        return PredictorOutput(z, self.head(z))

    def guide(self, ids, rng=None, valid=None, noise: np.ndarray | None = None) -> GuiderOutput:
        ids, valid = _as_batch(ids, valid)
        if ids.shape[1] == 0:
            raise ValueError("guide: empty sequence")
        if noise is None:
            noise = _rng(rng).standard_normal((ids.shape[0], self.cfg.feature_dim))
        mu, sigma, z = self.guider(ids, valid, noise)
        return GuiderOutput(mu, sigma, z, self.head(z), noise)

    def discriminate(self, z) -> DiscriminatorOutput:
        return self.discriminator(z)

    def class_probs(self, ids, masks) -> np.ndarray:
        """Predictor distribution for one sequence under the given masks (no tape)."""
        out = self.predict_sp(ids, np.asarray(masks, dtype=np.float64))
        d = out.distribution.data[0]
        return np.array([1.0 - d, d]) if self.cfg.task_mode == REGRESSION else d.copy()

    def state_arrays(self, include_discriminator: bool = True) -> dict[str, np.ndarray]:
        named = self.named_params()
        return {k: v.data for k, v in named.items() if include_discriminator or not k.startswith("discriminator.")}


# -- losses -----------------------------------------------------------------


def _labels(y, n, task_mode, n_classes=None):
    y = np.asarray(y)
    if y.ndim == 0:
        y = y[None]
    if y.shape[0] != n:
        raise T.ShapeError("labels", y.shape, (n,))
    if task_mode == REGRESSION:
        y = y.astype(np.float64)
        if np.any((y < 0) | (y > 1)):
            raise ValueError("regression targets must lie in [0, 1]")
        return y
    if not np.issubdtype(y.dtype, np.integer) and not np.all(np.equal(np.mod(y, 1), 0)):
        raise ValueError(f"class labels must be integers, got {y}")
    y = y.astype(np.int64)
    if n_classes is not None and np.any((y < 0) | (y >= n_classes)):
        raise ValueError(f"class index out of range [0, {n_classes}): {y}")
    return y


def _nll(distribution: Tensor, y) -> Tensor:
    dist = distribution
    if dist.ndim == 1:
        dist = T.reshape(dist, (1, -1))
    n, c = dist.shape
    y = _labels(y, n, CLASSIFICATION, c)
    picked = T.getitem(dist, (np.arange(n), y))
    return T.mul(T.sum(T.log(picked)), -1.0 / n)


def _mse(prediction: Tensor, y) -> Tensor:
    n = prediction.shape[0]
    y = _labels(y, n, REGRESSION)
    diff = T.sub(prediction, y.astype(prediction.data.dtype))
    return T.mean(T.mul(diff, diff))


def task_loss(distribution: Tensor, y, task_mode: str = CLASSIFICATION) -> Tensor:
    """Batch-mean negative log-likelihood, or squared error in regression mode."""
    if task_mode == REGRESSION:
        return _mse(distribution, y)
    return _nll(distribution, y)


def loss_sp(output: PredictorOutput, y, task_mode: str = CLASSIFICATION) -> Tensor:
    return task_loss(output.distribution, y, task_mode)


def loss_guide(output: GuiderOutput, y, task_mode: str = CLASSIFICATION) -> Tensor:
    return task_loss(output.distribution, y, task_mode)


def neg_mi_surrogate(distribution: Tensor, y) -> Tensor:
    """Surrogate of ``-I(z_sym, y)``: minus the batch mean of ``log E_y p(y | z_sym)``.

    The expectation over the empirical label is taken as a one-hot weighted
    sum, so this shares no code path with :func:`loss_sp`.
    """
    dist = distribution if distribution.ndim == 2 else T.reshape(distribution, (1, -1))
    n, c = dist.shape
    y = _labels(y, n, CLASSIFICATION, c)
    onehot = np.eye(c, dtype=dist.data.dtype)[y]
    expected = T.sum(T.mul(dist, onehot), axis=-1)
    return T.mul(T.mean(T.log(expected)), -1.0)


def loss_ib(probs, prior: IbPrior, valid=None) -> Tensor:
    """Per-token KL(Bernoulli(p_i) || prior), summed over tokens, batch mean."""
    if not isinstance(prior, IbPrior):
        prior = IbPrior(*prior)
    p = T.as_tensor(probs)
    if p.ndim == 1:
        p = T.reshape(p, (1, -1))
        if valid is not None:
            valid = np.asarray(valid)[None, :]
    p = T.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    q = T.sub(1.0, p)
    kl = T.add(
        T.mul(p, T.sub(T.log(p), math.log(prior.r1))),
        T.mul(q, T.sub(T.log(q), math.log(prior.r0))),
    )
    if valid is not None:
        kl = T.mul(kl, np.asarray(valid, dtype=kl.data.dtype))
    return T.mul(T.sum(kl), 1.0 / p.shape[0])


def loss_mi(mu, sigma) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over dimensions, batch mean."""
    mu, sigma = T.as_tensor(mu), T.as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("loss_mi: sigma must be positive")
    if mu.ndim == 1:
        mu, sigma = T.reshape(mu, (1, -1)), T.reshape(sigma, (1, -1))
    terms = T.sub(T.add(T.mul(mu, mu), T.mul(sigma, sigma)), T.add(T.mul(T.log(sigma), 2.0), 1.0))
    return T.mul(T.sum(terms), 0.5 / mu.shape[0])


def loss_g(disc: Discriminator, z_fake) -> Tensor:
    """``-log D(z_fake)``, batch mean. Gradients reach z_fake's producers, not the discriminator."""
    with disc.frozen():
        d = disc(z_fake).prob_real
    return T.mul(T.mean(T.log(d)), -1.0)


def loss_d(disc: Discriminator, z_real, z_fake) -> Tensor:
    """``-log D(z_real) + log D(z_fake)``, batch mean; both inputs are treated as constants."""
    real = disc(_constant(z_real)).prob_real
    fake = disc(_constant(z_fake)).prob_real
    return T.mean(T.sub(T.log(fake), T.log(real)))


def _constant(z) -> Tensor:
    return Tensor(z.data) if isinstance(z, Tensor) else Tensor(z)
