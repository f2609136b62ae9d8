"""Parameter containers and the layer primitives shared by every network."""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import tensor as T
from .tensor import Tensor, parameter


class Module:
    """Holds named parameters and child modules; names are dot-joined."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}

    def add_param(self, name: str, data) -> Tensor:
        p = parameter(data, name=name)
        self._params[name] = p
        return p

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for k, p in self._params.items():
            out[prefix + k] = p
        for k, c in self._children.items():
            out.update(c.named_params(prefix + k + "."))
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    @contextmanager
    def frozen(self):
        """Treat every parameter as a constant for ops recorded inside the block."""
        params = self.params()
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(params, flags):
                p.requires_grad = f

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_params(prefix).items():
            if name not in arrays:
                raise KeyError(f"missing tensor {name!r}")
            a = arrays[name]
            if tuple(a.shape) != p.shape:
                raise ValueError(f"{name}: shape {tuple(a.shape)} != {p.shape}")
            p.data = np.array(a, dtype=p.data.dtype)


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, zero: bool = False):
        super().__init__()
        bound = np.sqrt(6.0 / (n_in + n_out))
        w = np.zeros((n_in, n_out)) if zero else _uniform(rng, (n_in, n_out), bound)
        self.W = self.add_param("W", w)
        self.b = self.add_param("b", np.zeros(n_out))

    def __call__(self, x) -> Tensor:
        return T.add(T.matmul(x, self.W), self.b)


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, n_rows: int, dim: int, scale: float = 0.1):
        super().__init__()
        self.table = self.add_param("table", rng.normal(0.0, scale, size=(n_rows, dim)))

    @property
    def n_rows(self) -> int:
        return self.table.shape[0]

    def __call__(self, ids) -> Tensor:
        return T.gather_rows(self.table, ids)


class Bilinear(Module):
    """Scores ``h^T M e``."""

    def __init__(self, rng: np.random.Generator, n_left: int, n_right: int):
        super().__init__()
        self.M = self.add_param("M", _uniform(rng, (n_left, n_right), 1.0 / np.sqrt(n_left)))

    def project(self, h) -> Tensor:
        return T.matmul(h, self.M)


class GRUCell(Module):
    """Gated recurrent cell with fused gate weights (reset, update, candidate)."""

    def __init__(self, rng: np.random.Generator, n_in: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        bound = 1.0 / np.sqrt(hidden)
        self.W = self.add_param("W", _uniform(rng, (n_in, 3 * hidden), bound))
        self.U = self.add_param("U", _uniform(rng, (hidden, 3 * hidden), bound))
        self.b = self.add_param("b", np.zeros(3 * hidden))
        self.bh = self.add_param("bh", np.zeros(3 * hidden))

    def step(self, x: Tensor, h: Tensor, valid: np.ndarray | None = None) -> Tensor:
        H = self.hidden
        gx = T.add(T.matmul(x, self.W), self.b)
        gh = T.add(T.matmul(h, self.U), self.bh)
        rz = T.sigmoid(T.add(gx[:, : 2 * H], gh[:, : 2 * H]))
        r, z = rz[:, :H], rz[:, H:]
        n = T.tanh(T.add(gx[:, 2 * H:], T.mul(r, gh[:, 2 * H:])))
        new = T.add(n, T.mul(z, T.sub(h, n)))
        if valid is None or valid.all():
            return new
        # padded rows carry the previous state through unchanged
        return T.add(h, T.mul(T.sub(new, h), valid[:, None].astype(new.data.dtype)))

    def run(self, steps: list[Tensor], valid: np.ndarray | None = None, reverse: bool = False) -> list[Tensor]:
        if not steps:
            return []
        batch = steps[0].shape[0]
        h = Tensor(np.zeros((batch, self.hidden)))
        order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
        out: list[Tensor | None] = [None] * len(steps)
        for t in order:
            h = self.step(steps[t], h, None if valid is None else valid[:, t])
            out[t] = h
        return out


class BiGRU(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.fwd = self.add_child("fwd", GRUCell(rng, n_in, hidden))
        self.bwd = self.add_child("bwd", GRUCell(rng, n_in, hidden))

    def __call__(self, steps: list[Tensor], valid: np.ndarray | None = None):
        """Returns (per-token states [B, 2H] list, summary [B, 2H]).

        The summary concatenates the forward state after the last valid token
        with the backward state at the first token.
        """
        f = self.fwd.run(steps, valid)
        b = self.bwd.run(steps, valid, reverse=True)
        states = [T.concat([fi, bi], axis=-1) for fi, bi in zip(f, b)]
        summary = T.concat([f[-1], b[0]], axis=-1) if steps else None
        return states, summary


class SequenceEncoder(Module):
    """Embedding table followed by a bidirectional gated recurrent encoder."""

    def __init__(self, rng: np.random.Generator, vocab_size: int, emb_dim: int, hidden: int):
        super().__init__()
        self.embedding = self.add_child("embedding", Embedding(rng, vocab_size, emb_dim))
        self.rnn = self.add_child("rnn", BiGRU(rng, emb_dim, hidden))

    @property
    def out_dim(self) -> int:
        return 2 * self.rnn.hidden

    def embed_steps(self, ids: np.ndarray, masks: Tensor | None = None) -> list[Tensor]:
        ids = np.asarray(ids)
        vocab = self.embedding.n_rows
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise IndexError(f"token id out of range [0, {vocab})")
        steps = []
        for t in range(ids.shape[1]):
            e = self.embedding(ids[:, t])
            if masks is not None:
                e = T.mul(e, masks[:, t: t + 1])
            steps.append(e)
        return steps

    def __call__(self, ids: np.ndarray, valid: np.ndarray | None = None, masks: Tensor | None = None):
        return self.rnn(self.embed_steps(ids, masks), valid)


def encode_sequence(encoder: SequenceEncoder, token_ids) -> np.ndarray:
    """Per-token bidirectional hidden states ``[len, 2*hidden]`` for one sequence."""
    ids = np.asarray(token_ids, dtype=np.int64).reshape(1, -1)
    if ids.shape[1] == 0:
        return np.zeros((0, encoder.out_dim), dtype=T.default_dtype())
    states, _ = encoder(ids)
    return np.stack([s.data[0] for s in states])
