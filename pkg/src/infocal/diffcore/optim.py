"""Adam with bias correction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: list[Tensor], grads: dict | None = None) -> bool:
    """Apply one Adam update in place.

    ``grads`` maps parameter tensors to gradient arrays; when omitted each
    parameter's ``.grad`` is used. Parameters without a gradient are left
    alone. Returns False (and skips the whole step) if any gradient is
    non-finite.
    """
    pairs = []
    for p in params:
        g = grads.get(p) if grads is not None else p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.shape} ({p.name})")
        pairs.append((p, g))
    if any(not np.all(np.isfinite(g)) for _, g in pairs):
        log.warning("adam_step: non-finite gradient, step skipped")
        return False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g in pairs:
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[key]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[key], state.v[key] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
    return True
