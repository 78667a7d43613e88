"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from vismae.errors import ContractError


@dataclass
class AdamWState:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ContractError("AdamW hyperparameters must be non-negative (eps > 0)")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError("AdamW betas must lie in [0, 1)")


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
) -> dict[str, np.ndarray]:
    """Apply one AdamW update and return the new parameter arrays.

    ``state`` is advanced in place (moments and step counter). Parameters
    without a gradient entry are returned unchanged and their moments are not
    touched. Input arrays are never modified.
    """
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        decayed = p - state.lr * state.weight_decay * p
        out[name] = decayed - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    state.step = t
    return out
