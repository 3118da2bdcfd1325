"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass
class OptimizerState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One AdamW update.

    Only parameters that appear in ``grads`` move; the rest are passed through
    untouched (this is how frozen weights are expressed). Returns new
    dictionaries; inputs are not mutated.
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params = dict(params)
    new_m, new_v = dict(state.m), dict(state.v)
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=np.float64)
        p = np.asarray(params[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch for {name!r}: param {p.shape}, grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        elif m.shape != p.shape:
            raise ValueError(f"optimizer moment shape mismatch for {name!r}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = p - state.lr * state.weight_decay * p - state.lr * update
        new_m[name], new_v[name] = m, v
    new_state = OptimizerState(
        lr=state.lr, beta1=b1, beta2=b2, eps=state.eps,
        weight_decay=state.weight_decay, step=t, m=new_m, v=new_v,
    )
    return new_params, new_state
