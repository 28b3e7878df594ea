"""Adam with per-parameter state buffers."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    beta1: float = 0.0
    beta2: float = 0.9
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, beta1=0.0, beta2=0.9, eps=1e-8):
        return cls(beta1, beta2, eps, 0,
                   [np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update; each parameter gets a fresh ``data`` array.

    ``grads`` entries may be ``None`` (treated as zero).
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(state.m):
        raise ValueError(f"Adam state tracks {len(state.m)} parameters, got {len(params)}")
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError(f"Adam buffer shape {m.shape} != parameter shape {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        # fresh array: never mutate buffers another graph may still reference
        p.data = (p.data - step).astype(p.data.dtype, copy=False)
    return params
