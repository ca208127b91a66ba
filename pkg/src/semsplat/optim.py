"""Bias-corrected Adam over dicts of named parameter arrays."""

from dataclasses import dataclass, field, replace
from typing import Dict

import numpy as np


@dataclass(frozen=True)
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.step < 0:
            raise ValueError("step must be >= 0")


def adam_step(state: AdamState, params, grads):
    """One Adam update of every parameter that has a gradient.

    Returns ``(new_params, new_state)``; inputs are not modified. Parameters
    without a gradient entry are passed through untouched.
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_out, v_out = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = np.asarray(params[name], dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for '{name}' has shape {g.shape}, parameter has {p.shape}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m_out[name], v_out[name] = m, v
    return new_params, replace(state, step=t, m=m_out, v=v_out)
