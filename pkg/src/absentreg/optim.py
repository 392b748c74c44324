"""Adam, shared by the affine and non-rigid stages."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    meta: dict = field(default_factory=dict)


def adam_init(shape, beta1: float = 0.9, beta2: float = 0.999, eps_hat: float = 1e-8) -> AdamState:
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ValueError("betas must lie in [0, 1)")
    return AdamState(np.zeros(shape), np.zeros(shape), 0, beta1, beta2, eps_hat)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, state)``.

    ``state`` is updated in place and also returned.
    """
    if lr <= 0:
        raise ValueError("learning rate must be > 0")
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != np.shape(params) or grads.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {np.shape(params)}, grads {grads.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grads)):
        bad = int(np.count_nonzero(~np.isfinite(grads)))
        raise NumericalError(f"non-finite gradient ({bad} entries) at Adam step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * grads
    state.v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps_hat), state
