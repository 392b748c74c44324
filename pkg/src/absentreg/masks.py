"""Absent-correspondence detection from a pair of opposite displacement fields."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .volume import _sample_voxels, check_field, displaced_voxels, sample_adjoint


@dataclass(frozen=True)
class MaskParams:
    alpha: float = 0.015
    filter_halfwidth: int = 1

    def __post_init__(self):
        if self.alpha < 0 or self.filter_halfwidth < 0:
            raise ValueError(f"invalid mask parameters {self}")


def forward_backward_error_vjp(u_a, u_b):
    """Round-trip error ``|u_a(x) + u_b(x + u_a(x))|`` and its pullback.

    Returns ``(delta, vjp)`` where ``vjp(g)`` maps an upstream gradient on
    ``delta`` to ``(d/du_a, d/du_b)``.
    """
    u_a = check_field(u_a)
    u_b = check_field(u_b, u_a.shape[1:])
    dims = u_a.shape[1:]
    coords = displaced_voxels(u_a)
    ub_at, ub_jac = _sample_voxels(u_b, coords, dims, True, True)
    r = u_a + ub_at
    delta = np.sqrt(np.sum(r * r, axis=0))

    def vjp(g):
        unit = np.divide(r, delta, out=np.zeros_like(r), where=delta > 0)
        q = g * unit
        g_a = q + np.einsum("c...,ca...->a...", q, ub_jac)
        g_b = sample_adjoint(q, coords, dims, clamp=True).reshape(u_b.shape)
        return g_a, g_b

    return delta, vjp


def forward_backward_error(u_a, u_b) -> np.ndarray:
    """``delta(x) = |u_a(x) + u_b(x + u_a(x))|_2`` in normalized units."""
    return forward_backward_error_vjp(u_a, u_b)[0]


def foreground_of(vol) -> np.ndarray:
    """Voxels where any channel is positive."""
    data = np.asarray(getattr(vol, "data", vol))
    if data.ndim == 3:
        return data > 0
    return np.any(data > 0, axis=0)


def adaptive_threshold(delta, foreground, alpha: float = 0.015) -> float:
    """Mean round-trip error over the foreground plus ``alpha``."""
    fg = foreground_of(foreground)
    delta = np.asarray(delta, dtype=np.float64)
    if fg.shape != delta.shape:
        raise ValueError(f"foreground shape {fg.shape} does not match error map {delta.shape}")
    n = int(np.count_nonzero(fg))
    if n == 0:
        raise ValueError("foreground is empty; threshold undefined")
    return float(np.sum(delta[fg])) / n + alpha


def absent_mask(delta, tau: float, p: int = 1) -> np.ndarray:
    """Box-smooth ``delta`` over (2p+1)^3 with zero padding and threshold at ``tau``."""
    if not np.isfinite(tau):
        raise ValueError("tau must be finite")
    if p < 0:
        raise ValueError("p must be >= 0")
    delta = np.asarray(delta, dtype=np.float64)
    smoothed = delta if p == 0 else uniform_filter(delta, size=2 * p + 1, mode="constant")
    return smoothed >= tau


def correspondence_masks(u_bf, u_fb, baseline, followup, params: MaskParams = MaskParams()):
    """Both masks for a field pair.

    ``m_bf`` lives on the follow-up grid and uses the follow-up foreground for
    its threshold; ``m_fb`` mirrors it with the baseline.
    Returns ``(m_bf, m_fb, info)``.
    """
    d_bf = forward_backward_error(u_bf, u_fb)
    d_fb = forward_backward_error(u_fb, u_bf)
    tau_bf = adaptive_threshold(d_bf, followup, params.alpha)
    tau_fb = adaptive_threshold(d_fb, baseline, params.alpha)
    m_bf = absent_mask(d_bf, tau_bf, params.filter_halfwidth)
    m_fb = absent_mask(d_fb, tau_fb, params.filter_halfwidth)
    info = {"tau_bf": tau_bf, "tau_fb": tau_fb, "delta_bf": d_bf, "delta_fb": d_fb}
    return m_bf, m_fb, info
