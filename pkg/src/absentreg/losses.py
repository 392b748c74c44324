"""Similarity measures, regularizers and the bidirectional masked objective.

Every loss aggregates by mean so that weights carry over between pyramid
levels. Gradients are analytic; masks are constants under differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np
from scipy.ndimage import uniform_filter

from .masks import forward_backward_error_vjp
from .volume import (
    gradient_array,
    gradient_array_adjoint,
    resample_array,
    resample_array_adjoint,
    warp_array,
)


class LossValue(NamedTuple):
    value: float
    grad: Any = None
    terms: dict | None = None


@dataclass(frozen=True)
class LossWeights:
    lambda_reg: float = 0.4
    lambda_inv: float = 0.5
    lambda_m: float = 0.01

    def __post_init__(self):
        if min(self.lambda_reg, self.lambda_inv, self.lambda_m) < 0 or self.lambda_reg > 1:
            raise ValueError(f"invalid loss weights {self}")


@dataclass(frozen=True)
class SimilaritySpec:
    """Local NCC window and number of similarity-pyramid scales (1 = plain NCC)."""

    window: int = 3
    n_scales: int = 1

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"NCC window must be odd and >= 3, got {self.window}")
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")


def _image(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected a 3D or (C, nx, ny, nz) image, got shape {arr.shape}")
    return arr


def _pair(a, b):
    a, b = _image(a), _image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _scalar_field(x, dims, default=None) -> np.ndarray:
    if x is None:
        return np.full(dims, default, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(dims):
        raise ValueError(f"scalar field shape {x.shape} does not match {tuple(dims)}")
    return x


# ---------------------------------------------------------------- NGF


def ngf_distance(B, F, epsilon: float = 0.01, grad: bool = False) -> LossValue:
    """Normalized gradient field distance, averaged over voxels.

    ``grad=True`` returns the derivative with respect to the intensities of
    ``F`` (the image that is resampled during optimization).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    B, F = _pair(B, F)
    if B.shape[0] != 1:
        raise ValueError("NGF expects single-channel images")
    a = gradient_array(B[0])
    b = gradient_array(F[0])
    na = np.sum(a * a, axis=0) + epsilon
    nb = np.sum(b * b, axis=0) + epsilon
    c = np.sum(a * b, axis=0)
    q = c * c / (na * nb)
    value = float(np.mean(1.0 - q))
    if not grad:
        return LossValue(value)
    n = q.size
    # d(-q)/db
    dq_db = (2.0 * c / (na * nb))[None] * a - (2.0 * c * c / (na * nb * nb))[None] * b
    dF = gradient_array_adjoint(-dq_db / n)
    return LossValue(value, dF[None])


# ---------------------------------------------------------------- NCC


def _box(x, window):
    return uniform_filter(x, size=window, mode="constant")


def _window_mean_ops(shape, window):
    """Window mean restricted to in-domain voxels, and its transpose."""
    cover = _box(np.ones(shape), window)

    def mean(x):
        return _box(x, window) / cover

    def mean_t(g):
        return _box(g / cover, window)

    return mean, mean_t


def masked_local_ncc(I, J, weight=None, window: int = 3, grad: bool = False) -> LossValue:
    """Weighted negative squared local correlation coefficient.

    Per voxel the squared correlation of ``I`` and ``J`` over a ``window``^3
    neighbourhood (clipped to the grid) is averaged with ``weight`` (typically ``1 - mask``). The
    normalizer is the total weight over voxels where ``I`` has local variance;
    voxels where either image is locally flat add nothing to the numerator.
    Channels are averaged. The gradient is with respect to ``J``.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    I, J = _pair(I, J)
    w = _scalar_field(weight, I.shape[1:], 1.0)
    C = I.shape[0]
    value = 0.0
    dJ = np.zeros_like(J) if grad else None
    for ch in range(C):
        v, g = _ncc_channel(I[ch], J[ch], w, window, grad)
        value += v / C
        if grad:
            dJ[ch] = g / C
    return LossValue(float(value), dJ)


def _ncc_channel(I, J, w, window, grad):
    mean, mean_t = _window_mean_ops(I.shape, window)
    mI = mean(I)
    mJ = mean(J)
    sII = mean(I * I) - mI * mI
    sJJ = mean(J * J) - mJ * mJ
    sIJ = mean(I * J) - mI * mJ
    # flat-window tolerance relative to each image's global variance
    tol_i = 1e-6 * float(np.var(I)) + 1e-12
    tol_j = 1e-6 * float(np.var(J)) + 1e-12
    valid_i = sII > tol_i
    valid = valid_i & (sJJ > tol_j)
    total = float(np.sum(w[valid_i]))
    if total <= 0.0 or not np.any(valid):
        return 0.0, (np.zeros_like(J) if grad else None)
    den = np.where(valid, sII * sJJ, 1.0)
    cc = np.where(valid, sIJ * sIJ / den, 0.0)
    value = -float(np.sum(w * cc)) / total
    if not grad:
        return value, None
    g = np.where(valid, -w / total, 0.0)
    gs = g * 2.0 * sIJ / den
    gb = -g * cc / np.where(valid, sJJ, 1.0)
    gm = -gs * mI - 2.0 * gb * mJ
    dJ = mean_t(gm) + I * mean_t(gs) + 2.0 * J * mean_t(gb)
    return value, dJ


def _scale_dims(dims, k):
    return tuple(max(2, d // (2**k)) for d in dims)


def pyramid_scale_weights(n_scales: int) -> np.ndarray:
    """Normalized scale weights, finest first, halving per coarser scale."""
    w = 2.0 ** -np.arange(n_scales, dtype=np.float64)
    return w / w.sum()


def ncc_similarity_pyramid(I, J, weight=None, n_scales: int = 3, window: int = 7, grad: bool = False) -> LossValue:
    """Masked local NCC aggregated over ``n_scales`` dyadic scales.

    Scale ``k`` compares the inputs (and the weight field) downsampled by
    ``2**k``; scale weights are :func:`pyramid_scale_weights`.
    """
    if n_scales < 1:
        raise ValueError("n_scales must be >= 1")
    I, J = _pair(I, J)
    dims = I.shape[1:]
    w = _scalar_field(weight, dims, 1.0)
    if n_scales == 1:
        return masked_local_ncc(I, J, w, window, grad)
    sw = pyramid_scale_weights(n_scales)
    value = 0.0
    dJ = np.zeros_like(J) if grad else None
    per_scale = []
    for k in range(n_scales):
        if k == 0:
            Ik, Jk, wk = I, J, w
        else:
            d = _scale_dims(dims, k)
            Ik, Jk, wk = resample_array(I, d), resample_array(J, d), resample_array(w, d)
        lv = masked_local_ncc(Ik, Jk, wk, window, grad)
        per_scale.append(lv.value)
        value += sw[k] * lv.value
        if grad:
            gk = lv.grad if k == 0 else resample_array_adjoint(lv.grad, dims)
            dJ += sw[k] * gk
    return LossValue(float(value), dJ, {"per_scale": per_scale})


def similarity(I, J, weight, spec: SimilaritySpec, grad: bool = False) -> LossValue:
    if spec.n_scales == 1:
        return masked_local_ncc(I, J, weight, spec.window, grad)
    return ncc_similarity_pyramid(I, J, weight, spec.n_scales, spec.window, grad)


# ---------------------------------------------------------------- regularizers


def _diffusion_single(u, grad):
    value = 0.0
    g = np.zeros_like(u) if grad else None
    for a in range(3):
        n = u.shape[1 + a]
        h = 2.0 / (n - 1)
        d = np.diff(u, axis=1 + a) / h
        m = d[0].size
        value += float(np.sum(d * d)) / m
        if grad:
            s = (2.0 / (m * h)) * d
            lo = [slice(None)] * 4
            hi = [slice(None)] * 4
            lo[1 + a] = slice(None, -1)
            hi[1 + a] = slice(1, None)
            g[tuple(lo)] -= s
            g[tuple(hi)] += s
    return value, g


def diffusion_regularizer(u_bf, u_fb, grad: bool = False) -> LossValue:
    """Squared forward-difference gradient norm of both fields.

    For each field: sum over axes and components, mean over difference
    positions (normalized units). Gradient is ``(d/du_bf, d/du_fb)``.
    """
    u_bf = np.asarray(u_bf, dtype=np.float64)
    u_fb = np.asarray(u_fb, dtype=np.float64)
    if u_bf.shape != u_fb.shape:
        raise ValueError(f"field shapes differ: {u_bf.shape} vs {u_fb.shape}")
    v1, g1 = _diffusion_single(u_bf, grad)
    v2, g2 = _diffusion_single(u_fb, grad)
    return LossValue(v1 + v2, (g1, g2) if grad else None)


def inverse_consistency_loss(delta_bf, delta_fb, m_bf, m_fb, grad: bool = False) -> LossValue:
    """Mean over voxels of ``delta_bf (1 - m_bf) + delta_fb (1 - m_fb)``.

    The gradient is with respect to the two error maps.
    """
    delta_bf = np.asarray(delta_bf, dtype=np.float64)
    delta_fb = np.asarray(delta_fb, dtype=np.float64)
    shape = delta_bf.shape
    keep_bf = 1.0 - _scalar_field(m_bf, shape)
    keep_fb = 1.0 - _scalar_field(m_fb, shape)
    if delta_fb.shape != shape:
        raise ValueError("error map shapes differ")
    n = delta_bf.size
    value = float(np.sum(delta_bf * keep_bf + delta_fb * keep_fb)) / n
    return LossValue(value, (keep_bf / n, keep_fb / n) if grad else None)


def mask_magnitude(m_bf, m_fb) -> LossValue:
    """Fraction of masked voxels in ``m_bf`` plus the fraction in ``m_fb``."""
    return LossValue(float(np.mean(m_bf)) + float(np.mean(m_fb)))


# ---------------------------------------------------------------- objective


def dirac_objective(
    B, F, u_bf, u_fb, m_bf, m_fb, weights: LossWeights, sim_spec: SimilaritySpec, grad: bool = False, reg_ref=None
) -> LossValue:
    """Bidirectional masked registration objective.

    ``(1 - lambda_reg) L_s + lambda_reg L_r + lambda_inv L_inv + lambda_m |m|``
    with ``L_s = sim(B, F o phi_fb; 1 - m_fb) + sim(F, B o phi_bf; 1 - m_bf)``.
    ``reg_ref`` is an optional field pair (a pre-alignment) that the
    regularizer measures from; ``L_r`` then penalizes ``u - ref`` only.
    The gradient is ``(d/du_bf, d/du_fb)``; ``terms`` holds each component.
    """
    B, F = _pair(B, F)
    dims = B.shape[1:]
    m_bf = _scalar_field(m_bf, dims)
    m_fb = _scalar_field(m_fb, dims)
    if u_bf.shape != (3,) + dims or u_fb.shape != (3,) + dims:
        raise ValueError("field dims do not match the images")

    if grad:
        wB, dwB = warp_array(B, u_bf, with_grad=True)
        wF, dwF = warp_array(F, u_fb, with_grad=True)
    else:
        wB, wF = warp_array(B, u_bf), warp_array(F, u_fb)
    s_bf = similarity(F, wB, 1.0 - m_bf, sim_spec, grad)
    s_fb = similarity(B, wF, 1.0 - m_fb, sim_spec, grad)
    l_s = s_bf.value + s_fb.value
    if reg_ref is None:
        l_r = diffusion_regularizer(u_bf, u_fb, grad)
    else:
        l_r = diffusion_regularizer(u_bf - reg_ref[0], u_fb - reg_ref[1], grad)
    delta_bf, vjp_bf = forward_backward_error_vjp(u_bf, u_fb)
    delta_fb, vjp_fb = forward_backward_error_vjp(u_fb, u_bf)
    l_inv = inverse_consistency_loss(delta_bf, delta_fb, m_bf, m_fb, grad)
    l_m = mask_magnitude(m_bf, m_fb)

    lr, li, lm = weights.lambda_reg, weights.lambda_inv, weights.lambda_m
    value = (1.0 - lr) * l_s + lr * l_r.value + li * l_inv.value + lm * l_m.value
    terms = {"sim_bf": s_bf.value, "sim_fb": s_fb.value, "similarity": l_s, "regularizer": l_r.value,
             "inverse_consistency": l_inv.value, "mask_magnitude": l_m.value}
    if not grad:
        return LossValue(float(value), None, terms)

    g_bf = (1.0 - lr) * np.einsum("c...,ca...->a...", s_bf.grad, dwB) + lr * l_r.grad[0]
    g_fb = (1.0 - lr) * np.einsum("c...,ca...->a...", s_fb.grad, dwF) + lr * l_r.grad[1]
    if li > 0:
        a_bf, b_fb = vjp_bf(li * l_inv.grad[0])
        a_fb, b_bf = vjp_fb(li * l_inv.grad[1])
        g_bf += a_bf + b_bf
        g_fb += a_fb + b_fb
    return LossValue(float(value), (g_bf, g_fb), terms)
