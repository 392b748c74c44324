"""Step 1: coarse-to-fine affine alignment by Adam on the NGF distance."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError
from .losses import ngf_distance
from .optim import adam_init, adam_step
from .volume import Volume, identity_grid, pyramid_dims, resample_array, sample_image

log = logging.getLogger(__name__)

IDENTITY = np.hstack([np.eye(3), np.zeros((3, 1))])


@dataclass(frozen=True)
class AffineConfig:
    n_levels: int = 3
    max_dim: tuple = (64, 64, 40)
    min_dim: tuple = (16, 16, 16)
    lr_per_level: tuple = (1e-2, 5e-3, 2e-3)
    max_iter_per_level: tuple = (90, 90, 90)
    ngf_epsilon: float = 0.01
    channels: tuple | None = (0,)

    def __post_init__(self):
        for name in ("lr_per_level", "max_iter_per_level"):
            if len(getattr(self, name)) != self.n_levels:
                raise ValueError(f"{name} must have n_levels={self.n_levels} entries")
        if self.n_levels < 1 or self.ngf_epsilon <= 0:
            raise ValueError("n_levels must be >= 1 and ngf_epsilon > 0")
        if any(v <= 0 for v in self.lr_per_level) or any(v < 0 for v in self.max_iter_per_level):
            raise ValueError("learning rates must be > 0 and iteration counts >= 0")


@dataclass
class AffineResult:
    A_bf: np.ndarray
    A_fb: np.ndarray
    report: dict


def _unit_range(data: np.ndarray):
    lo, hi = float(data.min()), float(data.max())
    if hi - lo <= 0:
        return None
    return (data - lo) / (hi - lo)


def affine_ngf(fixed: np.ndarray, moving: np.ndarray, A: np.ndarray, epsilon: float, grid=None, grad: bool = True):
    """NGF between ``fixed`` and ``moving(A [x; 1])`` with d/dA (3x4)."""
    dims = fixed.shape[1:]
    if grid is None:
        grid = identity_grid(dims)
    points = np.einsum("ij,j...->i...", A[:, :3], grid) + A[:, 3].reshape(3, 1, 1, 1)
    if not grad:
        return ngf_distance(fixed, sample_image(moving, points), epsilon).value, None
    warped, dpos = sample_image(moving, points, with_grad=True)
    lv = ngf_distance(fixed, warped, epsilon, grad=True)
    gp = (lv.grad[0][None] * dpos[0]).reshape(3, -1)  # dNGF/d(sample position)
    dA = np.empty((3, 4))
    dA[:, :3] = gp @ grid.reshape(3, -1).T
    dA[:, 3] = gp.sum(axis=1)
    return lv.value, dA


def _register_direction(moving: np.ndarray, fixed: np.ndarray, cfg: AffineConfig):
    levels = pyramid_dims(fixed.shape[1:], cfg.n_levels, cfg.max_dim, cfg.min_dim)
    A = IDENTITY.copy()
    traces, best_idx, candidates = [], [], [IDENTITY.copy()]
    for lvl, dims in enumerate(levels):
        f_l = resample_array(fixed, dims)
        m_l = resample_array(moving, dims)
        grid = identity_grid(dims)
        state = adam_init((3, 4))
        lr = cfg.lr_per_level[lvl]
        trace = []
        best_val, best_A = np.inf, A.copy()
        for it in range(cfg.max_iter_per_level[lvl] + 1):
            val, dA = affine_ngf(f_l, m_l, A, cfg.ngf_epsilon, grid)
            if not np.isfinite(val):
                raise NumericalError(f"non-finite NGF at affine level {lvl}, iteration {it}")
            trace.append(val)
            if val < best_val:
                best_val, best_A = val, A.copy()
            if it < cfg.max_iter_per_level[lvl]:
                A, state = adam_step(A, dA, state, lr)
        traces.append(trace)
        best_idx.append(int(np.argmin(trace)))
        # the best iterate of a level seeds the next one
        A = best_A
        candidates.append(best_A)

    finest = levels[-1]
    f_l = resample_array(fixed, finest)
    m_l = resample_array(moving, finest)
    grid = identity_grid(finest)
    scores = [affine_ngf(f_l, m_l, c, cfg.ngf_epsilon, grid, grad=False)[0] for c in candidates]
    pick = int(np.argmin(scores))
    report = {
        "level_dims": [list(d) for d in levels],
        "traces": traces,
        "best_index_per_level": best_idx,
        "candidate_scores_finest": scores,
        "selected_candidate": pick,  # 0 = identity, k = best iterate of level k-1
        "initial_ngf": scores[0],
        "final_ngf": scores[pick],
    }
    return candidates[pick], report


def register_affine(B: Volume, F: Volume, cfg: AffineConfig = AffineConfig()) -> AffineResult:
    """Estimate ``A_bf`` (B resampled onto F) and ``A_fb`` independently.

    ``B(A_bf [x; 1])`` approximates ``F(x)``. Both volumes are restricted to
    ``cfg.channels`` (a single channel) and rescaled to [0, 1].
    """
    B = B.select(cfg.channels)
    F = F.select(cfg.channels)
    if B.channels != 1 or F.channels != 1:
        raise InputError("affine registration uses exactly one channel")
    if B.dims != F.dims:
        raise InputError(f"baseline dims {B.dims} differ from follow-up dims {F.dims}")
    b, f = _unit_range(B.data), _unit_range(F.data)
    if b is None or f is None:
        log.warning("constant input image; affine registration skipped")
        return AffineResult(IDENTITY.copy(), IDENTITY.copy(), {"degenerate": True})
    A_bf, rep_bf = _register_direction(b, f, cfg)
    A_fb, rep_fb = _register_direction(f, b, cfg)
    return AffineResult(A_bf, A_fb, {"degenerate": False, "bf": rep_bf, "fb": rep_fb})
