"""Steps 2 and 3: bidirectional control-grid registration with absent-correspondence masks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericalError
from .losses import LossWeights, SimilaritySpec, dirac_objective
from .masks import MaskParams, correspondence_masks
from .optim import adam_init, adam_step
from .volume import Volume, _as_dims, check_field, pyramid_dims, resample_array, resample_array_adjoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NonrigidConfig:
    """Defaults are the fine-scale instance-optimization stage."""

    n_levels: int = 5
    max_dim: tuple = (240, 240, 155)
    min_dim: tuple = (80, 80, 80)
    lr_per_level: tuple = (1e-2, 5e-3, 5e-3, 3e-3, 3e-3)
    max_iter_per_level: tuple = (150, 100, 100, 100, 50)
    grid_points_min: tuple = (32, 32, 32)
    grid_points_max: tuple = (64, 64, 64)
    lambda_reg_per_level: tuple = (0.25, 0.3, 0.3, 0.35, 0.35)
    lambda_inv_per_level: tuple = (1.0, 2.0, 4.0, 8.0, 10.0)
    lambda_m: float = 0.01
    mask_params: MaskParams = field(default_factory=MaskParams)
    sim_spec: SimilaritySpec = field(default_factory=SimilaritySpec)
    mask_update_interval: int = 10
    channels: tuple | None = None

    def __post_init__(self):
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        for name in ("lr_per_level", "max_iter_per_level", "lambda_reg_per_level", "lambda_inv_per_level"):
            if len(getattr(self, name)) != self.n_levels:
                raise ValueError(f"{name} must have n_levels={self.n_levels} entries")
        for name in ("max_dim", "min_dim", "grid_points_min", "grid_points_max"):
            if len(getattr(self, name)) != 3 or min(getattr(self, name)) < 2:
                raise ValueError(f"{name} must be three sizes >= 2")
        if any(v <= 0 for v in self.lr_per_level) or any(v < 0 for v in self.max_iter_per_level):
            raise ValueError("learning rates must be > 0 and iteration counts >= 0")
        if any(not 0 <= v <= 1 for v in self.lambda_reg_per_level):
            raise ValueError("lambda_reg must lie in [0, 1]")
        if min(self.lambda_inv_per_level) < 0 or self.lambda_m < 0:
            raise ValueError("loss weights must be >= 0")
        if self.mask_update_interval < 1:
            raise ValueError("mask_update_interval must be >= 1")

    @classmethod
    def dirac(cls, **overrides) -> "NonrigidConfig":
        """Coarse bidirectional stage: NCC similarity pyramid (w=7), 3 levels."""
        base = dict(
            n_levels=3,
            max_dim=(160, 160, 80),
            min_dim=(40, 40, 20),
            lr_per_level=(1e-2, 5e-3, 3e-3),
            max_iter_per_level=(100, 60, 40),
            grid_points_min=(40, 40, 20),
            grid_points_max=(160, 160, 80),
            lambda_reg_per_level=(0.4, 0.4, 0.4),
            lambda_inv_per_level=(0.5, 0.5, 0.5),
            sim_spec=SimilaritySpec(window=7, n_scales=3),
        )
        base.update(overrides)
        return cls(**base)


def control_grid_to_dense(grid_field: np.ndarray, target_dims) -> np.ndarray:
    """Trilinear upsampling of control-point vectors onto ``target_dims``.

    Both lattices span the same normalized domain, so vectors are copied
    without rescaling.
    """
    grid_field = check_field(grid_field)
    target_dims = _as_dims(target_dims)
    if any(g > t for g, t in zip(grid_field.shape[1:], target_dims)) or min(grid_field.shape[1:]) < 2:
        raise ValueError(f"control grid {grid_field.shape[1:]} must be >= 2 and <= target {target_dims}")
    return resample_array(grid_field, target_dims)


def level_grid_dims(cfg: NonrigidConfig, level: int, level_dims) -> tuple[int, int, int]:
    """Geometric interpolation between the min and max grid sizes, capped by the level."""
    t = level / (cfg.n_levels - 1) if cfg.n_levels > 1 else 1.0
    out = []
    for lo, hi, d in zip(cfg.grid_points_min, cfg.grid_points_max, level_dims):
        g = int(round(lo * (hi / lo) ** t))
        out.append(max(2, min(g, d)))
    return tuple(out)


def _masks(u_bf, u_fb, b, f, params):
    m_bf, m_fb, info = correspondence_masks(u_bf, u_fb, b, f, params)
    return m_bf.astype(np.float64), m_fb.astype(np.float64), info


@dataclass
class NonrigidResult:
    u_bf: np.ndarray
    u_fb: np.ndarray
    m_bf: np.ndarray
    m_fb: np.ndarray
    report: dict


def register_nonrigid(
    B: Volume,
    F: Volume,
    init_bf: np.ndarray | None = None,
    init_fb: np.ndarray | None = None,
    cfg: NonrigidConfig = NonrigidConfig(),
    prealign_bf: np.ndarray | None = None,
    prealign_fb: np.ndarray | None = None,
) -> NonrigidResult:
    """Jointly optimize ``u_bf`` (on F's grid) and ``u_fb`` (on B's grid).

    The initial fields are kept at full resolution; each level adds a
    control-grid increment to the residual carried over from the previous
    level. Masks are recomputed from the current fields every
    ``cfg.mask_update_interval`` iterations and held fixed in between. The
    lowest objective seen at each level is kept.

    ``prealign_bf``/``prealign_fb`` (typically the affine stage's fields) are
    treated as pre-alignment: the diffusion term penalizes ``u - prealign``.
    """
    B = B.select(cfg.channels)
    F = F.select(cfg.channels)
    if B.dims != F.dims or B.channels != F.channels:
        raise InputError(f"baseline {B.data.shape} and follow-up {F.data.shape} differ in shape")
    dims = B.dims
    zero = np.zeros((3,) + dims)
    try:
        init_bf = zero if init_bf is None else check_field(init_bf, dims)
        init_fb = zero if init_fb is None else check_field(init_fb, dims)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if not (np.all(np.isfinite(init_bf)) and np.all(np.isfinite(init_fb))):
        raise InputError("initial fields must be finite")
    prealign = None
    if prealign_bf is not None or prealign_fb is not None:
        try:
            prealign = (
                zero if prealign_bf is None else check_field(prealign_bf, dims),
                zero if prealign_fb is None else check_field(prealign_fb, dims),
            )
        except ValueError as exc:
            raise InputError(str(exc)) from exc

    levels = pyramid_dims(dims, cfg.n_levels, cfg.max_dim, cfg.min_dim)
    # the stage input is kept at full resolution; levels refine a smooth residual
    res_bf, res_fb = zero, zero
    reports = []
    initial_objective = final_objective = None
    for lvl, ldims in enumerate(levels):
        finest = lvl == len(levels) - 1
        b_l, f_l = resample_array(B.data, ldims), resample_array(F.data, ldims)
        i_bf, i_fb = resample_array(init_bf, ldims), resample_array(init_fb, ldims)
        r_bf, r_fb = resample_array(res_bf, ldims), resample_array(res_fb, ldims)
        ref = None if prealign is None else (resample_array(prealign[0], ldims), resample_array(prealign[1], ldims))
        gdims = level_grid_dims(cfg, lvl, ldims)
        weights = LossWeights(cfg.lambda_reg_per_level[lvl], cfg.lambda_inv_per_level[lvl], cfg.lambda_m)
        lr = cfg.lr_per_level[lvl]
        n_iter = cfg.max_iter_per_level[lvl]

        p_bf, p_fb = np.zeros((3,) + gdims), np.zeros((3,) + gdims)
        s_bf, s_fb = adam_init(p_bf.shape), adam_init(p_fb.shape)
        trace, mask_fractions = [], []
        best = (np.inf, r_bf, r_fb, -1)
        d_bf, d_fb = r_bf, r_fb
        for it in range(n_iter + 1):
            if it > 0:
                d_bf = r_bf + control_grid_to_dense(p_bf, ldims)
                d_fb = r_fb + control_grid_to_dense(p_fb, ldims)
            u_bf, u_fb = i_bf + d_bf, i_fb + d_fb
            if it % cfg.mask_update_interval == 0:
                m_bf, m_fb, _ = _masks(u_bf, u_fb, b_l, f_l, cfg.mask_params)
                mask_fractions.append([it, float(m_bf.mean()), float(m_fb.mean())])
            want_grad = it < n_iter
            lv = dirac_objective(b_l, f_l, u_bf, u_fb, m_bf, m_fb, weights, cfg.sim_spec, want_grad, ref)
            if not np.isfinite(lv.value):
                raise NumericalError(f"non-finite objective at level {lvl}, iteration {it}")
            trace.append(lv.value)
            if lv.value < best[0]:
                best = (lv.value, d_bf, d_fb, it)
            if want_grad:
                g_bf = resample_array_adjoint(lv.grad[0], gdims)
                g_fb = resample_array_adjoint(lv.grad[1], gdims)
                try:
                    p_bf, s_bf = adam_step(p_bf, g_bf, s_bf, lr)
                    p_fb, s_fb = adam_step(p_fb, g_fb, s_fb, lr)
                except NumericalError as exc:
                    raise NumericalError(f"{exc} at level {lvl}, iteration {it}") from exc

        rep = {
            "level": lvl,
            "dims": list(ldims),
            "grid_dims": list(gdims),
            "trace": trace,
            "best_index": best[3],
            "mask_fractions": mask_fractions,
        }
        if finest:
            # the stage input competes with the optimized fields
            im_bf, im_fb, _ = _masks(i_bf, i_fb, b_l, f_l, cfg.mask_params)
            initial_objective = dirac_objective(b_l, f_l, i_bf, i_fb, im_bf, im_fb, weights, cfg.sim_spec, False, ref).value
            rep["initial_objective"] = initial_objective
            if initial_objective <= best[0]:
                best = (initial_objective, np.zeros_like(i_bf), np.zeros_like(i_fb), -1)
                rep["best_index"] = -1
            final_objective = best[0]
        reports.append(rep)
        res_bf, res_fb = best[1], best[2]

    u_bf = init_bf + resample_array(res_bf, dims)
    u_fb = init_fb + resample_array(res_fb, dims)
    m_bf, m_fb, info = correspondence_masks(u_bf, u_fb, B.data, F.data, cfg.mask_params)
    report = {
        "levels": reports,
        "initial_objective": initial_objective,
        "final_objective": final_objective,
        "tau_bf": info["tau_bf"],
        "tau_fb": info["tau_fb"],
        "mask_fraction_bf": float(m_bf.mean()),
        "mask_fraction_fb": float(m_fb.mean()),
    }
    return NonrigidResult(u_bf, u_fb, m_bf, m_fb, report)
