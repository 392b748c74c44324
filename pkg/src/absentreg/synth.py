"""Synthetic ground truth: textured phantoms, smooth deformations, resection holes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt, zoom

from .evaluation import LandmarkSet
from .volume import Volume, affine_to_field, identity_grid, sample_field, warp_array


@dataclass(frozen=True)
class SynthCase:
    baseline: Volume
    followup: Volume
    true_field: np.ndarray  # u_bf: followup(x) = baseline(x + u(x)) outside the hole
    true_absent: np.ndarray  # bool, follow-up grid
    landmarks_followup: LandmarkSet
    landmarks_baseline: LandmarkSet
    true_affine: np.ndarray
    seed: int


def _rotation(rng, max_deg):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(-max_deg, max_deg))
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def _add_bump(vol, center, radii, R, amp, edge=None):
    dims = vol.shape
    half = 0.5 * (np.asarray(dims, dtype=np.float64) - 1.0)
    reach = float(np.max(radii))
    lo = np.maximum(np.floor((center - reach + 1.0) * half).astype(int), 0)
    hi = np.minimum(np.ceil((center + reach + 1.0) * half).astype(int) + 1, dims)
    if np.any(hi <= lo):
        return
    axes = [np.arange(lo[a], hi[a]) / half[a] - 1.0 - center[a] for a in range(3)]
    offs = np.stack(np.meshgrid(*axes, indexing="ij"))
    local = np.einsum("ij,j...->i...", R.T, offs)
    r2 = np.sum((local / radii.reshape(3, 1, 1, 1)) ** 2, axis=0)
    if edge is None:
        prof = np.clip(1.0 - r2, 0.0, None) ** 3
    else:
        # flat top with a smoothstep rim of relative width ``edge``
        t = np.clip((1.0 - r2) / edge, 0.0, 1.0)
        prof = t * t * (3.0 - 2.0 * t)
    vol[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] += amp * prof


def make_phantom(dims, n_blobs: int, seed: int, radius_range=(0.04, 0.2)) -> Volume:
    """Sum of randomly oriented, compactly supported bumps, scaled to [0, 1].

    Bumps are ``(1 - r^2)^3`` in an ellipsoidal radius ``r`` so the
    background is exactly zero. The first bump is a large envelope with a
    sharp rim (like a skull-stripped scan); the rest are texture with radii drawn log-uniformly from ``radius_range``
    (normalized units) and centred inside the envelope.
    """
    dims = tuple(int(d) for d in dims)
    if min(dims) < 16:
        raise ValueError("phantom dims must be >= 16 per axis")
    rng = np.random.default_rng(seed)
    vol = np.zeros(dims)
    lo, hi = np.log(radius_range[0]), np.log(radius_range[1])
    for b in range(n_blobs):
        R = _rotation(rng, 180.0)
        if b == 0:
            center = rng.uniform(-0.05, 0.05, size=3)
            radii = rng.uniform(0.7, 0.8, size=3)
            amp, edge = 0.6, 0.1
        else:
            direction = rng.normal(size=3)
            center = direction / np.linalg.norm(direction) * 0.55 * rng.random() ** (1 / 3)
            radii = np.exp(rng.uniform(lo, hi)) * rng.uniform(0.6, 1.4, size=3)
            amp, edge = rng.uniform(0.2, 0.6) * rng.choice([-1.0, 1.0]), None
        _add_bump(vol, center, radii, R, amp, edge)
    np.clip(vol, 0.0, None, out=vol)
    peak = vol.max()
    if peak > 0:
        vol /= peak
    return Volume(vol)


def make_smooth_field(dims, amplitude_voxels: float, seed: int, control_points: int = 5) -> np.ndarray:
    """Random smooth displacement whose largest voxel-unit length is ``amplitude_voxels``."""
    if amplitude_voxels < 0:
        raise ValueError("amplitude must be >= 0")
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed)
    coarse = rng.normal(size=(3, control_points, control_points, control_points))
    vox = np.stack([zoom(c, [d / control_points for d in dims], order=3, mode="nearest", grid_mode=True) for c in coarse])
    length = np.sqrt(np.sum(vox * vox, axis=0))
    peak = length.max()
    if amplitude_voxels == 0 or peak == 0:
        return np.zeros((3,) + dims)
    vox *= amplitude_voxels / peak
    half = 0.5 * (np.asarray(dims, dtype=np.float64) - 1.0)
    return vox / half.reshape(3, 1, 1, 1)


def random_affine(dims, seed: int, max_rotation_deg=10.0, scale_range=(0.9, 1.1), max_translation_voxels=5.0, exact=False) -> np.ndarray:
    """Random 3x4 normalized-coordinate affine.

    With ``exact`` the rotation angle, the scale factors and the translation
    length sit at the ends of their ranges (only directions and which end
    is used are random).
    """
    rng = np.random.default_rng(seed)
    if exact:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.deg2rad(max_rotation_deg) * rng.choice([-1.0, 1.0])
        K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        R = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K
    else:
        R = _rotation(rng, max_rotation_deg)
    S = np.diag(rng.choice(scale_range, size=3) if exact else rng.uniform(*scale_range, size=3))
    t_dir = rng.normal(size=3)
    t_dir /= np.linalg.norm(t_dir)
    t_len = max_translation_voxels if exact else rng.uniform(0, max_translation_voxels)
    half = 0.5 * (np.asarray(dims, dtype=np.float64) - 1.0)
    return np.hstack([R @ S, (t_dir * t_len / half).reshape(3, 1)])


def make_case(
    dims,
    field_amplitude: float,
    hole_radius_voxels: float,
    seed: int,
    *,
    affine: np.ndarray | None = None,
    n_blobs: int = 60,
    n_landmarks: int = 20,
    noise_amplitude: float = 0.1,
) -> SynthCase:
    """Baseline phantom and a follow-up warped by a known field, with a hole.

    The follow-up is ``baseline(x + u(x))`` with ``u`` the optional affine
    plus a smooth field; a sphere inside the follow-up foreground is then
    overwritten with low-amplitude noise. Landmarks are voxel centres of the
    follow-up outside the hole, paired with their baseline positions.
    """
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed)
    phantom_seed, field_seed = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))
    baseline = make_phantom(dims, n_blobs, phantom_seed)
    A = np.hstack([np.eye(3), np.zeros((3, 1))]) if affine is None else np.asarray(affine, dtype=np.float64)
    true_field = affine_to_field(A, dims) + make_smooth_field(dims, field_amplitude, field_seed)
    followup = warp_array(baseline.data, true_field)[0]

    fg = followup > 0.05
    hole = np.zeros(dims, bool)
    idx = np.indices(dims)
    if hole_radius_voxels > 0:
        inner = distance_transform_edt(fg)
        candidates = np.argwhere(inner >= hole_radius_voxels + 1)
        if len(candidates) == 0:
            raise ValueError(f"no foreground region can hold a hole of radius {hole_radius_voxels}")
        center = candidates[rng.integers(len(candidates))]
        dist2 = sum((idx[a] - center[a]) ** 2 for a in range(3))
        hole = dist2 <= hole_radius_voxels**2
        followup = followup.copy()
        followup[hole] = noise_amplitude * rng.random(int(hole.sum()))

    # landmarks: textured follow-up voxels away from the hole and the border
    margin = 3
    ok = followup > 0.2
    ok &= ~hole
    if hole.any():
        ok &= distance_transform_edt(~hole) > margin
    border = np.zeros(dims, bool)
    border[margin:-margin, margin:-margin, margin:-margin] = True
    ok &= border
    pool = np.argwhere(ok)
    if len(pool) < n_landmarks:
        raise ValueError("not enough foreground to place landmarks")
    chosen = pool[np.sort(rng.choice(len(pool), size=n_landmarks, replace=False))].astype(np.float64)
    half = 0.5 * (np.asarray(dims, dtype=np.float64) - 1.0)
    norm = chosen / half - 1.0
    disp = sample_field(true_field, np.ascontiguousarray(norm.T)).T
    base_pts = (norm + disp + 1.0) * half
    ids = tuple(str(i + 1) for i in range(n_landmarks))
    return SynthCase(
        baseline=baseline,
        followup=Volume(followup),
        true_field=true_field,
        true_absent=hole,
        landmarks_followup=LandmarkSet(ids, chosen),
        landmarks_baseline=LandmarkSet(ids, base_pts),
        true_affine=A,
        seed=seed,
    )
