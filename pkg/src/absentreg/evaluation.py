"""Landmark transformation and landmark-based accuracy metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .volume import Volume, sample_field

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LandmarkSet:
    """Named points in physical millimetres (origin at the first voxel centre)."""

    ids: tuple
    points: np.ndarray

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(ids) != len(pts):
            raise ValueError(f"{len(ids)} ids for {len(pts)} points")
        if len(set(ids)) != len(ids):
            raise ValueError("landmark ids must be unique")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.ids)

    def as_dict(self) -> dict:
        return dict(zip(self.ids, self.points))


def mm_to_normalized(points_mm, vol: Volume) -> np.ndarray:
    dims = np.asarray(vol.dims, dtype=np.float64)
    return -1.0 + 2.0 * (np.asarray(points_mm) / np.asarray(vol.spacing)) / (dims - 1.0)


def normalized_to_mm(points, vol: Volume) -> np.ndarray:
    dims = np.asarray(vol.dims, dtype=np.float64)
    return (np.asarray(points) + 1.0) * 0.5 * (dims - 1.0) * np.asarray(vol.spacing)


def inside_extent(landmarks: LandmarkSet, vol: Volume, tol: float = 1e-9) -> np.ndarray:
    p = mm_to_normalized(landmarks.points, vol)
    return np.all(np.abs(p) <= 1.0 + tol, axis=1)


def warp_landmarks(landmarks: LandmarkSet, field: np.ndarray, vol_meta: Volume) -> LandmarkSet:
    """Move each landmark ``x`` to ``x + u(x)`` (all in mm).

    ``field`` must live on ``vol_meta``'s grid. Landmarks outside the
    volume's physical extent are logged and passed through unchanged.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.shape != (3,) + tuple(vol_meta.dims):
        raise ValueError(f"field shape {field.shape} does not match volume dims {vol_meta.dims}")
    if len(landmarks) == 0:
        return landmarks
    inside = inside_extent(landmarks, vol_meta)
    for lid in np.asarray(landmarks.ids)[~inside]:
        log.warning("landmark %s lies outside the volume extent; left unchanged", lid)
    p = mm_to_normalized(landmarks.points, vol_meta)
    disp = sample_field(field, np.ascontiguousarray(p.T))  # (3, N)
    moved = normalized_to_mm(p + disp.T, vol_meta)
    out = np.where(inside[:, None], moved, landmarks.points)
    return LandmarkSet(landmarks.ids, out)


def landmark_errors(est: LandmarkSet, gt: LandmarkSet) -> np.ndarray:
    """Euclidean distance per landmark, in ``gt``'s id order."""
    if set(est.ids) != set(gt.ids):
        missing = sorted(set(est.ids) ^ set(gt.ids))
        raise ValueError(f"landmark id sets differ: {missing[:5]}")
    lookup = est.as_dict()
    diffs = np.array([lookup[i] for i in gt.ids]) - gt.points
    return np.linalg.norm(diffs, axis=1)


def median_absolute_error(est: LandmarkSet, gt: LandmarkSet) -> float:
    """Median Euclidean landmark error in mm (even counts average the middle pair)."""
    if len(gt) == 0:
        raise ValueError("need at least one landmark")
    return float(np.median(landmark_errors(est, gt)))


def robustness(initial_errors, final_errors) -> float:
    """Fraction of landmarks whose error strictly decreased."""
    initial_errors = np.asarray(initial_errors, dtype=np.float64)
    final_errors = np.asarray(final_errors, dtype=np.float64)
    if initial_errors.shape != final_errors.shape or initial_errors.ndim != 1:
        raise ValueError("error lists must be 1-D and of equal length")
    if initial_errors.size == 0:
        raise ValueError("need at least one landmark")
    return float(np.mean(final_errors < initial_errors))
