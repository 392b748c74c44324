"""Volumes, displacement fields and the trilinear machinery shared by every stage.

Conventions
-----------
* Image data is stored channels-first, ``(C, nx, ny, nz)``; index ``i`` runs
  along x.
* Displacement fields are arrays of shape ``(3, nx, ny, nz)`` holding
  ``(ux, uy, uz)`` in normalized coordinates, where each axis spans
  ``[-1, 1]`` from the first to the last voxel centre. ``phi = Id + u``.
* Affine transforms are ``(3, 4)`` arrays acting on normalized coordinates.
* Images pad with zero outside the grid; fields clamp to the border.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import _kernels

__all__ = [
    "Volume",
    "identity_grid",
    "trilinear_sample",
    "sample_image",
    "sample_field",
    "sample_adjoint",
    "displaced_voxels",
    "warp_volume",
    "warp_array",
    "compose_displacement",
    "resample_to_dims",
    "resample_array",
    "resample_array_adjoint",
    "build_pyramid",
    "pyramid_dims",
    "spatial_gradient",
    "gradient_array",
    "gradient_array_adjoint",
    "upsample_field",
    "affine_to_field",
    "field_to_voxels",
    "check_field",
]


def _as_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise ValueError(f"expected 3 dims, got {dims}")
    return dims


@dataclass(frozen=True)
class Volume:
    """Multi-channel 3D scalar grid with physical voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise ValueError(f"volume data must be 3D or 4D (C, nx, ny, nz), got shape {data.shape}")
        if data.shape[0] < 1:
            raise ValueError("volume needs at least one channel")
        if min(data.shape[1:]) < 2:
            raise ValueError(f"all dims must be >= 2, got {data.shape[1:]}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        data = data.view()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing)

    def select(self, channels) -> "Volume":
        """Volume restricted to the given channel indices (``None`` keeps all)."""
        if channels is None:
            return self
        idx = list(channels)
        for c in idx:
            if not 0 <= c < self.channels:
                raise ValueError(f"channel {c} out of range for a {self.channels}-channel volume")
        return Volume(self.data[idx], self.spacing)


@lru_cache(maxsize=64)
def _axis_coords(n: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n)


def identity_grid(dims) -> np.ndarray:
    """Normalized coordinates of every voxel centre, shape (3, nx, ny, nz)."""
    nx, ny, nz = _as_dims(dims)
    return np.stack(np.meshgrid(_axis_coords(nx), _axis_coords(ny), _axis_coords(nz), indexing="ij"))


def _to_voxel(points: np.ndarray, dims):
    """Flattened voxel coordinates (px, py, pz) for normalized points (3, ...)."""
    return tuple(
        np.ascontiguousarray(((points[a] + 1.0) * (0.5 * (dims[a] - 1))).ravel(), dtype=np.float64)
        for a in range(3)
    )


def _half_extent(dims) -> np.ndarray:
    # voxels per normalized unit, per axis
    return 0.5 * (np.asarray(dims, dtype=np.float64) - 1.0)


def sample_image(data: np.ndarray, points: np.ndarray, with_grad: bool = False):
    """Sample image channels at normalized ``points`` (3, ...), zero padding.

    Returns values shaped (C, ...) and, with ``with_grad``, derivatives with
    respect to the normalized sample position, shaped (C, 3, ...).
    """
    return _sample(data, points, clamp=False, with_grad=with_grad)


def sample_field(field: np.ndarray, points: np.ndarray, with_grad: bool = False):
    """Sample a displacement field at normalized ``points``; border clamping."""
    return _sample(field, points, clamp=True, with_grad=with_grad)


def _sample(data, points, clamp, with_grad):
    data = np.ascontiguousarray(data, dtype=np.float64)
    return _sample_voxels(data, _to_voxel(points, data.shape[1:]), points.shape[1:], clamp, with_grad)


def _sample_voxels(data, coords, out_shape, clamp, with_grad):
    data = np.ascontiguousarray(data, dtype=np.float64)
    dims = data.shape[1:]
    vals, grad = _kernels.sample(data, *coords, clamp, with_grad)
    vals = vals.reshape((data.shape[0],) + tuple(out_shape))
    if not with_grad:
        return vals
    grad *= _half_extent(dims)[None, :, None]
    return vals, grad.reshape((data.shape[0], 3) + tuple(out_shape))


def displaced_voxels(field: np.ndarray):
    """Voxel coordinates of ``x + u(x)`` for a field on its own grid.

    Built from integer indices so that a zero field lands exactly on voxel
    centres.
    """
    dims = field.shape[1:]
    half = _half_extent(dims)
    coords = []
    for a in range(3):
        shape = [1, 1, 1]
        shape[a] = dims[a]
        idx = np.arange(dims[a], dtype=np.float64).reshape(shape)
        coords.append(np.ascontiguousarray((idx + field[a] * half[a]).ravel()))
    return tuple(coords)


def sample_adjoint(upstream: np.ndarray, coords, dims, clamp: bool) -> np.ndarray:
    """Transpose of sampling: scatter ``upstream`` (C, ...) back onto a (C, *dims) grid.

    ``coords`` are the voxel coordinates used for the forward sampling.
    """
    dims = _as_dims(dims)
    up = np.ascontiguousarray(upstream.reshape(upstream.shape[0], -1), dtype=np.float64)
    return _kernels.sample_adjoint(up, *coords, dims[0], dims[1], dims[2], clamp)


def trilinear_sample(vol: Volume, point, channel: int = 0) -> float:
    """Value of one channel at a single normalized point (zero outside)."""
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (3,):
        raise ValueError("point must be a 3-vector")
    if not np.all(np.isfinite(point)):
        raise ValueError(f"non-finite sample point {point}")
    if not 0 <= channel < vol.channels:
        raise ValueError(f"channel {channel} out of range")
    return float(sample_image(vol.data[channel : channel + 1], point.reshape(3, 1))[0, 0])


def check_field(field: np.ndarray, dims=None) -> np.ndarray:
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 4 or field.shape[0] != 3:
        raise ValueError(f"displacement field must have shape (3, nx, ny, nz), got {field.shape}")
    if dims is not None and tuple(field.shape[1:]) != tuple(dims):
        raise ValueError(f"field dims {field.shape[1:]} do not match {tuple(dims)}")
    return field


def warp_array(data: np.ndarray, field: np.ndarray, with_grad: bool = False):
    """``data(x + u(x))`` for image data (C, nx, ny, nz) and a matching field."""
    check_field(field, data.shape[1:])
    return _sample_voxels(data, displaced_voxels(field), field.shape[1:], False, with_grad)


def warp_volume(vol: Volume, field: np.ndarray) -> Volume:
    """Resample ``vol`` through ``phi = Id + field``; dims and spacing preserved."""
    return vol.with_data(warp_array(vol.data, field))


def compose_displacement(u_a: np.ndarray, u_b: np.ndarray) -> np.ndarray:
    """The field ``x -> u_b(x + u_a(x))`` (border-clamped sampling of ``u_b``)."""
    u_a = check_field(u_a)
    u_b = check_field(u_b, u_a.shape[1:])
    return _sample_voxels(u_b, displaced_voxels(u_a), u_a.shape[1:], True, False)


@lru_cache(maxsize=128)
def _interp_matrix(n_out: int, n_in: int) -> sp.csr_matrix:
    # linear interpolation between grids that both span [-1, 1]
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
    frac = pos - i0
    rows = np.repeat(np.arange(n_out), 2)
    cols = np.stack([i0, i0 + 1], axis=1).ravel()
    vals = np.stack([1.0 - frac, frac], axis=1).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))


def _apply_axis(arr: np.ndarray, mat, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, 0)
    shape = moved.shape
    out = mat @ moved.reshape(shape[0], -1)
    return np.moveaxis(np.asarray(out).reshape((mat.shape[0],) + shape[1:]), 0, axis)


def resample_array(arr: np.ndarray, new_dims) -> np.ndarray:
    """Separable trilinear resampling of the last three axes onto ``new_dims``."""
    new_dims = _as_dims(new_dims)
    if min(new_dims) < 2:
        raise ValueError(f"target dims must be >= 2 per axis, got {new_dims}")
    arr = np.asarray(arr, dtype=np.float64)
    lead = arr.ndim - 3
    for a in range(3):
        n_in = arr.shape[lead + a]
        if n_in != new_dims[a]:
            arr = _apply_axis(arr, _interp_matrix(new_dims[a], n_in), lead + a)
    return arr


def resample_array_adjoint(arr: np.ndarray, old_dims) -> np.ndarray:
    """Transpose of :func:`resample_array` (maps back to ``old_dims``)."""
    old_dims = _as_dims(old_dims)
    arr = np.asarray(arr, dtype=np.float64)
    lead = arr.ndim - 3
    for a in range(3):
        n_out = arr.shape[lead + a]
        if n_out != old_dims[a]:
            arr = _apply_axis(arr, _interp_matrix(n_out, old_dims[a]).T.tocsr(), lead + a)
    return arr


def resample_to_dims(vol: Volume, new_dims) -> Volume:
    """Trilinear resampling; spacing is rescaled to keep the physical extent."""
    new_dims = _as_dims(new_dims)
    if min(new_dims) < 2:
        raise ValueError(f"target dims must be >= 2 per axis, got {new_dims}")
    spacing = tuple(s * (n - 1) / (m - 1) for s, n, m in zip(vol.spacing, vol.dims, new_dims))
    return Volume(resample_array(vol.data, new_dims), spacing)


def pyramid_dims(dims, n_levels: int, max_dim, min_dim) -> list[tuple[int, int, int]]:
    """Level dims, coarse to fine.

    The finest level is ``min(dims, max_dim)``; each coarser level halves the
    previous one (floor) but never drops below ``min_dim`` (nor exceeds the
    finest level).
    """
    if n_levels < 1:
        raise ValueError("n_levels must be >= 1")
    finest = tuple(min(int(d), int(m)) for d, m in zip(dims, max_dim))
    levels = [finest]
    for _ in range(n_levels - 1):
        prev = levels[-1]
        levels.append(tuple(min(f, max(p // 2, int(lo))) for p, lo, f in zip(prev, min_dim, finest)))
    return levels[::-1]


def build_pyramid(vol: Volume, n_levels: int, max_dim, min_dim) -> list[Volume]:
    """Image pyramid (coarse to fine) built by trilinear resampling."""
    return [resample_to_dims(vol, d) for d in pyramid_dims(vol.dims, n_levels, max_dim, min_dim)]


def gradient_array(arr: np.ndarray) -> np.ndarray:
    """Gradient of a (nx, ny, nz) array in normalized units, shape (3, nx, ny, nz).

    Central differences inside, one-sided differences on the boundary.
    """
    steps = [2.0 / (n - 1) for n in arr.shape]
    return np.stack(np.gradient(arr, *steps, edge_order=1))


def _gradient_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    n = g.shape[axis]
    h = 2.0 / (n - 1)
    g = np.moveaxis(g, axis, 0)
    out = np.zeros_like(g)
    if n == 2:
        out[0] = -g[0] - g[1]
        out[1] = g[0] + g[1]
    else:
        out[0] -= g[0]
        out[1] += g[0]
        half = 0.5 * g[1:-1]
        out[2:] += half
        out[:-2] -= half
        out[-1] += g[-1]
        out[-2] -= g[-1]
    return np.moveaxis(out / h, 0, axis)


def gradient_array_adjoint(grad: np.ndarray) -> np.ndarray:
    """Transpose of :func:`gradient_array`: (3, nx, ny, nz) -> (nx, ny, nz)."""
    return sum(_gradient_axis_adjoint(grad[a], a) for a in range(3))


def spatial_gradient(vol: Volume, channel: int = 0) -> np.ndarray:
    """Spatial gradient of one channel in normalized units, (3, nx, ny, nz)."""
    return gradient_array(vol.data[channel])


def upsample_field(field: np.ndarray, new_dims) -> np.ndarray:
    """Trilinear resampling of each field component.

    Vectors are normalized-coordinate displacements, so no rescaling is needed.
    """
    return resample_array(check_field(field), new_dims)


def affine_to_field(A, dims) -> np.ndarray:
    """Displacement ``u(x) = A [x; 1] - x`` on the voxel grid of ``dims``."""
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (3, 4):
        raise ValueError(f"affine must be 3x4, got {A.shape}")
    grid = identity_grid(dims)
    mapped = np.einsum("ij,j...->i...", A[:, :3], grid) + A[:, 3].reshape(3, 1, 1, 1)
    return mapped - grid


def field_to_voxels(field: np.ndarray) -> np.ndarray:
    """Express a normalized field in voxel units of its own grid."""
    return field * _half_extent(field.shape[1:]).reshape(3, 1, 1, 1)
