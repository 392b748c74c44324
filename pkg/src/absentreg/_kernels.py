"""Compiled trilinear sampling kernels.

All coordinates here are continuous voxel indices. Two boundary modes:
``clamp=False`` treats voxels outside the grid as zero (images), ``clamp=True``
clamps the sample position to the grid (displacement fields).
"""
import math

import numpy as np
from numba import config, njit, prange

# workqueue is always available; per-output writes keep results order-independent
config.THREADING_LAYER = "workqueue"


@njit(cache=True, inline="always")
def _axis_setup(x, n, clamp):
    # returns lower index, fraction, and d(fraction)/dx (0 when clamped)
    dfx = 1.0
    if clamp:
        if x <= 0.0:
            x = 0.0
            dfx = 0.0
        elif x >= n - 1:
            x = n - 1.0
            dfx = 0.0
        i0 = int(math.floor(x))
        if i0 > n - 2:
            i0 = n - 2
    else:
        # far outside: every neighbour is padding anyway, avoid int overflow
        if x < -2.0:
            x = -2.0
        elif x > n + 1.0:
            x = n + 1.0
        i0 = int(math.floor(x))
    return i0, x - i0, dfx


@njit(cache=True, parallel=True)
def sample(vol, px, py, pz, clamp, want_grad):
    """Sample every channel of ``vol`` (C, nx, ny, nz) at N points.

    Returns values (C, N) and, if requested, position derivatives (C, 3, N)
    with respect to voxel coordinates.
    """
    C, nx, ny, nz = vol.shape
    n = px.size
    out = np.zeros((C, n))
    if want_grad:
        grad = np.zeros((C, 3, n))
    else:
        grad = np.zeros((C, 3, 1))
    for p in prange(n):
        x = px[p]
        y = py[p]
        z = pz[p]
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
            continue
        i0, fx, dfx = _axis_setup(x, nx, clamp)
        j0, fy, dfy = _axis_setup(y, ny, clamp)
        k0, fz, dfz = _axis_setup(z, nz, clamp)
        for c in range(C):
            val = 0.0
            gx = 0.0
            gy = 0.0
            gz = 0.0
            for di in range(2):
                ii = i0 + di
                if ii < 0 or ii >= nx:
                    continue
                wx = fx if di == 1 else 1.0 - fx
                sx = 1.0 if di == 1 else -1.0
                for dj in range(2):
                    jj = j0 + dj
                    if jj < 0 or jj >= ny:
                        continue
                    wy = fy if dj == 1 else 1.0 - fy
                    sy = 1.0 if dj == 1 else -1.0
                    for dk in range(2):
                        kk = k0 + dk
                        if kk < 0 or kk >= nz:
                            continue
                        wz = fz if dk == 1 else 1.0 - fz
                        sz = 1.0 if dk == 1 else -1.0
                        v = vol[c, ii, jj, kk]
                        val += wx * wy * wz * v
                        if want_grad:
                            gx += sx * wy * wz * v
                            gy += wx * sy * wz * v
                            gz += wx * wy * sz * v
            out[c, p] = val
            if want_grad:
                grad[c, 0, p] = gx * dfx
                grad[c, 1, p] = gy * dfy
                grad[c, 2, p] = gz * dfz
    return out, grad


@njit(cache=True)
def sample_adjoint(upstream, px, py, pz, nx, ny, nz, clamp):
    """Transpose of :func:`sample` with respect to the sampled volume.

    Serial on purpose: the scatter must accumulate in a fixed order.
    """
    C, n = upstream.shape
    out = np.zeros((C, nx, ny, nz))
    for p in range(n):
        x = px[p]
        y = py[p]
        z = pz[p]
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
            continue
        i0, fx, _ = _axis_setup(x, nx, clamp)
        j0, fy, _ = _axis_setup(y, ny, clamp)
        k0, fz, _ = _axis_setup(z, nz, clamp)
        for di in range(2):
            ii = i0 + di
            if ii < 0 or ii >= nx:
                continue
            wx = fx if di == 1 else 1.0 - fx
            for dj in range(2):
                jj = j0 + dj
                if jj < 0 or jj >= ny:
                    continue
                wy = fy if dj == 1 else 1.0 - fy
                for dk in range(2):
                    kk = k0 + dk
                    if kk < 0 or kk >= nz:
                        continue
                    w = wx * wy * (fz if dk == 1 else 1.0 - fz)
                    for c in range(C):
                        out[c, ii, jj, kk] += w * upstream[c, p]
    return out
