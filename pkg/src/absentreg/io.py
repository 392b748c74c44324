"""Native volume format (RVOL1), landmark CSV files and numpy conversion.

RVOL1 is five ASCII header lines followed by raw little-endian float32
samples, channel-major with x varying fastest::

    RVOL1
    dims <nx> <ny> <nz>
    spacing <sx> <sy> <sz>
    channels <C>
    dtype f32le
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .errors import InputError
from .evaluation import LandmarkSet
from .volume import Volume

MAGIC = "RVOL1"
_MAX_HEADER_LINE = 256


def _header_line(fh, offset: int, key: str, n_values: int):
    raw = fh.readline(_MAX_HEADER_LINE)
    if not raw.endswith(b"\n"):
        raise InputError(f"header line '{key}' missing or too long at byte {offset}")
    try:
        parts = raw.decode("ascii").split()
    except UnicodeDecodeError:
        raise InputError(f"non-ASCII header at byte {offset}") from None
    if len(parts) != n_values + 1 or parts[0] != key:
        raise InputError(f"expected '{key}' with {n_values} value(s) at byte {offset}, got {raw[:60]!r}")
    return parts[1:], offset + len(raw)


def read_volume(path) -> Volume:
    path = Path(path)
    try:
        fh = path.open("rb")
    except OSError as exc:
        raise InputError(f"cannot open volume {path}: {exc}") from exc
    with fh:
        magic = fh.readline(_MAX_HEADER_LINE)
        if magic.rstrip(b"\r\n") != MAGIC.encode():
            raise InputError(f"{path}: bad magic at byte 0, expected {MAGIC!r}, got {magic[:16]!r}")
        off = len(magic)
        dims_s, off_d = _header_line(fh, off, "dims", 3)
        spacing_s, off_s = _header_line(fh, off_d, "spacing", 3)
        chans_s, off_c = _header_line(fh, off_s, "channels", 1)
        dtype_s, data_off = _header_line(fh, off_c, "dtype", 1)
        try:
            dims = tuple(int(v) for v in dims_s)
            channels = int(chans_s[0])
        except ValueError:
            raise InputError(f"{path}: non-integer dims or channels in header (bytes {off}-{off_s})") from None
        try:
            spacing = tuple(float(v) for v in spacing_s)
        except ValueError:
            raise InputError(f"{path}: non-numeric spacing at byte {off_d}") from None
        if min(dims) < 1:
            raise InputError(f"{path}: dims must be positive, got {dims} at byte {off}")
        if channels < 1:
            raise InputError(f"{path}: channel count must be positive at byte {off_s}")
        if not all(math.isfinite(s) and s > 0 for s in spacing):
            raise InputError(f"{path}: spacing must be finite and positive at byte {off_d}")
        if dtype_s[0] != "f32le":
            raise InputError(f"{path}: unsupported dtype {dtype_s[0]!r} at byte {off_c}")
        payload = fh.read()
    nx, ny, nz = dims
    expected = 4 * channels * nx * ny * nz
    if len(payload) != expected:
        raise InputError(
            f"{path}: payload starting at byte {data_off} has {len(payload)} bytes, expected {expected}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise InputError(f"{path}: non-finite sample at byte {data_off + 4 * int(bad[0])}")
    data = flat.reshape(channels, nz, ny, nx).transpose(0, 3, 2, 1).astype(np.float64)
    try:
        return Volume(data, spacing)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc


def write_volume(vol: Volume, path) -> None:
    """Write ``vol`` as RVOL1; samples are stored as float32."""
    data = np.asarray(vol.data)
    C, nx, ny, nz = data.shape
    f32 = data.astype("<f4")
    if not np.all(np.isfinite(f32)):
        raise ValueError("volume has values that are not finite in float32")
    header = (
        f"{MAGIC}\ndims {nx} {ny} {nz}\n"
        f"spacing {vol.spacing[0]!r} {vol.spacing[1]!r} {vol.spacing[2]!r}\n"
        f"channels {C}\ndtype f32le\n"
    )
    with Path(path).open("wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(f32.transpose(0, 3, 2, 1)).tobytes())


def read_landmarks(path) -> LandmarkSet:
    """CSV with header ``Landmark,X,Y,Z`` (millimetres)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8-sig")
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read landmarks {path}: {exc}") from exc
    rows = csv.reader(text.splitlines())
    ids, pts, seen = [], [], {}
    header_seen = False
    for lineno, row in enumerate(rows, start=1):
        row = [c.strip() for c in row]
        if not row or all(c == "" for c in row):
            continue
        if not header_seen:
            if [c.lower() for c in row] != ["landmark", "x", "y", "z"]:
                raise InputError(f"{path}:{lineno}: expected header 'Landmark,X,Y,Z', got {','.join(row)!r}")
            header_seen = True
            continue
        if len(row) != 4:
            raise InputError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        lid = row[0]
        if lid == "":
            raise InputError(f"{path}:{lineno}: empty landmark id")
        if lid in seen:
            raise InputError(f"{path}:{lineno}: duplicate landmark id {lid!r} (first on line {seen[lid]})")
        try:
            xyz = [float(c) for c in row[1:]]
        except ValueError:
            raise InputError(f"{path}:{lineno}: non-numeric coordinate in {row[1:]}") from None
        if not all(math.isfinite(v) for v in xyz):
            raise InputError(f"{path}:{lineno}: non-finite coordinate")
        seen[lid] = lineno
        ids.append(lid)
        pts.append(xyz)
    if not header_seen:
        raise InputError(f"{path}: empty landmark file")
    return LandmarkSet(tuple(ids), np.array(pts, dtype=np.float64).reshape(-1, 3))


def write_landmarks(landmarks: LandmarkSet, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Landmark", "X", "Y", "Z"])
        for lid, p in zip(landmarks.ids, landmarks.points):
            w.writerow([lid] + [f"{v:.6f}" for v in p])


def _array_to_volume(arr, spacing) -> Volume:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    try:
        return Volume(arr, tuple(spacing))
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def load_any(path, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Read ``.rvol``, ``.npy`` (array ``(C,)nx,ny,nz``) or ``.npz`` (keys ``data`` and optional ``spacing``)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".rvol":
        return read_volume(path)
    try:
        if suffix == ".npy":
            return _array_to_volume(np.load(path, allow_pickle=False), spacing)
        if suffix == ".npz":
            with np.load(path, allow_pickle=False) as z:
                if "data" not in z:
                    raise InputError(f"{path}: npz archive needs a 'data' array")
                sp = tuple(z["spacing"]) if "spacing" in z else spacing
                return _array_to_volume(z["data"], sp)
    except (OSError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"cannot read {path}: {exc}") from exc
    raise InputError(f"unsupported volume extension {suffix!r} for {path}")


def save_any(vol: Volume, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".rvol":
        write_volume(vol, path)
    elif suffix == ".npy":
        np.save(path, vol.data)
    elif suffix == ".npz":
        np.savez(path, data=vol.data, spacing=np.asarray(vol.spacing))
    else:
        raise InputError(f"unsupported volume extension {suffix!r} for {path}")
