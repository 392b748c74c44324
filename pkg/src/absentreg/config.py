"""Pipeline configuration: defaults for every stage and a strict TOML loader."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .affine import AffineConfig
from .errors import InputError
from .losses import SimilaritySpec
from .masks import MaskParams
from .nonrigid import NonrigidConfig

STAGES = ("affine", "dirac", "instopt")


@dataclass(frozen=True)
class PipelineConfig:
    affine: AffineConfig = field(default_factory=AffineConfig)
    dirac: NonrigidConfig = field(default_factory=NonrigidConfig.dirac)
    instopt: NonrigidConfig = field(default_factory=NonrigidConfig)
    stages: tuple = STAGES
    write_warped: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stages", parse_stages(self.stages))


def parse_stages(stages) -> tuple:
    if isinstance(stages, str):
        stages = [s.strip() for s in stages.split(",") if s.strip()]
    stages = tuple(stages)
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise InputError(f"unknown stage(s) {unknown}; choose from {list(STAGES)}")
    if len(set(stages)) != len(stages):
        raise InputError(f"stage listed twice in {list(stages)}")
    # stages always run in pipeline order
    return tuple(s for s in STAGES if s in stages)


# key -> kind; "levels" marks per-level lists whose length must equal n_levels
_AFFINE_KEYS = {
    "n_levels": "int",
    "max_dim": "dims",
    "min_dim": "dims",
    "lr_per_level": "levels_float",
    "max_iter_per_level": "levels_int",
    "ngf_epsilon": "float",
    "channels": "channels",
}
_NONRIGID_KEYS = {
    "n_levels": "int",
    "max_dim": "dims",
    "min_dim": "dims",
    "lr_per_level": "levels_float",
    "max_iter_per_level": "levels_int",
    "grid_points_min": "dims",
    "grid_points_max": "dims",
    "lambda_reg_per_level": "levels_float",
    "lambda_inv_per_level": "levels_float",
    "lambda_m": "float",
    "mask_alpha": "float",
    "mask_filter_halfwidth": "int",
    "ncc_window": "int",
    "ncc_scales": "int",
    "mask_update_interval": "int",
    "channels": "channels",
}
_TOP_KEYS = {"stages", "write_warped", "affine", "dirac", "instopt"}


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _convert(section: str, key: str, kind: str, value):
    name = f"{section}.{key}"
    if kind == "int":
        if not _is_int(value):
            raise InputError(f"{name} must be an integer, got {value!r}")
        return value
    if kind == "float":
        if not _is_num(value):
            raise InputError(f"{name} must be a number, got {value!r}")
        return float(value)
    if kind == "dims":
        if not (isinstance(value, list) and len(value) == 3 and all(_is_int(v) for v in value)):
            raise InputError(f"{name} must be a list of three integers, got {value!r}")
        return tuple(value)
    if kind == "channels":
        if value == "all":
            return None
        if not (isinstance(value, list) and value and all(_is_int(v) and v >= 0 for v in value)):
            raise InputError(f"{name} must be \"all\" or a non-empty list of channel indices, got {value!r}")
        return tuple(value)
    if kind in ("levels_int", "levels_float"):
        check = _is_int if kind == "levels_int" else _is_num
        if not (isinstance(value, list) and all(check(v) for v in value)):
            what = "integers" if kind == "levels_int" else "numbers"
            raise InputError(f"{name} must be a list of {what}, got {value!r}")
        return tuple(value) if kind == "levels_int" else tuple(float(v) for v in value)
    raise AssertionError(kind)


def _section(name: str, table, keys: dict, default):
    if not isinstance(table, dict):
        raise InputError(f"[{name}] must be a table")
    unknown = sorted(set(table) - set(keys))
    if unknown:
        raise InputError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    vals = {k: _convert(name, k, keys[k], v) for k, v in table.items()}
    n_levels = vals.get("n_levels", default.n_levels)
    for k, kind in keys.items():
        if kind.startswith("levels"):
            seq = vals.get(k, getattr(default, k))
            if len(seq) != n_levels:
                raise InputError(f"{name}.{k} has {len(seq)} entries but n_levels is {n_levels}")
    if isinstance(default, NonrigidConfig):
        sim = default.sim_spec
        mp = default.mask_params
        window = vals.pop("ncc_window", sim.window)
        scales = vals.pop("ncc_scales", sim.n_scales)
        alpha = vals.pop("mask_alpha", mp.alpha)
        half = vals.pop("mask_filter_halfwidth", mp.filter_halfwidth)
        try:
            vals["sim_spec"] = SimilaritySpec(window, scales)
            vals["mask_params"] = MaskParams(alpha, half)
        except ValueError as exc:
            raise InputError(f"[{name}]: {exc}") from exc
    try:
        return dataclasses.replace(default, **vals)
    except ValueError as exc:
        raise InputError(f"[{name}]: {exc}") from exc


def config_from_dict(doc: dict) -> PipelineConfig:
    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        raise InputError(f"unknown top-level key(s): {', '.join(unknown)}")
    base = PipelineConfig()
    affine = _section("affine", doc.get("affine", {}), _AFFINE_KEYS, base.affine)
    dirac = _section("dirac", doc.get("dirac", {}), _NONRIGID_KEYS, base.dirac)
    instopt = _section("instopt", doc.get("instopt", {}), _NONRIGID_KEYS, base.instopt)
    stages = doc.get("stages", list(STAGES))
    if not (isinstance(stages, list) and all(isinstance(s, str) for s in stages)):
        raise InputError(f"stages must be a list of stage names, got {stages!r}")
    write_warped = doc.get("write_warped", True)
    if not isinstance(write_warped, bool):
        raise InputError(f"write_warped must be true or false, got {write_warped!r}")
    return PipelineConfig(affine, dirac, instopt, tuple(stages), write_warped)


def load_config(path) -> PipelineConfig:
    """Read a TOML file; missing keys keep their defaults, unknown keys are errors."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"{path}: {exc}") from exc
    return config_from_dict(doc)
