"""End-to-end driver: affine stage, then the two non-rigid stages, with artifacts on disk."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .affine import register_affine
from .config import PipelineConfig
from .errors import InputError, NumericalError, RegistrationError
from .evaluation import LandmarkSet, landmark_errors, robustness, warp_landmarks
from .io import load_any, write_landmarks, write_volume
from .masks import correspondence_masks
from .nonrigid import register_nonrigid
from .volume import Volume, affine_to_field, warp_array

log = logging.getLogger(__name__)


class Report:
    """Line-delimited JSON records ``{"stage", "metric", "value"}``, flushed per line."""

    def __init__(self, path=None):
        self.records = []
        self._fh = None if path is None else open(path, "w")

    def add(self, stage: str, metric: str, value):
        if isinstance(value, (np.floating, np.integer)):
            value = value.item()
        rec = {"stage": stage, "metric": metric, "value": value}
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec) + "\n")
            self._fh.flush()

    def value(self, stage: str, metric: str):
        for rec in self.records:
            if rec["stage"] == stage and rec["metric"] == metric:
                return rec["value"]
        raise KeyError((stage, metric))

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass
class PipelineResult:
    u_bf: np.ndarray
    u_fb: np.ndarray
    m_bf: np.ndarray
    m_fb: np.ndarray
    A_bf: np.ndarray | None
    A_fb: np.ndarray | None
    report: Report
    stage_details: dict = field(default_factory=dict)


def load_scan(paths) -> Volume:
    """Stack one or more volume files into a single multi-channel volume."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    vols = [load_any(p) for p in paths]
    if not vols:
        raise InputError("no input volumes given")
    first = vols[0]
    for p, v in zip(paths[1:], vols[1:]):
        if v.dims != first.dims:
            raise InputError(f"{p}: dims {v.dims} differ from {paths[0]} {first.dims}")
        if not np.allclose(v.spacing, first.spacing):
            raise InputError(f"{p}: spacing {v.spacing} differs from {paths[0]} {first.spacing}")
    return Volume(np.concatenate([v.data for v in vols]), first.spacing)


def _field_volume(u, like: Volume) -> Volume:
    return Volume(u, like.spacing)


def _write_state(out: Path | None, B: Volume, F: Volume, u_bf, u_fb, m_bf, m_fb, cfg: PipelineConfig):
    if out is None:
        return
    write_volume(_field_volume(u_bf, F), out / "u_bf.rvol")
    write_volume(_field_volume(u_fb, B), out / "u_fb.rvol")
    write_volume(Volume(m_bf.astype(np.float64), F.spacing), out / "m_bf.rvol")
    write_volume(Volume(m_fb.astype(np.float64), B.spacing), out / "m_fb.rvol")
    if cfg.write_warped:
        write_volume(Volume(warp_array(B.data, u_bf), F.spacing), out / "warped_baseline.rvol")


def _landmark_metrics(report: Report, stage: str, lm_f, lm_b, F: Volume, u_bf, initial):
    est = warp_landmarks(lm_f, u_bf, F)
    err = landmark_errors(est, lm_b)
    report.add(stage, "mae", float(np.median(err)))
    if initial is not None:
        report.add(stage, "robustness", robustness(initial, err))
    return err


def run_pipeline(
    baseline,
    followup,
    cfg: PipelineConfig = PipelineConfig(),
    out_dir=None,
    landmarks_followup: LandmarkSet | None = None,
    landmarks_baseline: LandmarkSet | None = None,
) -> PipelineResult:
    """Register ``baseline`` to ``followup`` with the enabled stages.

    Inputs may be volumes or lists of file paths (one channel set per file).
    Follow-up landmarks are mapped into the baseline frame with ``u_bf``;
    when baseline landmarks are also given, per-stage MAE and robustness
    are reported. Artifacts are rewritten after each completed stage.
    """
    B = baseline if isinstance(baseline, Volume) else load_scan(baseline)
    F = followup if isinstance(followup, Volume) else load_scan(followup)
    if B.dims != F.dims:
        raise InputError(f"baseline dims {B.dims} differ from follow-up dims {F.dims}")
    if B.channels != F.channels:
        raise InputError(f"baseline has {B.channels} channel(s), follow-up has {F.channels}")
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    report = Report(None if out is None else out / "report.jsonl")
    try:
        return _run(B, F, cfg, out, report, landmarks_followup, landmarks_baseline)
    finally:
        report.close()


def _run(B, F, cfg, out, report, lm_f, lm_b):
    dims = F.dims
    u_bf, u_fb = np.zeros((3,) + dims), np.zeros((3,) + dims)
    A_bf = A_fb = None
    pre = (None, None)
    details = {}
    report.add("initial", "stages", ",".join(cfg.stages))
    initial_err = None
    if lm_f is not None and lm_b is not None:
        initial_err = _landmark_metrics(report, "initial", lm_f, lm_b, F, u_bf, None)
    m_bf, m_fb = np.zeros(dims, bool), np.zeros(dims, bool)

    for stage in cfg.stages:
        log.info("running stage %s", stage)
        try:
            if stage == "affine":
                res = register_affine(B, F, cfg.affine)
                A_bf, A_fb = res.A_bf, res.A_fb
                u_bf, u_fb = affine_to_field(A_bf, dims), affine_to_field(A_fb, dims)
                pre = (u_bf, u_fb)
                sel = cfg.affine.channels
                m_bf, m_fb, info = correspondence_masks(u_bf, u_fb, B.select(sel).data, F.select(sel).data)
                details[stage] = res.report
                if not res.report.get("degenerate"):
                    for d in ("bf", "fb"):
                        report.add(stage, f"ngf_{d}_initial", res.report[d]["initial_ngf"])
                        report.add(stage, f"ngf_{d}_final", res.report[d]["final_ngf"])
                else:
                    report.add(stage, "degenerate", True)
                if out is not None:
                    (out / "affine.json").write_text(json.dumps({"A_bf": A_bf.tolist(), "A_fb": A_fb.tolist()}, indent=1) + "\n")
            else:
                ncfg = cfg.dirac if stage == "dirac" else cfg.instopt
                # the affine result is a pre-alignment the smoothness term does not penalize
                res = register_nonrigid(B, F, u_bf, u_fb, ncfg, *pre)
                u_bf, u_fb, m_bf, m_fb = res.u_bf, res.u_fb, res.m_bf, res.m_fb
                details[stage] = res.report
                report.add(stage, "objective_initial", res.report["initial_objective"])
                report.add(stage, "objective_final", res.report["final_objective"])
            report.add(stage, "mask_fraction_bf", float(np.mean(m_bf)))
            report.add(stage, "mask_fraction_fb", float(np.mean(m_fb)))
        except (RegistrationError, ValueError) as exc:
            report.add(stage, "error", str(exc))
            kind = NumericalError if isinstance(exc, NumericalError) else InputError
            raise kind(f"stage {stage}: {exc}") from exc
        if initial_err is not None:
            _landmark_metrics(report, stage, lm_f, lm_b, F, u_bf, initial_err)
        _write_state(out, B, F, u_bf, u_fb, m_bf, m_fb, cfg)

    if initial_err is not None:
        _landmark_metrics(report, "final", lm_f, lm_b, F, u_bf, initial_err)
    if not cfg.stages:
        _write_state(out, B, F, u_bf, u_fb, m_bf, m_fb, cfg)
    if out is not None and lm_f is not None:
        write_landmarks(warp_landmarks(lm_f, u_bf, F), out / "landmarks_followup_via_u_bf.csv")
        write_landmarks(warp_landmarks(lm_f, u_fb, B), out / "landmarks_followup_via_u_fb.csv")
    return PipelineResult(u_bf, u_fb, m_bf, m_fb, A_bf, A_fb, report, details)
