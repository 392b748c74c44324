"""Command-line entry point: ``register``, ``eval``, ``synth`` and ``convert``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig, load_config, parse_stages
from .errors import InputError, NumericalError
from .evaluation import landmark_errors, robustness, warp_landmarks
from .io import load_any, read_landmarks, read_volume, save_any, write_landmarks, write_volume
from .pipeline import run_pipeline
from .synth import make_case, random_affine
from .volume import Volume

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3


def _cmd_register(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.stages is not None:
        stages = parse_stages(args.stages) if args.stages.strip() else ()
        cfg = PipelineConfig(cfg.affine, cfg.dirac, cfg.instopt, stages, cfg.write_warped)
    lm_f = lm_b = None
    if args.landmarks:
        if len(args.landmarks) > 2:
            raise InputError("--landmarks takes the follow-up file and optionally the baseline file")
        lm_f = read_landmarks(args.landmarks[0])
        if len(args.landmarks) == 2:
            lm_b = read_landmarks(args.landmarks[1])
    res = run_pipeline(args.baseline, args.followup, cfg, args.out, lm_f, lm_b)
    for rec in res.report.records:
        if rec["metric"] in ("mae", "robustness"):
            print(json.dumps(rec))
    return EXIT_OK


def _cmd_eval(args) -> int:
    field = read_volume(args.field)
    if field.channels != 3:
        raise InputError(f"{args.field}: a displacement field needs 3 channels, got {field.channels}")
    lm_f = read_landmarks(args.followup_landmarks)
    lm_b = read_landmarks(args.baseline_landmarks)
    try:
        initial = landmark_errors(lm_f, lm_b)
        final = landmark_errors(warp_landmarks(lm_f, field.data, field), lm_b)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    for metric, value in (
        ("mae_initial", float(np.median(initial))),
        ("mae_final", float(np.median(final))),
        ("robustness", robustness(initial, final)),
    ):
        print(json.dumps({"stage": "eval", "metric": metric, "value": value}))
    return EXIT_OK


def _cmd_synth(args) -> int:
    dims = tuple(args.dims)
    affine = None
    if args.rotation > 0 or args.translation > 0 or args.scale > 0:
        affine = random_affine(
            dims,
            args.seed,
            max_rotation_deg=args.rotation,
            scale_range=(1.0 - args.scale, 1.0 + args.scale),
            max_translation_voxels=args.translation,
            exact=args.exact_affine,
        )
    try:
        case = make_case(dims, args.amplitude, args.hole_radius, args.seed, affine=affine, n_blobs=args.blobs)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(case.baseline, out / "baseline.rvol")
    write_volume(case.followup, out / "followup.rvol")
    write_volume(Volume(case.true_field), out / "true_field.rvol")
    write_volume(Volume(case.true_absent.astype(np.float64)), out / "true_absent.rvol")
    write_landmarks(case.landmarks_followup, out / "landmarks_followup.csv")
    write_landmarks(case.landmarks_baseline, out / "landmarks_baseline.csv")
    meta = {"seed": case.seed, "dims": list(dims), "amplitude": args.amplitude,
            "hole_radius": args.hole_radius, "affine": case.true_affine.tolist()}
    (out / "case.json").write_text(json.dumps(meta, indent=1) + "\n")
    return EXIT_OK


def _cmd_convert(args) -> int:
    vol = load_any(args.input, spacing=tuple(args.spacing))
    save_any(vol, args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="absentreg", description="Bidirectional 3D registration with absent-correspondence masking.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("register", help="run the registration pipeline")
    r.add_argument("--baseline", nargs="+", required=True, help="baseline volume file(s), one per channel set")
    r.add_argument("--followup", nargs="+", required=True, help="follow-up volume file(s)")
    r.add_argument("--config", help="TOML configuration file")
    r.add_argument("--landmarks", nargs="+", metavar="CSV", help="follow-up landmarks, optionally followed by baseline landmarks")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--stages", help="comma-separated subset of affine,dirac,instopt")
    r.set_defaults(func=_cmd_register)

    e = sub.add_parser("eval", help="landmark metrics for a u_bf field")
    e.add_argument("--followup-landmarks", required=True)
    e.add_argument("--baseline-landmarks", required=True)
    e.add_argument("--field", required=True, help="u_bf field (.rvol, 3 channels, follow-up grid)")
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic case directory")
    s.add_argument("--out", required=True)
    s.add_argument("--dims", nargs=3, type=int, default=[64, 64, 64])
    s.add_argument("--amplitude", type=float, default=4.0, help="smooth field amplitude in voxels")
    s.add_argument("--hole-radius", type=float, default=0.0, help="resection hole radius in voxels")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--blobs", type=int, default=60)
    s.add_argument("--rotation", type=float, default=0.0, help="max affine rotation in degrees")
    s.add_argument("--translation", type=float, default=0.0, help="max affine translation in voxels")
    s.add_argument("--scale", type=float, default=0.0, help="max relative affine scale change")
    s.add_argument("--exact-affine", action="store_true", help="use the maximum of each affine range")
    s.set_defaults(func=_cmd_synth)

    c = sub.add_parser("convert", help="convert between .rvol, .npy and .npz")
    c.add_argument("input")
    c.add_argument("output")
    c.add_argument("--spacing", nargs=3, type=float, default=[1.0, 1.0, 1.0], help="spacing for .npy input")
    c.set_defaults(func=_cmd_convert)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
