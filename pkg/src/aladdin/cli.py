"""``aladdin`` command line: one subcommand per pipeline stage plus ``run``.

Exit codes: 0 on full success, 2 when some work failed (partial results are
kept), 1 on invalid input detected before any work.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import io
from . import pipeline as pl
from .registration import RegistrationConfig

logger = logging.getLogger("aladdin")

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 1, 2


def _triple(kind):
    def parse(text):
        parts = [p for p in text.replace("x", ",").split(",") if p]
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
        return tuple(kind(p) for p in parts)
    return parse


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise pl.ManifestError(f"{what} directory {path} does not exist")


def cmd_phantom(args):
    out = pl.generate_phantom(args.out, args.preset, args.dims, args.spacing, args.seed or 0,
                              args.noise, args.jitter, args.phases)
    print(f"phantom written to {out}")
    return EXIT_OK


def cmd_preprocess(args):
    _require_dir(args.series, "series")
    meta = pl.preprocess_dir(args.series, args.out, args.crop, not args.no_stabilize)
    print(json.dumps(io._clean(meta)))
    return EXIT_OK


def cmd_register(args):
    _require_dir(args.series, "series")
    cfg = RegistrationConfig(mi_bins=args.bins, bending_weight=args.bending_weight,
                             pyramid_levels=args.levels, max_iterations=args.max_iterations)
    pl.register_dir(args.series, args.out, cfg)
    print(f"fields written to {args.out}")
    return EXIT_OK


def cmd_strain(args):
    _require_dir(args.series, "series")
    _require_dir(args.dvf, "field")
    summary = pl.strain_dir(args.series, args.dvf, args.out, args.smoothing_iterations)
    print(f"peak strain phase {summary['peak_phase']}")
    return EXIT_OK


def cmd_atlas(args):
    if args.atlas_command == "build":
        data = io.read_json(args.subjects)
        base = Path(args.subjects).parent
        subjects = []
        for s in data["subjects"] if isinstance(data, dict) else data:
            rec = {"id": s["id"], "series": base / s["series"], "strain": base / s["strain"]}
            if s.get("landmarks"):
                rec["landmarks"] = base / s["landmarks"]
            _require_dir(rec["series"], "series")
            _require_dir(rec["strain"], "strain")
            subjects.append(rec)
        _, summary = pl.atlas_build_dir(subjects, args.out, args.cap_mm)
        print(json.dumps(io._clean(summary), sort_keys=True))
        return EXIT_OK
    _require_dir(args.atlas, "atlas")
    subj = Path(args.subject)
    rec = {"id": subj.name, "series": subj / "preprocessed", "strain": subj / "strain"}
    _require_dir(rec["series"], "series")
    summary = pl.atlas_map_dir(args.atlas, rec, args.out, args.cap_mm)
    print(json.dumps(io._clean(summary), sort_keys=True))
    return EXIT_OK


def cmd_biomarkers(args):
    _require_dir(args.series, "series")
    as_file = str(args.out).endswith(".json")
    summary = pl.biomarkers_dir(args.series, None if as_file else args.out, args.preactivation_phase,
                                json_path=args.out if as_file else None)
    print(f"LAEF {summary['LAEF']:.1f}%  LAaEF {summary['LAaEF']:.1f}%")
    return EXIT_OK


def cmd_eval(args):
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise pl.ManifestError("eval needs both --pred and --gt")
        rows = pl.segmentation_eval(args.pred, args.gt, args.out)
        print(f"{len(rows)} phases  min dice {min(r[2] for r in rows):.4f}  "
              f"max HD {max(r[1] for r in rows):.2f} mm")
        return EXIT_OK
    for p, what in ((args.series, "series"), (args.dvf, "field"), (args.strain, "strain"),
                    (args.truth, "truth")):
        _require_dir(p, what)
    out = pl.eval_dir(args.series, args.dvf, args.strain, args.truth, args.out, args.biomarkers)
    print(f"min dice {out['min_dice']:.4f}  max HD {out['max_hausdorff_mm']:.2f} mm")
    return EXIT_OK


def _manifest_for_stage(args, stages):
    manifest = pl.PipelineManifest.load(args.manifest).with_seed(args.seed)
    report = pl.run_pipeline(manifest, stages)
    print(json.dumps(io._clean(report.to_json()["stages"]), indent=2, sort_keys=True))
    return EXIT_PARTIAL if report.failed else EXIT_OK


def cmd_run(args):
    return _manifest_for_stage(args, pl.parse_stages(args.stages))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aladdin", description="Chamber-wall motion, strain and atlas toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--manifest", help="pipeline manifest; runs the subcommand's stage for every subject")
    p.add_argument("--stages", help="comma-separated stages for 'run' (default: all)")
    p.add_argument("--seed", type=int, help="override the manifest seed")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="write a synthetic phase series with ground truth")
    s.add_argument("--preset", default="cycle20")
    s.add_argument("--dims", type=_triple(int), default=(96, 96, 36))
    s.add_argument("--spacing", type=_triple(float), default=(1.72, 1.72, 2.0))
    s.add_argument("--phases", type=int, default=20)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--jitter", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("preprocess", help="crop, normalize and stabilize a series")
    s.add_argument("--in", "--series", dest="series")
    s.add_argument("--out")
    s.add_argument("--crop", type=_triple(int))
    s.add_argument("--no-stabilize", action="store_true")
    s.set_defaults(func=cmd_preprocess)

    defaults = RegistrationConfig()
    s = sub.add_parser("register", help="register every phase onto phase 0")
    s.add_argument("--series")
    s.add_argument("--out")
    s.add_argument("--bins", type=int, default=defaults.mi_bins)
    s.add_argument("--bending-weight", type=float, default=defaults.bending_weight)
    s.add_argument("--levels", type=int, default=defaults.pyramid_levels)
    s.add_argument("--max-iterations", type=int, default=defaults.max_iterations)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("strain", help="surface strains from a series and its fields")
    s.add_argument("--series")
    s.add_argument("--dvf")
    s.add_argument("--out")
    s.add_argument("--smoothing-iterations", type=int, default=20)
    s.set_defaults(func=cmd_strain)

    s = sub.add_parser("atlas", help="build an atlas or map a subject onto one")
    asub = s.add_subparsers(dest="atlas_command", required=True)
    b = asub.add_parser("build")
    b.add_argument("--subjects", required=True, help="JSON list of {id, series, strain[, landmarks]}")
    b.add_argument("--out", required=True)
    b.add_argument("--cap-mm", type=float, default=2.0)
    m = asub.add_parser("map")
    m.add_argument("--atlas", required=True)
    m.add_argument("--subject", required=True, help="subject output directory (preprocessed/, strain/)")
    m.add_argument("--out", required=True)
    m.add_argument("--cap-mm", type=float, default=2.0)
    s.set_defaults(func=cmd_atlas)

    s = sub.add_parser("biomarkers", help="volumes and ejection fractions")
    s.add_argument("--series")
    s.add_argument("--out")
    s.add_argument("--preactivation-phase", type=int, default=15)
    s.set_defaults(func=cmd_biomarkers)

    s = sub.add_parser("eval", help="compare outputs with phantom ground truth")
    s.add_argument("--series")
    s.add_argument("--dvf")
    s.add_argument("--strain")
    s.add_argument("--truth")
    s.add_argument("--biomarkers")
    s.add_argument("--pred", help="directory of predicted seg_XX masks (with --gt)")
    s.add_argument("--gt", help="directory of reference seg_XX masks")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("run", help="run the pipeline from a manifest")
    s.add_argument("--manifest", dest="run_manifest")
    s.add_argument("--stages", dest="run_stages")
    s.add_argument("--seed", dest="run_seed", type=int)
    s.set_defaults(func=cmd_run)
    return p


STAGE_OF = {"preprocess": "preprocess", "register": "register", "strain": "strain",
            "atlas": "atlas", "biomarkers": "biomarkers", "eval": "eval", "phantom": "phantom"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        args.manifest = args.run_manifest or args.manifest
        args.stages = args.run_stages or args.stages
        args.seed = args.run_seed if args.run_seed is not None else args.seed
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            if not args.manifest:
                raise pl.ManifestError("run needs --manifest")
            return cmd_run(args)
        if args.manifest:
            # manifest mode: run just this stage for every subject
            return _manifest_for_stage(args, [STAGE_OF[args.command]])
        needed = ("out",) if getattr(args, "pred", None) else ("series", "out")
        missing = [k for k in needed if hasattr(args, k) and getattr(args, k) is None]
        if missing:
            raise pl.ManifestError(f"{args.command} needs --{' --'.join(missing)} (or --manifest)")
        return args.func(args)
    except (pl.ManifestError, FileNotFoundError, ValueError) as err:
        print(f"aladdin: error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as err:  # reported, not swallowed silently
        logger.exception("aladdin %s failed", args.command)
        print(f"aladdin: {args.command} failed: {err}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
