"""Command-line entry point: `reid3d <stage> [options]`."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import PipelineConfig, load_config, parse_config
from .errors import ConfigError, ReidError, StageError
from .pipeline import RunContext, report, run_all, run_stage
from .roi import filter_detections, read_detections, write_detections
from .synth import build_dataset

log = logging.getLogger("reid3d")


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        out[k] = _merge(out.get(k, {}), v) if isinstance(v, dict) else v
    return out


def _overrides(args) -> dict:
    """Config fields set from stage-specific flags."""
    upd: dict = {}
    if getattr(args, "seed", None) is not None:
        upd["seed"] = args.seed
    synth = {k: getattr(args, a) for a, k in (("individuals", "individuals"), ("per", "sightings_per_individual"),
                                               ("train_count", "train_per_individual"),
                                               ("augment", "augment_factor"))
             if getattr(args, a, None) is not None}
    if synth:
        upd["synth"] = synth
    roi = {k: getattr(args, a) for a, k in (("conf", "conf_thresh"), ("nest_iou", "nest_iou"),
                                             ("containment", "containment")) if getattr(args, a, None) is not None}
    if roi:
        upd["roi"] = roi
    if getattr(args, "epochs", None) is not None:
        upd["train"] = {"epochs": args.epochs}
    if getattr(args, "k", None) is not None:
        upd["identify"] = {"k": args.k}
    if getattr(args, "run_dir", None) is not None:
        upd["paths"] = {"run_dir": args.run_dir}
    return upd


def _config(args) -> PipelineConfig:
    base = PipelineConfig().dump()
    if args.config:
        base = load_config(args.config).dump()
    return parse_config(_merge(base, _overrides(args)))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="pipeline config JSON")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS,
                        help="re-run stages even when up to date")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker processes")
    common.add_argument("--run-dir", default=argparse.SUPPRESS, help="run directory (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="reid3d", description=__doc__)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true", default=False)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--run-dir", default=None)
    p.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render the synthetic population")
    s.add_argument("--individuals", type=int)
    s.add_argument("--per", type=int, help="sightings per individual")
    s.add_argument("--train", dest="train_count", type=int, help="training sightings per individual")
    s.add_argument("--augment", type=int, help="total training copies per original")
    s.add_argument("--out", help="write the dataset here instead of <run-dir>/data")

    f = sub.add_parser("filter-rois", parents=[common], help="confidence/nesting filter and species gate")
    f.add_argument("--in", dest="inp", help="detections JSON lines (standalone mode)")
    f.add_argument("--out", help="kept detections JSON lines (standalone mode)")
    f.add_argument("--conf", type=float)
    f.add_argument("--nest-iou", type=float)
    f.add_argument("--containment", type=float)

    for name, text in (("fit", "fit the model to every accepted sighting"),
                       ("extract", "back-project textures and cut chips"),
                       ("enroll", "embed chips and write the identity database"),
                       ("eval", "score identification, fitting and detection"),
                       ("export-space", "2D projection of the identity space")):
        sub.add_parser(name, parents=[common], help=text)
    t = sub.add_parser("train", parents=[common], help="train one embedding net per chip source")
    t.add_argument("--epochs", type=int)
    i = sub.add_parser("identify", parents=[common], help="kNN identification of test sightings")
    i.add_argument("--k", type=int)
    r = sub.add_parser("run", parents=[common], help="run every stage and write the report")
    r.add_argument("--epochs", type=int)
    r.add_argument("--k", type=int)
    sub.add_parser("report", parents=[common], help="summarise a completed run")
    return p


def _standalone_filter(args, cfg: PipelineConfig) -> int:
    src = Path(args.inp)
    if not src.exists():
        raise StageError("filter-rois", f"missing input: {src}", exit_code=2)
    if not args.out:
        raise StageError("filter-rois", "--out is required with --in", exit_code=2)
    kept = filter_detections(read_detections(src), cfg.roi.conf_thresh, cfg.roi.nest_iou, cfg.roi.containment)
    write_detections(args.out, kept)
    print(f"kept {len(kept)} detections -> {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        ctx = RunContext(Path(cfg.paths.run_dir), cfg, args.force, max(1, args.jobs))
        cmd = args.command
        if cmd == "synth" and args.out:
            build_dataset(cfg.synth.build(cfg.seed), args.out, jobs=ctx.jobs)
            print(f"dataset written to {args.out}")
            return 0
        if cmd == "filter-rois" and args.inp:
            return _standalone_filter(args, cfg)
        if cmd == "run":
            out = run_all(ctx)
            print((ctx.run_dir / "report.txt").read_text(), end="")
            return 0 if len(out["accuracy"]) == 3 else 1
        if cmd == "report":
            report(ctx.run_dir)
            print((ctx.run_dir / "report.txt").read_text(), end="")
            return 0
        ran = run_stage(cmd, ctx)
        print(f"{cmd}: {'done' if ran else 'up to date (use --force to re-run)'}")
        return 0
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ReidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
