"""Command-line entry point: ``spatialcomp {simulate,split,run,score,export}``."""

import argparse
import json
import os
import sys

from .errors import SpatialError
from .harness import (METHODS, CompetitionResult, export, load_config, load_dataset, load_or_simulate,
                      load_split, make_split, read_points_csv, run_competition, save_dataset, save_split,
                      score_predictions)
from .gpcore import PredictionResult, TrendSpec
from .scoring import score


def _overrides(args):
    out = {"seed": args.seed, "workers": args.workers}
    if getattr(args, "methods", None):
        out["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    return out


def cmd_simulate(args):
    cfg = load_config(args.config, _overrides(args))
    d = load_or_simulate(cfg)
    save_dataset(d, args.out)
    print(f"wrote {d.geometry.n_rows}x{d.geometry.n_cols} grid to {args.out}")
    return 0


def cmd_split(args):
    cfg = load_config(args.config, _overrides(args))
    d = load_dataset(args.data) if args.data else load_or_simulate(cfg)
    split = make_split(d, cfg["split"], int(cfg["seed"]))
    save_split(split, args.out)
    print(f"train {split.train.n_observed}  test {len(split.test_index)}  -> {args.out}")
    return 0


def cmd_run(args):
    cfg = load_config(args.config, _overrides(args))
    split = load_split(args.split, TrendSpec(cfg.get("trend_kind", "constant"))) if args.split else None
    res = run_competition(cfg, split=split)
    export(res, args.out, cfg)
    for r in res.reports:
        if r.status == "OK":
            print(f"{r.method:20s} MAE {r.MAE:.4f}  RMSE {r.RMSE:.4f}  CRPS {r.CRPS:.4f}  "
                  f"INT {r.INT:.4f}  CVG {r.CVG:.3f}  {r.run_time_min:.2f} min")
        else:
            print(f"{r.method:20s} FAILED  {getattr(r, 'error', '')}")
    return 0 if all(r.status == "OK" for r in res.reports) else 1


def cmd_score(args):
    rep = score_predictions(args.predictions, args.truth, args.method or "")
    print(json.dumps(rep.as_dict(), indent=2))
    return 0


def cmd_export(args):
    """Rebuild scores and surfaces from saved per-method predictions."""
    cfg = load_config(args.config, _overrides(args))
    split = load_split(args.split, TrendSpec(cfg.get("trend_kind", "constant")))
    pdir = os.path.join(args.run, "predictions")
    preds, reports = {}, []
    for fn in sorted(os.listdir(pdir)):
        if not fn.endswith(".csv"):
            continue
        name = fn[:-4]
        p = read_points_csv(os.path.join(pdir, fn))
        res = PredictionResult(p["mean"], p["se"], p["lower"], p["upper"], method=name)
        preds[name] = res
        reports.append(score(split.truth, res, name))
    export(CompetitionResult(reports, preds, split, 0.0), args.out, cfg)
    print(f"exported {len(reports)} methods to {args.out}")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults to the desk-scale simulation)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--workers", type=int, help="worker processes for parallel methods")
    parser = argparse.ArgumentParser(prog="spatialcomp",
                                     description="Scalable spatial prediction methods on gridded data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a gridded dataset")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("split", parents=[common], help="build a train/test split")
    p.add_argument("--data", help="gridded CSV (default: simulate from the config)")
    p.add_argument("--out", required=True, help="output directory for train.csv and truth.csv")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("run", parents=[common], help="run methods and export scores")
    p.add_argument("--methods", help="comma-separated method ids: " + ",".join(METHODS))
    p.add_argument("--split", help="directory written by 'split' (default: build from the config)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("score", parents=[common], help="score one predictions file")
    p.add_argument("predictions")
    p.add_argument("truth")
    p.add_argument("--method")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("export", parents=[common], help="re-export scores and surfaces from saved predictions")
    p.add_argument("--run", required=True, help="run directory holding predictions/")
    p.add_argument("--split", required=True, help="split directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SpatialError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
