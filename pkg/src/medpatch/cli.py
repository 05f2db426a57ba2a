"""``medpatch`` command line entry point.

Exit codes: 0 on success, 1 on validation errors, 2 when a prerequisite
stage has not been run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ExperimentConfig
from .errors import MedPatchError, PrerequisiteError
from .pipeline import PIPELINE, STAGES, run_pipeline, run_stage


def build_parser():
    parser = argparse.ArgumentParser(prog="medpatch", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("stage", choices=STAGES + ("all",), help="stage to run; 'all' runs the full pipeline")
    parser.add_argument("--config", help="experiment config JSON")
    parser.add_argument("--out", help="output directory (overrides out_dir in the config)")
    parser.add_argument("--seed", type=int, help="experiment seed")
    src = parser.add_mutually_exclusive_group()
    src.add_argument("--data", help="embedding ingestion file (JSON lines)")
    src.add_argument("--synth", help="synthetic generator config JSON")
    parser.add_argument("--task", choices=("mortality", "conditions"))
    parser.add_argument("--theta", type=float, help="confidence threshold")
    parser.add_argument("--patching", choices=("confidence", "entropy"))
    parser.add_argument("--theta-entropy", type=float, dest="theta_entropy")
    parser.add_argument("--ablation", type=int, choices=range(5))
    parser.add_argument("--ece-bins", type=int, dest="ece_bins")
    parser.add_argument("--replicates", type=int)
    parser.add_argument("--metric-seed", type=int, dest="metric_seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    data = None
    if args.data:
        data = {"path": args.data}
    elif args.synth:
        with open(args.synth, encoding="utf-8") as fh:
            data = {"synth": json.load(fh)}
    return cfg.with_overrides(**{
        "data": data, "seed": args.seed, "task": args.task, "theta": args.theta, "patching": args.patching,
        "theta_entropy": args.theta_entropy, "ablation": args.ablation, "calibration.ece_bins": args.ece_bins,
        "metrics.replicates": args.replicates, "metrics.seed": args.metric_seed, "out_dir": args.out,
    })


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        out = cfg["out_dir"]
        if not out:
            raise MedPatchError("no output directory: pass --out or set out_dir in the config")
        if args.stage == "all":
            run_pipeline(cfg, out, PIPELINE)
        else:
            entry = run_stage(args.stage, cfg, out)
            print(json.dumps({args.stage: entry}, indent=2, sort_keys=True))
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MedPatchError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
