"""Command-line entry point: ``icaenc <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import load_config
from .dataio import atomic_write_text
from .errors import ConfigError, IcaEncError
from .pipeline import Pipeline, match_subject_configs

STAGE_COMMANDS = ("preprocess", "ica-fit", "project", "features", "encode", "permtest", "fdr",
                  "aroma", "match-atlas", "feature-analysis", "report")


def _global(parser):
    parser.add_argument("--config", type=Path, help="pipeline config (JSON)")
    parser.add_argument("--seed", type=int, help="override ica.seed and stats.seed")
    parser.add_argument("--jobs", type=int, help="worker threads for permutation tests")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="icaenc", description="ICA-based encoding models for voxel time series.")
    parser.add_argument("--version", action="version", version=f"icaenc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset and a ready-to-run config")
    _global(p)
    p.add_argument("--spec", type=Path, help="JSON overrides for the synthetic spec")
    p.add_argument("--k", type=int, help="ICA component count in the emitted config")
    p.add_argument("--n-perm", type=int, help="permutation count in the emitted config")

    for name in STAGE_COMMANDS:
        p = sub.add_parser(name, help=f"run the pipeline through the {name} stage")
        _global(p)

    p = sub.add_parser("run-all", help="run every stage and write the report")
    _global(p)

    p = sub.add_parser("match-subjects", help="leave-one-out cross-subject component matching")
    _global(p)
    p.add_argument("--configs", type=Path, nargs="+", required=True, help="one config per subject")
    p.add_argument("--direction", choices=("temporal", "spatial"), default="temporal")
    p.add_argument("--top-n", type=int, default=5)
    p.add_argument("--signed", action="store_true", help="match on signed rather than absolute correlation")
    p.add_argument("--actual", action="store_true", help="match on actual instead of predicted test series")
    return parser


def _overrides(args):
    out = {}
    if args.seed is not None:
        out["ica.seed"] = args.seed
        out["stats.seed"] = args.seed
    if args.jobs is not None:
        out["jobs"] = args.jobs
    if args.out is not None:
        out["output_dir"] = str(args.out.resolve())
    return out


def _config(args):
    if args.config is None:
        raise ConfigError("--config: required for this command")
    return load_config(args.config, _overrides(args))


def cmd_synth(args):
    from .synth import SynthSpec, generate, write_dataset

    if args.out is None:
        raise ConfigError("--out: required for synth")
    spec_data = {}
    if args.spec is not None:
        try:
            spec_data = json.loads(args.spec.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"--spec: cannot read {args.spec} ({exc})") from exc
    if args.seed is not None:
        spec_data["seed"] = args.seed
    try:
        spec = SynthSpec(**spec_data)
    except TypeError as exc:
        raise ConfigError(f"--spec: {exc}") from exc
    path = write_dataset(generate(spec), args.out, k=args.k)
    if args.n_perm is not None or args.jobs is not None:
        cfg = json.loads(path.read_text())
        if args.n_perm is not None:
            cfg.setdefault("stats", {})["n_perm"] = args.n_perm
        if args.jobs is not None:
            cfg["jobs"] = args.jobs
        atomic_write_text(path, json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    print(path)
    return 0


def cmd_stage(args):
    pipe = Pipeline(_config(args))
    pipe.run(args.command)
    for rec in pipe.records:
        print(f"{rec.name}: {'cached' if rec.cached else 'done'}")
    return 0


def cmd_run_all(args):
    pipe = Pipeline(_config(args))
    report = pipe.run_all()
    for rec in pipe.records:
        print(f"{rec.name}: {'cached' if rec.cached else 'done'}")
    print(report)
    return 0


def cmd_match_subjects(args):
    overrides = _overrides(args)
    overrides.pop("output_dir", None)
    configs = [load_config(path, overrides) for path in args.configs]
    out = args.out or Path("match_subjects")
    summary, _ = match_subject_configs(configs, out, args.direction, args.top_n, args.signed, not args.actual)
    for row in summary.rows():
        print(f"rank {row['rank']}: match r {row['mean_match_r']:.3f}, eval r {row['mean_eval_r']:.3f}")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "run-all":
            return cmd_run_all(args)
        if args.command == "match-subjects":
            return cmd_match_subjects(args)
        return cmd_stage(args)
    except IcaEncError as exc:
        stage = getattr(exc, "stage", None)
        where = f" in stage {stage}" if stage else ""
        print(f"icaenc: error{where}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
