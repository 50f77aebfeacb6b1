"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from . import autodiff, data, experiment, model, selftest
from .experiment import ConfigError, ExperimentConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON file of ExperimentConfig keys")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--out", help="run directory")
    p.add_argument("--preset", help=f"dataset preset ({', '.join(sorted(data.PRESETS))})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zslattack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen": "generate the synthetic dataset and print its statistics",
        "train": "train the model and write the checkpoint and loss trace",
        "attack": "run the attack sweep on the test split",
        "eval": "evaluate clean and attacked test splits",
        "report": "consolidate evaluation reports into one table",
        "run": "gen, train, attack, eval and report in sequence",
        "selftest": "gradient checks and metric oracles",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _common(p)
        if name == "eval":
            p.add_argument("--input", action="append", help="evaluate only this ZADT file (repeatable)")
        if name == "report":
            p.add_argument("--runs", nargs="+", help="run directories to merge (default: --out)")
        if name == "selftest":
            p.add_argument("--models", type=int, default=50, help="number of random tiny models")
    return parser


def load_config(args) -> ExperimentConfig:
    overrides = {k: getattr(args, k) for k in ("seed", "out", "preset") if getattr(args, k) is not None}
    if args.config:
        return ExperimentConfig.from_file(args.config, **overrides)
    return ExperimentConfig.from_dict(overrides)


def _dispatch(args) -> int:
    if args.command == "selftest":
        ok = True
        for name, passed, detail in selftest.run(args.models):
            print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
            ok &= passed
        return EXIT_OK if ok else EXIT_NUMERIC

    cfg = load_config(args)
    if args.command == "gen":
        path, stats = experiment.cmd_gen(cfg)
        print(experiment.format_stats(stats, cfg.preset))
        print(f"wrote {path}")
    elif args.command == "train":
        path = experiment.cmd_train(cfg)
        print(f"wrote {path} (gamma_star in {path.with_suffix('.json').name})")
    elif args.command == "attack":
        for path in experiment.cmd_attack(cfg):
            print(f"wrote {path}")
    elif args.command == "eval":
        for path in experiment.cmd_eval(cfg, args.input):
            print(f"wrote {path}")
    elif args.command == "report":
        path, rows = experiment.cmd_report(cfg, args.runs)
        if path is None:
            print("no evaluation reports found; nothing to consolidate")
        else:
            print(experiment.format_table(rows), end="")
            print(f"wrote {path}")
    elif args.command == "run":
        rows = experiment.run_all(cfg)
        print(experiment.format_table(rows), end="")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _dispatch(args)
    except (ConfigError, KeyError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.FormatError, model.DatasetError, model.LabelError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (autodiff.NumericError, autodiff.DegenerateInputError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
