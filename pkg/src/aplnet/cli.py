"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from aplnet import experiments
from aplnet.archive import ArchiveError
from aplnet.config import ExperimentConfig, load_config
from aplnet.layers import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class _UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_experiment_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file (supports 'include = other.cfg')")
    for f in fields(ExperimentConfig):
        if f.type == "bool":
            p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name,
                           action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar="V")


def _experiment_config(args) -> ExperimentConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig)
                 if getattr(args, f.name) is not None}
    return load_config(args.config, overrides).validate()


def build_parser() -> argparse.ArgumentParser:
    parser = _UsageParser(prog="aplnet", description="Train and analyse networks with learned activations.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_UsageParser)

    p = sub.add_parser("train", help="train one configuration over several seeds")
    _add_experiment_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("sweep-s", help="baseline, frozen S=1 and one row per S")
    _add_experiment_flags(p)
    p.add_argument("--S-values", dest="S_values", type=int, nargs="+", default=[1, 2, 5, 10])
    p.add_argument("--skip-frozen-row", dest="include_frozen", action="store_false")

    p = sub.add_parser("sweep-k", help="pick the leaky ReLU slope by validation error")
    _add_experiment_flags(p)
    p.add_argument("--k-values", dest="k_values", type=float, nargs="+",
                   default=list(experiments.LEAKY_K_GRID))

    p = sub.add_parser("export-activations", help="write learned activation curves as CSV")
    p.add_argument("checkpoint")
    p.add_argument("--layers", default="all", help="'all' or comma list of layer indices")
    p.add_argument("--grid", nargs=3, default=["-5", "5", "1001"], metavar=("XMIN", "XMAX", "N"))
    p.add_argument("--out", default=None, help="output folder (default: next to the checkpoint)")
    return parser


def run(args) -> int:
    if args.verb == "train":
        report = experiments.cmd_train(_experiment_config(args))
        mean, std = report.summary()
        print(f"test error {mean:.4f} (std {std:.4f}); report: {report.csv_path}")
        return EXIT_OK if report.ok else EXIT_RUNTIME
    if args.verb == "eval":
        metrics = experiments.cmd_eval(args.checkpoint, args.manifest, args.split)
        print(" ".join(f"{k}={v:.6g}" for k, v in metrics.items()))
        return EXIT_OK
    if args.verb == "sweep-s":
        cfg = _experiment_config(args)
        rows = experiments.cmd_sweep_s(cfg, args.S_values, args.include_frozen)
        print(Path(cfg.out_dir, "sweep_s.txt").read_text(), end="")
        return EXIT_OK if all(r.n_ok == len(r.results) for r in rows) else EXIT_RUNTIME
    if args.verb == "sweep-k":
        best, rows = experiments.cmd_sweep_k(_experiment_config(args), args.k_values)
        print(f"selected k = {best:g}")
        return EXIT_OK if all(r.n_ok == len(r.results) for r in rows) else EXIT_RUNTIME
    if args.verb == "export-activations":
        try:
            grid = (float(args.grid[0]), float(args.grid[1]), int(args.grid[2]))
        except ValueError:
            raise ConfigError(f"bad grid {args.grid}") from None
        for path in experiments.cmd_export_activations(args.checkpoint, args.layers, grid, args.out):
            print(path)
        return EXIT_OK
    raise AssertionError(args.verb)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, ArchiveError, FileNotFoundError) as exc:
        print(f"aplnet: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"aplnet: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
