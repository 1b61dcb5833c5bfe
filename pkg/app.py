from __future__ import annotations

import argparse
import logging
import sys
from typing import Callable, Sequence

from commands.config_command import cmd_gen_config
from commands.oracle_command import cmd_oracle
from commands.run_command import cmd_ablation, cmd_align, cmd_baseline, cmd_run, cmd_sweep
from commands.spectrum_command import cmd_spectrum
from utils.engine_utils import SWEEP_VALUES
from utils.errors import ConfigError, DataError, GoldError, ParseError


EXIT_CONFIG = 1
EXIT_RUNTIME = 2
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

logger = logging.getLogger("app")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the config/usage code."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_experiment_flags(parser: argparse.ArgumentParser, out_default: str | None) -> None:
    parser.add_argument("--config", help="TOML experiment file; defaults apply without one")
    parser.add_argument("--out", default=out_default, help="output file")
    parser.add_argument("--model", help="model checkpoint to load instead of pretraining")
    parser.add_argument("--seed", type=int, help="override engine.seed")
    parser.add_argument("--repeat", type=int, help="override stream.repeat (long-term setting)")
    parser.add_argument("--post-step-eval", action="store_true", help="score predictions after the update step")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gold", description="Golden-subspace continual test-time adaptation at desk scale.")
    parser.add_argument("--quiet", action="store_true", help="log warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="adapt over the stream and write the metrics CSV")
    _add_experiment_flags(run_parser, "metrics.csv")
    run_parser.add_argument("--snapshot", help="also save the final adaptation state as JSON")
    run_parser.add_argument("--save-model", help="also save the pretrained model as a checkpoint")
    run_parser.set_defaults(handler=cmd_run)

    baseline_parser = sub.add_parser("baseline", help="frozen model on the same stream")
    _add_experiment_flags(baseline_parser, "baseline.csv")
    baseline_parser.set_defaults(handler=cmd_baseline)

    spectrum_parser = sub.add_parser("spectrum", help="eigenvalues and cumulative energy of the AGOP matrix")
    _add_experiment_flags(spectrum_parser, "spectrum.csv")
    spectrum_parser.add_argument("--snapshot", help="read G from a snapshot instead of running")
    spectrum_parser.set_defaults(handler=cmd_spectrum)

    align_parser = sub.add_parser("align", help="subspace alignment at every basis refresh")
    _add_experiment_flags(align_parser, "align.csv")
    align_parser.set_defaults(handler=cmd_align)

    ablation_parser = sub.add_parser("ablation", help="compare subspace variants on one stream")
    _add_experiment_flags(ablation_parser, "ablation.csv")
    ablation_parser.set_defaults(handler=cmd_ablation)

    sweep_parser = sub.add_parser("sweep", help="vary one hyper-parameter on one pretrained model")
    _add_experiment_flags(sweep_parser, "sweep.csv")
    sweep_parser.add_argument("--param", required=True, choices=sorted(SWEEP_VALUES))
    sweep_parser.add_argument("--values", help="comma-separated values; a built-in range when omitted")
    sweep_parser.set_defaults(handler=cmd_sweep)

    oracle_parser = sub.add_parser("oracle", help="randomized property suites")
    oracle_parser.add_argument("--trials", type=int, default=200)
    oracle_parser.add_argument("--seed", type=int, default=0)
    oracle_parser.add_argument("--out", help="optional per-trial CSV")
    oracle_parser.add_argument("--inject-fault", default="none", help=argparse.SUPPRESS)
    oracle_parser.set_defaults(handler=cmd_oracle)

    config_parser = sub.add_parser("gen-config", help="print the commented default configuration")
    config_parser.add_argument("--out", help="write to a file instead of standard output")
    config_parser.set_defaults(handler=cmd_gen_config)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
    )
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except (ConfigError, ParseError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GoldError as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
