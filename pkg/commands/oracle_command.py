from __future__ import annotations

import argparse
import csv
import sys

from utils.oracle_utils import format_table, run_oracles
from utils.storage_utils import atomic_open


ORACLE_FAILURE = 3


def cmd_oracle(args: argparse.Namespace) -> int:
    reports = run_oracles(trials=args.trials, seed=args.seed or 0, fault=args.inject_fault)
    print(format_table(reports))
    if args.out:
        with atomic_open(args.out) as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["suite", "trial", "seed", "passed", "detail"])
            for report in reports:
                for result in report.results:
                    writer.writerow([result.suite, result.trial, result.seed, int(result.passed), result.detail])
    failed = [report for report in reports if not report.passed]
    for report in failed:
        first = report.failures[0]
        print(
            f"oracle failure: {report.suite} (seed {first.seed}, trial {first.trial}): {first.detail}",
            file=sys.stderr,
        )
    return ORACLE_FAILURE if failed else 0
