from __future__ import annotations

import argparse

from utils.config_utils import DEFAULT_TOML
from utils.storage_utils import atomic_open


def cmd_gen_config(args: argparse.Namespace) -> int:
    if args.out:
        with atomic_open(args.out) as handle:
            handle.write(DEFAULT_TOML)
    else:
        print(DEFAULT_TOML, end="")
    return 0
