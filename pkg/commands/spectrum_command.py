from __future__ import annotations

import argparse
import logging

from commands.run_command import config_from_args
from utils.agop_utils import spectrum, write_spectrum_csv
from utils.engine_utils import load_snapshot_matrix, run
from utils.linalg_utils import sym_eigvals


logger = logging.getLogger(__name__)


def cmd_spectrum(args: argparse.Namespace) -> int:
    """Eigenvalues and cumulative energy of G_t, from a snapshot or a live run."""
    if args.snapshot:
        values = sym_eigvals(load_snapshot_matrix(args.snapshot))
    else:
        result = run(config_from_args(args))
        values = spectrum(result.state.estimator)
    write_spectrum_csv(args.out, values)
    logger.info("Spectrum of %d eigenvalues written to %s", values.size, args.out)
    return 0
