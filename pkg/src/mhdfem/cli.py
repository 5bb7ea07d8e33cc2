"""Command-line front end over the run harness.

Exit codes: 0 success, 1 solver failure (singular system, aborted study,
capability limit), 2 configuration error.
"""

import argparse
import contextlib
import ctypes
import json
import os
import sys

from .harness import (ConfigError, _dump_json, load_config, run_diagnose,
                      run_solve, run_study)
from .linalg import SingularSystemError
from .operators import CapabilityError


def _flush_all_stdio():
    sys.stdout.flush()
    try:
        ctypes.CDLL(None).fflush(None)
    except (OSError, AttributeError):
        pass


@contextlib.contextmanager
def _stdout_reserved():
    """Park file descriptor 1 on stderr while computing.

    The factorization library reports singular systems by printing to the
    C stdout stream, which would corrupt the JSON/CSV the commands emit
    there; rerouted, the chatter stays visible on stderr.  The C side is
    flushed before each descriptor swap, since its buffer drains to
    whatever fd 1 points at come flush time.
    """
    _flush_all_stdio()
    saved = os.dup(1)
    try:
        os.dup2(2, 1)
        yield
    finally:
        _flush_all_stdio()
        os.dup2(saved, 1)
        os.close(saved)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mhdfem",
        description="structure-preserving mixed finite elements for "
                    "stationary incompressible MHD")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("solve", "run one nonlinear solve"),
                       ("study", "manufactured-solution refinement study"),
                       ("diagnose", "structural checks and constants")):
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("config", help="path to a JSON run configuration")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the probe seed from the config")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config, seed_override=args.seed)
        if args.command == "solve":
            with _stdout_reserved():
                doc = run_solve(config)
            if config.report_path is None:
                sys.stdout.write(_dump_json(doc))
            else:
                print(f"report written to {config.report_path} "
                      f"({doc['picard']['termination']} after "
                      f"{doc['picard']['n_iterations']} iterations)")
        elif args.command == "study":
            with _stdout_reserved():
                result = run_study(config)
            if config.csv_path is None:
                sys.stdout.write(result["csv"])
            else:
                print(f"study written to {config.csv_path} "
                      f"({len(result['rows'])} levels)")
            if result["aborted"] is not None:
                print(f"study aborted: Picard did not converge at level "
                      f"{result['aborted']}", file=sys.stderr)
                return 1
        else:
            with _stdout_reserved():
                doc = run_diagnose(config)
            if config.report_path is None:
                sys.stdout.write(_dump_json(doc))
            else:
                print(f"diagnostics written to {config.report_path}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SingularSystemError, CapabilityError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
