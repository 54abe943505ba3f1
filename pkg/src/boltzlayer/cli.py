"""Command line entry point: `boltzlayer <subcommand> [--config C] [--out-dir D] ...`.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

COMMANDS = ("slab", "global", "periodic", "stationary", "stability", "verify-all", "evolve")
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boltzlayer", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON scenario file (defaults built in)")
    common.add_argument("--out-dir", default="boltzlayer_out", help="artifact directory")
    common.add_argument("--seed", type=int, default=None, help="random seed (config default 42)")
    common.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP threads")
    common.add_argument("--cache-dir", default=None, help="operator cache (default <out-dir>/cache)")
    common.add_argument("--rebuild-operator", action="store_true", help="ignore the operator cache")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "evolve":
            sp.add_argument("--t-final", type=float, default=None)
            sp.add_argument("--dt", type=float, default=None)
            sp.add_argument("--snapshot-every", type=int, default=None)
            sp.add_argument("--series-order", type=int, default=None)
    return p


def _set_threads(n: int | None) -> None:
    if n is None:
        n = os.environ.get("BOLTZLAYER_THREADS")
    if n is None:
        return
    for v in _THREAD_VARS:
        os.environ[v] = str(int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # thread counts must be in place before numpy loads its BLAS
    _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    from . import io, pipelines as pl
    from .collision import AssemblyError
    from .kernel_estimates import KernelEstimateError
    from .nonlinear import SolverError
    from .semigroup import EvolutionError, FitError
    from .spatial import SpatialError
    from .velocity_grid import GridError, StateError

    try:
        cfg = io.load_config(args.config or os.environ.get("BOLTZLAYER_CONFIG"), seed=args.seed)
        state = io.state_from_config(cfg)
        state.require_supersonic_inflow()
    except io.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StateError, GridError) as e:
        print(f"config error: equilibrium: {e}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = Path(args.cache_dir) if args.cache_dir else out / "cache"
    try:
        if args.command == "verify-all":
            rep = pl.run_verify_all(None, cfg, out, cache, args.rebuild_operator)
        else:
            s = pl.build_setup(cfg, cache, args.rebuild_operator)
            if args.command == "slab":
                rep = pl.run_slab(s, out)
            elif args.command == "global":
                rep = pl.run_global(s, out)
            elif args.command == "periodic":
                rep = pl.run_periodic(s, out)
            elif args.command == "stationary":
                rep = pl.run_stationary(s, out)
            elif args.command == "stability":
                rep = pl.run_stability(s, out)
            else:
                rep = pl.run_evolve(s, out, args.t_final, args.dt, args.snapshot_every, args.series_order)
    except (SolverError, EvolutionError, FitError, AssemblyError, KernelEstimateError, SpatialError, FloatingPointError) as e:
        print(f"numerical failure in {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        io.write_json(out / "failure.json", {"command": args.command, "error": type(e).__name__, "message": str(e)})
        return EXIT_NUMERICAL
    # the cache lives outside the hashed artifact set
    io.write_manifest(out, cfg, args.command, exclude=("manifest.json",), skip_dirs=(cache,))
    print(json.dumps({"command": args.command, "out_dir": str(out), "config_hash": io.config_hash(cfg)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
