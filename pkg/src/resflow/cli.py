"""Command-line driver.

    resflow simulate <deck> [--workers N] [--out DIR] [--until DAYS] [--vtk]
    resflow solve <matrix.mtx> [--precond ...] [--solver ...] [--fixed-iters N]
    resflow partition <deck> --workers N [--report]

Exit codes: 0 success, 1 usage error, 2 input error, 3 nonconvergence.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import units as U
from .build import build_simulation, report_times
from .deck import read_deck
from .errors import DeckError, InputError, NonconvergenceError
from .grid import partition_grid
from .linalg import SolverConfig, read_matrix_market, read_vector, solve
from .newton import advance_timestep
from .precond import make_preconditioner, read_labeling
from .reports import write_csv_reports, write_vtk

log = logging.getLogger("resflow")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_NONCONVERGENCE = 3


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0)
    p = argparse.ArgumentParser(prog="resflow", parents=[common],
                                description="reservoir simulator driver")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a deck", parents=[common])
    sim.add_argument("deck")
    sim.add_argument("--workers", type=int, default=None)
    sim.add_argument("--out", default="out")
    sim.add_argument("--until", type=float, default=None, metavar="DAYS")
    sim.add_argument("--vtk", action="store_true",
                     help="write a VTK snapshot per report step")

    sol = sub.add_parser("solve", help="solve one Matrix Market system",
                         parents=[common])
    sol.add_argument("matrix")
    sol.add_argument("--rhs", default=None,
                     help="Matrix Market vector; default A*ones")
    sol.add_argument("--labeling", default=None,
                     help="block labeling file (needed by cpr-fpf)")
    sol.add_argument("--precond", default="none",
                     choices=["none", "ilu0", "ras", "amg", "cpr-fpf"])
    sol.add_argument("--solver", default="gmres",
                     choices=["gmres", "bicgstab", "orthomin"])
    sol.add_argument("--restart", type=int, default=30)
    sol.add_argument("--korth", type=int, default=5)
    sol.add_argument("--tol", type=float, default=1e-6)
    sol.add_argument("--maxit", type=int, default=500)
    sol.add_argument("--fixed-iters", type=int, default=None,
                     help="run exactly this many iterations")
    sol.add_argument("--workers", type=int, default=1,
                     help="subdomain count for ras/cpr-fpf")
    sol.add_argument("--overlap", type=int, default=1)

    part = sub.add_parser("partition", help="show partition statistics",
                          parents=[common])
    part.add_argument("deck")
    part.add_argument("--workers", type=int, required=True)
    part.add_argument("--report", action="store_true",
                      help="per-worker detail")
    return p


def _cmd_simulate(args):
    deck = read_deck(args.deck)
    sim = build_simulation(deck, num_workers=args.workers)
    targets = report_times(deck)
    if args.until is not None:
        until = args.until * U.DAY
        targets = [t for t in targets if t < until - 1e-6] + [until]
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    code = EXIT_OK
    try:
        for snap, t_target in enumerate(targets, start=1):
            advance_timestep(sim, t_target)
            if args.vtk:
                write_vtk(sim.system, sim.state,
                          outdir / f"state_{snap:04d}.vtk")
    except NonconvergenceError as exc:
        print(f"nonconvergence: {exc}", file=sys.stderr)
        code = EXIT_NONCONVERGENCE
    write_csv_reports(sim.reports, outdir)
    n = len(sim.reports)
    t_days = sim.state.t / U.DAY
    print(f"{n} steps to t = {t_days:.6g} days; reports in {outdir}")
    return code


def _cmd_solve(args):
    A = read_matrix_market(args.matrix, num_workers=args.workers)
    b = read_vector(args.rhs) if args.rhs else A.matvec(
        np.ones(A.layout.size))
    if b.size != A.layout.size:
        raise InputError(f"rhs has {b.size} entries for a "
                         f"{A.layout.size}-row matrix")
    labeling = read_labeling(args.labeling) if args.labeling else None
    M = make_preconditioner(args.precond, A, labeling, overlap=args.overlap)
    config = SolverConfig(method=args.solver, tol=args.tol, maxit=args.maxit,
                          restart=args.restart, korth=args.korth,
                          fixed_iters=args.fixed_iters)
    res = solve(A, b, config, M)
    bnorm = float(np.linalg.norm(b)) or 1.0
    rel = float(np.linalg.norm(b - A.matvec(res.x))) / bnorm
    print(f"method: {args.solver}  precond: {args.precond}")
    print(f"iterations: {res.iterations}")
    print(f"converged: {res.converged}")
    print(f"relative residual: {rel:.6e}")
    return EXIT_OK


def _cmd_partition(args):
    deck = read_deck(args.deck)
    from .build import build_grid
    grid = build_grid(deck)
    part = partition_grid(grid, args.workers)
    sizes = part.part_sizes()
    a, b, _ = grid.interior_faces()
    cut = int(np.count_nonzero(part.owner[a] != part.owner[b]))
    print(f"cells: {grid.num_cells}  workers: {part.num_workers}")
    print(f"cells per worker: min {sizes.min()} max {sizes.max()} "
          f"imbalance {sizes.max() / max(sizes.min(), 1):.4f}")
    print(f"interior faces: {a.size}  cut by partition: {cut} "
          f"({100.0 * cut / max(a.size, 1):.2f}%)")
    if args.report:
        for r in range(part.num_workers):
            owned = part.parts[r]
            halo = np.count_nonzero(
                (part.owner[a] == r) != (part.owner[b] == r))
            print(f"worker {r}: {owned.size} cells, {halo} cut faces")
    return EXIT_OK


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s %(message)s")
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "solve":
            return _cmd_solve(args)
        return _cmd_partition(args)
    except (DeckError, InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NonconvergenceError as exc:
        print(f"nonconvergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
