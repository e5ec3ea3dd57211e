"""Command-line harness: assembly reports, rank tables and control solves.

Exit codes: 0 success, 2 invalid input, 3 solver did not converge,
4 refusal because a dense object would exceed its size cap.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from .assembly import (DENSE_ROW_CAP, assemble_dense, assemble_operators, dense_nnz,
                       relative_frobenius_diff)
from .exceptions import LowRankIgaError, SizeCapError
from .geometries import BUILTINS, generate_builtin, parse_geometry
from .optctl import (AmenConfig, ControlProblem, block_amen_solve, build_kkt, control_norm,
                     dense_kkt_oracle, evaluate_objective)
from .splines import greville_abscissae, refine_geometry
from .tt import TtTensor, load_ttb, save_ttb, tt_rank1

log = logging.getLogger("lowrank_iga")

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_SIZE_CAP = 0, 2, 3, 4
KNOTS_PER_LEVEL = 4


@dataclass
class RunReport:
    """One CSV row; fields that do not apply to a command stay empty."""

    command: str = ""
    geometry: str = ""
    level: Optional[int] = None
    dofs_per_dim: str = ""
    total_dofs: Optional[int] = None
    tol: Optional[float] = None
    assembly_seconds: Optional[float] = None
    weight_ranks: str = ""
    max_rank_omega: Optional[int] = None
    max_rank_q: Optional[int] = None
    mass_terms: Optional[int] = None
    stiffness_terms: Optional[int] = None
    mass_frobenius_diff: Optional[float] = None
    stiffness_frobenius_diff: Optional[float] = None
    lowrank_storage: Optional[int] = None
    dense_nnz: Optional[int] = None
    beta: Optional[float] = None
    time_steps: Optional[int] = None
    solve_seconds: Optional[float] = None
    sweeps: Optional[int] = None
    solution_max_rank: Optional[int] = None
    objective: Optional[float] = None
    control_norm: Optional[float] = None
    residual: Optional[float] = None
    oracle_rel_error: Optional[float] = None
    converged: Optional[int] = None


REPORT_COLUMNS = [f.name for f in fields(RunReport)]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError("non-finite value in report")
        return repr(v)
    return v


def write_report(rows: List[RunReport], path) -> None:
    """Write rows as RFC-4180 CSV with a fixed header."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            d = asdict(row)
            w.writerow([_cell(d[c]) for c in REPORT_COLUMNS])


# ---------------------------------------------------------------------------
# argument helpers

def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers, got %r" % text) from None


def _levels(text: str) -> List[int]:
    """``"3"`` means levels 0..3, ``"1,3"`` exactly those levels."""
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected an integer or a list of integers") from None
    if not vals or min(vals) < 0:
        raise argparse.ArgumentTypeError("refinement levels must be >= 0")
    return list(range(vals[0] + 1)) if len(vals) == 1 else vals


def _add_geometry_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--geometry", type=Path, help="geometry JSON file")
    g.add_argument("--builtin", choices=BUILTINS, help="built-in geometry")
    p.add_argument("--degree", type=int, default=2, help="spline degree of built-in geometries")


def _load_geometry(args):
    if args.geometry is not None:
        return parse_geometry(args.geometry), args.geometry.stem
    return generate_builtin(args.builtin, args.degree), args.builtin


def _level_geometry(geo, level: int):
    """Refinement level ``l`` inserts ``4 l`` equispaced knots into every span."""
    return refine_geometry(geo, KNOTS_PER_LEVEL * level)


def _rank_stats(weights):
    table = weights.rank_table()
    text = ";".join("%s=%s" % (k, "x".join(str(r) for r in v)) for k, v in table.items())
    q_max = max((max(v, default=1) for k, v in table.items() if k != "omega"), default=1)
    return table, text, max(table["omega"], default=1), q_max


# ---------------------------------------------------------------------------
# commands

def cmd_assemble(args) -> int:
    base, name = _load_geometry(args)
    rows = []
    which = ["mass", "stiffness"] if args.matrix == "both" else [args.matrix]
    for level in args.refine:
        geo = _level_geometry(base, level)
        total = math.prod(geo.space.dims)
        if args.compare_dense and total > args.dense_cap:
            log.error("dense comparison refused: %d dofs exceed the cap of %d", total, args.dense_cap)
            return EXIT_SIZE_CAP
        for tol in args.tol:
            t0 = time.perf_counter()
            ops = assemble_operators(geo, tol, rule=args.nodes_per_span)
            elapsed = time.perf_counter() - t0
            _, text, r_om, r_q = _rank_stats(ops.weights)
            row = RunReport("assemble", name, level, "x".join(map(str, geo.space.dims)), total, tol,
                            elapsed, text, r_om, r_q, ops.mass.num_terms, ops.stiffness.num_terms)
            row.lowrank_storage = sum(getattr(ops, w).storage() for w in which)
            row.dense_nnz = dense_nnz(geo.space) * len(which)
            if args.compare_dense:
                for w in which:
                    dense = assemble_dense(geo, w, rule=args.nodes_per_span, row_cap=args.dense_cap)
                    setattr(row, w + "_frobenius_diff", relative_frobenius_diff(getattr(ops, w), dense))
            log.info("level %d tol %.0e: ranks %s, terms %d/%d, %.2fs", level, tol, text,
                     row.mass_terms, row.stiffness_terms, elapsed)
            rows.append(row)
    _emit(rows, args.out)
    return EXIT_OK


def format_rank_table(entries: List[tuple]) -> str:
    """Rows per (level, tolerance), columns ``q_kl`` then ``omega`` with ``(R_1,R_2,...)``."""
    cols = list(entries[0][2].keys())
    head = ["level", "tol"] + cols
    body = [[str(lvl), "%.0e" % tol] + ["(" + ",".join(str(r) for r in table[c]) + ")" for c in cols]
            for lvl, tol, table in entries]
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in [head] + body]
    return "\n".join(lines)


def cmd_ranks(args) -> int:
    base, name = _load_geometry(args)
    entries, rows = [], []
    for level in args.refine:
        geo = _level_geometry(base, level)
        for tol in args.tols:
            t0 = time.perf_counter()
            ops = assemble_operators(geo, tol)
            elapsed = time.perf_counter() - t0
            table, text, r_om, r_q = _rank_stats(ops.weights)
            entries.append((level, tol, table))
            rows.append(RunReport("ranks", name, level, "x".join(map(str, geo.space.dims)),
                                  math.prod(geo.space.dims), tol, elapsed, text, r_om, r_q,
                                  ops.mass.num_terms, ops.stiffness.num_terms))
    print(format_rank_table(entries))
    print()
    print("terms per (level, tol): " + ", ".join(
        "(%d, %.0e): mass %d, stiffness %d" % (r.level, r.tol, r.mass_terms, r.stiffness_terms) for r in rows))
    if args.out is not None:
        write_report(rows, args.out)
    return EXIT_OK


def bump_state(geo) -> TtTensor:
    """Rank-one ``prod_d sin(pi g_d)`` on the interior Greville abscissae."""
    vecs = [np.sin(np.pi * greville_abscissae(f)[1:-1]) for f in geo.space.factors]
    return tt_rank1(vecs)


def cmd_solve_control(args) -> int:
    base, name = _load_geometry(args)
    geo = _level_geometry(base, args.refine)
    t0 = time.perf_counter()
    ops = assemble_operators(geo, args.assembly_tol).interior()
    assembly_seconds = time.perf_counter() - t0
    if args.yhat == "bump":
        yhat = bump_state(geo)
    else:
        yhat = load_ttb(args.yhat)
        if not isinstance(yhat, TtTensor):
            log.error("desired state file must hold a plain train")
            return EXIT_INVALID
    rows, status = [], EXIT_OK
    for beta in args.beta:
        problem = ControlProblem(args.horizon, args.nt, beta, yhat, ops)
        kkt = build_kkt(problem)
        cfg = AmenConfig(tol=args.tol, max_sweeps=args.max_sweeps, enrichment_rank=args.enrichment_rank,
                         rank_cap=args.rank_cap, seed=args.seed, local_solver=args.local_solver)
        t0 = time.perf_counter()
        res = block_amen_solve(kkt, cfg=cfg)
        solve_seconds = time.perf_counter() - t0
        y, u, _ = res.solution.components()
        row = RunReport("solve-control", name, args.refine, "x".join(map(str, ops.dims)),
                        3 * math.prod(kkt.shape), args.tol, assembly_seconds)
        _, row.weight_ranks, row.max_rank_omega, row.max_rank_q = _rank_stats(ops.weights)
        row.mass_terms, row.stiffness_terms = ops.mass.num_terms, ops.stiffness.num_terms
        row.beta, row.time_steps, row.solve_seconds = beta, args.nt, solve_seconds
        row.sweeps, row.solution_max_rank = res.sweeps, res.max_rank
        row.objective = evaluate_objective(problem, y, u)
        row.control_norm = control_norm(problem, u)
        row.residual = res.residual
        row.converged = int(res.converged)
        if args.compare_dense:
            ref = dense_kkt_oracle(problem)
            full = res.solution.full()
            row.oracle_rel_error = max(float(np.linalg.norm(full[i] - r) / max(np.linalg.norm(r), 1e-300))
                                       for i, r in enumerate((ref.y, ref.u, ref.lam)))
        log.info("beta %.1e: %s after %d sweeps, residual %.2e, max rank %d", beta,
                 "converged" if res.converged else "NOT converged", res.sweeps, res.residual, res.max_rank)
        if args.solution is not None:
            path = args.solution
            if len(args.beta) > 1:
                path = path.with_name("%s_beta%g%s" % (path.stem, beta, path.suffix))
            save_ttb(path, res.solution)
        if not res.converged:
            status = EXIT_NOT_CONVERGED
        rows.append(row)
    _emit(rows, args.out)
    return status


def _emit(rows, out):
    if out is not None:
        write_report(rows, out)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            d = asdict(row)
            w.writerow([_cell(d[c]) for c in REPORT_COLUMNS])


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lowrank-iga",
                                     description="Low-rank isogeometric assembly and optimal control.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("assemble", help="assemble low-rank operators and report ranks/storage")
    _add_geometry_args(p)
    p.add_argument("--refine", type=_levels, default=[0], help="max level K (levels 0..K) or a list")
    p.add_argument("--tol", type=_float_list, default=[1e-10, 1e-7, 1e-4])
    p.add_argument("--matrix", choices=("mass", "stiffness", "both"), default="both")
    p.add_argument("--compare-dense", action="store_true", help="also assemble densely and report diffs")
    p.add_argument("--nodes-per-span", type=int, default=None,
                   help="Gauss nodes per knot span (default: exact for the interpolated weights)")
    p.add_argument("--dense-cap", type=int, default=DENSE_ROW_CAP)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("ranks", help="table of TT ranks of the interpolated weights")
    _add_geometry_args(p)
    p.add_argument("--refine", type=_levels, default=[0])
    p.add_argument("--tols", type=_float_list, default=[1e-10, 1e-7, 1e-4])
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_ranks)

    p = sub.add_parser("solve-control", help="solve the parabolic control problem with Block AMEn")
    _add_geometry_args(p)
    p.add_argument("--refine", type=int, default=1, help="refinement level")
    p.add_argument("--beta", type=_float_list, default=[1e-2], help="regularization (comma list sweeps)")
    p.add_argument("--nt", type=int, default=10, help="number of time steps")
    p.add_argument("--horizon", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--assembly-tol", type=float, default=1e-10)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--yhat", default="bump", help="TTB1 file with the desired state, or 'bump'")
    p.add_argument("--max-sweeps", type=int, default=30)
    p.add_argument("--enrichment-rank", type=int, default=3)
    p.add_argument("--rank-cap", type=int, default=200)
    p.add_argument("--local-solver", choices=("auto", "direct", "minres"), default="auto")
    p.add_argument("--compare-dense", action="store_true", help="report the error against a direct solve")
    p.add_argument("--out", type=Path)
    p.add_argument("--solution", type=Path, help="write the block solution (TTB1)")
    p.set_defaults(func=cmd_solve_control)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SizeCapError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_SIZE_CAP
    except (LowRankIgaError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
