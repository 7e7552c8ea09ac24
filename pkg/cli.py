"""CLI — fracvar experiments from the command line.

    python cli.py verify piola --n 2 --s 0.5 --N 32,64,128
    python cli.py membership --example cavitation --n 2 --s-list 0.3,0.6,0.9 --p-list 3
    python cli.py solve problem.txt
    python cli.py selftest --quick

Exit codes: 0 when every requested check passes, 1 on a tolerance failure,
2 on bad input.
"""

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np
from scipy import special

import config
from frac_core import FracParams, cns, epstein_zeta, gaussian_ds_reference
from frac_ops import Backend, FracOperator, ds_div, ds_grad, ds_grad_vec, ibp_residual
from grid_field import Grid, RegionMask, ScalarField, VectorField, read_field, write_field
from membership_lab import (
    SCAN_COLUMNS,
    ExampleKind,
    ExampleMap,
    build_example,
    gaussian,
    membership_scan,
    misclassifications,
    scalar_bump,
)
from minors import MinorSpec, cof, det
from piola_lab import VERIFY_CHECKS, VERIFY_COLUMNS, piola_residual, verify_scan
from var_solve import (
    Problem,
    QuadraticDensity,
    energy,
    energy_gradient,
    initial_guess,
    load_problem,
    minimize,
)

logger = logging.getLogger(__name__)

SELFTEST_COLUMNS = ["check", "value", "tolerance", "passed"]


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _common_flags(extent: float = 4.0) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--n", type=int, default=1, help="spatial dimension (1-3)")
    common.add_argument("--s", type=float, default=0.5, help="fractional order in (0, 1)")
    common.add_argument("--p", type=float, default=2.0, help="integrability exponent")
    common.add_argument("--N", type=_int_list, default=[32, 64, 128], help="grid sizes, comma-separated")
    common.add_argument("--L", type=float, default=extent, help="box half-width")
    common.add_argument("--backend", choices=[b.value for b in Backend], default=Backend.QUADRATURE.value)
    common.add_argument("--out", default="out", help="output directory (FRACVAR_OUT overrides)")
    common.add_argument("--threads", type=int, default=None, help="FFT workers (default: all cores)")
    common.add_argument("--tol", type=float, default=None, help="override the pass tolerance")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="fracvar", description="Riesz fractional calculus experiments")
    sub = parser.add_subparsers(dest="command")

    gradient = sub.add_parser("gradient", parents=[common], help="apply D^s or div^s to an FRF1 field")
    gradient.add_argument("field", help="input FRF1 file")
    gradient.add_argument("--div", action="store_true", help="apply div^s to a vector field")

    verify = sub.add_parser("verify", parents=[common], help="residual scan of one identity")
    verify.add_argument("check", choices=VERIFY_CHECKS)
    verify.add_argument("--spec", default="full", help="minor rows/cols, e.g. 12/12 or full")

    membership = sub.add_parser("membership", parents=[_common_flags(extent=2.0)], help="H^{s,p} threshold scan")
    membership.add_argument("--example", choices=[k.value for k in ExampleKind],
                            default=ExampleKind.CUBE_FRACTURE.value)
    membership.add_argument("--s-list", type=_float_list, default=[0.2, 0.4, 0.6, 0.8])
    membership.add_argument("--p-list", type=_float_list, default=[2.0])

    solve = sub.add_parser("solve", parents=[common], help="minimize a problem file")
    solve.add_argument("problem", help="key = value problem file")

    selftest = sub.add_parser("selftest", parents=[common], help="invariant suite")
    selftest.add_argument("--quick", action="store_true", help="N=32 suite")
    return parser


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def _cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.12e}"
    return str(value)


def write_csv(path: Path, columns: list[str], rows: list[list]) -> Path:
    """Versioned CSV: header comment, column names, then fixed-format rows."""
    with open(path, "w", newline="") as f:
        f.write(config.CSV_HEADER + "\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    logger.info("Wrote %s (%d rows)", path, len(rows))
    return path


def output_dir(args) -> Path:
    out = Path(config.FRACVAR_OUT or args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _workers(args) -> int:
    return args.threads or config.FRACVAR_THREADS


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gradient(args) -> int:
    field = read_field(args.field)
    params = FracParams(field.grid.n, args.s, args.p)
    op = FracOperator(params, field.grid, Backend(args.backend), _workers(args))
    if args.div:
        if not isinstance(field, VectorField):
            raise ValueError("--div needs a vector field")
        result = ds_div(op, field)
    elif isinstance(field, ScalarField):
        result = ds_grad(op, field)
    else:
        result = ds_grad_vec(op, field)
    write_field(output_dir(args) / "gradient.frf", result)
    return 0


def cmd_verify(args) -> int:
    params = FracParams(args.n, args.s, args.p)
    spec = MinorSpec.parse(args.n, args.spec)
    rows = verify_scan(args.check, params, args.N, extent=args.L, backend=args.backend,
                       spec=spec, tol=args.tol, workers=_workers(args))
    write_csv(output_dir(args) / f"{args.check}.csv", VERIFY_COLUMNS, [r.as_row() for r in rows])
    finest = rows[-1]
    if not finest.passed:
        logger.error("Tolerance failure: %s", ",".join(_cell(v) for v in finest.as_row()))
        return 1
    return 0


def cmd_membership(args) -> int:
    example = ExampleMap(ExampleKind(args.example))
    lines = membership_scan(example, args.s_list, args.p_list, args.N, n=args.n, extent=args.L)
    rows = [row for line in lines for row in line.as_rows()]
    write_csv(output_dir(args) / "membership.csv", SCAN_COLUMNS, rows)
    wrong = misclassifications(example, lines)
    for line in wrong:
        logger.error("Misclassified: %s", ",".join(_cell(v) for v in line.as_rows()[-1]))
    return 1 if wrong else 0


def cmd_solve(args) -> int:
    prob, settings = load_problem(args.problem, workers=_workers(args))
    u0 = initial_guess(prob, settings.initial_amplitude)
    tol_g = args.tol if args.tol is not None else settings.tol_g
    u, report = minimize(prob, u0, tol_g=tol_g, max_iters=settings.max_iters, memory=settings.memory)
    out = output_dir(args)
    write_field(out / "minimizer.frf", u)
    (out / "solve_report.json").write_text(report.to_json() + "\n")
    if not report.converged:
        logger.error("Solver did not converge: %s after %d iterations", report.reason, report.iterations)
        return 1
    return 0


# ---------------------------------------------------------------------------
# Self test
# ---------------------------------------------------------------------------

def _gaussian_oracle_gap(op: FracOperator, window: float = 2.0) -> float:
    """Sup distance of D^s e^{−πx²} to its Fourier integral on |x| ≤ window."""
    x = op.grid.axis
    near = np.abs(x) <= window
    computed = ds_grad(op, gaussian(op.grid)).values[..., 0][near]
    exact = np.array([gaussian_ds_reference(float(xi), op.params.s) for xi in x[near]])
    return float(np.max(np.abs(computed - exact)))


def _selftest_rows(N: int, workers: int) -> list[list]:
    """Rounding-level identities, the refinement checks at grid size N against
    the default tolerances, two membership verdicts and one small solve."""
    rows = []

    def record(name: str, value: float, tol: float):
        rows.append([name, float(value), tol, bool(value <= tol)])

    record("cns-closed-form", abs(cns(FracParams(1, 0.5)) + 1 / (2 * math.sqrt(2 * math.pi))), 1e-12)
    record("epstein-n1", abs(epstein_zeta(1, 0.5) - 2 * float(special.zeta(0.5))), 1e-10)

    rng = np.random.default_rng(0)
    F = rng.standard_normal((20, 3, 3))
    cofactor_gap = np.einsum("...ji,...jk->...ik", cof(F), F) - det(F)[:, None, None] * np.eye(3)
    record("cofactor-adjugate", float(np.max(np.abs(cofactor_gap))), 1e-12)

    for n in (1, 2):
        grid = Grid(n, 4.0, N)
        u = gaussian(grid)
        phi = VectorField.from_components([scalar_bump(grid, 1.5)] * n)
        for backend in Backend:
            op = FracOperator(FracParams(n, 0.5), grid, backend, workers)
            record(f"ibp-{backend.value}-n{n}", ibp_residual(op, u, phi), 1e-10)

    grid = Grid(2, 4.0, N)
    op = FracOperator(FracParams(2, 0.5), grid, Backend.QUADRATURE, workers)
    bump = build_example(ExampleKind.SMOOTH_VECTOR_BUMP, grid)
    record("piola-k1", max(piola_residual(op, bump, MinorSpec(2, (1,), (2,)))), 1e-12)

    fine = 4 * N
    for backend, extent, tol in ((Backend.QUADRATURE, 4.0, 2e-2), (Backend.SPECTRAL, 8.0, 2e-3)):
        op = FracOperator(FracParams(1, 0.5), Grid(1, extent, fine), backend, workers)
        record(f"gaussian-oracle-{backend.value}", _gaussian_oracle_gap(op), tol)

    product = verify_scan("product", FracParams(1, 0.5), [fine], workers=workers)[0]
    record("product-grad-n1", product.residual_sup, config.DEFAULT_TOLERANCES["product"])
    record("product-div-n1", product.residual_l2, config.DEFAULT_TOLERANCES["product"])
    for check in ("piola", "det-ibp", "det-riesz"):
        row = verify_scan(check, FracParams(2, 0.5), [N], workers=workers)[0]
        record(f"{check}-n2", row.residual_sup, config.DEFAULT_TOLERANCES[check])

    fracture = ExampleMap(ExampleKind.CUBE_FRACTURE)
    lines = membership_scan(fracture, [0.3, 0.7], [2.0], [N, 2 * N, 4 * N], n=1)
    record("fracture-verdicts", float(len(misclassifications(fracture, lines))), 0.0)
    cavitation = ExampleMap(ExampleKind.CAVITATION)
    lines = membership_scan(cavitation, [0.3, 0.9], [3.0], [16, 32, 64], n=2)
    record("cavitation-verdicts", float(len(misclassifications(cavitation, lines))), 0.0)

    grid = Grid(1, 8.0, N)
    omega = RegionMask.ball(grid, 6.0)
    target = gaussian(grid).values[..., None]
    prob = Problem(FracParams(1, 0.5), grid, omega, VectorField.zeros(grid),
                   QuadraticDensity(target=target), Backend.SPECTRAL, workers)
    u0 = initial_guess(prob, 0.1)
    direction = VectorField(grid, rng.standard_normal(grid.shape + (1,)) * omega.inside[..., None])
    step = 1e-4
    plus, minus = energy(prob, u0 + step * direction), energy(prob, u0 - step * direction)
    exact = float(np.sum(energy_gradient(prob, u0).values * direction.values)) * grid.cell_volume
    record("energy-gradient-fd", abs((plus - minus) / (2 * step) - exact) / max(abs(exact), 1e-30), 1e-5)

    _, report = minimize(prob, u0)
    record("quadratic-solve-converged", 0.0 if report.converged else 1.0, 0.0)
    record("quadratic-solve-el-residual", report.el_residual, 10 * report.tol_g)
    return rows


def cmd_selftest(args) -> int:
    N = 32 if args.quick else 64
    rows = _selftest_rows(N, _workers(args))
    write_csv(output_dir(args) / "selftest.csv", SELFTEST_COLUMNS, rows)
    failed = [row for row in rows if not row[3]]
    for row in failed:
        logger.error("Tolerance failure: %s", ",".join(_cell(v) for v in row))
    return 1 if failed else 0


COMMANDS = {
    "gradient": cmd_gradient,
    "verify": cmd_verify,
    "membership": cmd_membership,
    "solve": cmd_solve,
    "selftest": cmd_selftest,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as e:
        logger.error("%s: %s", args.command, e)
        return 2


def main():
    logging.basicConfig(level=config.LOG_LEVEL, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
