"""Piola lab — numerical checks of the fractional Piola identity and the
determinant integration-by-parts identities.

Residuals are evaluated on a box enlarged twofold at the same spacing and
reported on the original box. Cofactor images tend to a constant far value
rather than to zero; that constant is split off exactly.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

import config
from frac_ops import (
    Backend,
    FracOperator,
    central_gradient,
    ds_div_rows,
    ds_grad,
    ds_grad_vec,
    ibp_residual,
    k_phi,
    product_rule_residuals,
    riesz_convolve,
)
from frac_core import FracParams
from grid_field import Grid, MatrixField, ScalarField, VectorField, integrate
from membership_lab import ExampleKind, build_example, gaussian, scalar_bump
from minors import (
    MinorSpec,
    cof,
    cofactor_embedding,
    cofactor_far_value,
    det,
    det_minor,
    project_Ntilde,
)

logger = logging.getLogger(__name__)


def relative_defect(lhs: float, rhs: float) -> float:
    scale = max(abs(lhs), abs(rhs))
    if scale == 0:
        return 0.0
    return abs(lhs - rhs) / scale


@dataclass(frozen=True)
class IdentityCheck:
    """Both sides of an integral identity."""

    lhs: float
    rhs: float

    @property
    def defect(self) -> float:
        return relative_defect(self.lhs, self.rhs)


def _check_vector(op: FracOperator, u: VectorField):
    if u.num_components != op.n:
        raise ValueError(f"expected a field with {op.n} components, got {u.num_components}")
    u.require_compact_support()


def _normalized_norms(op: FracOperator, residual: np.ndarray, scale_values: np.ndarray) -> tuple[float, float]:
    trailing = tuple(range(op.n, residual.ndim))
    magnitude = np.sqrt(np.sum(residual ** 2, axis=trailing))
    scale_trailing = tuple(range(op.n, scale_values.ndim))
    scale = 1 + float(np.max(np.sqrt(np.sum(scale_values ** 2, axis=scale_trailing))))
    sup = float(np.max(magnitude)) / scale
    l2 = math.sqrt(float(np.sum(magnitude ** 2)) * op.grid.cell_volume) / scale
    return sup, l2


# ---------------------------------------------------------------------------
# Piola identity
# ---------------------------------------------------------------------------

def piola_residual(op: FracOperator, u: VectorField, spec: MinorSpec) -> tuple[float, float]:
    """(sup, L²) of Div^s(M̄(cof M(D^s u))) over the box, normalized by 1 + sup|P|."""
    _check_vector(op, u)
    big = op.enlarged()
    G = ds_grad_vec(big, u.embedded(big.grid))
    P = cofactor_embedding(spec, G)
    far = cofactor_far_value(spec)
    R = ds_div_rows(big, MatrixField(big.grid, P.values - far), require_support=False)
    window = op.grid.window_in(big.grid)
    return _normalized_norms(op, R.values[window], P.values[window])


def control_residual(op: FracOperator, u: VectorField) -> tuple[float, float]:
    """Div^s(D^s u) with the Piola normalization: the size of a generic divergence."""
    _check_vector(op, u)
    big = op.enlarged()
    G = ds_grad_vec(big, u.embedded(big.grid))
    R = ds_div_rows(big, G, require_support=False)
    window = op.grid.window_in(big.grid)
    return _normalized_norms(op, R.values[window], G.values[window])


def distributional_piola_residual(op: FracOperator, u: VectorField, psi: ScalarField,
                                  spec: MinorSpec) -> float:
    """max_i |∫ D^s ψ · P_i| relative to ∫ |D^s ψ| |P| for P = M̄(cof M(D^s u))."""
    _check_vector(op, u)
    big = op.enlarged()
    G = ds_grad_vec(big, u.embedded(big.grid))
    P = cofactor_embedding(spec, G).values
    far = cofactor_far_value(spec)
    grad_psi = ds_grad(big, psi.embedded(big.grid)).values
    dv = big.grid.cell_volume
    pairings = np.sum(grad_psi[..., None, :] * (P - far), axis=-1)
    totals = np.sum(pairings.reshape(-1, op.n), axis=0) * dv
    scale = float(np.sum(np.linalg.norm(grad_psi, axis=-1)
                         * np.linalg.norm(P.reshape(P.shape[:op.n] + (-1,)), axis=-1))) * dv
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(totals))) / scale


def null_lagrangian_defect(op: FracOperator, u: VectorField) -> float:
    """|∫ det D^s u| relative to ∫ |det D^s u|."""
    _check_vector(op, u)
    big = op.enlarged()
    d = det(ds_grad_vec(big, u.embedded(big.grid)).values)
    total = float(np.sum(np.abs(d)))
    if total == 0:
        return 0.0
    return abs(math.fsum(d.ravel().tolist())) / total


# ---------------------------------------------------------------------------
# Determinant identities
# ---------------------------------------------------------------------------

def _det_pairing(big: FracOperator, G: MatrixField, phi: ScalarField, spec: MinorSpec) -> float:
    return integrate(ScalarField(big.grid, det_minor(spec, G.values) * phi.values))


def det_ibp_sides(op: FracOperator, u: VectorField, phi: ScalarField,
                  spec: MinorSpec) -> IdentityCheck:
    """∫ det M(D^s u) φ against −(1/k) ∫ Ñ(u)·K_φ(M̄(cof M(D^s u)))."""
    _check_vector(op, u)
    big = op.enlarged()
    U = u.embedded(big.grid)
    Phi = phi.embedded(big.grid)
    G = ds_grad_vec(big, U)
    lhs = _det_pairing(big, G, Phi, spec)
    K = k_phi(big, Phi, cofactor_embedding(spec, G), far_value=cofactor_far_value(spec))
    selected = project_Ntilde(spec, U.values, indices="rows")
    rhs = -float(np.sum(selected * K.values)) * big.grid.cell_volume / spec.k
    return IdentityCheck(lhs, rhs)


def det_ibp_residual(op: FracOperator, u: VectorField, phi: ScalarField, spec: MinorSpec) -> float:
    return det_ibp_sides(op, u, phi, spec).defect


def det_riesz_sides(op: FracOperator, u: VectorField, phi: ScalarField) -> IdentityCheck:
    """∫ det D^s u φ against −(1/n) ∫ (I_{1−s} ∗ u)·(cof D^s u Dφ)."""
    _check_vector(op, u)
    big = op.enlarged()
    U = u.embedded(big.grid)
    Phi = phi.embedded(big.grid)
    G = ds_grad_vec(big, U)
    lhs = _det_pairing(big, G, Phi, MinorSpec.full(op.n))
    potential = np.stack([riesz_convolve(op.params, U.component(i), op.workers).values
                          for i in range(op.n)], axis=-1)
    flux = np.einsum("...ab,...b->...a", cof(G.values), central_gradient(Phi).values)
    rhs = -float(np.sum(potential * flux)) * big.grid.cell_volume / op.n
    return IdentityCheck(lhs, rhs)


def det_riesz_identity_residual(op: FracOperator, u: VectorField, phi: ScalarField) -> float:
    return det_riesz_sides(op, u, phi).defect


# ---------------------------------------------------------------------------
# Weak continuity probe
# ---------------------------------------------------------------------------

@dataclass
class WeakContinuityReport:
    js: list[int]
    baseline: dict[int, float] = field(default_factory=dict)
    pairings: dict[int, list[float]] = field(default_factory=dict)
    gaps: dict[int, list[float]] = field(default_factory=dict)

    def trend_ok(self, k: int) -> bool:
        """Last gap below the first, with at most one increase along the way."""
        gaps = self.gaps[k]
        if max(gaps) == 0:
            return True
        increases = sum(1 for a, b in zip(gaps, gaps[1:]) if b > a)
        return gaps[-1] < gaps[0] and increases <= 1


def weak_continuity_probe(op: FracOperator, u: VectorField | None = None,
                          phi: ScalarField | None = None, js=(1, 2, 4, 8, 16),
                          amplitude: float = 1.0, radius: float = 1.5) -> WeakContinuityReport:
    """Pair leading principal minors of D^s u_j with φ for
    u_j = u + (amplitude/j)·sin(j x₁)·bump, one minor per order k."""
    grid = op.grid
    if u is None:
        u = build_example(ExampleKind.SMOOTH_VECTOR_BUMP, grid)
    if phi is None:
        phi = scalar_bump(grid, radius=radius)
    _check_vector(op, u)
    bump = scalar_bump(grid, radius=radius).values
    x1 = grid.coordinates[..., 0]
    specs = {k: MinorSpec(op.n, tuple(range(1, k + 1)), tuple(range(1, k + 1)))
             for k in range(1, op.n + 1)}

    def pairings_for(field_: VectorField) -> dict[int, float]:
        G = ds_grad_vec(op, field_).values
        return {k: integrate(ScalarField(grid, det_minor(spec, G) * phi.values))
                for k, spec in specs.items()}

    report = WeakContinuityReport(js=list(js))
    report.baseline = pairings_for(u)
    for k in specs:
        report.pairings[k], report.gaps[k] = [], []
    for j in js:
        oscillation = amplitude / j * np.sin(j * x1) * bump
        u_j = VectorField(grid, u.values + oscillation[..., None])
        for k, value in pairings_for(u_j).items():
            report.pairings[k].append(value)
            report.gaps[k].append(abs(value - report.baseline[k]))
    return report


# ---------------------------------------------------------------------------
# Refinement scans
# ---------------------------------------------------------------------------

VERIFY_CHECKS = ("piola", "ibp", "product", "det-ibp", "det-riesz")
MINOR_CHECKS = ("piola", "det-ibp")
VERIFY_COLUMNS = ["check", "n", "s", "N", "spec", "residual_sup", "residual_l2", "observed_order", "passed"]


@dataclass(frozen=True)
class VerifyRow:
    check: str
    n: int
    s: float
    N: int
    spec: str
    residual_sup: float
    residual_l2: float
    observed_order: float
    passed: bool

    def as_row(self) -> list:
        return [self.check, self.n, self.s, self.N, self.spec, self.residual_sup,
                self.residual_l2, self.observed_order, self.passed]


def observed_orders(errors: list[float], spacings: list[float]) -> list[float]:
    """log(e_k/e_{k+1}) / log(h_k/h_{k+1}); NaN where an error is not positive."""
    orders = [math.nan]
    for (e0, h0), (e1, h1) in zip(zip(errors, spacings), zip(errors[1:], spacings[1:])):
        if e0 > 0 and e1 > 0:
            orders.append(math.log(e0 / e1) / math.log(h0 / h1))
        else:
            orders.append(math.nan)
    return orders


def _evaluate(check: str, op: FracOperator, spec: MinorSpec) -> tuple[float, float]:
    grid = op.grid
    radius = min(1.5, 0.6 * grid.extent)
    if check == "piola":
        return piola_residual(op, build_example(ExampleKind.SMOOTH_VECTOR_BUMP, grid), spec)
    if check == "ibp":
        u = gaussian(grid)
        phi = VectorField.from_components([scalar_bump(grid, radius)] * grid.n)
        residual = ibp_residual(op, u, phi)
        return residual, math.nan
    if check == "product":
        grad_rule, div_rule = product_rule_residuals(op, scalar_bump(grid, radius), gaussian(grid))
        return grad_rule, div_rule
    u = build_example(ExampleKind.SMOOTH_VECTOR_BUMP, grid)
    phi = scalar_bump(grid, radius)
    if check == "det-ibp":
        return det_ibp_residual(op, u, phi, spec), math.nan
    if check == "det-riesz":
        return det_riesz_identity_residual(op, u, phi), math.nan
    raise ValueError(f"unknown check {check!r}; expected one of {VERIFY_CHECKS}")


def verify_scan(check: str, params: FracParams, N_list, extent: float = 4.0,
                backend: Backend | str = Backend.QUADRATURE, spec: MinorSpec | None = None,
                tol: float | None = None, workers: int = 1) -> list[VerifyRow]:
    """Residual of one check under grid refinement; the finest row decides pass/fail.

    For 'product' the sup column holds the gradient rule and the L² column the
    divergence rule; the pass test uses the larger of the two. Checks that
    take no minor write "-" in the spec column.
    """
    if check not in VERIFY_CHECKS:
        raise ValueError(f"unknown check {check!r}; expected one of {VERIFY_CHECKS}")
    tol = config.DEFAULT_TOLERANCES[check] if tol is None else tol
    spec = spec or MinorSpec.full(params.n)
    label = spec.label() if check in MINOR_CHECKS else "-"
    results, spacings = [], []
    for N in sorted(N_list):
        op = FracOperator(params, Grid(params.n, extent, N), Backend(backend), workers)
        try:
            sup, l2 = _evaluate(check, op, spec)
        except ValueError:
            logger.exception("%s failed at n=%d s=%.3f N=%d", check, params.n, params.s, N)
            sup = l2 = math.nan
        headline = max(sup, l2) if check == "product" else sup
        results.append((N, sup, l2, headline))
        spacings.append(op.grid.spacing)
        logger.info("%s n=%d s=%.3f N=%d residual=%.3e", check, params.n, params.s, N, headline)
    orders = observed_orders([r[3] for r in results], spacings)
    return [VerifyRow(check, params.n, params.s, N, label, sup, l2, order, headline <= tol)
            for (N, sup, l2, headline), order in zip(results, orders)]
