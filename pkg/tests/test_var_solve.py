"""Tests for var_solve.py — densities, energies, the L-BFGS-B solver and problem files."""

import json
import logging
import math

import numpy as np
import pytest
from scipy.optimize import OptimizeResult

from frac_core import FracParams
from frac_ops import Backend, ds_grad_vec
from grid_field import Grid, MatrixField, RegionMask, SupportError, VectorField, inner, lp_norm
from membership_lab import ExampleKind, ExampleMap, build_example, gaussian
from tests.conftest import SAMPLE_PROBLEM_TEXT
from var_solve import (
    ConfigError,
    Coercivity,
    EnergyError,
    PolyconvexDensity,
    Problem,
    QuadraticDensity,
    SolveReport,
    build_problem,
    coercivity_lower_bound,
    compare_starts,
    el_residual,
    energy,
    energy_gradient,
    initial_guess,
    load_problem,
    minimize,
    parse_problem_text,
)


def _problem(n=1, extent=4.0, N=32, radius=3.0, density=None, backend=Backend.SPECTRAL, g=None, s=0.5):
    grid = Grid(n, extent, N)
    return Problem(
        FracParams(n, s),
        grid,
        RegionMask.ball(grid, radius),
        VectorField.zeros(grid) if g is None else g,
        density or QuadraticDensity(),
        backend,
    )


def _gaussian_target(grid):
    return gaussian(grid).values[..., None] * np.ones(grid.n)


def _fd_dF(density, x, u, F, eps=1e-6):
    grad = np.zeros_like(F)
    for idx in np.ndindex(F.shape[-2:]):
        bump = np.zeros_like(F)
        bump[(Ellipsis,) + idx] = eps
        grad[(Ellipsis,) + idx] = (density.evaluate(x, u, F + bump) - density.evaluate(x, u, F - bump)) / (2 * eps)
    return grad


def _non_increasing(trace):
    return all(b <= a + 1e-13 * (1 + abs(a)) for a, b in zip(trace, trace[1:]))


# ============================================================
# Densities
# ============================================================

class TestDensities:
    """Values, derivatives and coercivity tags."""

    def test_quadratic_value(self):
        density = QuadraticDensity(stiffness=2.0, mass=3.0, offset=0.5, target=lambda x: x)
        x = np.array([[1.0, 2.0]])
        u = np.array([[2.0, 2.0]])
        F = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        assert density.evaluate(x, u, F)[0] == pytest.approx(2.0 * 2 + 3.0 * 1 + 0.5)

    def test_quadratic_derivatives(self):
        rng = np.random.default_rng(0)
        x, u, F = rng.standard_normal((5, 2)), rng.standard_normal((5, 2)), rng.standard_normal((5, 2, 2))
        density = QuadraticDensity(stiffness=1.5, mass=0.7, target=np.array([0.2, -0.1]))
        assert density.d_dF(x, u, F) == pytest.approx(_fd_dF(density, x, u, F), rel=1e-6, abs=1e-8)
        eps = 1e-6
        for c in range(2):
            du = np.zeros_like(u)
            du[:, c] = eps
            fd = (density.evaluate(x, u + du, F) - density.evaluate(x, u - du, F)) / (2 * eps)
            assert density.d_du(x, u, F)[:, c] == pytest.approx(fd, rel=1e-6, abs=1e-8)

    @pytest.mark.parametrize("size", [2, 3])
    def test_polyconvex_derivative(self, size):
        rng = np.random.default_rng(size)
        F = rng.standard_normal((6, size, size))
        x, u = np.zeros((6, size)), np.zeros((6, size))
        density = PolyconvexDensity(p=4.0, alpha=1.0, q=2.0, beta=0.5, gamma=2.0)
        assert density.d_dF(x, u, F) == pytest.approx(_fd_dF(density, x, u, F), rel=1e-5, abs=1e-6)
        assert np.all(density.d_du(x, u, F) == 0)

    def test_polyconvex_at_zero_gradient(self):
        F = np.zeros((1, 2, 2))
        density = PolyconvexDensity()
        assert density.evaluate(np.zeros((1, 2)), np.zeros((1, 2)), F)[0] == pytest.approx(1.0)
        assert np.all(density.d_dF(np.zeros((1, 2)), np.zeros((1, 2)), F) == 0)

    def test_polyconvex_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            PolyconvexDensity(p=1.0)
        with pytest.raises(ValueError):
            PolyconvexDensity(gamma=-1.0)

    def test_coercivity_tags(self):
        assert QuadraticDensity(stiffness=2.0, offset=0.5).coercivity == Coercivity(p=2.0, c=2.0, a=0.5)
        tag = PolyconvexDensity(p=3.0, beta=0.0).coercivity
        assert tag.p == 3.0 and tag.q is None and tag.det_weight is not None
        assert PolyconvexDensity(beta=1.0, gamma=0.0).coercivity.q == 2.0

    @pytest.mark.parametrize("kind", [QuadraticDensity, PolyconvexDensity])
    def test_densities_compare_by_identity(self, kind):
        density = kind()
        assert density == density
        assert density != kind()
        assert len({density, kind()}) == 2


# ============================================================
# Problems and energies
# ============================================================

class TestProblem:
    """Construction checks and Ω^c projection."""

    def test_dimension_mismatch(self):
        grid = Grid(1, 4.0, 16)
        with pytest.raises(ValueError, match="dimensions"):
            Problem(FracParams(2, 0.5), grid, RegionMask.ball(grid, 2.0), VectorField.zeros(grid), QuadraticDensity())

    def test_omega_on_other_grid(self):
        grid, other = Grid(1, 4.0, 16), Grid(1, 4.0, 32)
        with pytest.raises(ValueError, match="grid"):
            Problem(FracParams(1, 0.5), grid, RegionMask.ball(other, 2.0), VectorField.zeros(grid), QuadraticDensity())

    def test_datum_components(self):
        grid = Grid(2, 4.0, 16)
        g = VectorField(grid, np.zeros(grid.shape + (1,)))
        with pytest.raises(ValueError, match="components"):
            Problem(FracParams(2, 0.5), grid, RegionMask.ball(grid, 2.0), g, QuadraticDensity())

    def test_datum_must_be_compact(self):
        grid = Grid(1, 4.0, 16)
        values = np.zeros(grid.shape + (1,))
        values[0, 0] = 1.0
        with pytest.raises(SupportError):
            Problem(FracParams(1, 0.5), grid, RegionMask.ball(grid, 2.0), VectorField(grid, values), QuadraticDensity())

    def test_omega_touching_rim(self):
        grid = Grid(2, 4.0, 16)
        omega = RegionMask.ball(grid, 4.0)
        assert omega.touches_rim
        with pytest.raises(ValueError, match="rim"):
            Problem(FracParams(2, 0.5), grid, omega, VectorField.zeros(grid), QuadraticDensity())

    def test_warns_outside_existence_regime(self, caplog):
        with caplog.at_level(logging.WARNING, logger="var_solve"):
            _problem(n=2, N=16, radius=2.0, density=PolyconvexDensity(beta=0.0))
        assert "cofactor" in caplog.text

    def test_project(self):
        prob = _problem()
        u = VectorField(prob.grid, np.ones(prob.grid.shape + (1,)))
        projected = prob.project(u)
        assert np.all(projected.values[prob.omega.outside] == 0)
        assert np.all(projected.values[prob.omega.inside] == 1)


class TestEnergy:
    """Discrete energy and its gradient."""

    def test_zero_state(self):
        prob = _problem()
        assert energy(prob, prob.g) == 0.0

    def test_offset_integrates_over_the_box(self):
        prob = _problem(density=QuadraticDensity(offset=0.5))
        assert energy(prob, prob.g) == pytest.approx(0.5 * 8.0)

    def test_mass_term_is_l2_norm(self, random_inner_field):
        prob = _problem(density=QuadraticDensity(stiffness=0.0, mass=1.0))
        u = random_inner_field(prob.grid, components=1)
        assert energy(prob, u) == pytest.approx(lp_norm(u, 2) ** 2, rel=1e-12)

    def test_stiffness_term_is_gradient_norm(self, random_inner_field):
        prob = _problem(density=QuadraticDensity(stiffness=1.0, mass=0.0), backend=Backend.QUADRATURE)
        u = random_inner_field(prob.grid, components=1)
        Du = ds_grad_vec(prob.operator, u)
        assert energy(prob, u) == pytest.approx(inner(Du, Du), rel=1e-12)

    def test_not_finite_density(self):
        class BlowUp(QuadraticDensity):
            def evaluate(self, x, u, F):
                return np.where(x[..., 0] > 1.0, np.inf, super().evaluate(x, u, F))

        prob = _problem(density=BlowUp())
        with pytest.raises(EnergyError, match="not finite at node"):
            energy(prob, prob.g)

    def test_gradient_vanishes_off_omega(self, random_inner_field):
        prob = _problem(density=QuadraticDensity(target=_gaussian_target(Grid(1, 4.0, 32))))
        G = energy_gradient(prob, random_inner_field(prob.grid, components=1))
        assert np.all(G.values[prob.omega.outside] == 0)
        assert np.any(G.values[prob.omega.inside] != 0)

    def test_gradient_matches_finite_differences(self, random_inner_field):
        prob = _problem(density=QuadraticDensity(target=_gaussian_target(Grid(1, 4.0, 32))))
        u = random_inner_field(prob.grid, components=1, seed=1)
        eps = 1e-3
        for seed in range(2, 22):
            v = random_inner_field(prob.grid, components=1, seed=seed)
            fd = (energy(prob, u + eps * v) - energy(prob, u - eps * v)) / (2 * eps)
            assert inner(energy_gradient(prob, u), v) == pytest.approx(fd, rel=1e-8)

    def test_polyconvex_gradient_matches_finite_differences(self):
        grid = Grid(2, 2.0, 16)
        prob = _problem(n=2, extent=2.0, N=16, radius=1.0, backend=Backend.QUADRATURE,
                        density=PolyconvexDensity(p=4.0, beta=1.0, gamma=1.0))
        u = 0.3 * build_example(ExampleKind.SMOOTH_VECTOR_BUMP, grid)
        gradient = energy_gradient(prob, u)
        rng = np.random.default_rng(3)
        eps = 1e-5
        for _ in range(20):
            values = rng.standard_normal(grid.shape + (2,))
            values[prob.omega.outside] = 0.0
            v = VectorField(grid, values)
            fd = (energy(prob, u + eps * v) - energy(prob, u - eps * v)) / (2 * eps)
            assert inner(gradient, v) == pytest.approx(fd, rel=1e-5, abs=1e-10)

    @pytest.mark.parametrize("density", [
        QuadraticDensity(stiffness=2.0, offset=0.5, target=lambda x: np.cos(x)),
        PolyconvexDensity(p=4.0, beta=1.0, gamma=1.0),
        PolyconvexDensity(p=3.0, alpha=0.5),
    ])
    def test_energy_dominates_coercivity_bound(self, density, random_inner_field):
        prob = _problem(n=2, extent=2.0, N=16, radius=1.0, density=density, backend=Backend.QUADRATURE)
        for seed in range(20):
            u = 0.5 * random_inner_field(prob.grid, components=2, seed=seed)
            assert energy(prob, u) >= coercivity_lower_bound(prob, u) - 1e-10

    def test_coercivity_lower_bound(self):
        grid = Grid(2, 2.0, 16)
        prob = _problem(n=2, extent=2.0, N=16, radius=1.0, density=PolyconvexDensity(beta=1.0))
        u = 0.5 * build_example(ExampleKind.SMOOTH_VECTOR_BUMP, grid)
        bound = coercivity_lower_bound(prob, u)
        F = MatrixField(grid, prob.operator.gradient_values(u.values))
        assert bound == pytest.approx(lp_norm(F, 4.0) ** 4)
        assert bound < energy(prob, u)


# ============================================================
# Solver
# ============================================================

class TestMinimize:
    """L-BFGS-B on the Ω values."""

    def test_zero_problem(self):
        prob = _problem()
        u, report = minimize(prob, prob.g)
        assert report.converged
        assert report.iterations == 0
        assert report.energy_trace == [0.0]
        assert np.all(u.values == 0)
        assert report.el_residual == 0.0

    def test_matches_assembled_linear_solve(self, backend):
        prob = _problem(density=QuadraticDensity(target=_gaussian_target(Grid(1, 4.0, 32))), backend=backend)
        inside = np.flatnonzero(prob.omega.inside)
        zero = energy_gradient(prob, prob.g).values[:, 0]
        columns = []
        for j in inside:
            values = np.zeros(prob.grid.shape + (1,))
            values[j, 0] = 1.0
            columns.append(energy_gradient(prob, VectorField(prob.grid, values)).values[inside, 0] - zero[inside])
        expected = np.linalg.solve(np.column_stack(columns), -zero[inside])

        u, report = minimize(prob, prob.g)
        assert report.converged
        assert u.values[inside, 0] == pytest.approx(expected, abs=1e-6)

    def test_matches_whole_space_solution(self):
        grid = Grid(1, 8.0, 64)
        prob = _problem(extent=8.0, N=64, radius=6.0, density=QuadraticDensity(target=_gaussian_target(grid)))
        u, report = minimize(prob, prob.g)
        assert report.converged

        size, h = 8192, grid.spacing
        x = (np.arange(size) - size / 2 + 0.5) * h
        xi = np.fft.fftfreq(size, d=h)
        reference = np.fft.ifft(np.fft.fft(np.exp(-math.pi * x * x)) / (2 * math.pi * np.abs(xi) + 1)).real
        center = np.abs(grid.axis) <= 2.0
        expected = np.interp(grid.axis[center], x, reference)
        assert np.max(np.abs(u.values[center, 0] - expected)) <= 5e-2 * np.max(np.abs(expected))

    def test_complement_values_are_kept(self):
        grid = Grid(1, 4.0, 32)
        g = 0.1 * build_example(ExampleMap(ExampleKind.SMOOTH_VECTOR_BUMP, radius=3.5), grid)
        prob = _problem(g=g, density=QuadraticDensity(target=_gaussian_target(grid)))
        u, report = minimize(prob, initial_guess(prob, 0.2))
        assert np.array_equal(u.values[prob.omega.outside], g.values[prob.omega.outside])
        assert _non_increasing(report.energy_trace)
        assert len(report.energy_trace) == report.iterations + 1
        assert report.converged
        assert report.el_residual <= 10 * report.tol_g

    def test_polyconvex_descends(self):
        prob = _problem(n=2, extent=2.0, N=24, radius=1.0, backend=Backend.QUADRATURE,
                        density=PolyconvexDensity(p=4.0, beta=1.0, gamma=1.0))
        u, report = minimize(prob, initial_guess(prob, 0.2), max_iters=100)
        assert report.reason in ("converged", "max_iters", "line_search_failed")
        assert report.energy_trace[-1] < report.energy_trace[0]
        assert _non_increasing(report.energy_trace)
        assert np.all(u.values[prob.omega.outside] == 0)

    def test_max_iters(self):
        prob = _problem(density=QuadraticDensity(target=_gaussian_target(Grid(1, 4.0, 32))))
        _, report = minimize(prob, prob.g, max_iters=1, tol_g=1e-14)
        assert report.reason == "max_iters"
        assert report.iterations == 1
        assert not report.converged

    def test_el_residual_matches_report(self):
        prob = _problem(density=QuadraticDensity(target=_gaussian_target(Grid(1, 4.0, 32))))
        u, report = minimize(prob, prob.g)
        assert el_residual(prob, u) == pytest.approx(report.el_residual)
        assert report.el_residual <= 10 * report.tol_g

    def test_el_residual_separates_minimizer(self, random_inner_field):
        prob = _problem(density=QuadraticDensity(target=_gaussian_target(Grid(1, 4.0, 32))))
        u, report = minimize(prob, prob.g)
        assert report.converged
        rough = prob.project(random_inner_field(prob.grid, components=1, seed=5))
        assert el_residual(prob, rough) >= 10 * el_residual(prob, u)

    def test_polyconvex_acceptance_run(self):
        prob = _problem(n=2, extent=4.0, N=48, radius=2.0, backend=Backend.QUADRATURE,
                        density=PolyconvexDensity())
        u, report = minimize(prob, initial_guess(prob, 0.1), max_iters=2000)
        assert report.converged
        assert report.iterations <= 2000
        assert report.grad_norm_trace[-1] <= report.tol_g
        assert _non_increasing(report.energy_trace)
        assert np.all(u.values[prob.omega.outside] == 0)

    def test_runs_lbfgsb_with_settings(self, mocker):
        prob = _problem(density=QuadraticDensity(target=_gaussian_target(Grid(1, 4.0, 32))))
        run = mocker.patch("var_solve.optimize.minimize", return_value=OptimizeResult(message="stopped"))
        minimize(prob, prob.g, max_iters=7, memory=3)
        kwargs = run.call_args.kwargs
        assert kwargs["method"] == "L-BFGS-B"
        assert kwargs["jac"] is True
        assert kwargs["options"]["maxiter"] == 7
        assert kwargs["options"]["maxcor"] == 3

    def test_early_stop_is_line_search_failure(self, mocker, caplog):
        prob = _problem(density=QuadraticDensity(target=_gaussian_target(Grid(1, 4.0, 32))))
        mocker.patch("var_solve.optimize.minimize", return_value=OptimizeResult(message="ABNORMAL"))
        with caplog.at_level(logging.WARNING, logger="var_solve"):
            u, report = minimize(prob, prob.g)
        assert report.reason == "line_search_failed"
        assert report.iterations == 0
        assert np.array_equal(u.values, prob.g.values)
        assert "ABNORMAL" in caplog.text

    def test_infinite_start(self):
        class Infinite(QuadraticDensity):
            def evaluate(self, x, u, F):
                return np.full(x.shape[:-1], np.inf)

        prob = _problem(density=Infinite())
        with pytest.raises(EnergyError):
            minimize(prob, prob.g)


class TestCompareStarts:
    """Agreement of minimizers from several starts."""

    def test_convex_problem_agrees(self):
        prob = _problem(density=QuadraticDensity(target=_gaussian_target(Grid(1, 4.0, 32))))
        result = compare_starts(prob, [prob.g, initial_guess(prob, 0.3)])
        assert len(result.energies) == 2
        assert result.agree

    def test_disagreement_is_reported(self, mocker, caplog):
        prob = _problem()
        mocker.patch("var_solve.minimize", side_effect=[
            (prob.g, SolveReport(energy_trace=[1.0])),
            (prob.g, SolveReport(energy_trace=[2.0])),
        ])
        with caplog.at_level(logging.WARNING, logger="var_solve"):
            result = compare_starts(prob, [prob.g, prob.g])
        assert not result.agree
        assert result.spread == pytest.approx(0.5)
        assert "disagree" in caplog.text


class TestSolveReport:
    """JSON report."""

    def test_to_json(self):
        report = SolveReport(iterations=2, energy_trace=[2.0, 1.0], grad_norm_trace=[1.0, 1e-9],
                             el_residual=1e-10, reason="converged", tol_g=1e-8)
        data = json.loads(report.to_json())
        assert data["converged"] is True
        assert data["energy_trace"] == [2.0, 1.0]
        assert list(data) == sorted(data)

    def test_not_converged(self):
        assert not SolveReport(reason="line_search_failed").converged


# ============================================================
# Problem files
# ============================================================

class TestProblemFiles:
    """key = value problem descriptions."""

    def test_parse(self):
        entries = parse_problem_text(SAMPLE_PROBLEM_TEXT)
        assert entries["frac.s"] == "0.5"
        assert entries["density.target_amplitude"] == "1.0"
        assert len(entries) == 11

    def test_build(self):
        prob, settings = build_problem(parse_problem_text(SAMPLE_PROBLEM_TEXT))
        assert prob.grid == Grid(1, 4.0, 32)
        assert prob.backend is Backend.SPECTRAL
        assert prob.omega.count == 24
        assert isinstance(prob.density, QuadraticDensity)
        assert prob.density.target.shape == (32, 1)
        assert settings.max_iters == 200
        assert settings.tol_g is None

    def test_load(self, tmp_path):
        path = tmp_path / "problem.txt"
        path.write_text(SAMPLE_PROBLEM_TEXT)
        prob, _ = load_problem(path, workers=2)
        assert prob.workers == 2
        assert prob.params == FracParams(1, 0.5)

    def test_datum_amplitude(self):
        text = SAMPLE_PROBLEM_TEXT + "datum.amplitude = 0.2\n"
        prob, _ = build_problem(parse_problem_text(text))
        assert prob.g.is_compact()
        assert np.any(prob.g.values != 0)

    def test_polyconvex_keys(self):
        text = SAMPLE_PROBLEM_TEXT.replace("density.name = quadratic", "density.name = polyconvex")
        text = text.replace("density.mass = 1.0", "density.beta = 1.0")
        text = text.replace("density.target_amplitude = 1.0   # f = gaussian", "density.p = 3")
        prob, _ = build_problem(parse_problem_text(text))
        density = prob.density
        assert isinstance(density, PolyconvexDensity)
        assert (density.p, density.alpha, density.q, density.beta, density.gamma) == (3.0, 1.0, 2.0, 1.0, 1.0)

    def test_omega_reaching_rim(self):
        text = SAMPLE_PROBLEM_TEXT.replace("frac.n = 1", "frac.n = 2")
        text = text.replace("omega.radius = 3.0", "omega.radius = 3.9")
        with pytest.raises(ConfigError, match="omega.radius: .*outermost"):
            build_problem(parse_problem_text(text))

    @pytest.mark.parametrize("edit,message", [
        (("frac.n = 1", "frac.x = 1"), "frac.x: unknown key"),
        (("density.name = quadratic", ""), "density.name: missing"),
        (("density.name = quadratic", "density.name = elastic"), "density.name: unknown density"),
        (("density.mass = 1.0", "density.p = 3"), "density.p: unknown key"),
        (("frac.n = 1", "frac.n = one"), "frac.n: cannot parse"),
        (("grid.N = 32", "grid.N = 7"), "grid:"),
        (("omega.shape = ball", "omega.shape = torus"), "omega.shape"),
        (("omega.radius = 3.0", "omega.radius = 40.0"), "omega.radius"),
        (("solver.backend = spec", "solver.backend = fft"), "solver.backend"),
        (("frac.s = 0.5", "frac.s = 1.5"), "frac:"),
    ])
    def test_build_errors(self, edit, message):
        text = SAMPLE_PROBLEM_TEXT.replace(*edit)
        with pytest.raises(ConfigError, match=message):
            build_problem(parse_problem_text(text))

    def test_parse_errors(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_problem_text("frac.n = 1\nfrac.s 0.5\n")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_problem_text("frac.n = 1\nfrac.n = 2\n")
        with pytest.raises(ConfigError, match="empty key"):
            parse_problem_text("= 1\n")


class TestInitialGuess:
    """Starting point for the solver."""

    def test_keeps_datum_off_omega(self):
        grid = Grid(1, 4.0, 32)
        g = 0.1 * build_example(ExampleMap(ExampleKind.SMOOTH_VECTOR_BUMP, radius=3.5), grid)
        prob = _problem(g=g)
        u0 = initial_guess(prob, 0.5)
        assert np.array_equal(u0.values[prob.omega.outside], g.values[prob.omega.outside])
        assert np.any(u0.values[prob.omega.inside] != g.values[prob.omega.inside])
        assert u0.is_compact()
