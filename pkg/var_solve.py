"""Variational solver — polyconvex fractional energies with complement values.

I(u) = Σ W(x, u, D^s_h u) hⁿ over every node of the box, minimized over the
values of u on Ω while u = g on Ω^c. The gradient uses the exact adjoint of
the assembled D^s_h, so it is the true gradient of the discrete energy.
"""

import json
import logging
import math
import time
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import optimize

import config
from frac_core import FracParams
from frac_ops import Backend, FracOperator
from grid_field import Grid, MatrixField, RegionMask, VectorField, lp_norm
from membership_lab import ExampleKind, ExampleMap, build_example, existence_regime, gaussian
from minors import cof, det

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """A problem file is malformed; the message names the key."""


class EnergyError(ValueError):
    """The energy density is not finite somewhere."""


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Coercivity:
    """W ≥ a + c|F|^p, plus |cof F|^q and a det weight where present."""

    p: float
    c: float
    a: float = 0.0
    q: float | None = None
    det_weight: str | None = None


class EnergyDensity(ABC):
    """W(x, u, F) evaluated nodewise on arrays (..., n), (..., m), (..., m, n)."""

    name = ""

    @abstractmethod
    def evaluate(self, x: np.ndarray, u: np.ndarray, F: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def d_du(self, x: np.ndarray, u: np.ndarray, F: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def d_dF(self, x: np.ndarray, u: np.ndarray, F: np.ndarray) -> np.ndarray: ...

    @property
    @abstractmethod
    def coercivity(self) -> Coercivity: ...


def _frobenius(F: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(F * F, axis=(-2, -1)))


def _power_gradient(F: np.ndarray, p: float) -> np.ndarray:
    """Derivative of |F|^p, taken as 0 where F = 0."""
    norm = _frobenius(F)
    safe = np.where(norm > 0, norm, 1.0)
    factor = np.where(norm > 0, p * safe ** (p - 2), 0.0)
    return factor[..., None, None] * F


@dataclass(frozen=True, eq=False)
class QuadraticDensity(EnergyDensity):
    """stiffness·|F|² + mass·|u − f(x)|² + offset.

    target is f: a callable of the node coordinates or an array of node
    values; None means f = 0.
    """

    stiffness: float = 1.0
    mass: float = 1.0
    offset: float = 0.0
    target: Callable[[np.ndarray], np.ndarray] | np.ndarray | None = None

    name = "quadratic"

    def _target(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        if self.target is None:
            return np.zeros_like(u)
        values = self.target(x) if callable(self.target) else self.target
        return np.broadcast_to(np.asarray(values, dtype=float), u.shape)

    def evaluate(self, x, u, F):
        misfit = u - self._target(x, u)
        return (self.stiffness * np.sum(F * F, axis=(-2, -1))
                + self.mass * np.sum(misfit * misfit, axis=-1) + self.offset)

    def d_du(self, x, u, F):
        return 2 * self.mass * (u - self._target(x, u))

    def d_dF(self, x, u, F):
        return 2 * self.stiffness * F

    @property
    def coercivity(self) -> Coercivity:
        return Coercivity(p=2.0, c=self.stiffness, a=self.offset)


@dataclass(frozen=True, eq=False)
class PolyconvexDensity(EnergyDensity):
    """alpha·|F|^p + beta·|cof F|^q + gamma·(det F − 1)²."""

    p: float = 4.0
    alpha: float = 1.0
    q: float = 2.0
    beta: float = 0.0
    gamma: float = 1.0

    name = "polyconvex"

    def __post_init__(self):
        if self.p <= 1 or self.q <= 1:
            raise ValueError("exponents p and q must exceed 1")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("density weights must be non-negative")

    def evaluate(self, x, u, F):
        W = self.alpha * _frobenius(F) ** self.p
        if self.beta:
            W = W + self.beta * _frobenius(cof(F)) ** self.q
        if self.gamma:
            W = W + self.gamma * (det(F) - 1) ** 2
        return W

    def d_du(self, x, u, F):
        return np.zeros_like(u)

    def d_dF(self, x, u, F):
        grad = self.alpha * _power_gradient(F, self.p)
        if self.beta:
            C = cof(F)
            outer = _power_gradient(C, self.q)
            n = F.shape[-1]
            # cof is linear (n ≤ 2) or quadratic with cof(E_kl) = 0 (n = 3),
            # so cof(F + E_kl) − cof(F) is its exact derivative along E_kl
            cof_grad = np.zeros_like(F)
            for k in range(n):
                for l in range(n):
                    bumped = F.copy()
                    bumped[..., k, l] += 1.0
                    cof_grad[..., k, l] = np.sum(outer * (cof(bumped) - C), axis=(-2, -1))
            grad = grad + self.beta * cof_grad
        if self.gamma:
            grad = grad + 2 * self.gamma * (det(F) - 1)[..., None, None] * cof(F)
        return grad

    @property
    def coercivity(self) -> Coercivity:
        return Coercivity(
            p=self.p,
            c=self.alpha,
            q=self.q if self.beta else None,
            det_weight="(det F - 1)^2" if self.gamma else None,
        )


DENSITIES = {"quadratic": QuadraticDensity, "polyconvex": PolyconvexDensity}


# ---------------------------------------------------------------------------
# Problem
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Problem:
    params: FracParams
    grid: Grid
    omega: RegionMask
    g: VectorField
    density: EnergyDensity
    backend: Backend = Backend.QUADRATURE
    workers: int = 1

    def __post_init__(self):
        if self.params.n != self.grid.n:
            raise ValueError("params and grid dimensions differ")
        if self.omega.grid != self.grid or self.g.grid != self.grid:
            raise ValueError("omega and g must live on the problem grid")
        if self.g.num_components != self.grid.n:
            raise ValueError(f"g must have {self.grid.n} components")
        if self.omega.touches_rim:
            raise ValueError("omega must not contain rim nodes")
        self.g.require_compact_support()
        self._warn_if_outside_existence_regime()

    def _warn_if_outside_existence_regime(self):
        tag = self.density.coercivity
        n, s = self.params.n, self.params.s
        if tag.c <= 0:
            logger.warning("Density %s has no |F|^p coercivity", self.density.name)
            return
        if s * tag.p < n and n > 1:
            regime = existence_regime(n, s, tag.p)
            if tag.q is None or regime.q_min is None or tag.q <= regime.q_min or tag.det_weight is None:
                logger.warning(
                    "Density %s with sp < n lacks the cofactor/determinant coercivity "
                    "(needs q > %.3f and a superlinear det weight)",
                    self.density.name, regime.q_min or math.nan,
                )

    @cached_property
    def operator(self) -> FracOperator:
        return FracOperator(self.params, self.grid, self.backend, self.workers)

    def project(self, u: VectorField) -> VectorField:
        """Impose u = g on Ω^c."""
        values = np.array(u.values)
        values[self.omega.outside] = self.g.values[self.omega.outside]
        return VectorField(self.grid, values)


def _energy_and_gradient(prob: Problem, values: np.ndarray, with_gradient: bool = True):
    op = prob.operator
    x = prob.grid.coordinates
    F = op.gradient_values(values)
    W = prob.density.evaluate(x, values, F)
    bad = ~np.isfinite(W)
    if np.any(bad):
        node = tuple(int(i) for i in np.argwhere(bad)[0])
        raise EnergyError(f"energy density is not finite at node {node}, x = {x[node].tolist()}")
    e = math.fsum((W * prob.grid.cell_volume).ravel().tolist())
    if not with_gradient:
        return e, None
    G = prob.density.d_du(x, values, F) - op.divergence_values(prob.density.d_dF(x, values, F))
    G[prob.omega.outside] = 0.0
    return e, G


def energy(prob: Problem, u: VectorField) -> float:
    return _energy_and_gradient(prob, u.require_compact_support().values, with_gradient=False)[0]


def energy_gradient(prob: Problem, u: VectorField) -> VectorField:
    """L² gradient of the discrete energy, zero on Ω^c."""
    return VectorField(prob.grid, _energy_and_gradient(prob, u.require_compact_support().values)[1])


def _test_norm(prob: Problem) -> float:
    """Energy norm (‖v‖² + ‖D^s v‖²)^{1/2} of a unit nodal test at the box center."""
    grid = prob.grid
    delta = np.zeros(grid.shape)
    delta[(grid.points_per_axis // 2,) * grid.n] = 1.0
    Dv = prob.operator.gradient_values(delta)
    return math.sqrt(grid.cell_volume * (1.0 + float(np.sum(Dv * Dv))))


def el_residual(prob: Problem, u: VectorField) -> float:
    """max over nodal tests v = e_c δ_x, x ∈ Ω, of |∫ ∂W/∂F·D^s v + ∂W/∂u·v| / ‖v‖."""
    G = energy_gradient(prob, u).values
    return float(np.max(np.abs(G))) * prob.grid.cell_volume / _test_norm(prob)


def coercivity_lower_bound(prob: Problem, u: VectorField) -> float:
    """∫ a + c‖D^s u‖_p^p over the box."""
    tag = prob.density.coercivity
    F = MatrixField(prob.grid, prob.operator.gradient_values(u.values))
    volume = (2 * prob.grid.extent) ** prob.grid.n
    return tag.a * volume + tag.c * lp_norm(F, tag.p) ** tag.p


# ---------------------------------------------------------------------------
# Minimization
# ---------------------------------------------------------------------------

@dataclass
class SolveReport:
    iterations: int = 0
    energy_trace: list[float] = field(default_factory=list)
    grad_norm_trace: list[float] = field(default_factory=list)
    el_residual: float = math.nan
    wall_time: float = 0.0
    reason: str = ""
    tol_g: float = math.nan

    @property
    def converged(self) -> bool:
        return self.reason == "converged"

    def to_dict(self) -> dict:
        data = asdict(self)
        data["converged"] = self.converged
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def minimize(prob: Problem, u0: VectorField, tol_g: float | None = None,
             max_iters: int | None = None, memory: int | None = None) -> tuple[VectorField, SolveReport]:
    """L-BFGS-B on the Ω values; Ω^c values stay equal to g.

    Stops with `converged` once max|G| ≤ tol_g, `max_iters` at the iteration
    limit, and `line_search_failed` when L-BFGS-B gives up earlier. The
    returned field is the last accepted iterate.
    """
    start = time.perf_counter()
    max_iters = config.SOLVER_MAX_ITERS if max_iters is None else max_iters
    memory = config.LBFGS_MEMORY if memory is None else memory
    free = prob.omega.inside
    base = prob.project(u0).values.copy()
    m = base.shape[-1]
    dv = prob.grid.cell_volume

    def unpack(x: np.ndarray) -> np.ndarray:
        values = base.copy()
        values[free] = x.reshape(-1, m)
        return values

    e, G = _energy_and_gradient(prob, base)
    if tol_g is None:
        tol_g = config.SOLVER_TOL_FACTOR * (1 + abs(e))
    gtol = tol_g * dv
    report = SolveReport(energy_trace=[e], grad_norm_trace=[float(np.max(np.abs(G[free])))], tol_g=tol_g)
    accepted = base[free].ravel()
    latest = {"x": accepted, "e": e, "G": G}

    def fun(x: np.ndarray):
        try:
            e, G = _energy_and_gradient(prob, unpack(x))
        except EnergyError as err:
            logger.debug("Trial step rejected: %s", err)
            return math.inf, np.zeros_like(x)
        latest.update(x=x.copy(), e=e, G=G)
        return e, G[free].ravel() * dv

    def record(xk: np.ndarray):
        nonlocal accepted
        if not np.array_equal(xk, latest["x"]):
            fun(xk)
        accepted = latest["x"]
        report.iterations += 1
        report.energy_trace.append(latest["e"])
        report.grad_norm_trace.append(float(np.max(np.abs(latest["G"][free]))))
        logger.debug("iter %d energy %.12e |g| %.3e", report.iterations, latest["e"], report.grad_norm_trace[-1])

    message = "not started"
    if report.grad_norm_trace[0] * dv > gtol and max_iters > 0:
        result = optimize.minimize(
            fun, accepted, jac=True, method="L-BFGS-B", callback=record,
            options={
                "maxiter": max_iters,
                "maxcor": memory,
                "gtol": gtol,
                "ftol": 0.0,
                "maxls": config.LINE_SEARCH_STEPS,
                "maxfun": (max_iters + 1) * config.LINE_SEARCH_STEPS,
            },
        )
        message = result.message
        logger.debug("L-BFGS-B: %s", message)

    if report.grad_norm_trace[-1] * dv <= gtol:
        reason = "converged"
    elif report.iterations >= max_iters:
        reason = "max_iters"
    else:
        reason = "line_search_failed"
        logger.warning("Line search failed after %d iterations (energy %.12e): %s",
                       report.iterations, report.energy_trace[-1], message)

    u = VectorField(prob.grid, unpack(accepted))
    report.reason = reason
    report.el_residual = el_residual(prob, u)
    report.wall_time = time.perf_counter() - start
    logger.info("Solver stopped: %s after %d iterations, energy %.12e",
                reason, report.iterations, report.energy_trace[-1])
    return u, report


@dataclass(frozen=True)
class StartComparison:
    energies: list[float]
    spread: float

    @property
    def agree(self) -> bool:
        return self.spread <= 1e-8


def compare_starts(prob: Problem, starts: list[VectorField], **solver_kwargs) -> StartComparison:
    """Minimize from several starts; disagreement is reported, not raised."""
    energies = [minimize(prob, u0, **solver_kwargs)[1].energy_trace[-1] for u0 in starts]
    spread = (max(energies) - min(energies)) / (1 + abs(min(energies)))
    if spread > 1e-8:
        logger.warning("Starts disagree: energies %s", energies)
    return StartComparison(energies, spread)


# ---------------------------------------------------------------------------
# Problem files
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverSettings:
    tol_g: float | None = None
    max_iters: int = config.SOLVER_MAX_ITERS
    memory: int = config.LBFGS_MEMORY
    initial_amplitude: float = 0.1


_DENSITY_KEYS = {
    "quadratic": {"stiffness", "mass", "offset", "target_amplitude"},
    "polyconvex": {"p", "alpha", "q", "beta", "gamma"},
}
_KNOWN_KEYS = {
    "frac.n", "frac.s", "frac.p", "grid.N", "grid.L", "omega.shape", "omega.radius",
    "density.name", "datum.amplitude", "initial.amplitude", "solver.tol_g",
    "solver.max_iters", "solver.memory", "solver.backend",
}


def parse_problem_text(text: str) -> dict[str, str]:
    """key = value lines; '#' starts a comment."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in entries:
            raise ConfigError(f"{key}: duplicate key")
        entries[key] = value
    return entries


def _get(entries: dict, key: str, kind: type, default=None, required: bool = False):
    if key not in entries:
        if required:
            raise ConfigError(f"{key}: missing required key")
        return default
    try:
        return kind(entries[key])
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {entries[key]!r} as {kind.__name__}") from e


def build_problem(entries: dict[str, str], workers: int = 1) -> tuple[Problem, SolverSettings]:
    name = _get(entries, "density.name", str, required=True)
    if name not in DENSITIES:
        raise ConfigError(f"density.name: unknown density {name!r}; expected one of {sorted(DENSITIES)}")
    allowed = _KNOWN_KEYS | {f"density.{k}" for k in _DENSITY_KEYS[name]}
    for key in entries:
        if key not in allowed:
            raise ConfigError(f"{key}: unknown key")

    try:
        params = FracParams(_get(entries, "frac.n", int, required=True),
                            _get(entries, "frac.s", float, required=True),
                            _get(entries, "frac.p", float, 2.0))
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"frac: {e}") from e
    try:
        grid = Grid(params.n, _get(entries, "grid.L", float, required=True),
                    _get(entries, "grid.N", int, required=True))
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"grid: {e}") from e

    shape = _get(entries, "omega.shape", str, "ball")
    radius = _get(entries, "omega.radius", float, grid.extent / 2)
    try:
        if shape == "ball":
            omega = RegionMask.ball(grid, radius)
        elif shape == "cube":
            omega = RegionMask.cube(grid, radius)
        else:
            raise ConfigError(f"omega.shape: unknown shape {shape!r}; expected 'ball' or 'cube'")
        if omega.touches_rim:
            raise ValueError(f"radius {radius} reaches the outermost node layer")
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"omega.radius: {e}") from e

    amplitude = _get(entries, "datum.amplitude", float, 0.0)
    if amplitude:
        datum = ExampleMap(ExampleKind.SMOOTH_VECTOR_BUMP, radius=grid.extent - 2 * grid.spacing,
                           core=amplitude)
        g = build_example(datum, grid)
    else:
        g = VectorField.zeros(grid)

    density_args = {}
    for key in _DENSITY_KEYS[name]:
        value = _get(entries, f"density.{key}", float)
        if value is not None:
            density_args[key] = value
    if name == "quadratic":
        target_amplitude = density_args.pop("target_amplitude", 0.0)
        if target_amplitude:
            bump = target_amplitude * gaussian(grid).values
            density_args["target"] = np.stack([bump] * grid.n, axis=-1)
    try:
        density = DENSITIES[name](**density_args)
    except ValueError as e:
        raise ConfigError(f"density: {e}") from e

    backend_name = _get(entries, "solver.backend", str, Backend.QUADRATURE.value)
    try:
        backend = Backend(backend_name)
    except ValueError as e:
        raise ConfigError(f"solver.backend: unknown backend {backend_name!r}") from e

    settings = SolverSettings(
        tol_g=_get(entries, "solver.tol_g", float),
        max_iters=_get(entries, "solver.max_iters", int, config.SOLVER_MAX_ITERS),
        memory=_get(entries, "solver.memory", int, config.LBFGS_MEMORY),
        initial_amplitude=_get(entries, "initial.amplitude", float, 0.1),
    )
    return Problem(params, grid, omega, g, density, backend, workers), settings


def load_problem(path: str | Path, workers: int = 1) -> tuple[Problem, SolverSettings]:
    return build_problem(parse_problem_text(Path(path).read_text()), workers)


def initial_guess(prob: Problem, amplitude: float) -> VectorField:
    """g plus amplitude·x·ψ(|x|/r) on Ω, r the largest ball inside Ω around the origin."""
    outside_radius = prob.grid.radius[prob.omega.outside]
    r = float(np.min(outside_radius))
    bump = build_example(ExampleMap(ExampleKind.SMOOTH_VECTOR_BUMP, radius=r, core=1.0), prob.grid)
    return prob.project(prob.g + amplitude * bump)
