"""Shared pytest fixtures for fracvar tests."""

import math

import numpy as np
import pytest

from frac_core import FracParams
from frac_ops import Backend, FracOperator
from grid_field import Grid, ScalarField, VectorField
from membership_lab import ExampleKind, build_example, gaussian, scalar_bump


# --- Environment variables ---

SAMPLE_ENV = {
    "FRACVAR_OUT": "",
    "FRACVAR_THREADS": "2",
    "FRACVAR_LOG_LEVEL": "debug",
}


@pytest.fixture
def env_vars(monkeypatch):
    """Set all fracvar environment variables."""
    for key, value in SAMPLE_ENV.items():
        monkeypatch.setenv(key, value)
    return SAMPLE_ENV


# --- Reference values ---

# c_{n,s} in closed form at n = 1, s = 1/2
SAMPLE_CNS_1D = -1 / (2 * math.sqrt(2 * math.pi))
SAMPLE_CNS_2D = -0.114102
SAMPLE_ZETA_HALF = -1.4603545088095868  # ζ(1/2)

# Γ at points with closed forms: (k−1)! and (2k)!√π / (4^k k!)
SAMPLE_GAMMA_VALUES = (
    [(float(k), float(math.factorial(k - 1))) for k in range(1, 10)]
    + [(k + 0.5, math.factorial(2 * k) * math.sqrt(math.pi) / (4 ** k * math.factorial(k)))
       for k in range(0, 10)]
    + [(0.25, 3.6256099082219083119)]
)

SAMPLE_S_VALUES = (0.25, 0.5, 0.75)


# --- Problem files ---

SAMPLE_PROBLEM_TEXT = """\
# quadratic fractional problem with a Gaussian target
frac.n = 1
frac.s = 0.5
grid.N = 32
grid.L = 4.0
omega.shape = ball
omega.radius = 3.0
density.name = quadratic
density.mass = 1.0
density.target_amplitude = 1.0   # f = gaussian
solver.backend = spec
solver.max_iters = 200
"""


# --- Grids and operators ---

@pytest.fixture
def grid_1d():
    return Grid(1, 4.0, 64)


@pytest.fixture
def grid_2d():
    return Grid(2, 4.0, 32)


@pytest.fixture
def params_1d():
    return FracParams(1, 0.5)


@pytest.fixture
def params_2d():
    return FracParams(2, 0.5)


@pytest.fixture(params=[Backend.QUADRATURE, Backend.SPECTRAL], ids=["quad", "spec"])
def backend(request):
    return request.param


@pytest.fixture
def op_1d(params_1d, grid_1d, backend):
    return FracOperator(params_1d, grid_1d, backend)


@pytest.fixture
def op_2d(params_2d, grid_2d, backend):
    return FracOperator(params_2d, grid_2d, backend)


# --- Fields ---

@pytest.fixture
def gaussian_1d(grid_1d):
    return gaussian(grid_1d)


@pytest.fixture
def bump_1d(grid_1d):
    return scalar_bump(grid_1d, radius=1.5)


@pytest.fixture
def bump_2d(grid_2d):
    return scalar_bump(grid_2d, radius=1.5)


@pytest.fixture
def vector_bump_2d(grid_2d):
    return build_example(ExampleKind.SMOOTH_VECTOR_BUMP, grid_2d)


@pytest.fixture
def random_inner_field():
    """Factory: random values on the inner half-box, zero elsewhere."""

    def make(grid: Grid, components: int = 0, seed: int = 0):
        rng = np.random.default_rng(seed)
        mask = grid.inner_mask(0.5)
        shape = grid.shape + ((components,) if components else ())
        values = rng.standard_normal(shape)
        values[~mask] = 0.0
        if components:
            return VectorField(grid, values)
        return ScalarField(grid, values)

    return make


@pytest.fixture
def out_dir(tmp_path, monkeypatch):
    """Empty output directory with FRACVAR_OUT cleared."""
    import config

    monkeypatch.setattr(config, "FRACVAR_OUT", "")
    path = tmp_path / "out"
    return path
