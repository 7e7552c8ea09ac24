"""Fractional core — parameters, normalizing constant, kernels and the D^s multiplier.

Fourier convention for the whole repository: û(ξ) = ∫ u(x) e^{−2πi x·ξ} dx.
With it, D^s has the multiplier 2πiξ (2π|ξ|)^{s−1} and the Riesz potential
I_{1−s} has the multiplier (2π|ξ|)^{−(1−s)}.
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy import integrate
from scipy.special import gamma, gammaincc

import config

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FracParams:
    """Dimension n, fractional order s and integrability exponent p."""

    n: int
    s: float
    p: float = 2.0

    def __post_init__(self):
        if isinstance(self.n, bool) or int(self.n) != self.n:
            raise ValueError(f"n must be an integer, got {self.n!r}")
        if not 1 <= self.n <= config.MAX_DIMENSION:
            raise ValueError(f"n must be in [1, {config.MAX_DIMENSION}], got {self.n}")
        if not config.S_MARGIN <= self.s <= 1 - config.S_MARGIN:
            raise ValueError(f"s must lie in (0, 1) away from the endpoints, got {self.s}")
        if not self.p > 1:
            raise ValueError(f"p must be > 1, got {self.p}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "p", float(self.p))

    @cached_property
    def c_ns(self) -> float:
        return cns(self)

    @property
    def kappa(self) -> float:
        """Positive kernel weight −c_{n,s} used by every operator."""
        return -self.c_ns

    def with_s(self, s: float) -> "FracParams":
        return FracParams(self.n, s, self.p)


def cns(params: FracParams) -> float:
    """Normalizing constant c_{n,s} (always negative)."""
    n, s = params.n, params.s
    a = n + s - 1
    return -a * gamma(a / 2) / (math.pi ** (n / 2) * 2 ** (1 - s) * gamma((1 - s) / 2))


def fractional_sobolev_exponent(params: FracParams) -> float:
    """Sobolev exponent p* = np/(n − sp); infinite when sp ≥ n."""
    n, s, p = params.n, params.s, params.p
    if s * p >= n:
        return math.inf
    return n * p / (n - s * p)


# ---------------------------------------------------------------------------
# Kernels and multipliers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RieszPotentialKernel:
    """Kernel of I_{1−s}: amplitude·|x|^{−(n+s−1)}."""

    params: FracParams

    @property
    def exponent(self) -> float:
        return self.params.n + self.params.s - 1

    @property
    def amplitude(self) -> float:
        return self.params.kappa / self.exponent

    def value(self, x: np.ndarray) -> np.ndarray:
        """Kernel at points x of shape (..., n); the origin maps to inf."""
        r = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
        with np.errstate(divide="ignore"):
            return self.amplitude * r ** (-self.exponent)


def frac_symbol(params: FracParams, xi: np.ndarray) -> np.ndarray:
    """Multiplier of D^s at frequencies xi of shape (..., n); zero at ξ = 0."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != params.n:
        raise ValueError(f"frequency vectors must have {params.n} components")
    r = np.linalg.norm(xi, axis=-1, keepdims=True)
    radial = np.zeros_like(r)
    nonzero = r > 0
    radial[nonzero] = (2 * math.pi * r[nonzero]) ** (params.s - 1)
    return 2j * math.pi * xi * radial


def gaussian_ds_reference(x: float, s: float) -> float:
    """D^s e^{−πx²} in 1D: −2 ∫₀^∞ (2πξ)^s e^{−πξ²} sin(2πxξ) dξ."""
    value, _ = integrate.quad(lambda xi: (2 * math.pi * xi) ** s * math.exp(-math.pi * xi * xi),
                              0, np.inf, weight="sin", wvar=2 * math.pi * x)
    return -2 * value


# ---------------------------------------------------------------------------
# Lattice constants
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def epstein_zeta(n: int, t: float) -> float:
    """Analytic continuation of Σ'_{j∈Zⁿ} |j|^{−t} for 0 < t < n.

    Theta-function splitting: both incomplete-gamma series converge like
    e^{−π|j|²}, so a few lattice shells reach double precision.
    """
    if not 0 < t < n:
        raise ValueError(f"t must lie in (0, {n}), got {t}")
    cutoff = config.EPSTEIN_CUTOFF
    axis = np.arange(-cutoff, cutoff + 1)
    mesh = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
    r2 = np.sum(mesh * mesh, axis=1)
    x = math.pi * r2[r2 > 0]
    a, b = t / 2, (n - t) / 2
    terms = (x ** (-a) * gammaincc(a, x) * gamma(a)
             + x ** (-b) * gammaincc(b, x) * gamma(b))
    bracket = math.fsum(terms.tolist()) - 2 / t - 2 / (n - t)
    return math.pi ** a / gamma(a) * bracket


def lattice_correction(params: FracParams) -> float:
    """Constant E/n such that the punctured lattice sum of z_a z_b |z|^{−n−s−1}
    equals (E/n) δ_ab in the zeta-regularized sense."""
    return epstein_zeta(params.n, params.n + params.s - 1) / params.n
