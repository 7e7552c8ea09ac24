"""Fractional operators — D^s, div^s, Div^s, K_φ and the Riesz potential on grids.

Both backends realize each partial derivative ∂^s_b as a translation-invariant
antisymmetric linear map on box samples, applied through zero-padded real FFTs
of size PAD_FACTOR·N per axis:

- Quadrature: exact linear convolution with the punctured lattice kernel
  −κ hⁿ K_b(hj), plus the near-field term w_h ∂_b^h u where ∂_b^h is the
  central difference and w_h = −κ h^{1−s} E/n carries the Epstein lattice
  constant. The far tail vanishes by odd symmetry of the kernel.
- Spectral: the multiplier 2πiξ_b (2π|ξ|)^{s−1}, zeroed at the axis Nyquist.

Because every ∂^s_b is antisymmetric, ds_div is exactly minus the adjoint of
ds_grad for either backend. Outputs are box samples of functions that are not
compactly supported; operators check only their inputs.
"""

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property

import numpy as np
from scipy import fft

import config
from frac_core import FracParams, frac_symbol, lattice_correction
from grid_field import Grid, MatrixField, ScalarField, VectorField, inner, integrate

logger = logging.getLogger(__name__)


class Backend(str, Enum):
    QUADRATURE = "quad"
    SPECTRAL = "spec"


# ---------------------------------------------------------------------------
# Padded FFT plumbing
# ---------------------------------------------------------------------------

def _padded_shape(grid: Grid) -> tuple[int, ...]:
    return (config.PAD_FACTOR * grid.points_per_axis,) * grid.n


def _inner_window(grid: Grid) -> tuple[slice, ...]:
    return (slice(0, grid.points_per_axis),) * grid.n


def _forward(grid: Grid, values: np.ndarray, workers: int) -> np.ndarray:
    """rfftn over the spatial axes of values zero-padded to the padded box."""
    padded = np.zeros(_padded_shape(grid) + values.shape[grid.n:])
    padded[_inner_window(grid)] = values
    return fft.rfftn(padded, axes=tuple(range(grid.n)), workers=workers)


def _backward(grid: Grid, spectrum: np.ndarray, workers: int) -> np.ndarray:
    out = fft.irfftn(spectrum, s=_padded_shape(grid), axes=tuple(range(grid.n)), workers=workers)
    return out[_inner_window(grid)]


def _broadcast(multiplier: np.ndarray, trailing: int) -> np.ndarray:
    return multiplier.reshape(multiplier.shape + (1,) * trailing)


def _frequency_mesh(grid: Grid) -> np.ndarray:
    """Frequencies of the rfftn layout on the padded box, shape (..., n)."""
    size = config.PAD_FACTOR * grid.points_per_axis
    axes = [fft.fftfreq(size, d=grid.spacing)] * (grid.n - 1)
    axes.append(fft.rfftfreq(size, d=grid.spacing))
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def central_difference(values: np.ndarray, axis: int, spacing: float) -> np.ndarray:
    """Second-order central difference along a spatial axis, zero extension."""
    pad = [(0, 0)] * values.ndim
    pad[axis] = (1, 1)
    padded = np.pad(values, pad)
    upper = [slice(None)] * values.ndim
    lower = [slice(None)] * values.ndim
    upper[axis] = slice(2, None)
    lower[axis] = slice(None, -2)
    return (padded[tuple(upper)] - padded[tuple(lower)]) / (2 * spacing)


# ---------------------------------------------------------------------------
# Operator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FracOperator:
    """D^s on a grid with a chosen backend; kernels are built lazily and cached."""

    params: FracParams
    grid: Grid
    backend: Backend = Backend.QUADRATURE
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "backend", Backend(self.backend))
        if self.params.n != self.grid.n:
            raise ValueError(f"params are for n={self.params.n} but grid has n={self.grid.n}")
        if self.backend is Backend.SPECTRAL and self.grid.points_per_axis % 2:
            raise ValueError("spectral backend needs an even number of points per axis")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")

    @property
    def n(self) -> int:
        return self.params.n

    @property
    def correction_weight(self) -> float:
        """Near-field weight w_h multiplying the central-difference gradient."""
        h, s = self.grid.spacing, self.params.s
        return -self.params.kappa * h ** (1 - s) * lattice_correction(self.params)

    def enlarged(self, factor: int = 2) -> "FracOperator":
        return replace(self, grid=self.grid.enlarged(factor))

    def with_backend(self, backend: Backend | str) -> "FracOperator":
        return replace(self, backend=Backend(backend))

    # --- Multipliers ---

    @cached_property
    def _lattice_spectra(self) -> tuple[np.ndarray, ...]:
        """rfftn of the punctured lattice kernels −κ hⁿ K_b(hj), one per axis."""
        grid, n, s = self.grid, self.n, self.params.s
        size = config.PAD_FACTOR * grid.points_per_axis
        index = np.arange(size)
        offsets_1d = np.where(index < size // 2, index, index - size).astype(float)
        offsets = np.stack(np.meshgrid(*([offsets_1d] * n), indexing="ij"), axis=-1)
        radius = np.linalg.norm(offsets, axis=-1)
        # offsets at ±N are never reached by a linear convolution of N samples
        usable = (radius > 0) & np.all(np.abs(offsets) < grid.points_per_axis, axis=-1)
        scale = np.zeros_like(radius)
        scale[usable] = -self.params.kappa * grid.spacing ** (-s) * radius[usable] ** (-(n + s + 1))
        axes = tuple(range(n))
        spectra = tuple(fft.rfftn(scale * offsets[..., b], axes=axes, workers=self.workers)
                        for b in range(n))
        logger.debug("Built lattice kernels for n=%d s=%.3f N=%d", n, s, grid.points_per_axis)
        return spectra

    @cached_property
    def _symbol_spectra(self) -> tuple[np.ndarray, ...]:
        xi = _frequency_mesh(self.grid)
        symbol = frac_symbol(self.params, xi)
        nyquist = 0.5 / self.grid.spacing
        spectra = []
        for b in range(self.n):
            m = symbol[..., b].copy()
            m[np.isclose(np.abs(xi[..., b]), nyquist)] = 0.0
            spectra.append(m)
        return tuple(spectra)

    def _multipliers(self) -> tuple[np.ndarray, ...]:
        if self.backend is Backend.SPECTRAL:
            return self._symbol_spectra
        return self._lattice_spectra

    # --- Array-level application ---

    def _gradient(self, values: np.ndarray, multipliers, corrected: bool) -> np.ndarray:
        grid = self.grid
        trailing = values.ndim - grid.n
        spectrum = _forward(grid, values, self.workers)
        parts = []
        for b, m in enumerate(multipliers):
            part = _backward(grid, spectrum * _broadcast(m, trailing), self.workers)
            if corrected:
                part = part + self.correction_weight * central_difference(values, b, grid.spacing)
            parts.append(part)
        return np.stack(parts, axis=-1)

    def _divergence(self, values: np.ndarray, multipliers, corrected: bool) -> np.ndarray:
        """Contract the last axis (length n) with ∂^s_b."""
        grid = self.grid
        if values.shape[-1] != self.n:
            raise ValueError(f"divergence needs {self.n} components in the last axis")
        trailing = values.ndim - grid.n - 1
        spectrum = _forward(grid, values, self.workers)
        total = sum(spectrum[..., b] * _broadcast(m, trailing) for b, m in enumerate(multipliers))
        out = _backward(grid, total, self.workers)
        if corrected:
            for b in range(self.n):
                out = out + self.correction_weight * central_difference(values[..., b], b, grid.spacing)
        return out

    def gradient_values(self, values: np.ndarray) -> np.ndarray:
        """∂^s_b along a new last axis; extra component axes are carried through."""
        return self._gradient(values, self._multipliers(), self.backend is Backend.QUADRATURE)

    def divergence_values(self, values: np.ndarray) -> np.ndarray:
        return self._divergence(values, self._multipliers(), self.backend is Backend.QUADRATURE)

    def lattice_gradient_values(self, values: np.ndarray, corrected: bool = True) -> np.ndarray:
        """Quadrature-rule gradient whatever the backend."""
        return self._gradient(values, self._lattice_spectra, corrected)

    def lattice_divergence_values(self, values: np.ndarray, corrected: bool = True) -> np.ndarray:
        return self._divergence(values, self._lattice_spectra, corrected)

    def _check_field(self, field, require_support: bool):
        if field.grid != self.grid:
            raise ValueError("field grid does not match the operator grid")
        if require_support:
            field.require_compact_support()


# ---------------------------------------------------------------------------
# Operators on fields
# ---------------------------------------------------------------------------

def ds_grad(op: FracOperator, u: ScalarField, require_support: bool = True) -> VectorField:
    if not isinstance(u, ScalarField):
        raise TypeError("ds_grad expects a ScalarField")
    op._check_field(u, require_support)
    return VectorField(op.grid, op.gradient_values(u.values))


def ds_grad_vec(op: FracOperator, u: VectorField, require_support: bool = True) -> MatrixField:
    """Row i is ds_grad of component u_i."""
    if not isinstance(u, VectorField):
        raise TypeError("ds_grad_vec expects a VectorField")
    op._check_field(u, require_support)
    return MatrixField(op.grid, op.gradient_values(u.values))


def ds_div(op: FracOperator, phi: VectorField, require_support: bool = True) -> ScalarField:
    if not isinstance(phi, VectorField):
        raise TypeError("ds_div expects a VectorField")
    op._check_field(phi, require_support)
    return ScalarField(op.grid, op.divergence_values(phi.values))


def ds_div_rows(op: FracOperator, M: MatrixField, require_support: bool = True) -> VectorField:
    """Div^s: component i is ds_div of row i."""
    if not isinstance(M, MatrixField):
        raise TypeError("ds_div_rows expects a MatrixField")
    op._check_field(M, require_support)
    return VectorField(op.grid, op.divergence_values(M.values))


def k_phi(op: FracOperator, phi: ScalarField, U: MatrixField,
          far_value: np.ndarray | None = None) -> VectorField:
    """K_φ(U)(x) = κ ∫ (φ(x) − φ(y)) U(y) K(x − y) dy by the lattice rule.

    far_value, when given, is a constant matrix C with U − C compactly
    supported; its contribution C·D^s φ is added exactly.
    """
    op._check_field(phi, True)
    if U.grid != op.grid:
        raise ValueError("field grid does not match the operator grid")
    if U.component_shape[-1] != op.n:
        raise ValueError(f"K_phi needs matrices with {op.n} columns")
    u_values = U.values
    if far_value is not None:
        far_value = np.asarray(far_value, dtype=float)
        u_values = u_values - far_value
    phi_values = phi.values
    weighted = phi_values[..., None, None] * u_values
    gradient_phi = np.stack([central_difference(phi_values, b, op.grid.spacing)
                             for b in range(op.n)], axis=-1)
    out = (op.lattice_divergence_values(weighted, corrected=False)
           - phi_values[..., None] * op.lattice_divergence_values(u_values, corrected=False)
           + op.correction_weight * np.einsum("...ab,...b->...a", u_values, gradient_phi))
    if far_value is not None:
        out = out + np.einsum("ab,...b->...a", far_value, op.lattice_gradient_values(phi_values))
    return VectorField(op.grid, out)


def central_gradient(f: ScalarField) -> VectorField:
    """Classical gradient by central differences."""
    h = f.grid.spacing
    return VectorField(f.grid, np.stack([central_difference(f.values, b, h)
                                         for b in range(f.grid.n)], axis=-1))


def riesz_convolve(params: FracParams, u: ScalarField, workers: int = 1) -> ScalarField:
    """I_{1−s} ∗ u through the multiplier (2π|ξ|)^{−(1−s)} on the padded box."""
    if params.n != u.grid.n:
        raise ValueError("params and field dimensions differ")
    u.require_compact_support()
    xi = _frequency_mesh(u.grid)
    radius = np.linalg.norm(xi, axis=-1)
    multiplier = np.zeros_like(radius)
    nonzero = radius > 0
    multiplier[nonzero] = (2 * math.pi * radius[nonzero]) ** (params.s - 1)
    spectrum = _forward(u.grid, u.values, workers)
    return ScalarField(u.grid, _backward(u.grid, spectrum * multiplier, workers))


# ---------------------------------------------------------------------------
# Residual checks
# ---------------------------------------------------------------------------

def ibp_residual(op: FracOperator, u: ScalarField, phi: VectorField) -> float:
    """Relative defect of ∫ D^s u·φ = −∫ u div^s φ."""
    pairing = inner(ds_grad(op, u), phi)
    adjoint = integrate(u * ds_div(op, phi))
    return abs(pairing + adjoint) / (1 + abs(pairing))


def _normalized_gap(lhs: np.ndarray, rhs: np.ndarray) -> float:
    return float(np.max(np.abs(lhs - rhs)) / (1 + np.max(np.abs(lhs))))


def product_rule_residuals(op: FracOperator, phi: ScalarField,
                           g: ScalarField | VectorField) -> tuple[float, float]:
    """Normalized sup residuals of the gradient and divergence product rules.

    A scalar g drives the gradient rule directly and the divergence rule
    through the vector field (g, …, g); a vector g drives the divergence rule
    directly and the gradient rule through each of its components.
    """
    n = op.n
    if isinstance(g, ScalarField):
        scalars = [g]
        vector = VectorField.from_components([g] * n)
    elif isinstance(g, VectorField):
        if g.num_components != n:
            raise ValueError(f"vector g needs {n} components")
        scalars = [g.component(i) for i in range(n)]
        vector = g
    else:
        raise TypeError("g must be a ScalarField or VectorField")

    grad_residual = 0.0
    identity = np.eye(n)
    for f in scalars:
        lhs = ds_grad(op, phi * f).values
        gI = MatrixField(op.grid, f.values[..., None, None] * identity)
        rhs = (phi * ds_grad(op, f)).values + k_phi(op, phi, gI).values
        grad_residual = max(grad_residual, _normalized_gap(lhs, rhs))

    lhs = ds_div(op, phi * vector).values
    transposed = MatrixField(op.grid, vector.values[..., None, :])
    rhs = (phi * ds_div(op, vector)).values + k_phi(op, phi, transposed).values[..., 0]
    div_residual = _normalized_gap(lhs, rhs)
    return grad_residual, div_residual
