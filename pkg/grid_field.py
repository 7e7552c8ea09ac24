"""Grids and fields — cell-centered samples, quadrature, norms and the FRF1 format."""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

import config

logger = logging.getLogger(__name__)


class SupportError(ValueError):
    """A field is not compactly supported strictly inside its box."""


class FieldFormatError(ValueError):
    """An FRF1 file is malformed."""


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Box [−L, L]^n with N cell-centered nodes per axis.

    N is even, so the origin is never a node.
    """

    n: int
    extent: float
    points_per_axis: int

    def __post_init__(self):
        if not 1 <= self.n <= config.MAX_DIMENSION:
            raise ValueError(f"n must be in [1, {config.MAX_DIMENSION}], got {self.n}")
        if not self.extent > 0:
            raise ValueError(f"extent must be positive, got {self.extent}")
        N = self.points_per_axis
        if N < 4 or N % 2:
            raise ValueError(f"points_per_axis must be even and >= 4, got {N}")
        object.__setattr__(self, "extent", float(self.extent))

    @property
    def spacing(self) -> float:
        return 2 * self.extent / self.points_per_axis

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.n

    @property
    def size(self) -> int:
        return self.points_per_axis ** self.n

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.n

    @cached_property
    def axis(self) -> np.ndarray:
        """Node coordinates along one axis."""
        nodes = -self.extent + (np.arange(self.points_per_axis) + 0.5) * self.spacing
        nodes.setflags(write=False)
        return nodes

    @cached_property
    def coordinates(self) -> np.ndarray:
        """Node coordinates, shape grid.shape + (n,)."""
        mesh = np.stack(np.meshgrid(*([self.axis] * self.n), indexing="ij"), axis=-1)
        mesh.setflags(write=False)
        return mesh

    @cached_property
    def radius(self) -> np.ndarray:
        r = np.linalg.norm(self.coordinates, axis=-1)
        r.setflags(write=False)
        return r

    @cached_property
    def rim_mask(self) -> np.ndarray:
        """Nodes in the outermost cell layer."""
        N = self.points_per_axis
        index = np.indices(self.shape)
        rim = np.any((index == 0) | (index == N - 1), axis=0)
        rim.setflags(write=False)
        return rim

    def enlarged(self, factor: int = 2) -> "Grid":
        """Grid with the same spacing on a box `factor` times wider."""
        return Grid(self.n, self.extent * factor, self.points_per_axis * factor)

    def window_in(self, big: "Grid") -> tuple[slice, ...]:
        """Slices of `big` covering this grid's nodes (centered embedding)."""
        if big.n != self.n or not math.isclose(big.spacing, self.spacing, rel_tol=1e-12):
            raise ValueError("grids must share dimension and spacing")
        offset = big.points_per_axis - self.points_per_axis
        if offset < 0 or offset % 2:
            raise ValueError("grid does not embed centrally")
        start = offset // 2
        return (slice(start, start + self.points_per_axis),) * self.n

    def inner_mask(self, fraction: float) -> np.ndarray:
        """Nodes with sup-norm coordinate at most fraction·L."""
        return np.max(np.abs(self.coordinates), axis=-1) <= fraction * self.extent


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Field:
    """Grid samples; values have shape grid.shape + component shape."""

    grid: Grid
    values: np.ndarray

    rank = 0

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        n = self.grid.n
        if values.shape[:n] != self.grid.shape or values.ndim != n + self.rank:
            raise ValueError(
                f"{type(self).__name__} on grid {self.grid.shape} cannot hold "
                f"values of shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError(f"{type(self).__name__} values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def component_shape(self) -> tuple[int, ...]:
        return self.values.shape[self.grid.n:]

    @property
    def support_mask(self) -> np.ndarray:
        nonzero = self.values != 0
        if self.rank:
            nonzero = np.any(nonzero.reshape(self.grid.shape + (-1,)), axis=-1)
        return nonzero

    def is_compact(self) -> bool:
        return not np.any(self.support_mask & self.grid.rim_mask)

    def require_compact_support(self):
        if not self.is_compact():
            raise SupportError(
                f"{type(self).__name__} is nonzero within one cell of the box boundary"
            )
        return self

    def pointwise_norm(self) -> np.ndarray:
        """Euclidean (Frobenius) magnitude at each node."""
        if not self.rank:
            return np.abs(self.values)
        flat = self.values.reshape(self.grid.shape + (-1,))
        return np.linalg.norm(flat, axis=-1)

    def sup_norm(self) -> float:
        return float(np.max(self.pointwise_norm()))

    # --- Construction helpers ---

    @classmethod
    def zeros(cls, grid: Grid, component_shape: tuple[int, ...] = ()):
        return cls(grid, np.zeros(grid.shape + cls._components(grid, component_shape)))

    @classmethod
    def _components(cls, grid: Grid, component_shape: tuple[int, ...]) -> tuple[int, ...]:
        if component_shape:
            return tuple(component_shape)
        return (grid.n,) * cls.rank

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[np.ndarray], np.ndarray]):
        """Sample fn at the node coordinates (shape grid.shape + (n,)).

        Rim values up to RIM_TOLERANCE are zeroed; larger ones raise SupportError.
        """
        values = np.array(fn(grid.coordinates), dtype=float)
        magnitude = np.abs(values)
        if cls.rank:
            magnitude = np.max(magnitude.reshape(grid.shape + (-1,)), axis=-1)
        rim = grid.rim_mask
        if np.any(magnitude[rim] > config.RIM_TOLERANCE):
            raise SupportError(
                f"sampled {cls.__name__} reaches {np.max(magnitude[rim]):.3e} on the box rim"
            )
        values[rim] = 0.0
        return cls(grid, values)

    def embedded(self, big: Grid):
        """Same samples placed centrally in a larger grid of equal spacing."""
        values = np.zeros(big.shape + self.component_shape)
        values[self.grid.window_in(big)] = self.values
        return type(self)(big, values)

    def restricted(self, small: Grid):
        """Samples of the central window matching a smaller grid."""
        return type(self)(small, self.values[small.window_in(self.grid)])

    def shifted(self, cells: tuple[int, ...]):
        """Translate by whole cells; fails if nonzero samples would leave the box."""
        if len(cells) != self.grid.n:
            raise ValueError(f"shift needs {self.grid.n} offsets")
        N = self.grid.points_per_axis
        src, dst = [], []
        for k in cells:
            if abs(k) >= N:
                raise SupportError("shift moves every node out of the box")
            if k >= 0:
                src.append(slice(0, N - k))
                dst.append(slice(k, N))
            else:
                src.append(slice(-k, N))
                dst.append(slice(0, N + k))
        kept = self.values[tuple(src)]
        if np.count_nonzero(kept) != np.count_nonzero(self.values):
            raise SupportError("shift moves nonzero samples out of the box")
        values = np.zeros_like(self.values)
        values[tuple(dst)] = kept
        return type(self)(self.grid, values)

    # --- Arithmetic ---

    def _check_partner(self, other):
        if type(other) is not type(self):
            raise TypeError(f"cannot combine {type(self).__name__} with {type(other).__name__}")
        if other.grid != self.grid:
            raise ValueError("fields live on different grids")
        if other.component_shape != self.component_shape:
            raise ValueError("fields have different component shapes")

    def __add__(self, other):
        self._check_partner(other)
        return type(self)(self.grid, self.values + other.values)

    def __sub__(self, other):
        self._check_partner(other)
        return type(self)(self.grid, self.values - other.values)

    def __neg__(self):
        return type(self)(self.grid, -self.values)

    def __mul__(self, other):
        if isinstance(other, ScalarField):
            if other.grid != self.grid:
                raise ValueError("fields live on different grids")
            weights = other.values.reshape(self.grid.shape + (1,) * self.rank)
            return type(self)(self.grid, self.values * weights)
        if isinstance(other, _Field):
            return NotImplemented
        return type(self)(self.grid, self.values * float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return type(self)(self.grid, self.values / float(other))


class ScalarField(_Field):
    """One real sample per node."""

    rank = 0


class VectorField(_Field):
    """A vector of m samples per node (m = n unless stated)."""

    rank = 1

    @classmethod
    def from_components(cls, components: list[ScalarField]) -> "VectorField":
        grid = components[0].grid
        if any(c.grid != grid for c in components):
            raise ValueError("components live on different grids")
        return cls(grid, np.stack([c.values for c in components], axis=-1))

    @property
    def num_components(self) -> int:
        return self.values.shape[-1]

    def component(self, i: int) -> ScalarField:
        return ScalarField(self.grid, self.values[..., i])

    def dot(self, other: "VectorField") -> ScalarField:
        self._check_partner(other)
        return ScalarField(self.grid, np.sum(self.values * other.values, axis=-1))


class MatrixField(_Field):
    """An a×b matrix of samples per node (n×n unless stated)."""

    rank = 2

    @classmethod
    def from_rows(cls, rows: list[VectorField]) -> "MatrixField":
        grid = rows[0].grid
        if any(r.grid != grid for r in rows):
            raise ValueError("rows live on different grids")
        return cls(grid, np.stack([r.values for r in rows], axis=-2))

    @classmethod
    def constant(cls, grid: Grid, matrix: np.ndarray) -> "MatrixField":
        """The same matrix at every node (not compactly supported)."""
        matrix = np.asarray(matrix, dtype=float)
        return cls(grid, np.broadcast_to(matrix, grid.shape + matrix.shape))

    def row(self, i: int) -> VectorField:
        return VectorField(self.grid, self.values[..., i, :])

    def entry(self, i: int, j: int) -> ScalarField:
        return ScalarField(self.grid, self.values[..., i, j])


# ---------------------------------------------------------------------------
# Regions
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RegionMask:
    """Ω as a boolean mask over nodes; everything else is Ω^c."""

    grid: Grid
    inside: np.ndarray

    def __post_init__(self):
        inside = np.array(self.inside, dtype=bool)
        if inside.shape != self.grid.shape:
            raise ValueError(f"mask shape {inside.shape} does not match grid {self.grid.shape}")
        if not inside.any() or inside.all():
            raise ValueError("region must contain at least one node inside and one outside")
        inside.setflags(write=False)
        object.__setattr__(self, "inside", inside)

    @classmethod
    def ball(cls, grid: Grid, radius: float) -> "RegionMask":
        return cls(grid, grid.radius < radius)

    @classmethod
    def cube(cls, grid: Grid, half_width: float) -> "RegionMask":
        return cls(grid, np.max(np.abs(grid.coordinates), axis=-1) < half_width)

    @property
    def outside(self) -> np.ndarray:
        return ~self.inside

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.inside))

    @property
    def touches_rim(self) -> bool:
        return bool(np.any(self.inside & self.grid.rim_mask))


# ---------------------------------------------------------------------------
# Quadrature and norms
# ---------------------------------------------------------------------------

def integrate(f: ScalarField) -> float:
    """Midpoint rule Σ f(x_i) hⁿ."""
    if not isinstance(f, ScalarField):
        raise TypeError("integrate expects a ScalarField")
    return float(np.sum(f.values) * f.grid.cell_volume)


def inner(a: _Field, b: _Field) -> float:
    """Midpoint L² pairing of two fields of the same kind."""
    a._check_partner(b)
    return float(np.sum(a.values * b.values) * a.grid.cell_volume)


def lp_norm(f: _Field, p: float) -> float:
    """(∫ |f|^p)^{1/p} with |·| the pointwise Euclidean magnitude; p = inf gives the max."""
    if p == math.inf:
        return f.sup_norm()
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    magnitude = f.pointwise_norm()
    return float(np.sum(magnitude ** p) * f.grid.cell_volume) ** (1 / p)


def _gagliardo_power_sums(grid: Grid, columns: np.ndarray, s: float, p: float) -> np.ndarray:
    """Σ_{i≠j} |f(x_i) − f(x_j)|^p / |x_i − x_j|^{n+sp} · h^{2n} for each column of
    `columns` (shape (size, c)), in a fixed chunk order."""
    if not 0 < s < 1:
        raise ValueError(f"s must lie in (0, 1), got {s}")
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    x = grid.coordinates.reshape(grid.size, grid.n)
    power = grid.n + s * p
    chunk = config.GAGLIARDO_CHUNK
    partials = [[] for _ in range(columns.shape[1])]
    for start in range(0, grid.size, chunk):
        stop = min(start + chunk, grid.size)
        offsets = x[start:stop, None, :] - x[None, :, :]
        dist = np.sqrt(np.sum(offsets * offsets, axis=-1))
        off_diagonal = dist > 0
        dist[~off_diagonal] = 1.0
        weight = np.where(off_diagonal, dist ** (-power), 0.0)
        for c in range(columns.shape[1]):
            jumps = np.abs(columns[start:stop, c, None] - columns[None, :, c]) ** p
            partials[c].append(float(np.sum(jumps * weight)))
    volume2 = grid.cell_volume ** 2
    return np.array([math.fsum(parts) * volume2 for parts in partials])


def gagliardo_seminorm(f: ScalarField, s: float, p: float) -> float:
    """Discrete W^{s,p} seminorm: double node sum with the diagonal excluded."""
    if not isinstance(f, ScalarField):
        raise TypeError("gagliardo_seminorm expects a ScalarField")
    total = _gagliardo_power_sums(f.grid, f.values.reshape(-1, 1), s, p)[0]
    return float(total ** (1 / p))


def gagliardo_components(f: VectorField, s: float, p: float) -> list[float]:
    """gagliardo_seminorm of every component, sharing the pair distances."""
    if not isinstance(f, VectorField):
        raise TypeError("gagliardo_components expects a VectorField")
    columns = f.values.reshape(f.grid.size, f.num_components)
    return [float(t ** (1 / p)) for t in _gagliardo_power_sums(f.grid, columns, s, p)]


# ---------------------------------------------------------------------------
# FRF1 files
# ---------------------------------------------------------------------------

def write_field(path: str | Path, field: _Field) -> Path:
    """Write FRF1: one ASCII header line, then little-endian float64 samples."""
    path = Path(path)
    grid = field.grid
    comps = int(np.prod(field.component_shape, dtype=int))
    header = (f"{config.FIELD_MAGIC} n={grid.n} N={grid.points_per_axis} "
              f"L={grid.extent!r} comps={comps}\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
    logger.info("Wrote %s (%s, comps=%d)", path, type(field).__name__, comps)
    return path


def _parse_header(line: bytes) -> tuple[int, int, float, int]:
    try:
        tokens = line.decode("ascii").split()
    except UnicodeDecodeError as e:
        raise FieldFormatError("FRF1 header is not ASCII") from e
    if not tokens or tokens[0] != config.FIELD_MAGIC:
        raise FieldFormatError("missing FRF1 magic")
    pairs = dict(token.split("=", 1) for token in tokens[1:] if "=" in token)
    if set(pairs) != {"n", "N", "L", "comps"} or len(tokens) != 5:
        raise FieldFormatError(f"malformed FRF1 header: {line!r}")
    try:
        return int(pairs["n"]), int(pairs["N"]), float(pairs["L"]), int(pairs["comps"])
    except ValueError as e:
        raise FieldFormatError(f"malformed FRF1 header: {line!r}") from e


def read_field(path: str | Path, as_matrix: bool = False) -> _Field:
    """Read an FRF1 file. comps=1 gives a ScalarField; otherwise a VectorField,
    or an n×n MatrixField when as_matrix is set."""
    with open(path, "rb") as f:
        n, N, L, comps = _parse_header(f.readline())
        payload = f.read()
    try:
        grid = Grid(n, L, N)
    except ValueError as e:
        raise FieldFormatError(str(e)) from e
    expected = grid.size * comps * 8
    if len(payload) != expected:
        raise FieldFormatError(f"expected {expected} bytes of samples, found {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f8").astype(float)
    if not np.all(np.isfinite(flat)):
        bad = int(np.flatnonzero(~np.isfinite(flat))[0])
        raise FieldFormatError(f"sample {bad} is not finite")
    if as_matrix:
        if comps != n * n:
            raise FieldFormatError(f"comps={comps} is not an {n}x{n} matrix field")
        return MatrixField(grid, flat.reshape(grid.shape + (n, n)))
    if comps == 1:
        return ScalarField(grid, flat.reshape(grid.shape))
    return VectorField(grid, flat.reshape(grid.shape + (comps,)))
