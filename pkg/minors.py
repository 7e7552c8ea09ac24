"""Minors — submatrix maps, cofactors and determinants on stacked matrices.

All functions act on the trailing axes, so a MatrixField's values
(grid.shape + (n, n)) are processed nodewise in one call. Indices in
MinorSpec are 1-based.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from grid_field import MatrixField

SUPPORTED_SIZES = (1, 2, 3)


@dataclass(frozen=True)
class MinorSpec:
    """Rows i₁<…<i_k and columns j₁<…<j_k of a k×k submatrix of an n×n matrix."""

    n: int
    rows: tuple[int, ...]
    cols: tuple[int, ...]

    def __post_init__(self):
        rows, cols = tuple(int(i) for i in self.rows), tuple(int(j) for j in self.cols)
        if not rows or len(rows) != len(cols):
            raise ValueError("rows and cols must be non-empty and of equal length")
        for name, idx in (("rows", rows), ("cols", cols)):
            if any(i < 1 or i > self.n for i in idx):
                raise ValueError(f"{name} {idx} out of range [1, {self.n}]")
            if any(a >= b for a, b in zip(idx, idx[1:])):
                raise ValueError(f"{name} {idx} must be strictly increasing")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)

    @property
    def k(self) -> int:
        return len(self.rows)

    @property
    def row_index(self) -> np.ndarray:
        return np.array(self.rows) - 1

    @property
    def col_index(self) -> np.ndarray:
        return np.array(self.cols) - 1

    @classmethod
    def full(cls, n: int) -> "MinorSpec":
        return cls(n, tuple(range(1, n + 1)), tuple(range(1, n + 1)))

    @classmethod
    def parse(cls, n: int, text: str) -> "MinorSpec":
        """Parse 'full' or 'rows/cols' such as '12/23' or '1,2/2,3'."""
        text = text.strip()
        if text == "full":
            return cls.full(n)
        try:
            rows, cols = text.split("/")
            return cls(n, _parse_indices(rows), _parse_indices(cols))
        except ValueError as e:
            raise ValueError(f"cannot parse minor spec {text!r}: {e}") from e

    def label(self) -> str:
        return "".join(map(str, self.rows)) + "/" + "".join(map(str, self.cols))


def _parse_indices(part: str) -> tuple[int, ...]:
    part = part.strip()
    if "," in part:
        return tuple(int(c) for c in part.split(","))
    return tuple(int(c) for c in part)


def all_specs(n: int) -> list[MinorSpec]:
    """Every minor of an n×n matrix: by order k, then lexicographic in (rows, cols)."""
    specs = []
    for k in range(1, n + 1):
        subsets = list(itertools.combinations(range(1, n + 1), k))
        specs.extend(MinorSpec(n, rows, cols) for rows in subsets for cols in subsets)
    return specs


def tau(n: int) -> int:
    return sum(math.comb(n, k) ** 2 for k in range(1, n + 1))


# ---------------------------------------------------------------------------
# Submatrix maps
# ---------------------------------------------------------------------------

def _check_square(F: np.ndarray, size: int | None = None) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if F.ndim < 2 or F.shape[-1] != F.shape[-2]:
        raise ValueError(f"expected square matrices, got trailing shape {F.shape[-2:]}")
    if size is not None and F.shape[-1] != size:
        raise ValueError(f"expected {size}x{size} matrices, got {F.shape[-1]}x{F.shape[-1]}")
    return F


def submatrix_M(spec: MinorSpec, F: np.ndarray) -> np.ndarray:
    F = _check_square(F, spec.n)
    return F[..., spec.row_index[:, None], spec.col_index[None, :]]


def embed_Mbar(spec: MinorSpec, G: np.ndarray) -> np.ndarray:
    G = _check_square(G, spec.k)
    out = np.zeros(G.shape[:-2] + (spec.n, spec.n))
    out[..., spec.row_index[:, None], spec.col_index[None, :]] = G
    return out


def _vector_index(spec: MinorSpec, indices: str) -> np.ndarray:
    if indices == "cols":
        return spec.col_index
    if indices == "rows":
        return spec.row_index
    raise ValueError(f"indices must be 'rows' or 'cols', got {indices!r}")


def subvector_N(spec: MinorSpec, v: np.ndarray, indices: str = "cols") -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != spec.n:
        raise ValueError(f"expected {spec.n}-vectors, got {v.shape[-1]}")
    return v[..., _vector_index(spec, indices)]


def embed_Nbar(spec: MinorSpec, w: np.ndarray, indices: str = "cols") -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != spec.k:
        raise ValueError(f"expected {spec.k}-vectors, got {w.shape[-1]}")
    out = np.zeros(w.shape[:-1] + (spec.n,))
    out[..., _vector_index(spec, indices)] = w
    return out


def project_Ntilde(spec: MinorSpec, v: np.ndarray, indices: str = "cols") -> np.ndarray:
    return embed_Nbar(spec, subvector_N(spec, v, indices), indices)


# ---------------------------------------------------------------------------
# Cofactor and determinant
# ---------------------------------------------------------------------------

def _check_supported(F: np.ndarray) -> np.ndarray:
    F = _check_square(F)
    if F.shape[-1] not in SUPPORTED_SIZES:
        raise ValueError(f"unsupported matrix size {F.shape[-1]}; expected one of {SUPPORTED_SIZES}")
    return F


def cof(F: np.ndarray) -> np.ndarray:
    """Cofactor matrix, cof(F)·Fᵀ = det(F)·I. A 1×1 matrix has cofactor [1]."""
    F = _check_supported(F)
    size = F.shape[-1]
    if size == 1:
        return np.ones_like(F)
    if size == 2:
        a, b = F[..., 0, 0], F[..., 0, 1]
        c, d = F[..., 1, 0], F[..., 1, 1]
        return np.stack([np.stack([d, -c], axis=-1), np.stack([-b, a], axis=-1)], axis=-2)
    r0, r1, r2 = F[..., 0, :], F[..., 1, :], F[..., 2, :]
    return np.stack([np.cross(r1, r2), np.cross(r2, r0), np.cross(r0, r1)], axis=-2)


def det(F: np.ndarray) -> np.ndarray:
    F = _check_supported(F)
    size = F.shape[-1]
    if size == 1:
        return F[..., 0, 0].copy()
    if size == 2:
        return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    return np.sum(F[..., 0, :] * np.cross(F[..., 1, :], F[..., 2, :]), axis=-1)


def det_minor(spec: MinorSpec, F: np.ndarray) -> np.ndarray:
    return det(submatrix_M(spec, F))


def minor_vector(F: np.ndarray) -> np.ndarray:
    """All minors in the all_specs order; trailing length tau(n)."""
    F = _check_supported(F)
    n = F.shape[-1]
    return np.stack([det_minor(spec, F) for spec in all_specs(n)], axis=-1)


def cofactor_embedding(spec: MinorSpec, G: MatrixField) -> MatrixField:
    """Nodewise M̄(cof M(G))."""
    return MatrixField(G.grid, embed_Mbar(spec, cof(submatrix_M(spec, G.values))))


def cofactor_far_value(spec: MinorSpec) -> np.ndarray:
    """M̄(cof M(0)): the value of cofactor_embedding where G vanishes."""
    return embed_Mbar(spec, cof(np.zeros((spec.k, spec.k))))
