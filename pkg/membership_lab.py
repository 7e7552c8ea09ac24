"""Membership lab — example maps and (s, p) threshold scans.

The Gagliardo seminorm is the computable proxy for H^{s,p} membership: a
field outside the space shows up as a seminorm that keeps growing, with
growing increments, as the grid is refined.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

import config
from frac_core import FracParams, fractional_sobolev_exponent
from grid_field import Grid, ScalarField, VectorField, gagliardo_components

logger = logging.getLogger(__name__)


class ExampleKind(str, Enum):
    CUBE_FRACTURE = "cube-fracture"
    CAVITATION = "cavitation"
    GAUSSIAN_BUMP = "gaussian-bump"
    SMOOTH_VECTOR_BUMP = "smooth-vector-bump"


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------

def smooth_bump(r: np.ndarray, radius: float) -> np.ndarray:
    """C_c^∞ bump exp(1 − 1/(1 − t²)) with t = r/radius; equals 1 at r = 0."""
    t2 = (np.asarray(r, dtype=float) / radius) ** 2
    out = np.zeros_like(t2)
    inside = t2 < 1
    out[inside] = np.exp(1 - 1 / (1 - t2[inside]))
    return out


def _smooth_step(t: np.ndarray) -> np.ndarray:
    """C^∞ step: 1 for t ≤ 0, 0 for t ≥ 1."""
    t = np.clip(t, 0.0, 1.0)
    rise = np.where(t < 1, np.exp(-1 / np.maximum(1 - t, 1e-300)), 0.0)
    fall = np.where(t > 0, np.exp(-1 / np.maximum(t, 1e-300)), 0.0)
    return rise / (rise + fall)


def envelope(grid: Grid, r: np.ndarray) -> np.ndarray:
    """Flat-top cutoff: 1 up to 0.75·L, 0 from one cell inside the rim."""
    inner, outer = 0.75 * grid.extent, grid.extent - grid.spacing
    return _smooth_step((r - inner) / (outer - inner))


def scalar_bump(grid: Grid, radius: float = 1.5, center=None, amplitude: float = 1.0) -> ScalarField:
    center = np.zeros(grid.n) if center is None else np.asarray(center, dtype=float)
    return ScalarField.from_function(
        grid, lambda x: amplitude * smooth_bump(np.linalg.norm(x - center, axis=-1), radius))


def gaussian(grid: Grid, width: float = 1.0) -> ScalarField:
    """e^{−π|x|²/width²} times the flat-top envelope."""
    return ScalarField.from_function(
        grid, lambda x: np.exp(-math.pi * np.sum(x * x, axis=-1) / width ** 2)
        * envelope(grid, np.linalg.norm(x, axis=-1)))


# ---------------------------------------------------------------------------
# Example maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExampleMap:
    """An example deformation and its shape parameters.

    corner/side place the fracture cube (corner, corner + side)ⁿ; radius is
    the bump or cavitation profile radius; core is φ(0) for cavitation and the
    amplitude of the other kinds.
    """

    kind: ExampleKind
    corner: float = 0.0
    side: float = 1.0
    radius: float = 1.5
    core: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ExampleKind(self.kind))
        if self.radius <= 0 or self.side <= 0:
            raise ValueError("radius and side must be positive")
        if self.kind is ExampleKind.CAVITATION and not self.core > 0:
            raise ValueError(f"cavitation profile needs phi(0) > 0, got {self.core}")

    def threshold(self, n: int) -> float:
        """Critical sp: members of H^{s,p} exactly when sp lies below it."""
        if self.kind is ExampleKind.CUBE_FRACTURE:
            return 1.0
        if self.kind is ExampleKind.CAVITATION:
            return float(n)
        return math.inf


def build_example(example: ExampleMap | ExampleKind | str, grid: Grid) -> VectorField:
    if not isinstance(example, ExampleMap):
        example = ExampleMap(example)
    n = grid.n
    r = grid.radius
    profile = example.core * smooth_bump(r, example.radius)

    if example.kind is ExampleKind.CUBE_FRACTURE:
        x = grid.coordinates
        lo, hi = example.corner, example.corner + example.side
        cube = np.all((x > lo) & (x < hi), axis=-1).astype(float)
        values = np.stack([cube] + [profile] * (n - 1), axis=-1)
    elif example.kind is ExampleKind.CAVITATION:
        values = grid.coordinates / r[..., None] * profile[..., None]
    elif example.kind is ExampleKind.GAUSSIAN_BUMP:
        g = gaussian(grid).values * example.core
        values = np.stack([g] * n, axis=-1)
    else:
        values = grid.coordinates * profile[..., None]

    return VectorField.from_function(grid, lambda _: values)


# ---------------------------------------------------------------------------
# Scans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScanRow:
    N: int
    seminorm: float
    ratio: float  # seminorm ratio against the previous N
    increment_ratio: float  # growth of successive increments of seminorm^p


@dataclass
class ScanLine:
    kind: ExampleKind
    n: int
    s: float
    p: float
    rows: list[ScanRow] = field(default_factory=list)
    verdict: str = "abstain"

    @property
    def sp(self) -> float:
        return self.s * self.p

    def as_rows(self) -> list[list]:
        return [[self.kind.value, self.n, self.s, self.p, row.N, row.seminorm,
                 row.ratio, row.increment_ratio, self.verdict] for row in self.rows]


SCAN_COLUMNS = ["kind", "n", "s", "p", "N", "seminorm", "ratio", "increment_ratio", "verdict"]


def expected_verdict(example: ExampleMap, n: int, s: float, p: float) -> str:
    threshold = example.threshold(n)
    if abs(s * p - threshold) < config.TRANSITION_BAND:
        return "abstain"
    return "bounded" if s * p < threshold else "diverging"


def classify(power_sums: list[float], p: float) -> str:
    """Verdict from the refinement sequence of seminorm^p values."""
    if len(power_sums) >= 3:
        increments = np.diff(power_sums)
        growing = np.all(increments > 0) and np.all(np.diff(increments) > 0)
        return "diverging" if growing else "bounded"
    if len(power_sums) == 2:
        if power_sums[0] <= 0:
            return "bounded"
        ratio = (power_sums[1] / power_sums[0]) ** (1 / p)
        return "diverging" if ratio > config.GROWTH_RATIO_THRESHOLD else "bounded"
    return "abstain"


def membership_scan(example: ExampleMap | ExampleKind | str, s_list, p_list, N_list,
                    n: int = 1, extent: float = 2.0) -> list[ScanLine]:
    """Gagliardo refinement scan over every (s, p) pair and grid size."""
    if not (s_list and p_list and N_list):
        raise ValueError("s_list, p_list and N_list must be non-empty")
    if not isinstance(example, ExampleMap):
        example = ExampleMap(example)
    N_list = sorted(N_list)
    fields = {N: build_example(example, Grid(n, extent, N)) for N in N_list}
    lines = []
    for s in s_list:
        for p in p_list:
            FracParams(n, s, p)
            line = ScanLine(example.kind, n, float(s), float(p))
            sums = []
            for N in N_list:
                seminorms = gagliardo_components(fields[N], s, p)
                sums.append(math.fsum(v ** p for v in seminorms))
                seminorm = sums[-1] ** (1 / p)
                ratio = seminorm / line.rows[-1].seminorm if line.rows and line.rows[-1].seminorm > 0 else math.nan
                increment_ratio = math.nan
                if len(sums) >= 3 and sums[-2] != sums[-3]:
                    increment_ratio = (sums[-1] - sums[-2]) / (sums[-2] - sums[-3])
                line.rows.append(ScanRow(N, seminorm, ratio, increment_ratio))
            if abs(line.sp - example.threshold(n)) < config.TRANSITION_BAND:
                line.verdict = "abstain"
                logger.warning("Abstaining at s=%.3f p=%.3f: sp within the transition band", s, p)
            else:
                line.verdict = classify(sums, p)
            logger.info("%s n=%d s=%.3f p=%.3f -> %s", example.kind.value, n, s, p, line.verdict)
            lines.append(line)
    return lines


def misclassifications(example: ExampleMap, lines: list[ScanLine]) -> list[ScanLine]:
    return [line for line in lines
            if line.verdict != "abstain"
            and line.verdict != expected_verdict(example, line.n, line.s, line.p)]


def verdicts_monotone(lines: list[ScanLine]) -> bool:
    """No 'bounded' at larger sp than a 'diverging' (abstentions ignored)."""
    decided = sorted((line.sp, line.verdict) for line in lines if line.verdict != "abstain")
    seen_diverging = False
    for _, verdict in decided:
        if verdict == "diverging":
            seen_diverging = True
        elif seen_diverging:
            return False
    return True


# ---------------------------------------------------------------------------
# Existence regime
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExistenceRegime:
    p_star: float
    q_min: float | None  # cofactor exponent must exceed this when sp < n
    cavitation_compatible: bool
    fracture_compatible: bool


def existence_regime(n: int, s: float, p: float) -> ExistenceRegime:
    """Which singular deformations the coercive polyconvex setting admits."""
    p_star = fractional_sobolev_exponent(FracParams(n, s, p))
    q_min = p_star / (p_star - 1) if math.isfinite(p_star) else None
    return ExistenceRegime(
        p_star=p_star,
        q_min=q_min,
        cavitation_compatible=p > n and s < n / p,
        fracture_compatible=p > n and s < 1 / p,
    )
