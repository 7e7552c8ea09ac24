"""Configuration — env vars and constants."""

import os

# --- Optional environment overrides ---

FRACVAR_OUT = os.environ.get("FRACVAR_OUT", "")
FRACVAR_THREADS = int(os.environ.get("FRACVAR_THREADS", "0")) or os.cpu_count() or 1
LOG_LEVEL = os.environ.get("FRACVAR_LOG_LEVEL", "INFO").upper()

# --- Numerics ---

S_MARGIN = 1e-6  # s must stay this far from 0 and 1
MAX_DIMENSION = 3
PAD_FACTOR = 2
RIM_TOLERANCE = 1e-10  # sampled values this small on the box rim are zeroed
EPSTEIN_CUTOFF = 4  # lattice shells kept in the theta-split Epstein sum
GAGLIARDO_CHUNK = 256

# --- Artifacts ---

CSV_HEADER = "# fracvar-csv v1"
FIELD_MAGIC = "FRF1"

# --- Membership scans ---

GROWTH_RATIO_THRESHOLD = 1.15
TRANSITION_BAND = 0.1

# --- Verification tolerances (normalized residuals) ---

DEFAULT_TOLERANCES = {
    "piola": 5e-2,
    "ibp": 1e-10,
    "product": 5e-2,
    "det-ibp": 5e-2,
    "det-riesz": 1e-1,
}

# --- Solver defaults ---

SOLVER_TOL_FACTOR = 1e-8  # tol_g = factor * (1 + |I(u0)|)
SOLVER_MAX_ITERS = 500
LBFGS_MEMORY = 10
LINE_SEARCH_STEPS = 20  # trial steps per L-BFGS-B line search
