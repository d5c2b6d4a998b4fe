"""Configuration: loads .env and exposes runtime and numerical defaults."""

import os
from pathlib import Path
from dotenv import load_dotenv

# Load .env from project root (src/kl_twin/config.py -> parents[2] = project root)
_ROOT = Path(__file__).resolve().parents[2]
load_dotenv(_ROOT / ".env")


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name, "").strip()
    try:
        return max(1, int(raw)) if raw else default
    except ValueError:
        return default


# ── Runtime ───────────────────────────────────────────────────────────────────

# Worker threads for sample generation / evaluation (overridden by --threads)
THREADS: int = _env_int("KLTWIN_THREADS", 1)

# Where run artifacts (datasets, models, reports) are written
OUTPUT_DIR: Path = Path(os.getenv("KLTWIN_OUTPUT_DIR", str(_ROOT / "runs")))

# Bundled experiment files (table1.cfg, table2.cfg)
CONFIG_DIR: Path = _ROOT / "configs"

# ── Least squares ─────────────────────────────────────────────────────────────

# OLS ridge when N_train < N_xi: RIDGE_SCALE * trace(Xi Xi^T) / N_xi
RIDGE_SCALE: float = 1e-8

# Residual / initial / boundary row weights of the stacked RLS system
RLS_WEIGHT_RESIDUAL: float = 1.0
RLS_WEIGHT_INITIAL: float = 1.0
RLS_WEIGHT_BOUNDARY: float = 1.0

# Singular values below RANK_RTOL * s_max count as zero
RANK_RTOL: float = 1e-10

# ── MLP training ──────────────────────────────────────────────────────────────

HIDDEN_WIDTHS: tuple[int, ...] = (50, 50, 50)
LEARNING_RATE: float = 1e-3
MAX_EPOCHS: int = 20_000
PATIENCE: int = 500
MIN_IMPROVEMENT: float = 1e-10

# ── Physics-informed retraining ───────────────────────────────────────────────

# Random xi_k realizations in the residual loss
N_RESIDUAL: int = 250

# Weight of residual rows in the combined loss
RESIDUAL_WEIGHT: float = 1e-4

# ── Evaluation ────────────────────────────────────────────────────────────────

N_TEST: int = 20

# Profile times as fractions of the horizon
PROFILE_FRACTIONS: tuple[float, ...] = (1 / 50, 1 / 5, 1.0)

# ── Artifact format ───────────────────────────────────────────────────────────

ARTIFACT_MAGIC: bytes = b"KLTW"
ARTIFACT_VERSION: int = 1
