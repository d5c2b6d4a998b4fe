"""Backward-Euler finite-difference solver for dh/dt = d/dx(k dh/dx) + f + q delta(x - x*)."""

from __future__ import annotations
import logging
import threading
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .errors import DecompositionError, InvalidArgumentError
from .field_core import Field, Grid

log = logging.getLogger(__name__)

SCHEME = "backward-euler/central/arithmetic-mean"

_solve_lock = threading.Lock()
_solve_count = 0


def solver_invocations() -> int:
    """Number of solve_diffusion calls since the last reset."""
    return _solve_count


def reset_solver_invocations() -> None:
    global _solve_count
    with _solve_lock:
        _solve_count = 0


def _count_solve() -> None:
    global _solve_count
    with _solve_lock:
        _solve_count += 1


# ── Problem data ──────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class Ibc:
    """Initial value h0 (scalar or space Field) and boundary values (scalar or time Field)."""
    h0: float | Field
    h_left: float | Field
    h_right: float | Field

    def resolve(self, grid: Grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            _ibc_values(self.h0, grid, "space_only", "h0"),
            _ibc_values(self.h_left, grid, "time_only", "h_left"),
            _ibc_values(self.h_right, grid, "time_only", "h_right"),
        )


def _ibc_values(value: float | Field, grid: Grid, kind: str, name: str) -> np.ndarray:
    if isinstance(value, Field):
        if value.grid != grid or value.kind != kind:
            raise InvalidArgumentError(f"{name} must be a {kind} field on the solver grid")
        return value.values
    value = float(value)
    if not np.isfinite(value):
        raise InvalidArgumentError(f"{name} must be finite")
    return np.full(grid.size(kind), value)


@dataclass(frozen=True, eq=False)
class SourceSpec:
    """Distributed source f (space_time) and point rate q (time_only) at x_star; either may be absent."""
    f: Field | None = None
    q: Field | None = None
    x_star: float | None = None

    def __post_init__(self) -> None:
        if self.f is not None and self.f.kind != "space_time":
            raise InvalidArgumentError("distributed source f must be a space_time field")
        if self.q is not None:
            if self.q.kind != "time_only":
                raise InvalidArgumentError("point rate q must be a time_only field")
            if self.x_star is None:
                raise InvalidArgumentError("point rate q needs a location x_star")

    def forcing(self, grid: Grid) -> np.ndarray:
        """(n_t + 1, n_x) forcing at interior space nodes, point source spread as q / dx on one node."""
        out = np.zeros((grid.n_time, grid.n_x))
        if self.f is not None:
            if self.f.grid != grid:
                raise InvalidArgumentError("f lives on another grid")
            out += self.f.as_matrix()[:, 1:-1]
        if self.q is not None:
            if self.q.grid != grid:
                raise InvalidArgumentError("q lives on another grid")
            out[:, grid.nearest_interior(self.x_star) - 1] += self.q.values / grid.dx
        return out


# ── Discrete operator ─────────────────────────────────────────────────────────

def interface_conductivity(k: np.ndarray) -> np.ndarray:
    """k_{i+1/2} = (k_i + k_{i+1}) / 2 for i = 0..n_x."""
    return 0.5 * (k[..., :-1] + k[..., 1:])


def divergence(faces: np.ndarray, u: np.ndarray, dx: float) -> np.ndarray:
    """
    d/dx(k du/dx) at interior nodes along the last axis of u (length n_x + 2), faces (n_x + 1,).
    faces may hold any sign; positivity is only checked by assemble_fd_operator.
    """
    flux = faces * np.diff(u, axis=-1)
    return np.diff(flux, axis=-1) / dx**2


@dataclass(frozen=True, eq=False)
class FdOperator:
    """Tridiagonal d/dx(k d/dx) stencil, rows = interior nodes, columns = all n_x + 2 space nodes."""
    grid: Grid
    k: Field
    faces: np.ndarray
    scheme: str = SCHEME

    @cached_property
    def matrix(self) -> scipy.sparse.csr_matrix:
        n_x, inv = self.grid.n_x, 1.0 / self.grid.dx**2
        rows = np.arange(n_x)
        west, east = self.faces[:-1] * inv, self.faces[1:] * inv
        data = np.concatenate([west, -(west + east), east])
        cols = np.concatenate([rows, rows + 1, rows + 2])
        return scipy.sparse.csr_matrix(
            (data, (np.tile(rows, 3), cols)), shape=(n_x, self.grid.n_space)
        )

    @property
    def interior_block(self) -> scipy.sparse.csc_matrix:
        return self.matrix[:, 1:-1].tocsc()

    def apply(self, u: np.ndarray) -> np.ndarray:
        """Operator on the last axis of u (length n_x + 2), interior values out."""
        return divergence(self.faces, u, self.grid.dx)


def assemble_fd_operator(grid: Grid, k: Field) -> FdOperator:
    if k.kind != "space_only" or k.grid != grid:
        raise InvalidArgumentError("conductivity must be a space_only field on the grid")
    if np.any(k.values <= 0):
        raise InvalidArgumentError(f"conductivity must be positive (min {k.values.min():.3e})")
    return FdOperator(grid, k, interface_conductivity(k.values))


# ── Solver ────────────────────────────────────────────────────────────────────

def solve_diffusion(grid: Grid, k: Field, src: SourceSpec | None, ibc: Ibc) -> Field:
    """
    Backward Euler in time, central differences in space. Boundary and initial
    nodes carry the Ibc values exactly; corners take the boundary values.
    """
    _count_solve()
    op = assemble_fd_operator(grid, k)
    h0, h_left, h_right = ibc.resolve(grid)
    forcing = (src or SourceSpec()).forcing(grid)

    h = np.empty((grid.n_time, grid.n_space))
    h[0] = h0
    h[:, 0] = h_left
    h[:, -1] = h_right

    dt, inv = grid.dt, 1.0 / grid.dx**2
    system = (scipy.sparse.identity(grid.n_x, format="csc") - dt * op.interior_block).tocsc()
    try:
        lu = scipy.sparse.linalg.splu(system)
    except RuntimeError as exc:
        raise DecompositionError(f"implicit step matrix is singular ({exc})") from exc

    west, east = dt * op.faces[0] * inv, dt * op.faces[-1] * inv
    for n in range(1, grid.n_time):
        rhs = h[n - 1, 1:-1] + dt * forcing[n]
        rhs[0] += west * h[n, 0]
        rhs[-1] += east * h[n, -1]
        h[n, 1:-1] = lu.solve(rhs)
    if not np.all(np.isfinite(h)):
        raise DecompositionError("diffusion solve produced non-finite values")
    return Field(grid, "space_time", h.ravel())
