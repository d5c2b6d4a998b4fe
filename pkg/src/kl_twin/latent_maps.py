"""Linear xi -> eta maps: OLS with ridge, residual least squares, and PDE residual assembly."""

from __future__ import annotations
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import config
from .errors import DecompositionError, InvalidArgumentError
from .field_core import Field, Grid, KlBasis
from .pde_solvers import assemble_fd_operator, divergence, interface_conductivity

log = logging.getLogger(__name__)


# ── Linear map ────────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class LinearMap:
    """eta = W xi + bias."""
    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.ndim != 2 or not np.all(np.isfinite(weights)):
            raise InvalidArgumentError("linear map needs a finite 2D weight matrix")
        bias = np.zeros(weights.shape[0]) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
        if bias.shape != (weights.shape[0],):
            raise InvalidArgumentError(f"bias needs length {weights.shape[0]}")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def __call__(self, xi: np.ndarray) -> np.ndarray:
        """xi of shape (n_in,) or (m, n_in)."""
        xi = np.asarray(xi, dtype=np.float64)
        if xi.shape[-1] != self.n_in:
            raise InvalidArgumentError(f"map expects {self.n_in} inputs, got {xi.shape[-1]}")
        return xi @ self.weights.T + self.bias

    def jacobian(self, xi: np.ndarray | None = None) -> np.ndarray:
        """d eta / d xi (constant)."""
        return self.weights.copy()


def _check_rank(sv: np.ndarray, n_cols: int, what: str, advice: str) -> None:
    if sv.size < n_cols or sv[-1] <= config.RANK_RTOL * sv[0]:
        raise DecompositionError(f"{what} is rank deficient; {advice}")


def default_ridge(xi: np.ndarray) -> float:
    """RIDGE_SCALE * trace(Xi Xi^T) / N_xi when N_train < N_xi, else 0."""
    n_xi, n_train = xi.shape
    if n_train >= n_xi:
        return 0.0
    return config.RIDGE_SCALE * float(np.sum(xi * xi)) / n_xi


def fit_ols(xi: np.ndarray, eta: np.ndarray, ridge: float | None = None) -> LinearMap:
    """
    W = H Xi^T (Xi Xi^T + ridge I)^-1 for Xi (N_xi, N_train), H (N_eta, N_train),
    computed as least squares on [Xi^T; sqrt(ridge) I] W^T = [H^T; 0].
    ridge=None applies default_ridge.
    """
    xi = np.asarray(xi, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if xi.ndim != 2 or eta.ndim != 2 or xi.shape[1] != eta.shape[1]:
        raise InvalidArgumentError(f"OLS needs Xi (N_xi, N) and H (N_eta, N), got {xi.shape} and {eta.shape}")
    if xi.shape[1] < 1:
        raise InvalidArgumentError("OLS needs at least one sample")
    if ridge is None:
        ridge = default_ridge(xi)
        if ridge:
            log.info("OLS: %d samples < %d inputs, ridge %.3e", xi.shape[1], xi.shape[0], ridge)
    if ridge < 0:
        raise InvalidArgumentError(f"ridge must be >= 0, got {ridge}")
    design, rhs = xi.T, eta.T
    if ridge > 0:
        design = np.vstack([design, np.sqrt(ridge) * np.eye(xi.shape[0])])
        rhs = np.vstack([rhs, np.zeros((xi.shape[0], eta.shape[0]))])
    w_t, _, _, sv = scipy.linalg.lstsq(design, rhs, lapack_driver="gelsd")
    if ridge == 0:
        _check_rank(sv, xi.shape[0], "OLS normal matrix", "add a ridge term")
    return LinearMap(w_t.T)


# ── Residual assembly ─────────────────────────────────────────────────────────

def pde_rows(grid: Grid, faces: np.ndarray, columns: np.ndarray) -> np.ndarray:
    """
    du/dt - d/dx(k du/dx) at interior nodes (time-major, t = 1..n_t) for every column
    of columns (n_nodes, m): backward difference in time, solver stencil in space.
    """
    u = columns.T.reshape(-1, grid.n_time, grid.n_space)
    rate = (u[:, 1:, 1:-1] - u[:, :-1, 1:-1]) / grid.dt
    rows = rate - divergence(faces, u[:, 1:, :], grid.dx)
    return rows.reshape(columns.shape[1], grid.n_interior).T


def flux_rows(grid: Grid, faces: np.ndarray, values: np.ndarray) -> np.ndarray:
    """d/dx(k du/dx) at interior nodes (time-major, t = 1..n_t) for one space_time vector."""
    u = values.reshape(grid.n_time, grid.n_space)
    return divergence(faces, u[1:], grid.dx).ravel()


@dataclass(frozen=True, eq=False)
class ResidualSystem:
    """
    Stacked RLS system: minimize ||matrix @ eta - rhs_matrix @ xi_tilde||.
    Row blocks: PDE residual, initial, left and right boundary.
    """
    matrix: np.ndarray
    rhs_matrix: np.ndarray
    weights: tuple[float, float, float]

    def rhs(self, xi_tilde: np.ndarray) -> np.ndarray:
        xi_tilde = np.asarray(xi_tilde, dtype=np.float64)
        if xi_tilde.shape[0] != self.rhs_matrix.shape[1]:
            raise InvalidArgumentError(f"xi~ needs length {self.rhs_matrix.shape[1]}, got {xi_tilde.shape[0]}")
        return self.rhs_matrix @ xi_tilde


def _ibc_blocks(grid: Grid, state: KlBasis, w_initial: float, w_boundary: float) -> list[np.ndarray]:
    modes = state.modes
    return [
        np.sqrt(w_initial) * modes[grid.initial_index],
        np.sqrt(w_boundary) * modes[grid.left_index],
        np.sqrt(w_boundary) * modes[grid.right_index],
    ]


def _weights(weights: tuple[float, float, float] | None) -> tuple[float, float, float]:
    if weights is None:
        return (config.RLS_WEIGHT_RESIDUAL, config.RLS_WEIGHT_INITIAL, config.RLS_WEIGHT_BOUNDARY)
    if any(w <= 0 for w in weights):
        raise InvalidArgumentError(f"RLS weights must be positive, got {weights}")
    return tuple(float(w) for w in weights)


def assemble_rls_linear(
    grid: Grid,
    k: Field,
    state: KlBasis,
    f_basis: KlBasis,
    q_basis: KlBasis,
    x_star: float,
    weights: tuple[float, float, float] | None = None,
) -> ResidualSystem:
    """
    Residual system of the linear problem for xi~ = [xi_f, xi_q, h0', h_l', h_r'].
    A eta = B xi discretizes the fluctuation PDE; IBC rows match h' to the scalar deviations.
    """
    for name, basis, kind in (("state", state, "space_time"), ("f", f_basis, "space_time"), ("q", q_basis, "time_only")):
        if basis.grid != grid or basis.kind != kind:
            raise InvalidArgumentError(f"{name} basis must be {kind} on the RLS grid")
    w_r, w_0, w_b = _weights(weights)
    op = assemble_fd_operator(grid, k)

    a = pde_rows(grid, op.faces, state.modes)
    b_f = f_basis.modes[grid.interior_index]
    b_q = np.zeros((grid.n_interior, q_basis.n_terms))
    i_star = grid.nearest_interior(x_star)
    # interior row of node (n, i*) is (n - 1) * n_x + i* - 1
    b_q[np.arange(grid.n_t) * grid.n_x + i_star - 1] = q_basis.modes[1:] / grid.dx

    n_xi = f_basis.n_terms + q_basis.n_terms
    blocks = [np.sqrt(w_r) * a, *_ibc_blocks(grid, state, w_0, w_b)]
    rhs = np.zeros((sum(block.shape[0] for block in blocks), n_xi + 3))
    rhs[: grid.n_interior, :n_xi] = np.sqrt(w_r) * np.hstack([b_f, b_q])
    start = grid.n_interior
    for col, (count, weight) in enumerate(((grid.n_x, w_0), (grid.n_time, w_b), (grid.n_time, w_b))):
        rhs[start : start + count, n_xi + col] = np.sqrt(weight)
        start += count
    return ResidualSystem(np.vstack(blocks), rhs, (w_r, w_0, w_b))


def assemble_rls_fluctuation(
    grid: Grid,
    k_basis: KlBasis,
    state: KlBasis,
    weights: tuple[float, float, float] | None = None,
) -> ResidualSystem:
    """
    Simplified fluctuation equation of the nonlinear problem with k' h' terms dropped:
    dh'/dt - d/dx(k_mean dh'/dx) = d/dx(k' dh_mean/dx), homogeneous IBCs.
    h_mean is the state basis mean; k' = Psi_k xi_k.
    """
    if state.grid != grid or state.kind != "space_time":
        raise InvalidArgumentError("state basis must be space_time on the RLS grid")
    if k_basis.grid != grid or k_basis.kind != "space_only":
        raise InvalidArgumentError("k basis must be space_only on the RLS grid")
    w_r, w_0, w_b = _weights(weights)
    op = assemble_fd_operator(grid, k_basis.mean)

    a = pde_rows(grid, op.faces, state.modes)
    b = np.column_stack([
        flux_rows(grid, interface_conductivity(k_basis.modes[:, j]), state.mean.values)
        for j in range(k_basis.n_terms)
    ])
    blocks = [np.sqrt(w_r) * a, *_ibc_blocks(grid, state, w_0, w_b)]
    rhs = np.zeros((sum(block.shape[0] for block in blocks), k_basis.n_terms))
    rhs[: grid.n_interior] = np.sqrt(w_r) * b
    return ResidualSystem(np.vstack(blocks), rhs, (w_r, w_0, w_b))


def solve_rls(system: ResidualSystem, xi_tilde: np.ndarray) -> np.ndarray:
    """eta* = argmin ||A~ eta - b~(xi~)||."""
    eta, _, _, sv = scipy.linalg.lstsq(system.matrix, system.rhs(xi_tilde), lapack_driver="gelsd")
    _check_rank(sv, system.matrix.shape[1], "RLS matrix", "use fewer state terms or more residual rows")
    return eta


def rls_transfer_matrix(system: ResidualSystem) -> np.ndarray:
    """W such that solve_rls(system, xi~) = W xi~ for every xi~."""
    w, _, _, sv = scipy.linalg.lstsq(system.matrix, system.rhs_matrix, lapack_driver="gelsd")
    _check_rank(sv, system.matrix.shape[1], "RLS matrix", "use fewer state terms or more residual rows")
    return w


def assemble_nonlinear_residual(
    grid: Grid,
    h_mean: Field,
    k_basis: KlBasis,
    state: KlBasis,
    xi_k: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """
    (A, b) with A eta + b the discrete residual of dh/dt - d/dx(k dh/dx) at
    h = h_mean + Psi_h eta and k = k_mean + Psi_k xi_k, interior nodes only.
    """
    xi_k = np.asarray(xi_k, dtype=np.float64)
    if xi_k.shape != (k_basis.n_terms,):
        raise InvalidArgumentError(f"xi_k needs length {k_basis.n_terms}, got shape {xi_k.shape}")
    if h_mean.grid != grid or state.grid != grid or k_basis.grid != grid:
        raise InvalidArgumentError("mean, state and k bases must share the grid")
    faces = interface_conductivity(k_basis.mean.values + k_basis.modes @ xi_k)
    a = pde_rows(grid, faces, state.modes)
    b = pde_rows(grid, faces, h_mean.values[:, None])[:, 0]
    return a, b


def mapping_error(eta_true: np.ndarray, eta_pred: np.ndarray) -> float:
    """||eta_true - eta_pred|| / ||eta_true||."""
    eta_true = np.asarray(eta_true, dtype=np.float64)
    eta_pred = np.asarray(eta_pred, dtype=np.float64)
    if eta_true.shape != eta_pred.shape:
        raise InvalidArgumentError(f"shape mismatch {eta_true.shape} vs {eta_pred.shape}")
    norm = float(np.linalg.norm(eta_true))
    if norm == 0.0:
        raise InvalidArgumentError("mapping error needs a nonzero reference")
    return float(np.linalg.norm(eta_true - eta_pred)) / norm
