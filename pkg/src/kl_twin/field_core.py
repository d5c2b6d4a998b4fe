"""Grids, fields, squared-exponential kernels, analytic KLE bases and seeded sampling."""

from __future__ import annotations
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np
import scipy.linalg

from .errors import DecompositionError, InvalidArgumentError

log = logging.getLogger(__name__)

FieldKind = Literal["space_time", "space_only", "time_only"]
Axis = Literal["space", "time", "space_time"]

# Eigenvalues below -NEGATIVE_TOL * lambda_max mean the Gram matrix is not PSD
NEGATIVE_TOL = 1e-8


# ── Grid ──────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Grid:
    """
    Uniform space-time mesh with n_x interior space nodes and n_t time steps.
    Node (x_idx, t_idx) has global index t_idx * (n_x + 2) + x_idx.
    """
    n_x: int
    n_t: int
    length: float
    horizon: float

    @property
    def dx(self) -> float:
        return self.length / (self.n_x + 1)

    @property
    def dt(self) -> float:
        return self.horizon / self.n_t

    @property
    def n_space(self) -> int:
        return self.n_x + 2

    @property
    def n_time(self) -> int:
        return self.n_t + 1

    @property
    def n_nodes(self) -> int:
        return self.n_space * self.n_time

    @property
    def n_interior(self) -> int:
        return self.n_x * self.n_t

    @cached_property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.length, self.n_space)

    @cached_property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_time)

    def index(self, x_idx: int, t_idx: int) -> int:
        if not (0 <= x_idx < self.n_space and 0 <= t_idx < self.n_time):
            raise InvalidArgumentError(f"node ({x_idx}, {t_idx}) outside grid")
        return t_idx * self.n_space + x_idx

    # Node partition: interior (t >= 1, 1 <= x <= n_x), initial (t = 0, 1 <= x <= n_x),
    # left (x = 0, all t) and right (x = n_x + 1, all t). Corners belong to the boundaries.

    @cached_property
    def interior_index(self) -> np.ndarray:
        t, x = np.meshgrid(np.arange(1, self.n_time), np.arange(1, self.n_x + 1), indexing="ij")
        return (t * self.n_space + x).ravel()

    @cached_property
    def initial_index(self) -> np.ndarray:
        return np.arange(1, self.n_x + 1)

    @cached_property
    def left_index(self) -> np.ndarray:
        return np.arange(self.n_time) * self.n_space

    @cached_property
    def right_index(self) -> np.ndarray:
        return np.arange(self.n_time) * self.n_space + self.n_x + 1

    def nearest_interior(self, x_star: float) -> int:
        """Interior space index closest to x_star."""
        if not 0.0 < x_star < self.length:
            raise InvalidArgumentError(f"x* = {x_star} outside (0, {self.length})")
        return int(np.clip(np.rint(x_star / self.dx), 1, self.n_x))

    def size(self, kind: FieldKind) -> int:
        return {"space_time": self.n_nodes, "space_only": self.n_space, "time_only": self.n_time}[kind]


def build_grid(n_x: int, n_t: int, length: float, horizon: float) -> Grid:
    if n_x < 1 or n_t < 1:
        raise InvalidArgumentError(f"grid needs n_x >= 1 and n_t >= 1, got ({n_x}, {n_t})")
    if not (length > 0 and horizon > 0):
        raise InvalidArgumentError(f"grid needs L > 0 and T > 0, got ({length}, {horizon})")
    return Grid(int(n_x), int(n_t), float(length), float(horizon))


# ── Field ─────────────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class Field:
    """Real values on a grid, ordered by global index (space_time), x (space_only) or t (time_only)."""
    grid: Grid
    kind: FieldKind
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.shape != (self.grid.size(self.kind),):
            raise InvalidArgumentError(
                f"{self.kind} field needs {self.grid.size(self.kind)} values, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError("field values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def as_matrix(self) -> np.ndarray:
        """(n_t + 1, n_x + 2) view of a space_time field."""
        if self.kind != "space_time":
            raise InvalidArgumentError("as_matrix needs a space_time field")
        return self.values.reshape(self.grid.n_time, self.grid.n_space)

    def at_time(self, t_idx: int) -> np.ndarray:
        return self.as_matrix()[t_idx]

    def __add__(self, other: Field) -> Field:
        _check_same(self, other)
        return Field(self.grid, self.kind, self.values + other.values)

    def __sub__(self, other: Field) -> Field:
        _check_same(self, other)
        return Field(self.grid, self.kind, self.values - other.values)


def _check_same(a: Field, b: Field) -> None:
    if a.grid != b.grid or a.kind != b.kind:
        raise InvalidArgumentError("fields live on different grids or kinds")


def constant_field(grid: Grid, kind: FieldKind, value: float = 0.0) -> Field:
    return Field(grid, kind, np.full(grid.size(kind), float(value)))


# ── Kernel ────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SeKernel:
    """sigma^2 exp(-(x - x')^2 / l^2 - (t - t')^2 / tau^2); absent scales drop their factor."""
    variance: float
    length_scale: float | None = None
    time_scale: float | None = None

    def __post_init__(self) -> None:
        if not self.variance > 0:
            raise InvalidArgumentError(f"kernel variance must be > 0, got {self.variance}")
        for name in ("length_scale", "time_scale"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise InvalidArgumentError(f"kernel {name} must be > 0, got {value}")
        if self.length_scale is None and self.time_scale is None:
            raise InvalidArgumentError("kernel needs a space or a time correlation length")

    def gram(self, nodes: np.ndarray, scale: float) -> np.ndarray:
        """exp(-d^2 / scale^2) on 1D nodes (unit variance factor)."""
        d = nodes[:, None] - nodes[None, :]
        return np.exp(-(d / scale) ** 2)


# ── RNG ───────────────────────────────────────────────────────────────────────

@dataclass
class RngStream:
    """Independent generator for (master seed, stream id); stream id is usually the sample index."""
    seed: int
    stream: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.seed < 0 or self.stream < 0:
            raise InvalidArgumentError("seed and stream id must be non-negative")
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def standard_normal(self, n: int) -> np.ndarray:
        return self._gen.standard_normal(n)

    def uniform(self, low: float, high: float, size: tuple[int, ...] | None = None) -> float | np.ndarray:
        if size is None:
            return float(self._gen.uniform(low, high))
        return self._gen.uniform(low, high, size)


# ── KL basis container ────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class KlBasis:
    """
    Truncated KL basis: mean + sum_i eta_i psi_i with psi_i = sqrt(lambda_i) phi_i.
    eigenvectors holds phi (n_nodes, n_terms), orthonormal under unit node weights.
    """
    mean: Field
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    total_variance: float

    def __post_init__(self) -> None:
        lam = np.asarray(self.eigenvalues, dtype=np.float64)
        vecs = np.asarray(self.eigenvectors, dtype=np.float64)
        if lam.ndim != 1 or lam.size == 0:
            raise InvalidArgumentError("basis needs at least one eigenvalue")
        if vecs.shape != (self.mean.values.size, lam.size):
            raise InvalidArgumentError(f"eigenvectors shape {vecs.shape} does not match mean/eigenvalues")
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "eigenvectors", vecs)

    @property
    def grid(self) -> Grid:
        return self.mean.grid

    @property
    def kind(self) -> FieldKind:
        return self.mean.kind

    @property
    def n_terms(self) -> int:
        return self.eigenvalues.size

    @cached_property
    def modes(self) -> np.ndarray:
        """Scaled eigenfunctions psi, shape (n_nodes, n_terms)."""
        return self.eigenvectors * np.sqrt(self.eigenvalues)

    @property
    def rtol(self) -> float:
        """Discarded fraction of the total variance."""
        if self.total_variance <= 0:
            return 0.0
        kept = float(self.eigenvalues.sum())
        return max(0.0, (self.total_variance - kept) / self.total_variance)

    def with_mean(self, mean: Field) -> KlBasis:
        if mean.grid != self.grid or mean.kind != self.kind:
            raise InvalidArgumentError("replacement mean lives on another grid or kind")
        return KlBasis(mean, self.eigenvalues, self.eigenvectors, self.total_variance)

    def truncated(self, n_terms: int) -> KlBasis:
        if not 1 <= n_terms <= self.n_terms:
            raise InvalidArgumentError(f"cannot truncate {self.n_terms} terms to {n_terms}")
        return KlBasis(self.mean, self.eigenvalues[:n_terms], self.eigenvectors[:, :n_terms], self.total_variance)


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    if vectors.size == 0:
        return vectors
    rows = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[rows, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _sym_eig(matrix: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    """Descending eigenpairs of a symmetric PSD matrix; round-off negatives clipped to zero."""
    try:
        lam, vecs = scipy.linalg.eigh(matrix)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"{what}: eigensolve failed ({exc})") from exc
    lam, vecs = lam[::-1], vecs[:, ::-1]
    top = max(lam[0], 0.0)
    if lam[-1] < -NEGATIVE_TOL * top:
        raise DecompositionError(f"{what}: kernel matrix not positive semi-definite (lambda_min = {lam[-1]:.3e})")
    n_clipped = int(np.sum(lam < 0))
    if n_clipped:
        log.debug("%s: clipped %d round-off negative eigenvalues", what, n_clipped)
    return np.clip(lam, 0.0, None), vecs


def kernel_basis(kernel: SeKernel, grid: Grid, axis: Axis, n_terms: int) -> KlBasis:
    """
    Nystrom KLE of an analytic SE kernel on grid nodes (unit weights), zero mean.
    space_time bases are tensor products of the 1D space and time eigenpairs.
    """
    if axis == "space":
        if kernel.length_scale is None:
            raise InvalidArgumentError("space basis needs a kernel length_scale")
        count, kind = grid.n_space, "space_only"
    elif axis == "time":
        if kernel.time_scale is None:
            raise InvalidArgumentError("time basis needs a kernel time_scale")
        count, kind = grid.n_time, "time_only"
    elif axis == "space_time":
        if kernel.length_scale is None or kernel.time_scale is None:
            raise InvalidArgumentError("space_time basis needs both length_scale and time_scale")
        count, kind = grid.n_nodes, "space_time"
    else:
        raise InvalidArgumentError(f"unknown axis {axis!r}")
    if not 1 <= n_terms <= count:
        raise InvalidArgumentError(f"n_terms = {n_terms} outside [1, {count}] for {axis} axis")

    mean = constant_field(grid, kind)
    if axis == "space":
        lam, vecs = _sym_eig(kernel.variance * kernel.gram(grid.x, kernel.length_scale), "space kernel")
        total = float(lam.sum())
        return KlBasis(mean, lam[:n_terms], fix_signs(vecs[:, :n_terms]), total)
    if axis == "time":
        lam, vecs = _sym_eig(kernel.variance * kernel.gram(grid.t, kernel.time_scale), "time kernel")
        total = float(lam.sum())
        return KlBasis(mean, lam[:n_terms], fix_signs(vecs[:, :n_terms]), total)

    lam_x, vec_x = _sym_eig(kernel.variance * kernel.gram(grid.x, kernel.length_scale), "space kernel")
    lam_t, vec_t = _sym_eig(kernel.gram(grid.t, kernel.time_scale), "time kernel")
    # flat position = i_t * n_space + i_x; stable sort keeps that order on ties
    products = np.outer(lam_t, lam_x).ravel()
    order = np.argsort(-products, kind="stable")[:n_terms]
    i_t, i_x = np.divmod(order, grid.n_space)
    # time-major node ordering: phi[t * n_space + x] = phi_t[t] * phi_x[x]
    vecs = (vec_t[:, i_t][:, None, :] * vec_x[:, i_x][None, :, :]).reshape(grid.n_nodes, n_terms)
    total = float(products.sum())
    return KlBasis(mean, products[order], fix_signs(vecs), total)


def sample_gaussian_field(basis: KlBasis, rng: RngStream) -> tuple[Field, np.ndarray]:
    """Field = mean + Psi xi with xi i.i.d. standard normal."""
    xi = rng.standard_normal(basis.n_terms)
    return basis.mean + Field(basis.grid, basis.kind, basis.modes @ xi), xi
