"""
Digital-twin orchestration: train a source surrogate, transfer it to a target
condition (one-shot for the linear problem, one/few-shot for the nonlinear one),
and predict states from concrete controls.
"""

from __future__ import annotations
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal

import numpy as np
import scipy.linalg

from . import config
from .errors import InvalidArgumentError
from .field_core import Field, Grid, KlBasis, RngStream, SeKernel, kernel_basis, sample_gaussian_field
from .kl_transform import empirical_basis, kld_forward, kld_inverse, kld_inverse_many
from .latent_maps import (
    LinearMap,
    assemble_nonlinear_residual,
    assemble_rls_fluctuation,
    assemble_rls_linear,
    fit_ols,
    rls_transfer_matrix,
)
from .mlp import Mlp, init_mlp, mlp_forward, mlp_input_jacobian, mlp_train, retrain_last_layer
from .models import BasisSizes, ConditionSpec, KernelSpec, MeanFunction, Problem, RlsWeights, TrainingOptions
from .pde_solvers import Ibc, SourceSpec, solve_diffusion

if TYPE_CHECKING:
    from .harness import Dataset

log = logging.getLogger(__name__)

SourceMethod = Literal["ols", "rls", "mlp"]
NonlinearMethod = Literal["rls", "ols", "kl_dnn", "pi_kl_dnn", "combined"]


# ── Condition helpers ─────────────────────────────────────────────────────────

def se_kernel(spec: KernelSpec) -> SeKernel:
    return SeKernel(spec.variance, spec.length_scale, spec.time_scale)


def mean_field_of(mean: MeanFunction, grid: Grid, kind: Literal["space_time", "time_only"]) -> Field:
    """Evaluate a mean shape on the grid nodes."""
    if kind == "time_only":
        return Field(grid, kind, mean.evaluate(np.zeros(grid.n_time), grid.t, grid.horizon))
    x, t = np.meshgrid(grid.x, grid.t)
    return Field(grid, kind, mean.evaluate(x, t, grid.horizon).ravel())


def linear_control_bases(condition: ConditionSpec, grid: Grid, n_f: int, n_q: int) -> dict[str, KlBasis]:
    """Analytic f (space_time) and q (time) bases of a condition, carrying its means."""
    if None in (condition.f_mean, condition.f_kernel, condition.q_mean, condition.q_kernel):
        raise InvalidArgumentError(f"condition {condition.label!r} lacks f/q means or kernels")
    f_basis = kernel_basis(se_kernel(condition.f_kernel), grid, "space_time", n_f)
    q_basis = kernel_basis(se_kernel(condition.q_kernel), grid, "time", n_q)
    log.info("control bases: f rtol %.3e, q rtol %.3e", f_basis.rtol, q_basis.rtol)
    return {
        "f": f_basis.with_mean(mean_field_of(condition.f_mean, grid, "space_time")),
        "q": q_basis.with_mean(mean_field_of(condition.q_mean, grid, "time_only")),
    }


def log_conductivity_basis(kernel: KernelSpec, grid: Grid, n_terms: int) -> KlBasis:
    """Zero-mean KLE of y = ln k on the space nodes."""
    return kernel_basis(se_kernel(kernel), grid, "space", n_terms)


def conductivity_field(kernel: KernelSpec, grid: Grid, seed: int) -> Field:
    """k = exp(y) for one fixed realization of y drawn from the full-rank space KLE."""
    y_basis = log_conductivity_basis(kernel, grid, grid.n_space)
    y, _ = sample_gaussian_field(y_basis, RngStream(seed, 0))
    return Field(grid, "space_only", np.exp(y.values))


def condition_ibc(condition: ConditionSpec) -> Ibc:
    """IBC at the centres of the condition's ranges."""
    return Ibc(*condition.ibc_midpoints)


# ── Surrogate ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class Controls:
    """Concrete control values: f, q and IBC scalars (linear) or k (nonlinear)."""
    f: Field | None = None
    q: Field | None = None
    h0: float | None = None
    h_left: float | None = None
    h_right: float | None = None
    k: Field | None = None


@dataclass(frozen=True, eq=False)
class SurrogateModel:
    """
    h(x, t | controls) = state.mean + Psi_h NN(xi), with xi from the inverse KLDs of
    the controls. Linear latents: [xi_f, xi_q, h0', h_l', h_r']; nonlinear: xi_k.
    """
    problem: Problem
    state: KlBasis
    controls: dict[str, KlBasis]
    latent_map: LinearMap | Mlp
    condition: ConditionSpec
    method: str
    gamma: float = 0.0
    ibc_means: tuple[float, float, float] = (0.0, 0.0, 0.0)
    conductivity: Field | None = None
    x_star: float | None = None
    rls_weights: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        expected = ("f", "q") if self.problem == "linear" else ("k",)
        if tuple(sorted(self.controls)) != tuple(sorted(expected)):
            raise InvalidArgumentError(f"{self.problem} model needs control bases {expected}")
        for basis in self.controls.values():
            if basis.grid != self.state.grid:
                raise InvalidArgumentError("control and state bases live on different grids")
        if self.latent_map.n_in != self.n_latent or self.latent_map.n_out != self.state.n_terms:
            raise InvalidArgumentError(
                f"map {self.latent_map.n_in}->{self.latent_map.n_out} does not match bases "
                f"{self.n_latent}->{self.state.n_terms}"
            )
        if self.problem == "linear" and (self.conductivity is None or self.x_star is None):
            raise InvalidArgumentError("linear model needs its conductivity field and x_star")

    @property
    def grid(self) -> Grid:
        return self.state.grid

    @property
    def n_latent(self) -> int:
        if self.problem == "linear":
            return self.controls["f"].n_terms + self.controls["q"].n_terms + 3
        return self.controls["k"].n_terms

    def latents(self, controls: Controls) -> np.ndarray:
        """xi (or xi~) for concrete controls via the inverse KLDs with the model gamma."""
        if self.problem == "linear":
            if controls.f is None or controls.q is None or None in (controls.h0, controls.h_left, controls.h_right):
                raise InvalidArgumentError("linear model needs f, q, h0, h_left and h_right")
            ibc = np.array([controls.h0, controls.h_left, controls.h_right]) - np.array(self.ibc_means)
            return np.concatenate([
                kld_inverse(self.controls["f"], controls.f, self.gamma),
                kld_inverse(self.controls["q"], controls.q, self.gamma),
                ibc,
            ])
        if controls.k is None:
            raise InvalidArgumentError("nonlinear model needs a conductivity field k")
        return kld_inverse(self.controls["k"], controls.k, self.gamma)

    def map_latents(self, xi: np.ndarray) -> np.ndarray:
        if isinstance(self.latent_map, Mlp):
            return mlp_forward(self.latent_map, xi)
        return self.latent_map(xi)

    def jacobian(self, xi: np.ndarray) -> np.ndarray:
        """d eta / d xi at xi."""
        if isinstance(self.latent_map, Mlp):
            return mlp_input_jacobian(self.latent_map, xi)
        return self.latent_map.jacobian(xi)


def predict(model: SurrogateModel, controls: Controls) -> Field:
    for name in ("f", "q", "k"):
        value = getattr(controls, name)
        if value is not None and value.grid != model.grid:
            raise InvalidArgumentError(f"control {name} lives on another grid than the model")
    return kld_forward(model.state, model.map_latents(model.latents(controls)))


# ── Source training ───────────────────────────────────────────────────────────

def _latent_dataset(problem: Problem, dataset: Dataset, controls: dict[str, KlBasis], state: KlBasis,
                    ibc_means: tuple[float, float, float], gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """(Xi, H) with samples in columns."""
    if problem == "linear":
        xi = np.vstack([
            kld_inverse_many(controls["f"], dataset.controls["f"].T, gamma),
            kld_inverse_many(controls["q"], dataset.controls["q"].T, gamma),
            (dataset.ibc - np.array(ibc_means)).T,
        ])
    else:
        xi = kld_inverse_many(controls["k"], dataset.controls["k"].T, gamma)
    return xi, kld_inverse_many(state, dataset.solutions.T, 0.0)


def train_source(
    problem: Problem,
    condition: ConditionSpec,
    dataset: Dataset,
    map_kind: SourceMethod,
    *,
    basis: BasisSizes | None = None,
    gamma: float = 0.0,
    ridge: float | None = None,
    rls_weights: RlsWeights | None = None,
    training: TrainingOptions | None = None,
    init_seed: int = 0,
) -> SurrogateModel:
    """Fit state/control bases and the latent map on a source dataset."""
    basis = basis or BasisSizes()
    weights = rls_weights or RlsWeights()
    weight_tuple = (weights.residual, weights.initial, weights.boundary)
    if dataset.problem != problem:
        raise InvalidArgumentError(f"dataset is for the {dataset.problem} problem, not {problem}")
    if basis.n_state > dataset.n_samples - 1:
        raise InvalidArgumentError(
            f"{dataset.n_samples} samples cannot support {basis.n_state} state terms (need N - 1 >= n_state)"
        )
    grid = dataset.grid
    state = empirical_basis(dataset.solution_fields(), basis.n_state)

    if problem == "linear":
        controls = linear_control_bases(condition, grid, basis.n_f, basis.n_q)
        ibc_means = condition.ibc_midpoints
    else:
        if basis.n_k > dataset.n_samples - 1:
            raise InvalidArgumentError(f"{dataset.n_samples} samples cannot support {basis.n_k} k terms")
        controls = {"k": empirical_basis(dataset.control_fields("k"), basis.n_k)}
        ibc_means = condition.ibc_midpoints
    xi, eta = _latent_dataset(problem, dataset, controls, state, ibc_means, gamma)

    if map_kind == "ols":
        latent_map: LinearMap | Mlp = fit_ols(xi, eta, ridge)
    elif map_kind == "rls":
        if problem == "linear":
            system = assemble_rls_linear(
                grid, dataset.conductivity, state, controls["f"], controls["q"], dataset.x_star, weight_tuple
            )
        else:
            system = assemble_rls_fluctuation(grid, controls["k"], state, weight_tuple)
        latent_map = LinearMap(rls_transfer_matrix(system))
    elif map_kind == "mlp":
        training = training or TrainingOptions()
        widths = [xi.shape[0], *training.hidden_widths, eta.shape[0]]
        latent_map = mlp_train(init_mlp(widths, init_seed), xi.T, eta.T, training)
    else:
        raise InvalidArgumentError(f"unknown source map kind {map_kind!r}")

    log.info("source %s model (%s): %d -> %d latents", problem, map_kind, xi.shape[0], eta.shape[0])
    return SurrogateModel(
        problem=problem,
        state=state,
        controls=controls,
        latent_map=latent_map,
        condition=condition,
        method=map_kind,
        gamma=gamma,
        ibc_means=ibc_means,
        conductivity=dataset.conductivity,
        x_star=dataset.x_star,
        rls_weights=weight_tuple,
    )


# ── Transfer ──────────────────────────────────────────────────────────────────

def _same_means(a: ConditionSpec, b: ConditionSpec) -> bool:
    return a.f_mean == b.f_mean and a.q_mean == b.q_mean and a.ibc_midpoints == b.ibc_midpoints


def transfer_linear(source: SurrogateModel, target: ConditionSpec, gamma: float = 0.0) -> SurrogateModel:
    """
    One-shot transfer: the target state mean is one mean-field solve under the target
    means; eigenfunctions, eigenvalues and W carry over unchanged.
    """
    if source.problem != "linear":
        raise InvalidArgumentError("transfer_linear needs a linear-problem source model")
    grid = source.grid
    if _same_means(source.condition, target):
        log.info("target %s keeps the source means; state mean reused", target.label)
        state = source.state
    else:
        f_mean = mean_field_of(target.f_mean, grid, "space_time")
        q_mean = mean_field_of(target.q_mean, grid, "time_only")
        h_mean = solve_diffusion(
            grid, source.conductivity, SourceSpec(f_mean, q_mean, source.x_star), condition_ibc(target)
        )
        state = source.state.with_mean(h_mean)
    controls = {
        "f": source.controls["f"].with_mean(mean_field_of(target.f_mean, grid, "space_time")),
        "q": source.controls["q"].with_mean(mean_field_of(target.q_mean, grid, "time_only")),
    }
    return SurrogateModel(
        problem="linear",
        state=state,
        controls=controls,
        latent_map=source.latent_map,
        condition=target,
        method="one_shot",
        gamma=gamma,
        ibc_means=target.ibc_midpoints,
        conductivity=source.conductivity,
        x_star=source.x_star,
        rls_weights=source.rls_weights,
    )


def nonlinear_mean_field(source: SurrogateModel, target: ConditionSpec) -> Field:
    """Mean-field solve with k_mean (the k KLD mean) under the target IBC."""
    return solve_diffusion(source.grid, source.controls["k"].mean, None, condition_ibc(target))


def residual_realizations(
    grid: Grid, h_mean: Field, k_basis: KlBasis, state: KlBasis, n_residual: int, seed: int
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """
    (xi_k, R, Q^T b) for n_residual i.i.d. standard-normal xi_k, where A = QR.

    ||A eta + b||^2 and ||R eta + Q^T b||^2 differ by a constant in eta, so only the
    N_eta x N_eta reduction of each realization is kept.
    """
    out = []
    for i in range(n_residual):
        xi = RngStream(seed, i).standard_normal(k_basis.n_terms)
        a, b = assemble_nonlinear_residual(grid, h_mean, k_basis, state, xi)
        q, r = scipy.linalg.qr(a, mode="economic")
        out.append((xi, r, q.T @ b))
    return out


def target_residuals(
    source: SurrogateModel, target: ConditionSpec, n_residual: int, seed: int
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """residual_realizations around the target mean field, reusable across retraining runs."""
    h_mean = nonlinear_mean_field(source, target)
    return residual_realizations(
        source.grid, h_mean, source.controls["k"], source.state.with_mean(h_mean), n_residual, seed
    )


def transfer_nonlinear(
    source: SurrogateModel,
    target: ConditionSpec,
    method: NonlinearMethod,
    *,
    n_train_target: int = 0,
    target_dataset: Dataset | None = None,
    n_residual: int = config.N_RESIDUAL,
    residual_weight: float = config.RESIDUAL_WEIGHT,
    residual_seed: int = 0,
    residuals: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None,
    ridge: float | None = None,
    strict: bool = False,
) -> SurrogateModel:
    """
    Target model with h_mean from one mean-field solve and the source eigenfunctions.
    rls re-assembles the fluctuation system; ols refits on target pairs; kl_dnn retrains
    the last layer on target pairs; pi_kl_dnn retrains it on PDE residuals (plus target
    pairs when n_train_target > 0); combined always uses both. Precomputed residual
    realizations for this source and target may be passed in to skip their assembly.
    """
    if source.problem != "nonlinear":
        raise InvalidArgumentError("transfer_nonlinear needs a nonlinear-problem source model")
    if method in ("ols", "kl_dnn", "combined") and n_train_target < 1:
        raise InvalidArgumentError(f"{method} transfer needs labeled target samples (n_train_target >= 1)")
    if method in ("kl_dnn", "pi_kl_dnn", "combined") and not isinstance(source.latent_map, Mlp):
        raise InvalidArgumentError(f"{method} transfer needs an MLP source model")
    grid = source.grid
    k_basis = source.controls["k"]
    h_mean = nonlinear_mean_field(source, target)
    state = source.state.with_mean(h_mean)

    data = None
    if n_train_target > 0:
        if target_dataset is None or target_dataset.n_samples < n_train_target:
            have = 0 if target_dataset is None else target_dataset.n_samples
            raise InvalidArgumentError(f"need {n_train_target} target samples, dataset has {have}")
        subset = target_dataset.head(n_train_target)
        data = (
            kld_inverse_many(k_basis, subset.controls["k"].T, source.gamma).T,
            kld_inverse_many(state, subset.solutions.T, 0.0).T,
        )

    if method == "rls":
        system = assemble_rls_fluctuation(grid, k_basis, state, source.rls_weights)
        latent_map: LinearMap | Mlp = LinearMap(rls_transfer_matrix(system))
    elif method == "ols":
        latent_map = fit_ols(data[0].T, data[1].T, ridge)
    elif method == "kl_dnn":
        latent_map = retrain_last_layer(source.latent_map, "data", data=data, strict=strict)
    elif method in ("pi_kl_dnn", "combined"):
        mode = "physics" if data is None else "combined"
        if residuals is None:
            residuals = residual_realizations(grid, h_mean, k_basis, state, n_residual, residual_seed)
        latent_map = retrain_last_layer(
            source.latent_map, mode, data=data, residuals=residuals, residual_weight=residual_weight
        )
    else:
        raise InvalidArgumentError(f"unknown nonlinear transfer method {method!r}")

    log.info("transfer %s -> %s via %s (%d target samples)", source.condition.label, target.label, method, n_train_target)
    return SurrogateModel(
        problem="nonlinear",
        state=state,
        controls={"k": k_basis},
        latent_map=latent_map,
        condition=target,
        method=method,
        gamma=source.gamma,
        ibc_means=target.ibc_midpoints,
        rls_weights=source.rls_weights,
    )
