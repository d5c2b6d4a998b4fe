"""Pydantic models for experiment configuration and error reports."""

from __future__ import annotations
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator

from . import config


Problem = Literal["linear", "nonlinear"]
Method = Literal["ols", "rls", "mlp", "one_shot", "kl_dnn", "pi_kl_dnn", "combined"]
MeanShape = Literal["zero", "constant", "chirp", "exp_poly", "sine_period", "cosine_period"]


# ── Control-variable descriptions ─────────────────────────────────────────────

class KernelSpec(BaseModel):
    """Squared-exponential covariance sigma^2 exp(-dx^2/l^2 - dt^2/tau^2)."""
    variance: float = Field(gt=0, description="sigma^2")
    length_scale: Optional[float] = Field(default=None, gt=0, description="Space correlation length l (space units)")
    time_scale: Optional[float] = Field(default=None, gt=0, description="Time correlation length tau (time units)")

    @model_validator(mode="after")
    def _has_scale(self) -> KernelSpec:
        if self.length_scale is None and self.time_scale is None:
            raise ValueError("kernel needs a length_scale, a time_scale or both")
        return self

    def scaled(self, alpha: float = 1.0, beta: float = 1.0) -> KernelSpec:
        """Correlation lengths times alpha, variance times beta."""
        return KernelSpec(
            variance=self.variance * beta,
            length_scale=None if self.length_scale is None else self.length_scale * alpha,
            time_scale=None if self.time_scale is None else self.time_scale * alpha,
        )


class MeanFunction(BaseModel):
    """
    A named mean shape with an amplitude.
      zero          0
      constant      a
      chirp         a sin(2 pi x cos(10 pi t))
      exp_poly      a [exp(x) + t^3 - t x]
      sine_period   a sin(2 pi t / T)
      cosine_period a cos(2 pi t / T)
    """
    shape: MeanShape = "zero"
    amplitude: float = 1.0

    def evaluate(self, x: np.ndarray, t: np.ndarray, horizon: float) -> np.ndarray:
        x, t = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(t, dtype=float))
        a = self.amplitude
        match self.shape:
            case "zero":
                return np.zeros(x.shape)
            case "constant":
                return np.full(x.shape, a)
            case "chirp":
                return a * np.sin(2 * np.pi * x * np.cos(10 * np.pi * t))
            case "exp_poly":
                return a * (np.exp(x) + t**3 - t * x)
            case "sine_period":
                return a * np.sin(2 * np.pi * t / horizon)
            case "cosine_period":
                return a * np.cos(2 * np.pi * t / horizon)
        raise ValueError(f"unknown mean shape {self.shape!r}")


class IbcRange(BaseModel):
    """Uniform range of an initial/boundary value; low == high means deterministic."""
    low: float
    high: float

    @model_validator(mode="after")
    def _ordered(self) -> IbcRange:
        if self.low > self.high:
            raise ValueError(f"IBC range low {self.low} > high {self.high}")
        return self

    @classmethod
    def fixed(cls, value: float) -> IbcRange:
        return cls(low=value, high=value)

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.low + self.high)

    @property
    def deterministic(self) -> bool:
        return self.low == self.high


class ConditionSpec(BaseModel):
    """Control-variable distribution of one operating condition (source or target)."""
    label: str = "source"
    f_mean: Optional[MeanFunction] = Field(default=None, description="Distributed source mean (linear problem)")
    f_kernel: Optional[KernelSpec] = None
    q_mean: Optional[MeanFunction] = Field(default=None, description="Point-source rate mean (linear problem)")
    q_kernel: Optional[KernelSpec] = None
    y_kernel: Optional[KernelSpec] = Field(default=None, description="Log-conductivity covariance (nonlinear problem)")
    h0: IbcRange
    h_left: IbcRange
    h_right: IbcRange
    alpha: float = Field(default=1.0, gt=0, description="Correlation-length factor relative to source")
    beta: float = Field(default=1.0, gt=0, description="Variance factor relative to source")

    @property
    def ibc_midpoints(self) -> tuple[float, float, float]:
        return (self.h0.midpoint, self.h_left.midpoint, self.h_right.midpoint)


# ── Experiment configuration ──────────────────────────────────────────────────

class GridSpec(BaseModel):
    n_x: int = Field(default=30, gt=0, description="Interior space nodes")
    n_t: int = Field(default=250, gt=0, description="Time steps")
    length: float = Field(default=1.0, gt=0)
    horizon: float = Field(default=0.03, gt=0)


class BasisSizes(BaseModel):
    n_state: int = Field(default=40, gt=0, description="N_eta, state KLD terms")
    n_f: int = Field(default=200, gt=0)
    n_q: int = Field(default=40, gt=0)
    n_k: int = Field(default=20, gt=0, description="Empirical k KLD terms (nonlinear)")
    n_y: int = Field(default=20, gt=0, description="y KLE terms used to sample k (nonlinear)")


class SeedPlan(BaseModel):
    source: int = Field(default=1, ge=0)
    target: int = Field(default=2, ge=0)
    test: int = Field(default=3, ge=0)
    conductivity: int = Field(default=0, ge=0)
    residual: int = Field(default=4, ge=0)
    init: int = Field(default=5, ge=0)


class TrainingOptions(BaseModel):
    hidden_widths: list[int] = Field(default_factory=lambda: list(config.HIDDEN_WIDTHS))
    learning_rate: float = Field(default=config.LEARNING_RATE, gt=0)
    max_epochs: int = Field(default=config.MAX_EPOCHS, ge=0)
    patience: int = Field(default=config.PATIENCE, gt=0)
    min_improvement: float = Field(default=config.MIN_IMPROVEMENT, ge=0)


class RlsWeights(BaseModel):
    residual: float = Field(default=config.RLS_WEIGHT_RESIDUAL, gt=0)
    initial: float = Field(default=config.RLS_WEIGHT_INITIAL, gt=0)
    boundary: float = Field(default=config.RLS_WEIGHT_BOUNDARY, gt=0)


class RunSpec(BaseModel):
    """One surrogate to build and evaluate under a condition."""
    method: Method
    gamma: float = Field(default=0.0, ge=0, description="Inverse-KLD regularization")
    n_train_target: int = Field(default=0, ge=0, description="Labeled target samples")
    expected: Optional[float] = Field(default=None, description="Published error for comparison")


class TargetSpec(BaseModel):
    """Target condition as overrides of the source condition plus the runs to evaluate."""
    label: str
    f_mean: Optional[MeanFunction] = None
    q_mean: Optional[MeanFunction] = None
    h0: Optional[IbcRange] = None
    h_left: Optional[IbcRange] = None
    h_right: Optional[IbcRange] = None
    alpha: float = Field(default=1.0, gt=0)
    beta: float = Field(default=1.0, gt=0)
    runs: list[RunSpec] = Field(default_factory=list)

    def resolve(self, source: ConditionSpec) -> ConditionSpec:
        """Full target ConditionSpec: source values, overrides, then alpha/beta scaling of f and q."""
        update: dict = {"label": self.label, "alpha": self.alpha, "beta": self.beta}
        for name in ("f_mean", "q_mean", "h0", "h_left", "h_right"):
            value = getattr(self, name)
            if value is not None:
                update[name] = value
        for name in ("f_kernel", "q_kernel"):
            kernel = getattr(source, name)
            if kernel is not None:
                update[name] = kernel.scaled(self.alpha, self.beta)
        return source.model_copy(update=update)


class DiagnosticsSpec(BaseModel):
    """Mean-field and eigenfunction transfer fidelity checks (nonlinear problem)."""
    enabled: bool = False
    n_modes: int = Field(default=4, gt=0)
    mean_field_expected: Optional[float] = None
    eigenfunction_expected: Optional[float] = None


class ExperimentConfig(BaseModel):
    experiment_id: str
    problem: Problem
    grid: GridSpec = Field(default_factory=GridSpec)
    x_star: float = Field(default=0.25, description="Point-source location (space units)")
    conductivity_kernel: Optional[KernelSpec] = Field(
        default=None, description="Covariance of y = ln k for the fixed k realization (linear problem)"
    )
    source: ConditionSpec
    source_runs: list[RunSpec] = Field(default_factory=list)
    targets: list[TargetSpec] = Field(default_factory=list)
    basis: BasisSizes = Field(default_factory=BasisSizes)
    seeds: SeedPlan = Field(default_factory=SeedPlan)
    n_train: int = Field(default=1000, gt=1)
    n_test: int = Field(default=config.N_TEST, ge=0)
    n_residual: int = Field(default=config.N_RESIDUAL, gt=0)
    residual_weight: float = Field(default=config.RESIDUAL_WEIGHT, gt=0)
    ridge: Optional[float] = Field(default=None, ge=0, description="OLS ridge; None picks the default rule")
    rls_weights: RlsWeights = Field(default_factory=RlsWeights)
    training: TrainingOptions = Field(default_factory=TrainingOptions)
    diagnostics: DiagnosticsSpec = Field(default_factory=DiagnosticsSpec)
    profiles: bool = Field(default=False, description="Write reference/prediction profiles CSV")
    save_datasets: bool = False

    @model_validator(mode="after")
    def _consistent(self) -> ExperimentConfig:
        src = self.source
        if self.problem == "linear":
            missing = [
                name for name in ("f_mean", "f_kernel", "q_mean", "q_kernel")
                if getattr(src, name) is None
            ]
            if self.conductivity_kernel is None:
                missing.append("conductivity_kernel")
            if missing:
                raise ValueError(f"linear problem needs {', '.join(missing)}")
            if not 0 < self.x_star < self.grid.length:
                raise ValueError(f"x_star {self.x_star} outside (0, {self.grid.length})")
            if self.basis.n_state > self.n_train - 1:
                raise ValueError("n_state exceeds n_train - 1")
        else:
            if src.y_kernel is None:
                raise ValueError("nonlinear problem needs source.y_kernel")
            if max(self.basis.n_state, self.basis.n_k) > self.n_train - 1:
                raise ValueError("basis sizes exceed n_train - 1")
        for target in self.targets:
            for run in target.runs:
                if self.problem == "linear" and run.method != "one_shot":
                    raise ValueError(f"target {target.label}: linear targets use method 'one_shot'")
                if self.problem == "nonlinear" and run.method in ("one_shot", "mlp"):
                    raise ValueError(f"target {target.label}: method {run.method} is not a nonlinear transfer")
        for run in self.source_runs:
            if run.method not in ("ols", "rls", "mlp"):
                raise ValueError(f"source run method {run.method} must be ols, rls or mlp")
        return self

    def target(self, label: str) -> TargetSpec:
        for target in self.targets:
            if target.label == label:
                return target
        raise KeyError(label)

    def condition(self, label: str) -> ConditionSpec:
        """Source condition or a resolved target condition by label."""
        if label == self.source.label:
            return self.source
        return self.target(label).resolve(self.source)


class ExperimentSuite(BaseModel):
    """Contents of a .cfg file."""
    description: str = ""
    experiments: list[ExperimentConfig]

    def get(self, experiment_id: Optional[str] = None) -> ExperimentConfig:
        if experiment_id is None:
            return self.experiments[0]
        for experiment in self.experiments:
            if experiment.experiment_id == experiment_id:
                return experiment
        raise KeyError(experiment_id)


# ── Error report ──────────────────────────────────────────────────────────────

class ErrorRow(BaseModel):
    experiment: str
    condition: str
    method: str
    sigma2_y: Optional[float] = None
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.0
    n_train_target: int = 0
    mean_error: float = Field(ge=0)
    std_error: float = Field(default=0.0, ge=0)
    n_samples: int = Field(ge=0)
    seed: int = 0
    expected: Optional[float] = None

    @property
    def ratio(self) -> Optional[float]:
        """Measured over published error."""
        if self.expected is None or self.expected <= 0:
            return None
        return self.mean_error / self.expected


class ErrorReport(BaseModel):
    experiment: str
    created: str = Field(description="ISO timestamp (UTC)")
    rows: list[ErrorRow] = Field(default_factory=list)
