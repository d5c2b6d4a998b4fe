"""Monte Carlo datasets, error metrics, and end-to-end experiment runs."""

from __future__ import annotations
import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterator, Literal, TypeVar

import numpy as np
from pydantic import ValidationError

from . import config
from .errors import ConfigError, DecompositionError, InvalidArgumentError, KlTwinError, StageError
from .field_core import Field, Grid, RngStream, build_grid, sample_gaussian_field
from .kl_transform import empirical_basis, ensemble_mean
from .models import ConditionSpec, ErrorReport, ErrorRow, ExperimentConfig, ExperimentSuite, Problem, RunSpec
from .pde_solvers import Ibc, SourceSpec, solve_diffusion
from .transfer import (
    Controls,
    SurrogateModel,
    conductivity_field,
    linear_control_bases,
    log_conductivity_basis,
    nonlinear_mean_field,
    predict,
    target_residuals,
    train_source,
    transfer_linear,
    transfer_nonlinear,
)

log = logging.getLogger(__name__)

T = TypeVar("T")
ErrorMode = Literal["total", "mapping", "representation"]


# ── Dataset ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Controls and FD solutions of n samples, one row per sample.
    controls: "f" (N, n_nodes) and "q" (N, n_t + 1) for the linear problem, "k" (N, n_x + 2) otherwise.
    latents: the standard-normal draws behind each control ("f", "q" or "y").
    ibc: (N, 3) drawn h0, h_left, h_right.
    """
    problem: Problem
    condition: ConditionSpec
    grid: Grid
    seed: int
    controls: dict[str, np.ndarray]
    latents: dict[str, np.ndarray]
    ibc: np.ndarray
    solutions: np.ndarray
    conductivity: Field | None = None
    x_star: float | None = None

    def __post_init__(self) -> None:
        n = self.solutions.shape[0]
        if self.solutions.shape != (n, self.grid.n_nodes):
            raise InvalidArgumentError(f"solutions need shape (N, {self.grid.n_nodes})")
        if self.ibc.shape != (n, 3):
            raise InvalidArgumentError("ibc needs shape (N, 3)")
        for name, values in {**self.controls, **self.latents}.items():
            if values.shape[0] != n:
                raise InvalidArgumentError(f"{name} has {values.shape[0]} rows for {n} samples")

    @property
    def n_samples(self) -> int:
        return self.solutions.shape[0]

    def solution(self, i: int) -> Field:
        return Field(self.grid, "space_time", self.solutions[i])

    def solution_fields(self) -> list[Field]:
        return [self.solution(i) for i in range(self.n_samples)]

    def control_fields(self, name: str) -> list[Field]:
        kind = {"f": "space_time", "q": "time_only", "k": "space_only"}[name]
        return [Field(self.grid, kind, row) for row in self.controls[name]]

    def controls_for(self, i: int) -> Controls:
        if self.problem == "linear":
            h0, h_left, h_right = (float(v) for v in self.ibc[i])
            return Controls(
                f=Field(self.grid, "space_time", self.controls["f"][i]),
                q=Field(self.grid, "time_only", self.controls["q"][i]),
                h0=h0,
                h_left=h_left,
                h_right=h_right,
            )
        return Controls(k=Field(self.grid, "space_only", self.controls["k"][i]))

    def head(self, n: int) -> Dataset:
        """First n samples; equals a dataset generated with n samples and the same seed."""
        if not 0 < n <= self.n_samples:
            raise InvalidArgumentError(f"cannot take {n} of {self.n_samples} samples")
        return Dataset(
            self.problem,
            self.condition,
            self.grid,
            self.seed,
            {k: v[:n] for k, v in self.controls.items()},
            {k: v[:n] for k, v in self.latents.items()},
            self.ibc[:n],
            self.solutions[:n],
            self.conductivity,
            self.x_star,
        )


def grid_of(experiment: ExperimentConfig) -> Grid:
    g = experiment.grid
    return build_grid(g.n_x, g.n_t, g.length, g.horizon)


def experiment_conductivity(experiment: ExperimentConfig, grid: Grid) -> Field | None:
    """The fixed k of the linear problem; None for the nonlinear one."""
    if experiment.problem != "linear":
        return None
    return conductivity_field(experiment.conductivity_kernel, grid, experiment.seeds.conductivity)


def _parallel_map(fn: Callable[[int], T], n: int) -> list[T]:
    """fn over range(n) on config.THREADS workers; results in index order."""
    if config.THREADS <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=config.THREADS) as pool:
        return list(pool.map(fn, range(n)))


def generate_dataset(
    experiment: ExperimentConfig,
    condition: ConditionSpec,
    n_samples: int,
    seed: int,
    conductivity: Field | None = None,
) -> Dataset:
    """
    Sample i draws from RngStream(seed, i): xi_f, xi_q (or xi_y), then h0, h_left,
    h_right uniform on their ranges, and is solved with the FD solver.
    """
    if n_samples < 1:
        raise InvalidArgumentError(f"n_samples must be >= 1, got {n_samples}")
    grid = grid_of(experiment)
    ranges = (condition.h0, condition.h_left, condition.h_right)

    if experiment.problem == "linear":
        conductivity = conductivity or experiment_conductivity(experiment, grid)
        bases = linear_control_bases(condition, grid, experiment.basis.n_f, experiment.basis.n_q)
    else:
        if condition.y_kernel is None:
            raise InvalidArgumentError(f"condition {condition.label!r} lacks a y kernel")
        y_basis = log_conductivity_basis(condition.y_kernel, grid, experiment.basis.n_y)

    def one(i: int) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], np.ndarray, np.ndarray]:
        rng = RngStream(seed, i)
        try:
            if experiment.problem == "linear":
                f, xi_f = sample_gaussian_field(bases["f"], rng)
                q, xi_q = sample_gaussian_field(bases["q"], rng)
                ibc = np.array([rng.uniform(r.low, r.high) for r in ranges])
                h = solve_diffusion(grid, conductivity, SourceSpec(f, q, experiment.x_star), Ibc(*ibc))
                return {"f": f.values, "q": q.values}, {"f": xi_f, "q": xi_q}, ibc, h.values
            y, xi_y = sample_gaussian_field(y_basis, rng)
            k = Field(grid, "space_only", np.exp(y.values))
            ibc = np.array([rng.uniform(r.low, r.high) for r in ranges])
            h = solve_diffusion(grid, k, None, Ibc(*ibc))
            return {"k": k.values}, {"y": xi_y}, ibc, h.values
        except KlTwinError as exc:
            raise StageError("generate", f"{condition.label} sample {i}", exc) from exc

    log.info("generating %d %s samples for %s (seed %d)", n_samples, experiment.problem, condition.label, seed)
    samples = _parallel_map(one, n_samples)
    controls = {name: np.stack([s[0][name] for s in samples]) for name in samples[0][0]}
    latents = {name: np.stack([s[1][name] for s in samples]) for name in samples[0][1]}
    return Dataset(
        problem=experiment.problem,
        condition=condition,
        grid=grid,
        seed=seed,
        controls=controls,
        latents=latents,
        ibc=np.stack([s[2] for s in samples]),
        solutions=np.stack([s[3] for s in samples]),
        conductivity=conductivity,
        x_star=experiment.x_star if experiment.problem == "linear" else None,
    )


# ── Errors ────────────────────────────────────────────────────────────────────

def compute_error(reference: Field | np.ndarray, prediction: Field | np.ndarray, mode: ErrorMode = "total") -> float:
    """
    Relative l2 error ||reference - prediction|| / ||reference||.
    total: fields h vs h_hat; mapping: latent eta vs NN(xi); representation: field vs its KLD rebuild.
    """
    if mode not in ("total", "mapping", "representation"):
        raise InvalidArgumentError(f"unknown error mode {mode!r}")
    if isinstance(reference, Field) and isinstance(prediction, Field):
        if reference.grid != prediction.grid or reference.kind != prediction.kind:
            raise InvalidArgumentError("reference and prediction live on different grids")
    ref = reference.values if isinstance(reference, Field) else np.asarray(reference, dtype=np.float64)
    pred = prediction.values if isinstance(prediction, Field) else np.asarray(prediction, dtype=np.float64)
    if ref.shape != pred.shape:
        raise InvalidArgumentError(f"shape mismatch {ref.shape} vs {pred.shape}")
    norm = float(np.linalg.norm(ref))
    if norm == 0.0:
        raise InvalidArgumentError(f"{mode} error needs a nonzero reference")
    return float(np.linalg.norm(ref - pred)) / norm


def evaluate_model(model: SurrogateModel, test: Dataset) -> np.ndarray:
    """Total error of each test sample."""
    def one(i: int) -> float:
        return compute_error(test.solution(i), predict(model, test.controls_for(i)))
    return np.array(_parallel_map(one, test.n_samples))


def eigenfunction_distance(source: SurrogateModel, target_basis_vectors: np.ndarray, n_modes: int) -> float:
    """Mean |phi_s - phi_t| over nodes and the first n_modes, each pair sign-aligned."""
    phi_s = source.state.eigenvectors[:, :n_modes]
    phi_t = target_basis_vectors[:, :n_modes].copy()
    flip = np.sum(phi_s * phi_t, axis=0) < 0
    phi_t[:, flip] *= -1.0
    return float(np.mean(np.abs(phi_s - phi_t)))


# ── Experiment runs ───────────────────────────────────────────────────────────

@dataclass
class ProfileRecord:
    """Reference and prediction on the space nodes at one time (first test sample)."""
    experiment: str
    condition: str
    method: str
    n_train_target: int
    time: float
    x: list[float]
    reference: list[float]
    prediction: list[float]


@dataclass
class ExperimentResult:
    report: ErrorReport
    profiles: list[ProfileRecord] = field(default_factory=list)
    artifacts: list[Path] = field(default_factory=list)


@contextmanager
def _stage(stage: str, condition: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except KlTwinError as exc:
        raise StageError(stage, condition, exc) from exc
    except np.linalg.LinAlgError as exc:
        raise StageError(stage, condition, DecompositionError(str(exc))) from exc


def load_suite(path: Path) -> ExperimentSuite:
    try:
        return ExperimentSuite.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}:\n{exc}") from exc


class _Runner:
    """One experiment: datasets, models and rows, shared across stages."""

    def __init__(self, experiment: ExperimentConfig, out_dir: Path | None) -> None:
        self.exp = experiment
        self.out_dir = out_dir
        self.grid = grid_of(experiment)
        self.conductivity = experiment_conductivity(experiment, self.grid)
        self.rows: list[ErrorRow] = []
        self.profiles: list[ProfileRecord] = []
        self.artifacts: list[Path] = []
        self._test_sets: dict[str, Dataset] = {}

    # -- helpers --

    def dataset(self, condition: ConditionSpec, n: int, seed: int) -> Dataset:
        with _stage("generate", condition.label):
            return generate_dataset(self.exp, condition, n, seed, self.conductivity)

    def test_set(self, condition: ConditionSpec, index: int) -> Dataset:
        if condition.label not in self._test_sets:
            # Each condition gets its own stream family so test sets never overlap
            seed = self.exp.seeds.test + 1_000_003 * index
            self._test_sets[condition.label] = self.dataset(condition, self.exp.n_test, seed)
        return self._test_sets[condition.label]

    def save(self, name: str, obj: object) -> None:
        if self.out_dir is None:
            return
        from .artifacts import save_artifact

        path = self.out_dir / self.exp.experiment_id / f"{name}.kltw"
        self.artifacts.append(save_artifact(path, obj))

    def record(self, model: SurrogateModel, condition: ConditionSpec, index: int, run: RunSpec, method: str) -> None:
        test = self.test_set(condition, index)
        with _stage("evaluate", condition.label):
            errors = evaluate_model(model, test)
        row = ErrorRow(
            experiment=self.exp.experiment_id,
            condition=condition.label,
            method=method,
            sigma2_y=None if condition.y_kernel is None else condition.y_kernel.variance,
            alpha=condition.alpha,
            beta=condition.beta,
            gamma=model.gamma,
            n_train_target=run.n_train_target,
            mean_error=float(errors.mean()),
            std_error=float(errors.std()),
            n_samples=errors.size,
            seed=test.seed,
            expected=run.expected,
        )
        log.info("%s %s %s: eps = %.3e", row.experiment, row.condition, row.method, row.mean_error)
        self.rows.append(row)
        if self.exp.profiles:
            self._profile(model, test, condition, method, run.n_train_target)

    def _profile(self, model: SurrogateModel, test: Dataset, condition: ConditionSpec, method: str, n: int) -> None:
        reference = test.solution(0).as_matrix()
        prediction = predict(model, test.controls_for(0)).as_matrix()
        for fraction in config.PROFILE_FRACTIONS:
            t_idx = int(round(fraction * self.grid.n_t))
            self.profiles.append(ProfileRecord(
                experiment=self.exp.experiment_id,
                condition=condition.label,
                method=method,
                n_train_target=n,
                time=float(self.grid.t[t_idx]),
                x=self.grid.x.tolist(),
                reference=reference[t_idx].tolist(),
                prediction=prediction[t_idx].tolist(),
            ))

    # -- stages --

    def train_sources(self, source_data: Dataset) -> dict[str, SurrogateModel]:
        exp = self.exp
        models: dict[str, SurrogateModel] = {}
        for run in exp.source_runs:
            with _stage(f"train-{run.method}", exp.source.label):
                model = train_source(
                    exp.problem,
                    exp.source,
                    source_data,
                    run.method,
                    basis=exp.basis,
                    gamma=run.gamma,
                    ridge=exp.ridge,
                    rls_weights=exp.rls_weights,
                    training=exp.training,
                    init_seed=exp.seeds.init,
                )
            models[run.method] = model
            self.save(f"source_{run.method}", model)
            self.record(model, exp.source, 0, run, run.method)
        return models

    def run_linear_targets(self, sources: dict[str, SurrogateModel]) -> None:
        if not self.exp.targets:
            return
        source = next(iter(sources.values()), None)
        if source is None:
            raise ConfigError(f"{self.exp.experiment_id}: linear targets need a source run")
        for index, target in enumerate(self.exp.targets, start=1):
            condition = target.resolve(self.exp.source)
            for run in target.runs:
                with _stage("transfer", condition.label):
                    model = transfer_linear(source, condition, run.gamma)
                self.record(model, condition, index, run, run.method)

    def run_nonlinear_targets(self, sources: dict[str, SurrogateModel]) -> None:
        exp = self.exp
        for index, target in enumerate(exp.targets, start=1):
            condition = target.resolve(exp.source)
            n_labeled = max((run.n_train_target for run in target.runs), default=0)
            if exp.diagnostics.enabled:
                n_labeled = max(n_labeled, exp.n_train)
            target_data = (
                self.dataset(condition, n_labeled, exp.seeds.target + 1_000_003 * index) if n_labeled else None
            )
            residuals = None
            for run in target.runs:
                base = sources.get("mlp") if run.method in ("kl_dnn", "pi_kl_dnn", "combined") else (
                    sources.get(run.method) or next(iter(sources.values()), None)
                )
                if base is None:
                    raise ConfigError(f"{exp.experiment_id}: {run.method} transfer has no suitable source model")
                with _stage(f"transfer-{run.method}", condition.label):
                    if run.method in ("pi_kl_dnn", "combined") and residuals is None:
                        residuals = target_residuals(base, condition, exp.n_residual, exp.seeds.residual)
                    model = transfer_nonlinear(
                        base,
                        condition,
                        run.method,
                        n_train_target=run.n_train_target,
                        target_dataset=target_data,
                        n_residual=exp.n_residual,
                        residual_weight=exp.residual_weight,
                        residual_seed=exp.seeds.residual,
                        residuals=residuals if run.method in ("pi_kl_dnn", "combined") else None,
                        ridge=exp.ridge,
                    )
                self.record(model, condition, index, run, run.method)
            if exp.diagnostics.enabled and target_data is not None and sources:
                self.diagnose(next(iter(sources.values())), condition, target_data)

    def diagnose(self, source: SurrogateModel, condition: ConditionSpec, target_data: Dataset) -> None:
        """Mean-field vs MC mean, and source vs target eigenfunctions."""
        spec = self.exp.diagnostics
        with _stage("diagnostics", condition.label):
            mean_field = nonlinear_mean_field(source, condition)
            mc_mean = ensemble_mean(target_data.solution_fields())
            distance = compute_error(mc_mean, mean_field)
            target_basis = empirical_basis(target_data.solution_fields(), spec.n_modes)
            eig = eigenfunction_distance(source, target_basis.eigenvectors, spec.n_modes)
        sigma2 = None if condition.y_kernel is None else condition.y_kernel.variance
        for method, value, expected in (
            ("mean-field", distance, spec.mean_field_expected),
            ("eigenfunctions", eig, spec.eigenfunction_expected),
        ):
            self.rows.append(ErrorRow(
                experiment=self.exp.experiment_id,
                condition=condition.label,
                method=method,
                sigma2_y=sigma2,
                mean_error=value,
                n_samples=target_data.n_samples,
                seed=target_data.seed,
                expected=expected,
            ))
        log.info("%s: mean-field distance %.3e, eigenfunction distance %.3e", condition.label, distance, eig)

    def run(self) -> None:
        exp = self.exp
        if exp.n_test == 0:
            log.warning("%s: test-sample count is 0, nothing to evaluate", exp.experiment_id)
            return
        source_data = self.dataset(exp.source, exp.n_train, exp.seeds.source)
        if exp.save_datasets:
            self.save("source_dataset", source_data)
        sources = self.train_sources(source_data)
        if exp.problem == "linear":
            self.run_linear_targets(sources)
        else:
            self.run_nonlinear_targets(sources)


def run_experiment(
    source: Path | ExperimentSuite | ExperimentConfig,
    out_dir: Path | None = None,
    experiment_id: str | None = None,
) -> ExperimentResult:
    """
    Run every experiment of a config (or only experiment_id): train source models,
    transfer to each target, evaluate on the test protocol. Models (and datasets when
    requested) are saved under out_dir/<experiment_id>/.
    """
    if isinstance(source, ExperimentConfig):
        suite, name = ExperimentSuite(experiments=[source]), source.experiment_id
    elif isinstance(source, ExperimentSuite):
        suite, name = source, source.experiments[0].experiment_id if source.experiments else "suite"
    else:
        suite, name = load_suite(Path(source)), Path(source).stem
    experiments = suite.experiments
    if experiment_id is not None:
        try:
            experiments = [suite.get(experiment_id)]
        except KeyError as exc:
            raise ConfigError(f"no experiment {experiment_id!r} in config") from exc

    result = ExperimentResult(ErrorReport(experiment=name, created=datetime.now(timezone.utc).isoformat()))
    for experiment in experiments:
        runner = _Runner(experiment, out_dir)
        runner.run()
        result.report.rows.extend(runner.rows)
        result.profiles.extend(runner.profiles)
        result.artifacts.extend(runner.artifacts)
    if not result.report.rows:
        log.warning("%s: report has no rows", name)
    return result
