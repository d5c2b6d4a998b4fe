"""
KL-NN digital twin: entry point.

Usage:
    python -m kl_twin reproduce table1                       # bundled configs/table1.cfg
    python -m kl_twin reproduce table2 --format xlsx --threads 8
    python -m kl_twin generate  --config configs/table1.cfg --condition source --n 1000 --out runs/
    python -m kl_twin train     --config configs/table1.cfg --dataset runs/table1_source_dataset.kltw --method ols --out runs/
    python -m kl_twin transfer  --config configs/table1.cfg --model runs/table1_model_ols.kltw --target T1 --out runs/
    python -m kl_twin evaluate  --config configs/table1.cfg --model runs/table1_model_T1_one_shot.kltw --condition T1
"""

from __future__ import annotations
import argparse
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from pydantic import ValidationError

from . import __version__, config
from .artifacts import load_artifact, save_artifact
from .errors import ConfigError, InvalidArgumentError, KlTwinError
from .harness import Dataset, evaluate_model, generate_dataset, load_suite, run_experiment
from .models import ConditionSpec, ErrorReport, ErrorRow, ExperimentConfig
from .pde_solvers import solver_invocations
from .report_exporter import export, export_profiles
from .transfer import SurrogateModel, train_source, transfer_linear, transfer_nonlinear

log = logging.getLogger("kl_twin")


# ── Argument parsing ──────────────────────────────────────────────────────────

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Experiment file (JSON .cfg)")
    common.add_argument("--experiment", help="Experiment id inside the config (default: first)")
    common.add_argument("--seed", type=int, help="Override the seed of this step")
    common.add_argument("--out", type=Path, default=None, help=f"Output directory (default {config.OUTPUT_DIR})")
    common.add_argument("--format", choices=("csv", "json", "xlsx"), default="csv", help="Report format")
    common.add_argument("--threads", type=int, help="Worker threads (default KLTWIN_THREADS or 1)")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(prog="kl_twin", description="KL-NN surrogate digital twin for diffusion PDEs")
    parser.add_argument("--version", action="version", version=f"kl_twin {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="Monte Carlo dataset for one condition")
    gen.add_argument("--condition", default=None, help="Source or target label (default: source)")
    gen.add_argument("--n", type=int, default=None, help="Sample count (default: n_train)")

    train = sub.add_parser("train", parents=[common], help="Train a source surrogate")
    train.add_argument("--dataset", type=Path, help="Source dataset artifact (generated when omitted)")
    train.add_argument("--method", choices=("ols", "rls", "mlp"), default="ols")
    train.add_argument("--gamma", type=float, default=0.0)

    tr = sub.add_parser("transfer", parents=[common], help="Transfer a source surrogate to a target")
    tr.add_argument("--model", type=Path, required=True, help="Source model artifact")
    tr.add_argument("--target", required=True, help="Target label in the config")
    tr.add_argument("--method", default=None, help="one_shot (linear) or rls|ols|kl_dnn|pi_kl_dnn|combined")
    tr.add_argument("--gamma", type=float, default=0.0)
    tr.add_argument("--n-train-target", type=int, default=0)
    tr.add_argument("--target-dataset", type=Path, help="Labeled target dataset artifact")

    ev = sub.add_parser("evaluate", parents=[common], help="Evaluate a model on a test dataset")
    ev.add_argument("--model", type=Path, required=True)
    ev.add_argument("--dataset", type=Path, help="Test dataset artifact (generated when omitted)")
    ev.add_argument("--condition", default=None, help="Condition of the generated test set (default: model's)")

    rep = sub.add_parser("reproduce", parents=[common], help="Run a bundled table experiment end to end")
    rep.add_argument("table", choices=("table1", "table2"))
    return parser


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required for this command")
    suite = load_suite(args.config)
    try:
        return suite.get(args.experiment)
    except (KeyError, IndexError) as exc:
        raise ConfigError(f"no experiment {args.experiment!r} in {args.config}") from exc


def _condition(exp: ExperimentConfig, label: str) -> ConditionSpec:
    try:
        return exp.condition(label)
    except KeyError as exc:
        raise ConfigError(f"no condition {label!r} in experiment {exp.experiment_id}") from exc


def _out_dir(args: argparse.Namespace) -> Path:
    out = args.out or config.OUTPUT_DIR
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path: Path, kind: type) -> object:
    obj = load_artifact(path)
    if not isinstance(obj, kind):
        raise InvalidArgumentError(f"{path} holds a {type(obj).__name__}, expected {kind.__name__}")
    return obj


# ── Commands ──────────────────────────────────────────────────────────────────

def cmd_generate(args: argparse.Namespace) -> None:
    exp = _experiment(args)
    condition = _condition(exp, args.condition or exp.source.label)
    n = args.n or exp.n_train
    seed = args.seed if args.seed is not None else exp.seeds.source
    print(f"\n🎲  Sampling {n} realizations of {condition.label} (seed {seed})...")
    dataset = generate_dataset(exp, condition, n, seed)
    path = save_artifact(_out_dir(args) / f"{exp.experiment_id}_{condition.label}_dataset.kltw", dataset)
    print(f"💾  Dataset saved : {path}")


def cmd_train(args: argparse.Namespace) -> None:
    exp = _experiment(args)
    if args.dataset is not None:
        dataset = _load(args.dataset, Dataset)
    else:
        seed = args.seed if args.seed is not None else exp.seeds.source
        print(f"\n🎲  Sampling {exp.n_train} source realizations (seed {seed})...")
        dataset = generate_dataset(exp, exp.source, exp.n_train, seed)
    print(f"\n🧠  Training {args.method} source model on {dataset.n_samples} samples...")
    model = train_source(
        exp.problem,
        exp.source,
        dataset,
        args.method,
        basis=exp.basis,
        gamma=args.gamma,
        ridge=exp.ridge,
        rls_weights=exp.rls_weights,
        training=exp.training,
        init_seed=args.seed if args.seed is not None else exp.seeds.init,
    )
    path = save_artifact(_out_dir(args) / f"{exp.experiment_id}_model_{args.method}.kltw", model)
    print(f"💾  Model saved   : {path}")


def cmd_transfer(args: argparse.Namespace) -> None:
    exp = _experiment(args)
    source = _load(args.model, SurrogateModel)
    target = _condition(exp, args.target)
    method = args.method or ("one_shot" if source.problem == "linear" else "pi_kl_dnn")
    before = solver_invocations()
    print(f"\n🔁  Transferring {source.condition.label} -> {target.label} via {method}...")
    if source.problem == "linear":
        if method != "one_shot":
            raise InvalidArgumentError(f"linear models transfer one-shot only, got {method!r}")
        model = transfer_linear(source, target, args.gamma)
    else:
        target_data = _load(args.target_dataset, Dataset) if args.target_dataset else None
        if target_data is None and args.n_train_target > 0:
            seed = args.seed if args.seed is not None else exp.seeds.target
            target_data = generate_dataset(exp, target, args.n_train_target, seed)
        model = transfer_nonlinear(
            source,
            target,
            method,
            n_train_target=args.n_train_target,
            target_dataset=target_data,
            n_residual=exp.n_residual,
            residual_weight=exp.residual_weight,
            residual_seed=exp.seeds.residual,
            ridge=exp.ridge,
        )
    path = save_artifact(_out_dir(args) / f"{exp.experiment_id}_model_{target.label}_{method}.kltw", model)
    solves = solver_invocations() - before
    print(f"🧮  FD solves     : {solves}")
    if source.problem == "linear" and solves == 0:
        print("♻️  State mean    : reused from the source model (target means are unchanged)")
    print(f"💾  Model saved   : {path}")


def cmd_evaluate(args: argparse.Namespace) -> None:
    exp = _experiment(args)
    model = _load(args.model, SurrogateModel)
    if args.dataset is not None:
        test = _load(args.dataset, Dataset)
    else:
        condition = _condition(exp, args.condition) if args.condition else model.condition
        seed = args.seed if args.seed is not None else exp.seeds.test
        test = generate_dataset(exp, condition, exp.n_test, seed)
    if test.grid != model.grid:
        raise InvalidArgumentError("test dataset and model live on different grids")
    errors = evaluate_model(model, test)
    row = ErrorRow(
        experiment=exp.experiment_id,
        condition=test.condition.label,
        method=model.method,
        sigma2_y=None if test.condition.y_kernel is None else test.condition.y_kernel.variance,
        alpha=test.condition.alpha,
        beta=test.condition.beta,
        gamma=model.gamma,
        mean_error=float(errors.mean()),
        std_error=float(errors.std()),
        n_samples=errors.size,
        seed=test.seed,
    )
    report = ErrorReport(experiment=exp.experiment_id, created=datetime.now(timezone.utc).isoformat(), rows=[row])
    paths = export(report, _out_dir(args), args.format, stem=f"evaluate_{exp.experiment_id}_{row.condition}")
    print(f"\n📏  Mean error    : {row.mean_error:.3e} ± {row.std_error:.1e} over {row.n_samples} samples")
    for p in paths:
        print(f"📊  Report        : {p}")


def cmd_reproduce(args: argparse.Namespace) -> None:
    cfg = args.config or config.CONFIG_DIR / f"{args.table}.cfg"
    out = _out_dir(args) / args.table
    print(f"\n📄  Config        : {cfg}")
    print(f"🧵  Threads       : {config.THREADS}")
    result = run_experiment(cfg, out, args.experiment)
    paths = export(result.report, out, args.format, stem=args.table)
    if result.profiles:
        paths.append(export_profiles(result.profiles, out / f"{args.table}_profiles.csv"))

    print(f"\n{'Condition':<16}{'Method':<16}{'N_t':>5}{'Mean error':>14}{'Expected':>12}{'Ratio':>8}")
    for row in result.report.rows:
        expected = f"{row.expected:.2e}" if row.expected is not None else "-"
        ratio = f"{row.ratio:.2f}" if row.ratio is not None else "-"
        print(f"{row.condition:<16}{row.method:<16}{row.n_train_target:>5}{row.mean_error:>14.3e}{expected:>12}{ratio:>8}")
    print(f"\n📦  Artifacts     : {len(result.artifacts)}")
    for p in paths:
        print(f"📊  Report        : {p}")


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "transfer": cmd_transfer,
    "evaluate": cmd_evaluate,
    "reproduce": cmd_reproduce,
}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )
    if args.threads is not None:
        if args.threads < 1:
            print(f"\n❌  --threads must be >= 1, got {args.threads}\n")
            return InvalidArgumentError.exit_code
        config.THREADS = args.threads

    print("\n" + "═" * 60)
    print(f"🌡️   KL-NN Digital Twin  ·  {args.command}")
    print("═" * 60)

    try:
        _COMMANDS[args.command](args)
    except KlTwinError as exc:
        print(f"\n❌  {type(exc).__name__}: {exc}\n")
        return exc.exit_code
    except ValidationError as exc:
        print(f"\n❌  Invalid configuration:\n{exc}\n")
        return ConfigError.exit_code

    print(f"\n{'═' * 60}")
    print("✅  Done!")
    print(f"{'═' * 60}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
