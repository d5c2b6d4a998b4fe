"""Small experiment configurations shared by the test modules (seconds, not minutes)."""

from kl_twin.models import ExperimentConfig, ExperimentSuite


def small_linear(**overrides) -> ExperimentConfig:
    data = {
        "experiment_id": "small-linear",
        "problem": "linear",
        "grid": {"n_x": 8, "n_t": 20, "length": 1.0, "horizon": 0.03},
        "x_star": 0.25,
        "conductivity_kernel": {"variance": 0.6, "length_scale": 0.5},
        "source": {
            "label": "source",
            "f_mean": {"shape": "chirp", "amplitude": 0.5},
            "f_kernel": {"variance": 10.0, "length_scale": 0.5, "time_scale": 0.015},
            "q_mean": {"shape": "sine_period", "amplitude": 1.0},
            "q_kernel": {"variance": 1.0, "time_scale": 0.003},
            "h0": {"low": 0.975, "high": 1.025},
            "h_left": {"low": 1.025, "high": 1.2},
            "h_right": {"low": 0.8, "high": 0.975},
        },
        "source_runs": [{"method": "ols"}],
        "targets": [
            {
                "label": "T1",
                "f_mean": {"shape": "exp_poly", "amplitude": 1.2},
                "q_mean": {"shape": "cosine_period", "amplitude": 1.0},
                "runs": [{"method": "one_shot"}],
            },
            {
                "label": "T2",
                "f_mean": {"shape": "exp_poly", "amplitude": 1.2},
                "q_mean": {"shape": "cosine_period", "amplitude": 1.0},
                "alpha": 0.8,
                "runs": [{"method": "one_shot", "gamma": 0.01}, {"method": "one_shot", "gamma": 0.0}],
            },
        ],
        "basis": {"n_state": 10, "n_f": 20, "n_q": 8},
        "n_train": 60,
        "n_test": 5,
    }
    data.update(overrides)
    return ExperimentConfig.model_validate(data)


def small_nonlinear(**overrides) -> ExperimentConfig:
    data = {
        "experiment_id": "small-nonlinear",
        "problem": "nonlinear",
        "grid": {"n_x": 8, "n_t": 20, "length": 1.0, "horizon": 0.03},
        "source": {
            "label": "source",
            "y_kernel": {"variance": 0.1, "length_scale": 0.5},
            "h0": {"low": 1.05, "high": 1.05},
            "h_left": {"low": 1.05, "high": 1.05},
            "h_right": {"low": 0.95, "high": 0.95},
        },
        "source_runs": [{"method": "rls"}, {"method": "mlp"}],
        "targets": [
            {
                "label": "target",
                "h0": {"low": 1.05, "high": 1.05},
                "h_left": {"low": 0.95, "high": 0.95},
                "h_right": {"low": 1.05, "high": 1.05},
                "runs": [
                    {"method": "rls"},
                    {"method": "kl_dnn", "n_train_target": 12},
                    {"method": "pi_kl_dnn", "n_train_target": 0},
                ],
            }
        ],
        "basis": {"n_state": 6, "n_k": 5, "n_y": 5},
        "n_train": 40,
        "n_test": 4,
        "n_residual": 12,
        "training": {"hidden_widths": [8, 8], "learning_rate": 0.01, "max_epochs": 300, "patience": 100},
    }
    data.update(overrides)
    return ExperimentConfig.model_validate(data)


def suite(*experiments: ExperimentConfig) -> ExperimentSuite:
    return ExperimentSuite(description="test suite", experiments=list(experiments))
