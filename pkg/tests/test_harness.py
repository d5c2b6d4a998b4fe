import unittest
from pathlib import Path
from tempfile import TemporaryDirectory
from unittest import mock

import numpy as np

from kl_twin import config, harness
from kl_twin.errors import ConfigError, DecompositionError, InvalidArgumentError, StageError
from kl_twin.field_core import Field, build_grid, constant_field
from kl_twin.harness import compute_error, generate_dataset, load_suite, run_experiment
from tests.fixtures import small_linear, small_nonlinear, suite


class TestGenerateDataset(unittest.TestCase):
    def setUp(self):
        self.exp = small_linear()

    def test_deterministic_for_seed(self):
        a = generate_dataset(self.exp, self.exp.source, 4, seed=11)
        b = generate_dataset(self.exp, self.exp.source, 4, seed=11)
        np.testing.assert_array_equal(a.solutions, b.solutions)
        np.testing.assert_array_equal(a.controls["f"], b.controls["f"])
        c = generate_dataset(self.exp, self.exp.source, 4, seed=12)
        self.assertFalse(np.array_equal(a.solutions, c.solutions))

    def test_thread_count_does_not_change_samples(self):
        serial = generate_dataset(self.exp, self.exp.source, 6, seed=3)
        with mock.patch.object(config, "THREADS", 4):
            threaded = generate_dataset(self.exp, self.exp.source, 6, seed=3)
        np.testing.assert_array_equal(serial.solutions, threaded.solutions)
        np.testing.assert_array_equal(serial.ibc, threaded.ibc)

    def test_head_equals_smaller_run(self):
        big = generate_dataset(self.exp, self.exp.source, 6, seed=5)
        small = generate_dataset(self.exp, self.exp.source, 3, seed=5)
        head = big.head(3)
        np.testing.assert_array_equal(head.solutions, small.solutions)
        np.testing.assert_array_equal(head.latents["q"], small.latents["q"])
        with self.assertRaises(InvalidArgumentError):
            big.head(7)

    def test_ibc_draws_in_range(self):
        data = generate_dataset(self.exp, self.exp.source, 10, seed=1)
        src = self.exp.source
        for col, r in enumerate((src.h0, src.h_left, src.h_right)):
            self.assertTrue(np.all((data.ibc[:, col] >= r.low) & (data.ibc[:, col] <= r.high)))
        # the drawn values land on the IBC nodes of each solution
        h = data.solution(0).as_matrix()
        self.assertEqual(h[5, 0], data.ibc[0, 1])
        self.assertEqual(h[0, 3], data.ibc[0, 0])

    def test_nonlinear_conductivity_positive(self):
        exp = small_nonlinear()
        data = generate_dataset(exp, exp.source, 3, seed=2)
        self.assertEqual(set(data.controls), {"k"})
        self.assertEqual(data.latents["y"].shape, (3, exp.basis.n_y))
        self.assertTrue(np.all(data.controls["k"] > 0))
        self.assertIsNone(data.conductivity)

    def test_invalid_sample_count(self):
        with self.assertRaises(InvalidArgumentError):
            generate_dataset(self.exp, self.exp.source, 0, seed=1)


class TestComputeError(unittest.TestCase):
    def test_values(self):
        self.assertAlmostEqual(compute_error(np.array([3.0, 4.0]), np.array([3.0, 4.0])), 0.0)
        self.assertAlmostEqual(compute_error(np.array([3.0, 4.0]), np.array([0.0, 4.0])), 0.6)
        self.assertAlmostEqual(compute_error(np.array([1.0, 0.0]), np.array([0.0, 1.0]), "mapping"), np.sqrt(2))

    def test_fields(self):
        grid = build_grid(3, 2, 1.0, 1.0)
        ref = constant_field(grid, "space_time", 2.0)
        self.assertAlmostEqual(compute_error(ref, Field(ref.grid, ref.kind, 0.9 * ref.values)), 0.1)
        with self.assertRaises(InvalidArgumentError):
            compute_error(ref, constant_field(grid, "space_only", 2.0))

    def test_invalid(self):
        with self.assertRaises(InvalidArgumentError):
            compute_error(np.zeros(2), np.ones(2))
        with self.assertRaises(InvalidArgumentError):
            compute_error(np.ones(2), np.ones(3))
        with self.assertRaises(InvalidArgumentError):
            compute_error(np.ones(2), np.ones(2), "bogus")


class TestRunExperiment(unittest.TestCase):
    def setUp(self):
        self.tmp = TemporaryDirectory()
        self.out = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_linear_rows_and_artifacts(self):
        result = run_experiment(small_linear(profiles=True), self.out)
        rows = [(r.condition, r.method, r.gamma) for r in result.report.rows]
        self.assertEqual(rows, [("source", "ols", 0.0), ("T1", "one_shot", 0.0),
                                ("T2", "one_shot", 0.01), ("T2", "one_shot", 0.0)])
        for row in result.report.rows:
            self.assertEqual(row.n_samples, 5)
            self.assertGreater(row.mean_error, 0.0)
        self.assertEqual(result.report.rows[2].alpha, 0.8)
        self.assertEqual(len(result.profiles), 4 * len(config.PROFILE_FRACTIONS))
        self.assertTrue((self.out / "small-linear" / "source_ols.kltw").exists())
        self.assertIn(self.out / "small-linear" / "source_ols.kltw", result.artifacts)

    def test_deterministic(self):
        first = run_experiment(small_linear())
        second = run_experiment(small_linear())
        self.assertEqual(
            [r.mean_error for r in first.report.rows],
            [r.mean_error for r in second.report.rows],
        )

    def test_thread_count_does_not_change_report(self):
        for exp in (small_linear(), small_nonlinear(diagnostics={"enabled": True, "n_modes": 3})):
            with self.subTest(experiment=exp.experiment_id):
                with mock.patch.object(config, "THREADS", 1):
                    single = run_experiment(exp).report.rows
                with mock.patch.object(config, "THREADS", 4):
                    pooled = run_experiment(exp).report.rows
                self.assertEqual(single, pooled)

    def test_nonlinear_rows_with_diagnostics(self):
        exp = small_nonlinear(diagnostics={"enabled": True, "n_modes": 3})
        result = run_experiment(exp)
        methods = [(r.condition, r.method) for r in result.report.rows]
        self.assertEqual(methods, [
            ("source", "rls"), ("source", "mlp"),
            ("target", "rls"), ("target", "kl_dnn"), ("target", "pi_kl_dnn"),
            ("target", "mean-field"), ("target", "eigenfunctions"),
        ])
        for row in result.report.rows:
            self.assertTrue(np.isfinite(row.mean_error))
        self.assertEqual(result.report.rows[0].sigma2_y, 0.1)

    def test_zero_test_samples(self):
        with self.assertLogs("kl_twin.harness", level="WARNING"):
            result = run_experiment(small_linear(n_test=0))
        self.assertEqual(result.report.rows, [])

    def test_stage_error_names_stage(self):
        boom = DecompositionError("singular")
        with mock.patch.object(harness, "train_source", side_effect=boom):
            with self.assertRaises(StageError) as ctx:
                run_experiment(small_linear())
        self.assertEqual(ctx.exception.stage, "train-ols")
        self.assertEqual(ctx.exception.condition, "source")
        self.assertEqual(ctx.exception.exit_code, 3)

    def test_linalg_failure_maps_to_decomposition(self):
        with mock.patch.object(harness, "train_source", side_effect=np.linalg.LinAlgError("svd")):
            with self.assertRaises(StageError) as ctx:
                run_experiment(small_linear())
        self.assertIsInstance(ctx.exception.cause, DecompositionError)

    def test_suite_selection(self):
        both = suite(small_linear(n_test=0), small_nonlinear(experiment_id="other", n_test=0))
        with self.assertRaises(ConfigError):
            run_experiment(both, experiment_id="missing")

    def test_load_suite_errors(self):
        with self.assertRaises(ConfigError):
            load_suite(self.out / "absent.cfg")
        bad = self.out / "bad.cfg"
        bad.write_text('{"experiments": [{"experiment_id": "x"}]}', encoding="utf-8")
        with self.assertRaises(ConfigError):
            load_suite(bad)

    def test_load_bundled_configs(self):
        for name, count in (("table1.cfg", 1), ("table2.cfg", 3)):
            loaded = load_suite(config.CONFIG_DIR / name)
            self.assertEqual(len(loaded.experiments), count)
        table1 = load_suite(config.CONFIG_DIR / "table1.cfg").get()
        self.assertEqual(len(table1.targets), 9)
        t2 = table1.condition("T2-alpha0.5")
        self.assertAlmostEqual(t2.f_kernel.length_scale, 0.25)


if __name__ == '__main__':
    unittest.main()
