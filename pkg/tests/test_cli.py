import io
import unittest
from pathlib import Path
from tempfile import TemporaryDirectory
from unittest import mock

import numpy as np

from kl_twin.__main__ import main
from kl_twin.artifacts import load_artifact
from kl_twin.harness import generate_dataset
from kl_twin.transfer import predict, train_source, transfer_linear
from tests.fixtures import small_linear, suite


class TestCli(unittest.TestCase):
    def setUp(self):
        self.tmp = TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.exp = small_linear(n_train=30, n_test=3, profiles=True, basis={"n_state": 8, "n_f": 12, "n_q": 6})
        self.cfg = self.dir / "small.cfg"
        self.cfg.write_text(suite(self.exp).model_dump_json(indent=2), encoding="utf-8")

    def tearDown(self):
        self.tmp.cleanup()

    def _run(self, *argv: str) -> tuple[int, str]:
        with mock.patch("sys.stdout", new_callable=io.StringIO) as out:
            code = main(list(argv))
        return code, out.getvalue()

    def test_reproduce(self):
        code, output = self._run("reproduce", "table1", "--config", str(self.cfg), "--out", str(self.dir))
        self.assertEqual(code, 0)
        self.assertIn("✅", output)
        table = self.dir / "table1"
        self.assertTrue((table / "table1.csv").exists())
        self.assertTrue((table / "table1.json").exists())
        self.assertTrue((table / "table1_profiles.csv").exists())
        self.assertTrue((table / "small-linear" / "source_ols.kltw").exists())

    def test_missing_config(self):
        code, output = self._run("train", "--config", str(self.dir / "absent.cfg"), "--out", str(self.dir))
        self.assertEqual(code, 2)
        self.assertIn("ConfigError", output)

    def test_config_required(self):
        code, _ = self._run("generate", "--out", str(self.dir))
        self.assertEqual(code, 2)

    def test_corrupt_model(self):
        bad = self.dir / "bad.kltw"
        bad.write_bytes(b"garbage that is not an artifact")
        code, output = self._run("evaluate", "--config", str(self.cfg), "--model", str(bad), "--out", str(self.dir))
        self.assertEqual(code, 4)
        self.assertIn("FormatError", output)

    def test_invalid_thread_count(self):
        code, _ = self._run("reproduce", "table1", "--threads", "0")
        self.assertEqual(code, 2)

    def test_unknown_target(self):
        self._run("train", "--config", str(self.cfg), "--out", str(self.dir))
        model = self.dir / "small-linear_model_ols.kltw"
        code, _ = self._run("transfer", "--config", str(self.cfg), "--model", str(model),
                            "--target", "T7", "--out", str(self.dir))
        self.assertEqual(code, 2)

    def test_train_then_transfer_matches_in_process(self):
        code, _ = self._run("train", "--config", str(self.cfg), "--out", str(self.dir))
        self.assertEqual(code, 0)
        model_path = self.dir / "small-linear_model_ols.kltw"
        code, output = self._run("transfer", "--config", str(self.cfg), "--model", str(model_path),
                                 "--target", "T1", "--out", str(self.dir))
        self.assertEqual(code, 0)
        self.assertIn("FD solves     : 1", output)
        from_disk = load_artifact(self.dir / "small-linear_model_T1_one_shot.kltw")

        exp = self.exp
        data = generate_dataset(exp, exp.source, exp.n_train, exp.seeds.source)
        source = train_source(
            exp.problem, exp.source, data, "ols", basis=exp.basis, ridge=exp.ridge,
            rls_weights=exp.rls_weights, training=exp.training, init_seed=exp.seeds.init,
        )
        in_process = transfer_linear(source, exp.condition("T1"))
        controls = generate_dataset(exp, exp.condition("T1"), 1, 99).controls_for(0)
        np.testing.assert_array_equal(predict(from_disk, controls).values, predict(in_process, controls).values)

    def test_transfer_to_unchanged_means_reports_reuse(self):
        self._run("train", "--config", str(self.cfg), "--out", str(self.dir))
        code, output = self._run("transfer", "--config", str(self.cfg), "--model",
                                 str(self.dir / "small-linear_model_ols.kltw"),
                                 "--target", "source", "--out", str(self.dir))
        self.assertEqual(code, 0)
        self.assertIn("FD solves     : 0", output)
        self.assertIn("reused from the source model", output)

    def test_generate_then_evaluate(self):
        code, _ = self._run("train", "--config", str(self.cfg), "--out", str(self.dir))
        self.assertEqual(code, 0)
        code, _ = self._run("generate", "--config", str(self.cfg), "--n", "3", "--seed", "8", "--out", str(self.dir))
        self.assertEqual(code, 0)
        dataset = self.dir / "small-linear_source_dataset.kltw"
        self.assertTrue(dataset.exists())
        code, output = self._run("evaluate", "--config", str(self.cfg), "--model",
                                 str(self.dir / "small-linear_model_ols.kltw"),
                                 "--dataset", str(dataset), "--out", str(self.dir))
        self.assertEqual(code, 0)
        self.assertIn("over 3 samples", output)
        self.assertTrue((self.dir / "evaluate_small-linear_source.csv").exists())


if __name__ == '__main__':
    unittest.main()
