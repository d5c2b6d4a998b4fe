import unittest

import numpy as np

from kl_twin.errors import InvalidArgumentError
from kl_twin.harness import compute_error, evaluate_model, generate_dataset
from kl_twin.latent_maps import LinearMap
from kl_twin.mlp import Mlp
from kl_twin.pde_solvers import reset_solver_invocations, solver_invocations
from kl_twin.transfer import (
    Controls,
    mean_field_of,
    predict,
    target_residuals,
    train_source,
    transfer_linear,
    transfer_nonlinear,
)
from tests.fixtures import small_linear, small_nonlinear


class TestLinearTransfer(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.exp = small_linear()
        cls.data = generate_dataset(cls.exp, cls.exp.source, cls.exp.n_train, cls.exp.seeds.source)
        cls.test = generate_dataset(cls.exp, cls.exp.source, cls.exp.n_test, cls.exp.seeds.test)
        cls.model = train_source("linear", cls.exp.source, cls.data, "ols", basis=cls.exp.basis)

    def test_source_ols_is_accurate(self):
        errors = evaluate_model(self.model, self.test)
        self.assertEqual(errors.shape, (self.exp.n_test,))
        self.assertLess(errors.mean(), 1e-2)

    def test_rls_source_matches_ols(self):
        rls = train_source("linear", self.exp.source, self.data, "rls", basis=self.exp.basis)
        self.assertIsInstance(rls.latent_map, LinearMap)
        self.assertLess(evaluate_model(rls, self.test).mean(), 1e-2)

    def test_self_transfer_needs_no_solve(self):
        reset_solver_invocations()
        same = transfer_linear(self.model, self.exp.source, self.model.gamma)
        self.assertEqual(solver_invocations(), 0)
        controls = self.test.controls_for(0)
        np.testing.assert_array_equal(predict(same, controls).values, predict(self.model, controls).values)

    def test_new_target_takes_one_solve(self):
        target = self.exp.condition("T1")
        reset_solver_invocations()
        moved = transfer_linear(self.model, target)
        self.assertEqual(solver_invocations(), 1)
        self.assertIs(moved.latent_map, self.model.latent_map)
        np.testing.assert_array_equal(moved.state.eigenvectors, self.model.state.eigenvectors)
        np.testing.assert_array_equal(
            moved.controls["f"].mean.values, mean_field_of(target.f_mean, self.model.grid, "space_time").values
        )
        self.assertEqual(moved.method, "one_shot")

    def test_target_error_comparable_to_source(self):
        target = self.exp.condition("T1")
        moved = transfer_linear(self.model, target)
        target_test = generate_dataset(self.exp, target, self.exp.n_test, self.exp.seeds.test + 1)
        source_error = evaluate_model(self.model, self.test).mean()
        target_error = evaluate_model(moved, target_test).mean()
        self.assertLess(target_error, 3.0 * source_error)

    def test_gamma_changes_latents_only(self):
        target = self.exp.condition("T2")
        plain = transfer_linear(self.model, target, 0.0)
        damped = transfer_linear(self.model, target, 0.01)
        self.assertEqual(damped.gamma, 0.01)
        test = generate_dataset(self.exp, target, 2, 77)
        xi_plain = plain.latents(test.controls_for(0))
        xi_damped = damped.latents(test.controls_for(0))
        self.assertLess(np.linalg.norm(xi_damped[:-3]), np.linalg.norm(xi_plain[:-3]))
        np.testing.assert_array_equal(xi_damped[-3:], xi_plain[-3:])

    def test_rejects_nonlinear_use(self):
        with self.assertRaises(InvalidArgumentError):
            transfer_nonlinear(self.model, self.exp.source, "rls")
        with self.assertRaises(InvalidArgumentError):
            predict(self.model, Controls(k=None))


class TestNonlinearTransfer(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.exp = small_nonlinear()
        cls.target = cls.exp.condition("target")
        cls.data = generate_dataset(cls.exp, cls.exp.source, cls.exp.n_train, cls.exp.seeds.source)
        cls.target_data = generate_dataset(cls.exp, cls.target, 12, cls.exp.seeds.target)
        cls.target_test = generate_dataset(cls.exp, cls.target, cls.exp.n_test, cls.exp.seeds.test)
        kwargs = dict(basis=cls.exp.basis, training=cls.exp.training, init_seed=cls.exp.seeds.init)
        cls.rls = train_source("nonlinear", cls.exp.source, cls.data, "rls", **kwargs)
        cls.mlp = train_source("nonlinear", cls.exp.source, cls.data, "mlp", **kwargs)

    def _baseline(self) -> float:
        """Error of predicting the mean-field state for every sample."""
        model = transfer_nonlinear(self.rls, self.target, "rls")
        return float(np.mean([
            compute_error(self.target_test.solution(i), model.state.mean)
            for i in range(self.target_test.n_samples)
        ]))

    def test_rls_transfer_error_is_bounded(self):
        reset_solver_invocations()
        model = transfer_nonlinear(self.rls, self.target, "rls")
        self.assertEqual(solver_invocations(), 1)
        self.assertLess(evaluate_model(model, self.target_test).mean(), 3.0 * self._baseline())

    def test_state_mean_is_target_mean_field(self):
        model = transfer_nonlinear(self.rls, self.target, "rls")
        h = model.state.mean.as_matrix()
        np.testing.assert_array_equal(h[:, 0], 0.95)
        np.testing.assert_array_equal(h[:, -1], 1.05)
        np.testing.assert_array_equal(model.state.eigenvectors, self.rls.state.eigenvectors)

    def test_mlp_source_trained(self):
        self.assertIsInstance(self.mlp.latent_map, Mlp)
        self.assertEqual(self.mlp.latent_map.widths, [5, 8, 8, 6])
        self.assertIsNotNone(self.mlp.latent_map.final_loss)

    def test_physics_informed_zero_shot(self):
        reset_solver_invocations()
        model = transfer_nonlinear(
            self.mlp, self.target, "pi_kl_dnn", n_residual=self.exp.n_residual, residual_seed=self.exp.seeds.residual
        )
        self.assertEqual(solver_invocations(), 1)
        for a, b in zip(model.latent_map.weights[:-1], self.mlp.latent_map.weights[:-1]):
            np.testing.assert_array_equal(a, b)
        errors = evaluate_model(model, self.target_test)
        self.assertTrue(np.all(np.isfinite(errors)))
        self.assertLess(errors.mean(), 0.1)

    def test_residual_realizations_are_reduced_and_reusable(self):
        residuals = target_residuals(self.mlp, self.target, self.exp.n_residual, self.exp.seeds.residual)
        self.assertEqual(len(residuals), self.exp.n_residual)
        n_eta = self.mlp.state.n_terms
        for xi, r, qtb in residuals:
            self.assertEqual(xi.shape, (self.mlp.controls["k"].n_terms,))
            self.assertEqual(r.shape, (n_eta, n_eta))
            self.assertEqual(qtb.shape, (n_eta,))
            np.testing.assert_array_equal(np.tril(r, -1), 0.0)
        fresh = transfer_nonlinear(
            self.mlp, self.target, "pi_kl_dnn", n_residual=self.exp.n_residual, residual_seed=self.exp.seeds.residual
        )
        reused = transfer_nonlinear(self.mlp, self.target, "pi_kl_dnn", residuals=residuals)
        np.testing.assert_allclose(reused.latent_map.weights[-1], fresh.latent_map.weights[-1], rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(reused.latent_map.biases[-1], fresh.latent_map.biases[-1], rtol=1e-12, atol=1e-14)

    def test_few_shot_variants(self):
        for method in ("kl_dnn", "ols", "combined"):
            with self.subTest(method=method):
                model = transfer_nonlinear(
                    self.mlp,
                    self.target,
                    method,
                    n_train_target=12,
                    target_dataset=self.target_data,
                    n_residual=self.exp.n_residual,
                )
                self.assertEqual(model.method, method)
                self.assertTrue(np.all(np.isfinite(evaluate_model(model, self.target_test))))

    def test_invalid_requests(self):
        with self.assertRaises(InvalidArgumentError):
            transfer_nonlinear(self.mlp, self.target, "ols")
        with self.assertRaises(InvalidArgumentError):
            transfer_nonlinear(self.rls, self.target, "kl_dnn", n_train_target=5, target_dataset=self.target_data)
        with self.assertRaises(InvalidArgumentError):
            transfer_nonlinear(self.mlp, self.target, "kl_dnn", n_train_target=20, target_dataset=self.target_data)
        with self.assertRaises(InvalidArgumentError):
            transfer_linear(self.rls, self.target)


if __name__ == '__main__':
    unittest.main()
