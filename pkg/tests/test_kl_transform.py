import unittest

import numpy as np

from kl_twin.errors import DecompositionError, InvalidArgumentError
from kl_twin.field_core import Field, RngStream, SeKernel, build_grid, constant_field, kernel_basis, sample_gaussian_field
from kl_twin.kl_transform import (
    empirical_basis,
    ensemble_mean,
    kld_forward,
    kld_inverse,
    kld_inverse_many,
    representation_error,
)
from kl_twin.pde_solvers import Ibc, solve_diffusion


def _gaussian_samples(grid, n: int, seed: int = 5) -> list[Field]:
    basis = kernel_basis(SeKernel(0.5, length_scale=0.4), grid, "space", 6)
    basis = basis.with_mean(constant_field(grid, "space_only", 1.0))
    return [sample_gaussian_field(basis, RngStream(seed, i))[0] for i in range(n)]


class TestEmpiricalBasis(unittest.TestCase):
    def setUp(self):
        self.grid = build_grid(12, 4, 1.0, 1.0)
        self.samples = _gaussian_samples(self.grid, 50)

    def test_orthonormal_eigenvectors(self):
        basis = empirical_basis(self.samples, 5)
        gram = basis.eigenvectors.T @ basis.eigenvectors
        np.testing.assert_allclose(gram, np.eye(5), atol=1e-8)

    def test_eigenvalues_match_sample_covariance(self):
        basis = empirical_basis(self.samples, 5)
        matrix = np.stack([s.values for s in self.samples], axis=1)
        cov = np.cov(matrix)
        expected = np.sort(np.linalg.eigvalsh(cov))[::-1]
        np.testing.assert_allclose(basis.eigenvalues, expected[:5], rtol=1e-8)
        self.assertAlmostEqual(basis.total_variance, float(np.trace(cov)), places=10)

    def test_mean_is_ensemble_mean(self):
        basis = empirical_basis(self.samples, 3)
        np.testing.assert_allclose(basis.mean.values, ensemble_mean(self.samples).values)

    def test_term_count_limits(self):
        with self.assertRaises(InvalidArgumentError):
            empirical_basis(self.samples[:4], 4)  # at most N - 1
        with self.assertRaises(InvalidArgumentError):
            empirical_basis(self.samples, 0)
        with self.assertRaises(InvalidArgumentError):
            empirical_basis([], 1)

    def test_zero_variance_ensemble(self):
        flat = [constant_field(self.grid, "space_only", 1.0) for _ in range(5)]
        with self.assertRaises(DecompositionError):
            empirical_basis(flat, 2)

    def test_state_modes_vanish_on_ibc_nodes(self):
        # Random conductivity with fixed IBCs: fluctuations live on interior nodes only
        grid = build_grid(8, 10, 1.0, 0.03)
        y_basis = kernel_basis(SeKernel(0.3, length_scale=0.5), grid, "space", 4)
        states = []
        for i in range(20):
            y, _ = sample_gaussian_field(y_basis, RngStream(3, i))
            k = Field(grid, "space_only", np.exp(y.values))
            states.append(solve_diffusion(grid, k, None, Ibc(1.05, 0.95, 1.05)))
        basis = empirical_basis(states, 6)
        fixed = np.concatenate([grid.initial_index, grid.left_index, grid.right_index])
        self.assertLess(np.max(np.abs(basis.eigenvectors[fixed])), 1e-10)


class TestKld(unittest.TestCase):
    def setUp(self):
        self.grid = build_grid(12, 4, 1.0, 1.0)
        self.basis = empirical_basis(_gaussian_samples(self.grid, 50), 6)

    def test_roundtrip_inside_span(self):
        eta = np.array([0.3, -1.2, 0.5, 0.0, 2.0, -0.7])
        field = kld_forward(self.basis, eta)
        np.testing.assert_allclose(kld_inverse(self.basis, field), eta, atol=1e-10)
        self.assertLess(representation_error(field, self.basis), 1e-10)

    def test_gamma_shrinkage_closed_form(self):
        eta = np.array([1.0, -1.0, 0.5, 0.2, -0.3, 0.1])
        field = kld_forward(self.basis, eta)
        gamma = 0.05
        shrunk = kld_inverse(self.basis, field, gamma)
        # Orthonormal phi: each coordinate scales by lambda / (lambda + gamma)
        lam = self.basis.eigenvalues
        np.testing.assert_allclose(shrunk, eta * lam / (lam + gamma), rtol=1e-8)
        self.assertLess(np.linalg.norm(shrunk), np.linalg.norm(eta))

    def test_inverse_many_matches_columns(self):
        values = np.stack([s.values for s in _gaussian_samples(self.grid, 3, seed=9)], axis=1)
        many = kld_inverse_many(self.basis, values, 0.01)
        for j in range(3):
            np.testing.assert_allclose(many[:, j], kld_inverse_many(self.basis, values[:, j], 0.01))

    def test_invalid_arguments(self):
        field = kld_forward(self.basis, np.zeros(6))
        with self.assertRaises(InvalidArgumentError):
            kld_inverse(self.basis, field, -1.0)
        with self.assertRaises(InvalidArgumentError):
            kld_forward(self.basis, np.zeros(5))
        with self.assertRaises(InvalidArgumentError):
            kld_inverse(self.basis, constant_field(self.grid, "space_time", 1.0))
        with self.assertRaises(InvalidArgumentError):
            representation_error(constant_field(self.grid, "space_only", 0.0), self.basis)


if __name__ == '__main__':
    unittest.main()
