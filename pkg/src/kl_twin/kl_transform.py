"""Empirical KL bases (method of snapshots) and the forward / inverse KLD transforms."""

from __future__ import annotations
import logging
from typing import Sequence

import numpy as np
import scipy.linalg

from . import config
from .errors import DecompositionError, InvalidArgumentError
from .field_core import Field, KlBasis, fix_signs

log = logging.getLogger(__name__)

__all__ = [
    "KlBasis",
    "ensemble_mean",
    "empirical_basis",
    "kld_forward",
    "kld_inverse",
    "kld_inverse_many",
    "representation_error",
]


def _stack(samples: Sequence[Field]) -> np.ndarray:
    if len(samples) == 0:
        raise InvalidArgumentError("need at least one sample")
    first = samples[0]
    for sample in samples[1:]:
        if sample.grid != first.grid or sample.kind != first.kind:
            raise InvalidArgumentError("samples live on different grids or kinds")
    return np.stack([s.values for s in samples], axis=1)


def ensemble_mean(samples: Sequence[Field]) -> Field:
    """Node-wise arithmetic mean."""
    values = _stack(samples)
    return Field(samples[0].grid, samples[0].kind, values.mean(axis=1))


def empirical_basis(samples: Sequence[Field], n_terms: int) -> KlBasis:
    """
    Method of snapshots: SVD of the centered snapshot matrix scaled by 1/sqrt(N - 1).
    Singular values squared are the eigenvalues of the unit-weight empirical covariance.
    """
    values = _stack(samples)
    n_nodes, n_samples = values.shape
    if not 1 <= n_terms <= min(n_samples - 1, n_nodes):
        raise InvalidArgumentError(
            f"n_terms = {n_terms} needs 1 <= n_terms <= min(N - 1, nodes) = {min(n_samples - 1, n_nodes)}"
        )
    mean = values.mean(axis=1)
    centered = (values - mean[:, None]) / np.sqrt(n_samples - 1)
    try:
        u, s, _ = scipy.linalg.svd(centered, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"snapshot SVD failed ({exc})") from exc
    lam = s**2
    total = float(lam.sum())
    if total <= 0.0:
        raise DecompositionError("ensemble has zero variance; cannot build a KL basis")
    basis = KlBasis(
        Field(samples[0].grid, samples[0].kind, mean),
        lam[:n_terms],
        fix_signs(u[:, :n_terms]),
        total,
    )
    log.info("empirical basis: %d samples, %d terms, rtol %.3e", n_samples, n_terms, basis.rtol)
    return basis


def kld_forward(basis: KlBasis, eta: np.ndarray) -> Field:
    """mean + Psi eta."""
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != (basis.n_terms,):
        raise InvalidArgumentError(f"latent vector needs length {basis.n_terms}, got shape {eta.shape}")
    return basis.mean + Field(basis.grid, basis.kind, basis.modes @ eta)


def kld_inverse_many(basis: KlBasis, values: np.ndarray, gamma: float = 0.0) -> np.ndarray:
    """
    argmin ||v - mean - Psi eta||^2 + gamma ||eta||^2 for each column v of values
    (n_nodes, m), solved as least squares on [Psi; sqrt(gamma) I]. Returns (n_terms, m).
    """
    if gamma < 0:
        raise InvalidArgumentError(f"gamma must be >= 0, got {gamma}")
    values = np.asarray(values, dtype=np.float64)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    if values.shape[0] != basis.mean.values.size:
        raise InvalidArgumentError(f"values need {basis.mean.values.size} rows, got {values.shape[0]}")
    rhs = values - basis.mean.values[:, None]
    matrix = basis.modes
    if gamma > 0:
        matrix = np.vstack([matrix, np.sqrt(gamma) * np.eye(basis.n_terms)])
        rhs = np.vstack([rhs, np.zeros((basis.n_terms, rhs.shape[1]))])
    eta, _, rank, sv = scipy.linalg.lstsq(matrix, rhs, lapack_driver="gelsd")
    if sv.size and sv[-1] <= config.RANK_RTOL * sv[0]:
        raise DecompositionError(
            f"inverse KLD is rank deficient (rank {rank} of {basis.n_terms}); use gamma > 0"
        )
    return eta[:, 0] if squeeze else eta


def kld_inverse(basis: KlBasis, field: Field, gamma: float = 0.0) -> np.ndarray:
    if field.grid != basis.grid or field.kind != basis.kind:
        raise InvalidArgumentError("field lives on another grid or kind than the basis")
    return kld_inverse_many(basis, field.values, gamma)


def representation_error(field: Field, basis: KlBasis, gamma: float = 0.0) -> float:
    """||field - forward(inverse(field))|| / ||field||."""
    norm = float(np.linalg.norm(field.values))
    if norm == 0.0:
        raise InvalidArgumentError("representation error of a zero field is undefined")
    rebuilt = kld_forward(basis, kld_inverse(basis, field, gamma))
    return float(np.linalg.norm((field - rebuilt).values)) / norm
