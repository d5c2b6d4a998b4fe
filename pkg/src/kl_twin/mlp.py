"""
Fully connected tanh network for the xi -> eta map: forward pass, backpropagation,
full-batch Adam training, and retraining of the last linear layer on target data,
PDE residuals, or both.
"""

from __future__ import annotations
import logging
from dataclasses import dataclass, replace
from typing import Literal, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from . import config
from .errors import DecompositionError, InvalidArgumentError, TrainingError
from .field_core import RngStream
from .models import TrainingOptions

log = logging.getLogger(__name__)

RetrainMode = Literal["data", "physics", "combined"]

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class Mlp:
    """Layer l maps a -> a @ W_l.T + b_l; tanh on hidden layers, identity on the output."""
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    final_loss: float | None = None

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidArgumentError("MLP needs matching non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise InvalidArgumentError(f"layer {i}: bias shape {b.shape} vs weight shape {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidArgumentError(f"layer {i}: input width {w.shape[1]} breaks the shape chain")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_hidden(self) -> int:
        """Width of the features feeding the last layer."""
        return self.weights[-1].shape[1]

    def with_last_layer(self, weight: np.ndarray, bias: np.ndarray) -> Mlp:
        return Mlp(self.weights[:-1] + (weight,), self.biases[:-1] + (bias,), self.final_loss)

    def __call__(self, xi: np.ndarray) -> np.ndarray:
        return mlp_forward(self, xi)


def init_mlp(widths: Sequence[int], seed: int) -> Mlp:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise InvalidArgumentError(f"invalid layer widths {list(widths)}")
    rng = RngStream(seed, 0)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, (fan_out,)))
    return Mlp(tuple(weights), tuple(biases))


def _activations(mlp: Mlp, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = acts[-1] @ w.T + b
        acts.append(z if i == last else np.tanh(z))
    return acts


def _as_batch(mlp: Mlp, xi: np.ndarray) -> tuple[np.ndarray, bool]:
    xi = np.asarray(xi, dtype=np.float64)
    single = xi.ndim == 1
    batch = xi[None, :] if single else xi
    if batch.ndim != 2 or batch.shape[1] != mlp.n_in:
        raise InvalidArgumentError(f"MLP expects inputs of width {mlp.n_in}, got shape {xi.shape}")
    return batch, single


def mlp_forward(mlp: Mlp, xi: np.ndarray) -> np.ndarray:
    """eta for xi of shape (n_in,) or (m, n_in)."""
    batch, single = _as_batch(mlp, xi)
    out = _activations(mlp, batch)[-1]
    return out[0] if single else out


def mlp_features(mlp: Mlp, xi: np.ndarray) -> np.ndarray:
    """Outputs of the last hidden layer (the input itself for a single-layer net)."""
    batch, single = _as_batch(mlp, xi)
    out = _activations(mlp, batch)[-2]
    return out[0] if single else out


def mlp_loss(mlp: Mlp, x: np.ndarray, y: np.ndarray) -> float:
    """Mean over samples of ||y - NN(x)||^2."""
    residual = mlp_forward(mlp, x) - y
    return float(np.sum(residual * residual) / x.shape[0])


def mlp_gradients(mlp: Mlp, x: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Loss and its gradients with respect to every weight and bias."""
    acts = _activations(mlp, x)
    residual = acts[-1] - y
    m = x.shape[0]
    loss = float(np.sum(residual * residual) / m)
    delta = 2.0 * residual / m
    grads_w: list[np.ndarray] = [np.empty(0)] * len(mlp.weights)
    grads_b: list[np.ndarray] = [np.empty(0)] * len(mlp.weights)
    for i in range(len(mlp.weights) - 1, -1, -1):
        grads_w[i] = delta.T @ acts[i]
        grads_b[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ mlp.weights[i]) * (1.0 - acts[i] ** 2)
    return loss, grads_w, grads_b


def mlp_input_jacobian(mlp: Mlp, xi: np.ndarray) -> np.ndarray:
    """d eta / d xi at a single input, shape (n_out, n_in)."""
    batch, _ = _as_batch(mlp, xi)
    acts = _activations(mlp, batch)
    jac = np.eye(mlp.n_in)
    last = len(mlp.weights) - 1
    for i, w in enumerate(mlp.weights):
        jac = w @ jac
        if i != last:
            jac = (1.0 - acts[i + 1][0] ** 2)[:, None] * jac
    return jac


def mlp_train(mlp: Mlp, x: np.ndarray, y: np.ndarray, options: TrainingOptions | None = None) -> Mlp:
    """
    Full-batch Adam on the mean squared loss. Stops after max_epochs or when the best
    loss has not improved by min_improvement for patience epochs; returns the best parameters.
    """
    options = options or TrainingOptions()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise InvalidArgumentError(f"training data needs (m, n_in) and (m, n_out) with m > 0, got {x.shape}, {y.shape}")
    if x.shape[1] != mlp.n_in or y.shape[1] != mlp.n_out:
        raise InvalidArgumentError(f"training data widths {x.shape[1]}->{y.shape[1]} do not match {mlp.widths}")

    params = [w.copy() for w in mlp.weights] + [b.copy() for b in mlp.biases]
    n_layers = len(mlp.weights)
    first = [np.zeros_like(p) for p in params]
    second = [np.zeros_like(p) for p in params]
    best_loss, best_params = np.inf, [p.copy() for p in params]
    plateau_loss, plateau_epoch = np.inf, 0
    current = mlp

    for epoch in range(options.max_epochs + 1):
        loss, grads_w, grads_b = mlp_gradients(current, x, y)
        if not np.isfinite(loss):
            raise TrainingError("training loss diverged", epoch=epoch, loss=loss)
        if loss < best_loss:
            best_loss, best_params = loss, [p.copy() for p in params]
        if loss < plateau_loss - options.min_improvement:
            plateau_loss, plateau_epoch = loss, epoch
        elif epoch - plateau_epoch >= options.patience:
            log.info("training stopped at epoch %d, loss %.3e", epoch, best_loss)
            break
        if epoch == options.max_epochs:
            break
        if epoch % 1000 == 0:
            log.debug("epoch %d loss %.6e", epoch, loss)

        step = epoch + 1
        lr = options.learning_rate * np.sqrt(1 - _ADAM_BETA2**step) / (1 - _ADAM_BETA1**step)
        for p, g, m1, m2 in zip(params, grads_w + grads_b, first, second):
            m1 *= _ADAM_BETA1
            m1 += (1 - _ADAM_BETA1) * g
            m2 *= _ADAM_BETA2
            m2 += (1 - _ADAM_BETA2) * g * g
            p -= lr * m1 / (np.sqrt(m2) + _ADAM_EPS)
        current = Mlp(tuple(params[:n_layers]), tuple(params[n_layers:]))

    log.info("trained %s net, loss %.3e", "-".join(map(str, mlp.widths)), best_loss)
    return Mlp(tuple(best_params[:n_layers]), tuple(best_params[n_layers:]), best_loss)


# ── Last-layer retraining ─────────────────────────────────────────────────────

def _augmented(features: np.ndarray) -> np.ndarray:
    return np.hstack([features, np.ones((features.shape[0], 1))])


def _last_layer(mlp: Mlp) -> np.ndarray:
    """[W_{N+1} | b_{N+1}] of shape (n_out, n_hidden + 1)."""
    return np.hstack([mlp.weights[-1], mlp.biases[-1][:, None]])


def _split_last(mlp: Mlp, stacked: np.ndarray) -> Mlp:
    return replace(mlp.with_last_layer(stacked[:, :-1].copy(), stacked[:, -1].copy()), final_loss=None)


class _CompressedSystem:
    """
    Row blocks of a least-squares problem folded into (R, Q^T rhs) whenever the
    pending rows exceed twice the unknown count; the minimizer and rank are unchanged.
    """

    def __init__(self, n_unknowns: int) -> None:
        self.n_unknowns = n_unknowns
        self.blocks: list[np.ndarray] = []
        self.rhs: list[np.ndarray] = []
        self.pending = 0

    def add(self, block: np.ndarray, rhs: np.ndarray) -> None:
        self.blocks.append(block)
        self.rhs.append(rhs)
        self.pending += block.shape[0]
        if self.pending > 2 * self.n_unknowns:
            self._fold()

    def _fold(self) -> None:
        q, r = scipy.linalg.qr(np.vstack(self.blocks), mode="economic")
        self.blocks, self.rhs = [r], [q.T @ np.concatenate(self.rhs)]
        self.pending = r.shape[0]

    def reduced(self) -> tuple[np.ndarray, np.ndarray]:
        return np.vstack(self.blocks), np.concatenate(self.rhs)


def _retrain_data(
    mlp: Mlp, x: np.ndarray, y: np.ndarray, strict: bool, solver: Literal["direct", "iterative"]
) -> Mlp:
    z = _augmented(mlp_features(mlp, x))
    needed = z.shape[1]
    if z.shape[0] < needed:
        message = (
            f"{z.shape[0]} target samples cannot fix the {needed} last-layer parameters per output "
            f"uniquely (need >= {needed})"
        )
        if strict:
            raise DecompositionError(message)
        log.warning("%s; using the minimum-norm correction to the source layer", message)
    source = _last_layer(mlp)
    rhs = y - z @ source.T
    if solver == "iterative":
        correction = np.column_stack([
            scipy.sparse.linalg.lsqr(z, rhs[:, j], atol=1e-15, btol=1e-15, conlim=1e12, iter_lim=20 * needed)[0]
            for j in range(rhs.shape[1])
        ])
    else:
        correction, _, rank, _ = scipy.linalg.lstsq(z, rhs, lapack_driver="gelsd")
        if strict and rank < needed:
            raise DecompositionError(f"hidden features have rank {rank} < {needed}")
    return _split_last(mlp, source + correction.T)


def retrain_last_layer(
    mlp: Mlp,
    mode: RetrainMode,
    *,
    data: tuple[np.ndarray, np.ndarray] | None = None,
    residuals: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None,
    residual_weight: float = config.RESIDUAL_WEIGHT,
    strict: bool = False,
    solver: Literal["direct", "iterative"] = "direct",
) -> Mlp:
    """
    New (W_{N+1}, b_{N+1}) with all other layers frozen.

    data       (x, y) target latent pairs, rows are samples
    residuals  (xi_k, A, b) per residual realization; the residual at eta is A eta + b
    mode       data: least squares on frozen features
               physics: sum_i ||A_i (W z_i + b) + b_i||^2
               combined: mean data loss + residual_weight * mean residual loss
    """
    if mode not in ("data", "physics", "combined"):
        raise InvalidArgumentError(f"unknown retraining mode {mode!r}")
    if mode in ("data", "combined"):
        if data is None or len(data[0]) == 0:
            raise InvalidArgumentError(f"{mode} retraining needs labeled target samples")
        x, y = (np.asarray(a, dtype=np.float64) for a in data)
        if x.shape[0] != y.shape[0] or y.shape[1] != mlp.n_out:
            raise InvalidArgumentError("target data shapes do not match the network")
    if mode == "data":
        return _retrain_data(mlp, x, y, strict, solver)

    if not residuals:
        raise InvalidArgumentError(f"{mode} retraining needs residual realizations")
    n_params = mlp.n_hidden + 1
    if len(residuals) < n_params:
        raise DecompositionError(
            f"{len(residuals)} residual realizations cannot fix {n_params} last-layer parameters "
            f"per output (need N_r >= {n_params})"
        )
    n_out = mlp.n_out
    xi_r = np.stack([np.asarray(r[0], dtype=np.float64) for r in residuals])
    z_r = _augmented(mlp_features(mlp, xi_r))
    phys_scale = np.sqrt((residual_weight if mode == "combined" else 1.0) / len(residuals))

    system = _CompressedSystem(n_params * n_out)
    for z, (_, a, b) in zip(z_r, residuals):
        if a.shape[1] != n_out or b.shape != (a.shape[0],):
            raise InvalidArgumentError("residual blocks do not match the network output width")
        # ||A v + b|| = ||R v + Q^T b|| up to a constant, with v = kron(z^T, I) vec(W~)
        q, r = scipy.linalg.qr(a, mode="economic")
        system.add(phys_scale * np.kron(z[None, :], r), -phys_scale * (q.T @ b))
    if mode == "combined":
        data_scale = np.sqrt(1.0 / x.shape[0])
        eye = np.eye(n_out)
        for z, target in zip(_augmented(mlp_features(mlp, x)), y):
            system.add(data_scale * np.kron(z[None, :], eye), data_scale * target)

    vec, _, rank, _ = scipy.linalg.lstsq(*system.reduced(), lapack_driver="gelsy")
    if rank < n_params * n_out:
        raise DecompositionError(
            f"{mode} retraining system has rank {rank} < {n_params * n_out}; add residual realizations"
        )
    log.info("%s retraining: %d residual realizations, %d unknowns", mode, len(residuals), vec.size)
    # vec stacks the columns of W~ = [W | b]
    return _split_last(mlp, vec.reshape(n_params, n_out).T)
