"""Conditional Neural Movement Primitive with a context input.

The encoder maps each observation ``(t, SM(t))`` to a representation; the
representations are averaged into one latent vector.  The decoder reads
``[latent, context, t_query]`` and emits a Gaussian ``(mu, sigma)`` over
``SM(t_query)``.  All parameters live in a single flat vector so the
compiled kernels and the Adam state can operate on it directly.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import ContractViolation, DimensionError, OptimizationError
from ..nn.checkpoint import load_params, save_params
from ..nn.layers import DenseLayer, Sequential, he_uniform
from ..nn.losses import SIGMA_FLOOR, split_head
from ..nn.optim import Adam
from . import backend


def _layer_sizes(output_dim, context_dim, width, encoder_layers, decoder_layers):
    enc = [1 + output_dim] + [width] * encoder_layers
    dec = [width + context_dim + 1] + [width] * (decoder_layers - 1) + [2 * output_dim]
    return enc, dec


def count_parameters(output_dim, context_dim, width=128, encoder_layers=3, decoder_layers=4):
    enc, dec = _layer_sizes(output_dim, context_dim, width, encoder_layers, decoder_layers)
    return sum(a * b + b for sizes in (enc, dec) for a, b in zip(sizes[:-1], sizes[1:]))


def width_for_budget(target, output_dim, context_dim, encoder_layers=3, decoder_layers=4):
    """Layer width whose parameter count is closest to ``target``."""
    best = min(range(8, 2048), key=lambda w: abs(
        count_parameters(output_dim, context_dim, w, encoder_layers, decoder_layers) - target))
    return best


class CnmpModel:
    """CNMP network.

    Parameters
    ----------
    output_dim : int
        Dimension of SM(t) (3 for Cartesian gripper positions).
    context_dim : int
        Context length; 0 for a context-free primitive.
    width : int
        Width of every hidden layer and of the latent vector.
    rng : numpy.random.Generator, optional
        Initialisation source; all-zero parameters when omitted.
    """

    def __init__(self, output_dim, context_dim, width=128, encoder_layers=3, decoder_layers=4,
                 rng=None):
        self.output_dim, self.context_dim, self.width = int(output_dim), int(context_dim), int(width)
        self.encoder_layers, self.decoder_layers = int(encoder_layers), int(decoder_layers)
        enc, dec = _layer_sizes(output_dim, context_dim, width, encoder_layers, decoder_layers)
        rows, offset = [], 0
        for n_in, n_out in list(zip(enc[:-1], enc[1:])) + list(zip(dec[:-1], dec[1:])):
            rows.append((offset, offset + n_in * n_out, n_in, n_out))
            offset += n_in * n_out + n_out
        self.layout = np.array(rows, dtype=np.int64)
        self.n_enc = encoder_layers
        self.theta = np.zeros(offset)
        self.grad = np.zeros(offset)
        if rng is not None:
            for w_off, _, n_in, n_out in rows:
                self.theta[w_off:w_off + n_in * n_out] = he_uniform(rng, n_in * n_out, n_in)
        self.encoder = self._stack(rows[:self.n_enc])
        self.decoder = self._stack(rows[self.n_enc:])

    def _stack(self, rows):
        layers = []
        for idx, (w_off, b_off, n_in, n_out) in enumerate(rows):
            layers.append(DenseLayer(
                n_in, n_out, activation="linear" if idx == len(rows) - 1 else "relu",
                weight=self.theta[w_off:w_off + n_in * n_out].reshape(n_out, n_in),
                bias=self.theta[b_off:b_off + n_out],
                grad_weight=self.grad[w_off:w_off + n_in * n_out].reshape(n_out, n_in),
                grad_bias=self.grad[b_off:b_off + n_out]))
        return Sequential(layers)

    @property
    def parameter_count(self):
        return int(self.theta.size)

    def architecture(self):
        return {"kind": "cnmp", "output_dim": self.output_dim, "context_dim": self.context_dim,
                "width": self.width, "encoder_layers": self.encoder_layers,
                "decoder_layers": self.decoder_layers}

    # -- inference (cache-free, safe to share between threads) ------------

    def context_vector(self, context):
        if context is None:
            context = np.zeros(0)
        context = np.atleast_1d(np.asarray(getattr(context, "values", context), dtype=np.float64))
        if context.shape != (self.context_dim,):
            raise DimensionError(
                f"context has {context.shape[0]} values, model expects {self.context_dim}")
        return context

    def encode_observations(self, observations):
        """Mean of per-observation encodings; ``observations`` is ``(n, 1 + output_dim)``."""
        obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
        if obs.shape[0] == 0 or obs.size == 0:
            raise ContractViolation("at least one observation is required")
        if obs.shape[1] != 1 + self.output_dim:
            raise DimensionError(
                f"observations have {obs.shape[1]} columns, expected {1 + self.output_dim}")
        # rows are encoded one at a time (BLAS results can depend on batch shape) and
        # summed with correct rounding, so the mean is exactly order and duplication invariant
        enc = np.vstack([self.encoder.apply(row[None]) for row in obs])
        return np.array([math.fsum(col) for col in enc.T]) / enc.shape[0]

    def query(self, latent, context, t):
        """Return ``(mu, sigma)`` at one or more query times."""
        context = self.context_vector(context)
        t = np.asarray(t, dtype=np.float64)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ContractViolation("query times must lie in [0, 1]")
        latent = np.asarray(latent, dtype=np.float64)
        q = np.column_stack([np.tile(np.concatenate([latent, context]), (t.size, 1)), t])
        mu, sigma = split_head(self.decoder.apply(q), SIGMA_FLOOR)
        return (mu[0], sigma[0]) if scalar else (mu, sigma)

    def predict(self, observations, context, t):
        return self.query(self.encode_observations(observations), context, t)

    # -- persistence -------------------------------------------------------

    def save(self, path, seed=None, metadata=None):
        save_params(path, [self.theta], self.architecture(), seed=seed, metadata=metadata)

    @classmethod
    def load(cls, path):
        header, params = load_params(path)
        arch = dict(header["architecture"])
        if arch.pop("kind", None) != "cnmp":
            raise DimensionError(f"{path} does not hold a CNMP checkpoint")
        model = cls(**arch)
        if params[0].shape != model.theta.shape:
            raise DimensionError(
                f"{path}: parameter vector {params[0].shape} does not match architecture "
                f"{model.theta.shape}")
        model.theta[...] = params[0]
        return model, header


class CnmpTrainer:
    """Single-demonstration Adam updates on a :class:`CnmpModel`.

    Each demonstration is an ``(N, 1 + output_dim)`` array of ``[t, SM(t)]``
    rows paired with a context vector, both already normalised.
    """

    def __init__(self, model, lr=1e-4, obs_max=5, n_targets=1, kernels=None):
        self.model = model
        self.obs_max, self.n_targets = int(obs_max), int(n_targets)
        self.adam = Adam([model.theta], lr=lr)
        self.kernels = kernels or backend.kernels

    @property
    def step_count(self):
        return self.adam.step_count

    def sample(self, demos, rng):
        """Draw one training example: ``(demo index, observations, targets)``."""
        idx = int(rng.integers(len(demos)))
        points = demos[idx][0]
        n_obs = int(rng.integers(1, self.obs_max + 1))
        obs = points[rng.choice(points.shape[0], size=min(n_obs, points.shape[0]), replace=False)]
        tgt = points[rng.integers(points.shape[0], size=self.n_targets)]
        return idx, obs, tgt

    def loss_and_grad(self, obs, context, targets):
        """Loss of one example; leaves the gradient in ``model.grad``."""
        m = self.model
        return self.kernels.loss_grad(
            m.theta, m.grad, m.layout, m.n_enc, np.ascontiguousarray(obs),
            np.ascontiguousarray(m.context_vector(context)), np.ascontiguousarray(targets[:, 0]),
            np.ascontiguousarray(targets[:, 1:]), SIGMA_FLOOR)

    def train_step(self, demos, rng):
        if not demos:
            raise ContractViolation("training set is empty")
        idx, obs, tgt = self.sample(demos, rng)
        loss = self.loss_and_grad(obs, demos[idx][1], tgt)
        if not np.isfinite(loss):
            raise OptimizationError(
                f"non-finite loss {loss} on demonstration {idx} at step {self.step_count + 1}")
        a = self.adam
        ok = self.kernels.adam_update(self.model.theta, self.model.grad, a.first_moment[0],
                                      a.second_moment[0], a.lr, a.beta1, a.beta2, a.eps,
                                      a.step_count + 1)
        if not ok:
            raise OptimizationError(
                f"non-finite gradient on demonstration {idx} at step {self.step_count + 1}")
        a.step_count += 1
        return loss

    def evaluate(self, demos, rng, n_samples=200):
        """Average loss on ``n_samples`` random examples without updating."""
        total = 0.0
        for _ in range(n_samples):
            idx, obs, tgt = self.sample(demos, rng)
            total += self.loss_and_grad(obs, demos[idx][1], tgt)
        return total / n_samples


def generate_trajectory(model, conditioning, context, time_grid):
    """Mean prediction on ``time_grid`` given ``(k, 1 + dim)`` conditioning rows.

    Returns ``(mu, sigma)`` arrays of shape ``(len(time_grid), dim)``.
    """
    grid = np.asarray(time_grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise ContractViolation("time grid must be a strictly increasing 1-d array")
    return model.predict(conditioning, context, grid)
