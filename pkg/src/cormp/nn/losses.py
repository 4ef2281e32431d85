"""Gaussian negative log-likelihood and mean-squared error."""
from __future__ import annotations

import math

import numpy as np

from ..errors import ContractViolation
from .layers import sigmoid, softplus

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
SIGMA_FLOOR = 1e-4


def gaussian_nll(mean, std, target):
    """Mean over all elements of ``0.5 ln(2 pi s^2) + (y - m)^2 / (2 s^2)``."""
    mean, std, target = (np.asarray(a, dtype=np.float64) for a in (mean, std, target))
    if np.any(std <= 0):
        raise ContractViolation("gaussian_nll requires std > 0 everywhere")
    return float(np.mean(HALF_LOG_2PI + np.log(std) + (target - mean) ** 2 / (2.0 * std ** 2)))


def gaussian_nll_grad(mean, std, target):
    """Gradients of :func:`gaussian_nll` with respect to ``mean`` and ``std``."""
    mean, std, target = (np.asarray(a, dtype=np.float64) for a in (mean, std, target))
    n = mean.size
    resid = mean - target
    return resid / std ** 2 / n, (1.0 / std - resid ** 2 / std ** 3) / n


def split_head(raw, floor=SIGMA_FLOOR):
    """Split a decoder output ``[mu, sigma_raw]`` into ``(mu, sigma)``."""
    raw = np.asarray(raw, dtype=np.float64)
    d = raw.shape[-1] // 2
    return raw[..., :d], softplus(raw[..., d:]) + floor


def head_nll(raw, target, floor=SIGMA_FLOOR):
    """NLL of ``target`` under the Gaussian head plus its gradient w.r.t. ``raw``."""
    raw = np.asarray(raw, dtype=np.float64)
    d = raw.shape[-1] // 2
    mu, sigma = split_head(raw, floor)
    loss = gaussian_nll(mu, sigma, target)
    dmu, dsigma = gaussian_nll_grad(mu, sigma, target)
    draw = np.concatenate([dmu, dsigma * sigmoid(raw[..., d:])], axis=-1)
    return loss, draw


def mse(pred, target):
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    return float(np.mean((pred - target) ** 2))


def mse_grad(pred, target):
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    return 2.0 * (pred - target) / pred.size
