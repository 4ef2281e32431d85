"""Pure numpy implementation of the CNMP kernels, built on ``cormp.nn`` layers.

Same signatures and flat-parameter layout as the compiled ``_kernel``
module; used when the extension is not built or ``CORMP_BACKEND=python``.
"""
from __future__ import annotations

import numpy as np

from ..nn.layers import DenseLayer, Sequential
from ..nn.losses import head_nll
from ..nn.optim import flush_moments


def _stack(theta, grad, layout, rows):
    layers = []
    for idx, (w_off, b_off, n_in, n_out) in enumerate(rows):
        last = idx == len(rows) - 1
        layers.append(DenseLayer(
            n_in, n_out, activation="linear" if last else "relu",
            weight=theta[w_off:w_off + n_in * n_out].reshape(n_out, n_in),
            bias=theta[b_off:b_off + n_out],
            grad_weight=grad[w_off:w_off + n_in * n_out].reshape(n_out, n_in),
            grad_bias=grad[b_off:b_off + n_out]))
    return Sequential(layers)


def loss_grad(theta, grad, layout, n_enc, obs, ctx, tx, ty, floor):
    layout = np.asarray(layout)
    width = int(layout[n_enc - 1, 3])
    if (obs.shape[1] != layout[0, 2] or layout[n_enc, 2] != width + ctx.shape[0] + 1
            or layout[-1, 3] != 2 * ty.shape[1]):
        raise ValueError("observation/context/target sizes do not match the network layout")
    if obs.shape[0] < 1 or tx.shape[0] < 1:
        raise ValueError("need at least one observation and one target")
    encoder = _stack(theta, grad, layout, layout[:n_enc])
    decoder = _stack(theta, grad, layout, layout[n_enc:])
    n = obs.shape[0]
    r = encoder.forward(obs).mean(axis=0)
    q = np.concatenate([np.tile(np.concatenate([r, ctx]), (tx.shape[0], 1)), tx[:, None]], axis=1)
    raw = decoder.forward(q)
    loss, draw = head_nll(raw, ty, floor)
    dq = decoder.backward(draw)
    dr = dq[:, :width].sum(axis=0) / n
    encoder.backward(np.tile(dr, (n, 1)))
    return loss


def adam_update(theta, grad, m, v, lr, beta1, beta2, eps, step):
    if not np.all(np.isfinite(grad)):
        return False
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    flush_moments(m, v)
    theta -= (lr * np.sqrt(c2) / c1) * m / (np.sqrt(v) + eps * np.sqrt(c2))
    return True
