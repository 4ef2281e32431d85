"""Dense and 3x3 convolution layers with hand-written backward passes.

All layers work on float64 arrays.  ``forward`` caches what ``backward``
needs; ``apply`` is the cache-free path used by frozen models, so a trained
network can be queried from several threads at once.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import DimensionError, StateError

ACTIVATIONS = ("relu", "linear", "softplus", "sigmoid")


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "linear":
        return z
    if activation == "softplus":
        return softplus(z)
    return sigmoid(z)


def _activation_grad(z, a, activation, dout):
    if activation == "relu":
        return dout * (z > 0)
    if activation == "linear":
        return dout
    if activation == "softplus":
        return dout * sigmoid(z)
    return dout * a * (1.0 - a)


def he_uniform(rng, shape, fan_in):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Common parameter/gradient bookkeeping."""

    activation = "linear"

    def params(self):
        return []

    def grads(self):
        return []

    def _require_cache(self):
        if getattr(self, "_cache", None) is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")


class DenseLayer(Layer):
    """Fully connected layer ``activation(W x + b)`` with ``W`` of shape (out, in).

    ``weight``/``bias`` and their gradient buffers may be supplied by the
    caller, typically as views into one flat parameter vector.
    """

    def __init__(self, n_in, n_out, activation="relu", rng=None, weight=None, bias=None,
                 grad_weight=None, grad_bias=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.n_in, self.n_out, self.activation = int(n_in), int(n_out), activation
        if weight is None:
            weight = (he_uniform(rng, (n_out, n_in), n_in) if rng is not None
                      else np.zeros((n_out, n_in)))
        if bias is None:
            bias = np.zeros(n_out)
        self.weight, self.bias = weight, bias
        self.grad_weight = np.zeros_like(weight) if grad_weight is None else grad_weight
        self.grad_bias = np.zeros_like(bias) if grad_bias is None else grad_bias
        if self.weight.shape != (self.n_out, self.n_in) or self.bias.shape != (self.n_out,):
            raise DimensionError(
                f"dense parameters {self.weight.shape}/{self.bias.shape} do not match "
                f"declared ({self.n_out}, {self.n_in})")
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.n_in:
            raise DimensionError(
                f"dense input shape {x.shape} does not match weight shape {self.weight.shape}")
        return x

    def apply(self, x):
        x = self._check(x)
        return _activate(x @ self.weight.T + self.bias, self.activation)

    def forward(self, x):
        x = self._check(x)
        z = x @ self.weight.T + self.bias
        a = _activate(z, self.activation)
        self._cache = (x, z, a)
        return a

    def backward(self, dout):
        self._require_cache()
        x, z, a = self._cache
        dz = _activation_grad(z, a, self.activation, np.asarray(dout, dtype=np.float64))
        if x.ndim == 1:
            self.grad_weight[...] = np.outer(dz, x)
            self.grad_bias[...] = dz
        else:
            self.grad_weight[...] = dz.T @ x
            self.grad_bias[...] = dz.sum(axis=0)
        return dz @ self.weight


def same_padding(size, stride, kernel=3):
    """Return ``(out, pad_before, pad_after)`` for same-padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _im2col(xp, out_h, out_w, stride):
    # xp: (N, C, Hp, Wp) -> (C*9, N*out_h*out_w)
    n, c = xp.shape[:2]
    cols = np.empty((c, 3, 3, n, out_h, out_w))
    for ki in range(3):
        for kj in range(3):
            patch = xp[:, :, ki:ki + stride * (out_h - 1) + 1:stride,
                       kj:kj + stride * (out_w - 1) + 1:stride]
            cols[:, ki, kj] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * 9, n * out_h * out_w)


def _col2im(cols, shape_p, out_h, out_w, stride):
    n, c, hp, wp = shape_p
    cols = cols.reshape(c, 3, 3, n, out_h, out_w)
    xp = np.zeros((n, c, hp, wp))
    for ki in range(3):
        for kj in range(3):
            xp[:, :, ki:ki + stride * (out_h - 1) + 1:stride,
               kj:kj + stride * (out_w - 1) + 1:stride] += cols[:, ki, kj].transpose(1, 0, 2, 3)
    return xp


def _as_batch(x, channels, what):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != channels:
        raise DimensionError(f"{what} expects {channels} input channels, got shape {x.shape}")
    return x, single


class Conv2dLayer(Layer):
    """3x3 convolution, stride 1 or 2, same padding.

    Input is ``(C, H, W)`` or a batch ``(N, C, H, W)``; output spatial size
    is ``ceil(H / stride)``.
    """

    def __init__(self, in_channels, filters, stride=1, activation="relu", rng=None):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.in_channels, self.filters, self.stride = in_channels, filters, stride
        self.activation = activation
        shape = (filters, in_channels, 3, 3)
        self.weight = (he_uniform(rng, shape, in_channels * 9) if rng is not None
                       else np.zeros(shape))
        self.bias = np.zeros(filters)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def output_shape(self, h, w):
        return self.filters, same_padding(h, self.stride)[0], same_padding(w, self.stride)[0]

    def _run(self, x):
        x, single = _as_batch(x, self.in_channels, "conv2d")
        n, c, h, w = x.shape
        oh, pt, pb = same_padding(h, self.stride)
        ow, pl, pr = same_padding(w, self.stride)
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        cols = _im2col(xp, oh, ow, self.stride)
        z = self.weight.reshape(self.filters, -1) @ cols
        z = z.reshape(self.filters, n, oh, ow).transpose(1, 0, 2, 3) + self.bias[None, :, None, None]
        a = _activate(z, self.activation)
        return a, single, (cols, xp.shape, (pt, pl, h, w), z, a, single)

    def apply(self, x):
        a, single, _ = self._run(x)
        return a[0] if single else a

    def forward(self, x):
        a, single, self._cache = self._run(x)
        return a[0] if single else a

    def backward(self, dout):
        self._require_cache()
        cols, shape_p, (pt, pl, h, w), z, a, single = self._cache
        dout = np.asarray(dout, dtype=np.float64)
        if single:
            dout = dout[None]
        dz = _activation_grad(z, a, self.activation, dout)
        n, f, oh, ow = dz.shape
        dz2 = dz.transpose(1, 0, 2, 3).reshape(f, -1)
        self.grad_weight[...] = (dz2 @ cols.T).reshape(self.weight.shape)
        self.grad_bias[...] = dz2.sum(axis=1)
        dcols = self.weight.reshape(f, -1).T @ dz2
        dxp = _col2im(dcols, shape_p, oh, ow, self.stride)
        dx = dxp[:, :, pt:pt + h, pl:pl + w]
        return dx[0] if single else dx


class ConvTranspose2dLayer(Layer):
    """Adjoint of a same-padded 3x3 convolution; upsamples by ``stride``.

    ``weight`` has shape ``(in_channels, filters, 3, 3)``.
    """

    def __init__(self, in_channels, filters, stride=2, activation="relu", rng=None):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.in_channels, self.filters, self.stride = in_channels, filters, stride
        self.activation = activation
        shape = (in_channels, filters, 3, 3)
        self.weight = (he_uniform(rng, shape, in_channels * 9) if rng is not None
                       else np.zeros(shape))
        self.bias = np.zeros(filters)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def output_shape(self, h, w):
        return self.filters, h * self.stride, w * self.stride

    def _geometry(self, h, w):
        big_h, big_w = h * self.stride, w * self.stride
        _, pt, pb = same_padding(big_h, self.stride)
        _, pl, pr = same_padding(big_w, self.stride)
        return big_h, big_w, pt, pb, pl, pr

    def _run(self, x):
        x, single = _as_batch(x, self.in_channels, "conv_transpose2d")
        n, c, h, w = x.shape
        big_h, big_w, pt, pb, pl, pr = self._geometry(h, w)
        x2 = x.transpose(1, 0, 2, 3).reshape(c, -1)
        dcols = self.weight.reshape(c, -1).T @ x2
        shape_p = (n, self.filters, big_h + pt + pb, big_w + pl + pr)
        yp = _col2im(dcols, shape_p, h, w, self.stride)
        z = yp[:, :, pt:pt + big_h, pl:pl + big_w] + self.bias[None, :, None, None]
        a = _activate(z, self.activation)
        return a, single, (x2, (n, h, w), z, a, single)

    def apply(self, x):
        a, single, _ = self._run(x)
        return a[0] if single else a

    def forward(self, x):
        a, single, self._cache = self._run(x)
        return a[0] if single else a

    def backward(self, dout):
        self._require_cache()
        x2, (n, h, w), z, a, single = self._cache
        dout = np.asarray(dout, dtype=np.float64)
        if single:
            dout = dout[None]
        dz = _activation_grad(z, a, self.activation, dout)
        big_h, big_w, pt, pb, pl, pr = self._geometry(h, w)
        dzp = np.pad(dz, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        cols = _im2col(dzp, h, w, self.stride)
        c = self.in_channels
        self.grad_weight[...] = (x2 @ cols.T).reshape(self.weight.shape)
        self.grad_bias[...] = dz.sum(axis=(0, 2, 3))
        dx = (self.weight.reshape(c, -1) @ cols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        return dx[0] if single else dx


class Flatten(Layer):
    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x.reshape(x.shape[0], -1)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        self._require_cache()
        return np.asarray(dout).reshape(self._cache)


class Reshape(Layer):
    """Reshape ``(N, prod(shape))`` to ``(N, *shape)``."""

    def __init__(self, shape):
        self.shape = tuple(shape)
        self._cache = None

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x.reshape((x.shape[0],) + self.shape)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._cache = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dout):
        self._require_cache()
        return np.asarray(dout).reshape(self._cache)


class Sequential:
    """A fixed stack of layers."""

    def __init__(self, layers):
        self.layers = list(layers)

    def apply(self, x):
        for layer in self.layers:
            x = layer.apply(x)
        return x

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]

    def parameter_count(self):
        return int(sum(p.size for p in self.params()))


def backward(network, loss_gradient):
    """Backpropagate ``loss_gradient`` and return one gradient per parameter."""
    network.backward(loss_gradient)
    return [g.copy() for g in network.grads()]
