"""Convolutional autoencoder producing the 8-d image context.

Encoder: five 3x3 convolutions (filters 32, 32, 64, 64, 64; strides
2, 1, 2, 1, 2) then a dense layer to the latent.  The decoder mirrors it
with stride-2 transposed convolutions and ends in a sigmoid.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractViolation, DimensionError
from .nn import (Adam, Conv2dLayer, ConvTranspose2dLayer, DenseLayer, Flatten, Reshape,
                 Sequential, load_params, mse, mse_grad, save_params)
from .trajectory import ContextVector

IMAGE_SIZE = 64
LATENT_DIM = 8
FILTERS = (32, 32, 64, 64, 64)
STRIDES = (2, 1, 2, 1, 2)


class AeModel:
    def __init__(self, rng=None, image_size=IMAGE_SIZE, latent_dim=LATENT_DIM,
                 filters=FILTERS, strides=STRIDES):
        self.image_size, self.latent_dim = image_size, latent_dim
        self.filters, self.strides = tuple(filters), tuple(strides)
        enc, channels, size = [], 1, image_size
        for f, s in zip(filters, strides):
            enc.append(Conv2dLayer(channels, f, s, "relu", rng))
            channels, size = f, -(-size // s)
        self.bottleneck = (channels, size, size)
        flat = channels * size * size
        enc += [Flatten(), DenseLayer(flat, latent_dim, "linear", rng)]
        dec = [DenseLayer(latent_dim, flat, "relu", rng), Reshape(self.bottleneck)]
        mirror = list(zip(filters, strides))[::-1]
        out_channels = [f for f, _ in mirror[1:]] + [1]
        for (_, s), f_out in zip(mirror, out_channels):
            layer = ConvTranspose2dLayer if s == 2 else Conv2dLayer
            dec.append(layer(channels, f_out, s, "relu", rng))
            channels = f_out
        dec[-1].activation = "sigmoid"
        self.encoder = Sequential(enc)
        self.decoder = Sequential(dec)

    def params(self):
        return self.encoder.params() + self.decoder.params()

    def grads(self):
        return self.encoder.grads() + self.decoder.grads()

    @property
    def parameter_count(self):
        return self.encoder.parameter_count() + self.decoder.parameter_count()

    def architecture(self):
        return {"kind": "conv_ae", "image_size": self.image_size, "latent_dim": self.latent_dim,
                "filters": list(self.filters), "strides": list(self.strides)}

    def _batch(self, images):
        x = np.asarray(images)
        if x.dtype == np.uint8:
            x = x / 255.0
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (self.image_size, self.image_size):
            raise DimensionError(
                f"expected {self.image_size}x{self.image_size} images, got shape {x.shape}")
        return np.clip(x, 0.0, 1.0)[:, None], single

    def encode(self, images):
        """Latent vectors, ``(8,)`` for one image or ``(N, 8)`` for a batch."""
        x, single = self._batch(images)
        z = self.encoder.apply(x)
        return z[0] if single else z

    def encode_context(self, image):
        return ContextVector(self.encode(image), "autoencoder_latent")

    def reconstruct(self, images):
        x, single = self._batch(images)
        out = self.decoder.apply(self.encoder.apply(x))[:, 0]
        return out[0] if single else out

    def save(self, path, seed=None, metadata=None):
        save_params(path, self.params(), self.architecture(), seed=seed, metadata=metadata)

    @classmethod
    def load(cls, path):
        header, params = load_params(path)
        arch = dict(header["architecture"])
        if arch.pop("kind", None) != "conv_ae":
            raise DimensionError(f"{path} does not hold an autoencoder checkpoint")
        model = cls(**arch)
        for dst, src in zip(model.params(), params):
            if dst.shape != src.shape:
                raise DimensionError(f"{path}: parameter {src.shape} does not match {dst.shape}")
            dst[...] = src
        return model, header


def split_images(n, rng, test_fraction=0.1):
    """Shuffled train/test index split; 400 images give 360/40."""
    if n < 2:
        raise ContractViolation("at least two images are needed to train the autoencoder")
    order = rng.permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def init_output_bias(model, images):
    """Set the sigmoid head's bias to the logit of the mean pixel value.

    Scenes are mostly dark background; from a zero bias the first Adam steps
    push every output logit far negative, where the sigmoid gradient vanishes.
    """
    p = float(np.clip(np.mean(images), 1e-3, 1.0 - 1e-3))
    model.decoder.layers[-1].bias[:] = np.log(p / (1.0 - p))


def train_ae(model, images, rng, epochs=70, lr=3e-4, batch_size=16, callback=None,
             output_bias=True):
    """Minimise per-pixel MSE reconstruction with Adam.

    With ``output_bias`` the decoder head is first initialised from the
    training images (see :func:`init_output_bias`).  Returns a list of
    ``{"epoch", "train_mse", "test_mse"}`` dicts, where ``train_mse`` is the
    mean of the epoch's minibatch losses.
    """
    x, _ = model._batch(images)
    if x.shape[0] == 0:
        raise ContractViolation("empty image set")
    train_idx, test_idx = split_images(x.shape[0], rng)
    if output_bias:
        init_output_bias(model, x[train_idx])
    adam = Adam(model.params(), lr=lr)
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, order.size, batch_size):
            batch = x[order[start:start + batch_size]]
            recon = model.decoder.forward(model.encoder.forward(batch))
            loss = mse(recon, batch)
            dz = model.decoder.backward(mse_grad(recon, batch))
            model.encoder.backward(dz)
            adam.step(model.grads())
            total += loss * batch.shape[0]
        test = mse(model.decoder.apply(model.encoder.apply(x[test_idx])), x[test_idx])
        record = {"epoch": epoch, "train_mse": total / train_idx.size, "test_mse": test}
        history.append(record)
        if callback is not None:
            callback(record)
    return history
