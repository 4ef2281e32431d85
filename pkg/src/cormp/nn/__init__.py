"""Small float64 neural-network substrate: layers, losses, Adam, checkpoints."""
from .checkpoint import FORMAT_VERSION, load_params, save_params
from .layers import (Conv2dLayer, ConvTranspose2dLayer, DenseLayer, Flatten, Reshape,
                     Sequential, backward, same_padding, sigmoid, softplus)
from .losses import (SIGMA_FLOOR, gaussian_nll, gaussian_nll_grad, head_nll, mse, mse_grad,
                     split_head)
from .optim import Adam

__all__ = [
    "Adam", "Conv2dLayer", "ConvTranspose2dLayer", "DenseLayer", "FORMAT_VERSION", "Flatten",
    "Reshape", "SIGMA_FLOOR", "Sequential", "backward", "gaussian_nll", "gaussian_nll_grad",
    "head_nll", "load_params", "mse", "mse_grad", "same_padding", "save_params", "sigmoid",
    "softplus",
]
