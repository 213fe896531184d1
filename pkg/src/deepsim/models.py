"""Generators assembled from one or more networks."""

from __future__ import annotations

import numpy as np

from . import nn
from .losses import kl_loss_log_sigma, reparameterize
from .rng import Streams
from .tensor import Tensor


class Model:
    """Named networks sharing one flat parameter namespace (``net/param``)."""

    def __init__(self, networks: dict[str, nn.Network]):
        self.networks = networks
        self.params = {f"{n}/{k}": p for n, net in networks.items() for k, p in net.params.items()}

    def forward(self, x: Tensor, streams: Streams) -> tuple[Tensor, Tensor | None]:
        raise NotImplementedError

    def reconstruct(self, x: Tensor) -> Tensor:
        """Deterministic output used for evaluation."""
        out, _ = self.forward(x, None)
        return out


class ConvAutoencoder(Model):
    def __init__(self, encoder: nn.Network, decoder: nn.Network):
        super().__init__({"encoder": encoder, "decoder": decoder})

    def forward(self, x, streams):
        return self.networks["decoder"](self.networks["encoder"](x)), None


class LatentAutoencoder(Model):
    """Conv encoder, a linear map to a latent vector and an up-convolutional decoder."""

    def __init__(self, encoder: nn.Network, mu_head: nn.Network, decoder: nn.Network):
        super().__init__({"encoder": encoder, "mu_head": mu_head, "decoder": decoder})

    def forward(self, x, streams):
        n = self.networks
        return n["decoder"](n["mu_head"](n["encoder"](x))), None


class VariationalAutoencoder(Model):
    """The encoder predicts mu and log sigma; z = mu + sigma * eps feeds the decoder.

    With ``sigma_zero`` the sigma head is ignored and z = mu exactly, which
    turns the model into :class:`LatentAutoencoder`.
    """

    def __init__(self, encoder, mu_head, log_sigma_head, decoder, sigma_zero: bool = False):
        super().__init__({"encoder": encoder, "mu_head": mu_head, "log_sigma_head": log_sigma_head,
                          "decoder": decoder})
        self.sigma_zero = sigma_zero

    @property
    def latent_dim(self) -> int:
        return self.networks["decoder"].spec.input_shape[0]

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.networks["encoder"](x)
        return self.networks["mu_head"](h), self.networks["log_sigma_head"](h)

    def forward(self, x, streams):
        n = self.networks
        h = n["encoder"](x)
        mu = n["mu_head"](h)
        if streams is None:
            return n["decoder"](mu), None
        eps = Tensor(streams["eps"].standard_normal(mu.shape).astype(mu.dtype))
        if self.sigma_zero:
            z = reparameterize(mu, Tensor(np.zeros(mu.shape, dtype=mu.dtype)), eps)
            return n["decoder"](z), None
        log_sigma = n["log_sigma_head"](h)
        z = reparameterize(mu, log_sigma.exp(), eps)
        return n["decoder"](z), kl_loss_log_sigma(mu, log_sigma)

    def sample(self, count: int, rng: np.random.Generator, dtype=np.float64) -> Tensor:
        z = Tensor(rng.standard_normal((count, self.latent_dim)).astype(dtype))
        return self.networks["decoder"](z)


class FeatureGenerator(Model):
    """Maps feature vectors or maps back to images."""

    def __init__(self, generator: nn.Network):
        super().__init__({"generator": generator})

    def forward(self, x, streams):
        return self.networks["generator"](x), None
