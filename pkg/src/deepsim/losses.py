"""Loss terms and their weighted combination.

Sums over the batch are taken as per-sample means so that loss weights do
not depend on batch size; within a sample, squared errors are summed over
all elements.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import Network, comparator_features
from .tensor import DomainError, ShapeError, Tensor, as_tensor, no_grad

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_feat: float = 0.0
    lambda_adv: float = 0.0
    lambda_img: float = 1.0
    kl: float = 0.0

    def __post_init__(self):
        values = (self.lambda_feat, self.lambda_adv, self.lambda_img, self.kl)
        if any(v < 0 or not np.isfinite(v) for v in values):
            raise ValueError(f"loss weights must be finite and non-negative: {self}")
        if max(self.lambda_feat, self.lambda_adv, self.lambda_img) <= 0:
            raise ValueError("at least one of lambda_feat, lambda_adv, lambda_img must be positive")


@dataclass
class LossReport:
    total: float
    feat: float = 0.0
    adv: float = 0.0
    img: float = 0.0
    discr: float = 0.0
    kl: float = 0.0
    gate_ratio: float = float("nan")
    discriminator_updated: bool = False

    def as_dict(self) -> dict:
        return asdict(self)

    def recombined(self, w: LossWeights) -> float:
        return w.lambda_feat * self.feat + w.lambda_adv * self.adv + w.lambda_img * self.img + w.kl * self.kl


def _check_pair(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _per_sample_sq(diff: Tensor) -> Tensor:
    return diff.square().flatten().sum(axis=1).mean() if diff.ndim > 1 else diff.square().sum()


def loss_img(gen: Tensor, target: Tensor) -> Tensor:
    """Squared Euclidean distance per sample, averaged over the batch."""
    gen, target = as_tensor(gen), as_tensor(target)
    _check_pair(gen, target, "loss_img")
    return _per_sample_sq(gen - target)


def loss_l1(gen: Tensor, target: Tensor) -> Tensor:
    gen, target = as_tensor(gen), as_tensor(target)
    _check_pair(gen, target, "loss_l1")
    diff = (gen - target).abs()
    return diff.flatten().sum(axis=1).mean() if diff.ndim > 1 else diff.sum()


def loss_feat(gen_img: Tensor, target_img: Tensor, comp: Network, tap: str) -> Tensor:
    """Squared distance between comparator features; the target branch is constant."""
    _check_pair(gen_img, target_img, "loss_feat")
    with no_grad():
        target_features = comparator_features(comp, target_img, tap)
    return _per_sample_sq(comparator_features(comp, gen_img, tap) - target_features.detach())


def _safe_log(p: Tensor, strict: bool, what: str) -> Tensor:
    if strict:
        if np.any(p.data <= 0) or np.any(p.data > 1):
            raise DomainError(f"{what}: probability outside (0, 1]")
        return p.log()
    return p.clip(PROB_FLOOR, 1.0).log()


def loss_discr(d_real: Tensor, d_fake: Tensor, strict: bool = False) -> Tensor:
    """-mean[log D(y) + log(1 - D(G(x)))] over the batch.

    Outside ``strict`` mode, probabilities are floored at 1e-12 inside the logs.
    """
    d_real, d_fake = as_tensor(d_real), as_tensor(d_fake)
    real_term = _safe_log(d_real, strict, "loss_discr(real)")
    fake_term = _safe_log(1.0 - d_fake, strict, "loss_discr(fake)")
    return -(real_term + fake_term).mean()


def loss_adv(d_fake: Tensor, strict: bool = False) -> Tensor:
    return -_safe_log(as_tensor(d_fake), strict, "loss_adv").mean()


def composite_loss(weights: LossWeights, feat, adv, img):
    """Weighted sum of the feature, adversarial and image terms.

    Terms whose weight is zero are left out entirely (they may be undefined).
    """
    total = 0.0
    for w, term in ((weights.lambda_feat, feat), (weights.lambda_adv, adv), (weights.lambda_img, img)):
        if w != 0:
            total = term * w + total
    return total


def reparameterize(mu: Tensor, sigma: Tensor, eps: Tensor) -> Tensor:
    """z = mu + sigma * eps."""
    mu, sigma, eps = as_tensor(mu), as_tensor(sigma), as_tensor(eps)
    if not (mu.shape == sigma.shape == eps.shape):
        raise ShapeError(f"reparameterize: shapes {mu.shape}, {sigma.shape}, {eps.shape} differ")
    return mu + sigma * eps


def kl_loss(mu: Tensor, sigma: Tensor) -> Tensor:
    """0.5 * (|mu|^2 + |sigma|^2 - sum(log sigma^2)), per sample, averaged over the batch.

    No -D/2 constant is subtracted, so the minimum (mu = 0, sigma = 1) is D/2.
    """
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    _check_pair(mu, sigma, "kl_loss")
    if np.any(sigma.data <= 0):
        raise DomainError(f"kl_loss: sigma must be positive ({sigma.label})")
    per_element = mu.square() + sigma.square() - sigma.square().log()
    return 0.5 * (per_element.sum(axis=1).mean() if per_element.ndim > 1 else per_element.sum())


def kl_loss_log_sigma(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """:func:`kl_loss` written in terms of log(sigma), for numerically safe training."""
    _check_pair(mu, log_sigma, "kl_loss")
    per_element = mu.square() + (2.0 * log_sigma).exp() - 2.0 * log_sigma
    return 0.5 * (per_element.sum(axis=1).mean() if per_element.ndim > 1 else per_element.sum())
