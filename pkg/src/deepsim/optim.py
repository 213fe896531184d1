"""Adam, the discriminator gate and one adversarial training step."""

from __future__ import annotations

import contextlib
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .losses import LossReport, LossWeights, composite_loss, loss_adv, loss_discr, loss_feat, loss_img, loss_l1
from .nn import Network
from .rng import Streams
from .tensor import Tensor, grad, no_grad

logger = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str, batch_index: int | None):
        super().__init__(f"non-finite gradient for parameter {name!r} at batch {batch_index}")
        self.name = name
        self.batch_index = batch_index


class TrainingDiverged(FloatingPointError):
    def __init__(self, report: LossReport, iteration: int):
        super().__init__(f"non-finite total loss at iteration {iteration}: {report}")
        self.report = report
        self.iteration = iteration


class GateWarning(UserWarning):
    pass


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              batch_index: int | None = None) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    All gradients are checked before anything is modified, so a non-finite
    gradient leaves parameters and moments untouched.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name, batch_index)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_hat)).astype(p.dtype, copy=False)
    return state


def gate_discriminator(loss_discr: float, loss_adv: float, threshold: float = 0.1) -> bool:
    """Whether to update the discriminator this step.

    Updates pause while L_discr / L_adv is strictly below ``threshold``.
    """
    if not loss_adv > 0:
        warnings.warn(f"gate: L_adv = {loss_adv} is not positive; updating discriminator", GateWarning)
        return True
    return loss_discr / loss_adv >= threshold


class Generator(Protocol):
    params: dict[str, Tensor]

    def forward(self, x: Tensor, streams: Streams) -> tuple[Tensor, Tensor | None]:
        """Generated image and, for variational models, the KL term."""


@dataclass
class TrainState:
    generator: Generator
    gen_opt: AdamState
    discriminator: Network | None = None
    disc_opt: AdamState = field(default_factory=AdamState)
    streams: Streams = field(default_factory=lambda: Streams(0))
    gate_threshold: float = 0.1
    discriminator_active: bool = True
    train_discriminator: bool = True
    image_loss: str = "se"
    iteration: int = 0
    disc_updates: int = 0


@contextlib.contextmanager
def frozen(*networks):
    """Treat the networks' parameters as constants for the duration."""
    saved = []
    for net in networks:
        if net is None:
            continue
        for p in net.parameters():
            saved.append((p, p.requires_grad))
            p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


def _real_prob(disc: Network, image: Tensor, side: Tensor | None, streams: Streams) -> Tensor:
    return disc(image, side=side, rng=streams["dropout"])[:, 1]


def _side(state: TrainState, x: Tensor) -> Tensor | None:
    disc = state.discriminator
    if disc is not None and disc.spec.side_input is not None:
        return x
    return None


def uses_discriminator(state: TrainState, weights: LossWeights) -> bool:
    return state.discriminator is not None and state.train_discriminator and weights.lambda_adv > 0


def discriminator_loss(state: TrainState, x: Tensor, y: Tensor) -> tuple[Tensor, float]:
    """L_discr on real targets and detached generations, plus the matching L_adv value."""
    with no_grad():
        fake, _ = state.generator.forward(x, state.streams)
    side = _side(state, x)
    d_real = _real_prob(state.discriminator, y, side, state.streams)
    d_fake = _real_prob(state.discriminator, fake.detach(), side, state.streams)
    return loss_discr(d_real, d_fake), float(loss_adv(d_fake.detach()).data)


def generator_loss(state: TrainState, x: Tensor, y: Tensor, weights: LossWeights,
                   comp: Network | None = None, tap: str | None = None) -> tuple[Tensor, LossReport]:
    """The weighted generator objective, with the discriminator held constant."""
    fake, kl = state.generator.forward(x, state.streams)
    feat = adv = img = None
    if weights.lambda_img > 0:
        img = loss_l1(fake, y) if state.image_loss == "l1" else loss_img(fake, y)
    if weights.lambda_feat > 0:
        if comp is None or tap is None:
            raise ValueError("lambda_feat > 0 needs a comparator and a tap")
        feat = loss_feat(fake, y, comp, tap)
    if weights.lambda_adv > 0:
        with frozen(state.discriminator):
            adv = loss_adv(_real_prob(state.discriminator, fake, _side(state, x), state.streams))
    total = composite_loss(weights, feat, adv, img)
    if kl is not None and weights.kl > 0:
        total = total + weights.kl * kl
    report = LossReport(
        total=float(total.data),
        feat=float(feat.data) if feat is not None else 0.0,
        adv=float(adv.data) if adv is not None else 0.0,
        img=float(img.data) if img is not None else 0.0,
        kl=float(kl.data) if kl is not None and weights.kl > 0 else 0.0,
    )
    return total, report


def train_step(state: TrainState, batch: tuple[Tensor, Tensor], weights: LossWeights,
               comp: Network | None = None, tap: str | None = None) -> LossReport:
    """One iteration: a gated discriminator update, then a generator update.

    Each update runs on its own fresh forward pass. ``state`` is modified in place.
    """
    x, y = batch
    discr_value, ratio, updated = 0.0, math.nan, False
    if uses_discriminator(state, weights):
        l_discr, l_adv = discriminator_loss(state, x, y)
        discr_value = float(l_discr.data)
        ratio = discr_value / l_adv if l_adv > 0 else math.inf
        updated = gate_discriminator(discr_value, l_adv, state.gate_threshold)
        if updated:
            params = state.discriminator.params
            grads = dict(zip(params, grad(l_discr, list(params.values()))))
            adam_step(params, grads, state.disc_opt, state.iteration)
            state.disc_updates += 1
    state.discriminator_active = updated

    total, report = generator_loss(state, x, y, weights, comp, tap)
    report.discr = discr_value
    report.gate_ratio = ratio
    report.discriminator_updated = updated
    if not math.isfinite(report.total):
        raise TrainingDiverged(report, state.iteration)
    params = state.generator.params
    grads = dict(zip(params, grad(total, list(params.values()))))
    adam_step(params, grads, state.gen_opt, state.iteration)
    state.iteration += 1
    return report
