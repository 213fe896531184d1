import math
import warnings
from fractions import Fraction

import numpy as np
import pytest

from deepsim import nn
from deepsim.losses import LossWeights
from deepsim.models import FeatureGenerator
from deepsim.optim import (
    AdamState,
    GateWarning,
    NonFiniteGradient,
    TrainState,
    TrainingDiverged,
    adam_step,
    discriminator_loss,
    frozen,
    gate_discriminator,
    generator_loss,
    train_step,
)
from deepsim.rng import Streams
from deepsim.tensor import Tensor, grad


def adam_reference(theta, grads, lr=2e-4, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-by-scalar Adam with bias correction."""
    theta = list(theta)
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for t, g in enumerate(grads, start=1):
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mhat = m[i] / (1 - b1**t)
            vhat = v[i] / (1 - b2**t)
            theta[i] -= lr * mhat / (math.sqrt(vhat) + eps)
    return theta


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    start = rng.standard_normal(4)
    seq = [rng.standard_normal(4) for _ in range(25)]
    p = {"w": Tensor(start.copy(), requires_grad=True)}
    state = AdamState(lr=1e-2)
    for g in seq:
        adam_step(p, {"w": g}, state)
    np.testing.assert_allclose(p["w"].data, adam_reference(start, seq, lr=1e-2), rtol=1e-12, atol=1e-14)
    assert state.step == 25


def test_first_adam_step_has_size_lr():
    # bias correction makes the first update lr * sign(g) whatever the gradient scale
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    adam_step(p, {"w": np.array([1e-3, -50.0, 7.0])}, AdamState(lr=0.1))
    np.testing.assert_allclose(p["w"].data, [-0.1, 0.1, -0.1], rtol=1e-4)


def test_non_finite_gradient_changes_nothing():
    p = {"a": Tensor(np.ones(2), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
    state = AdamState()
    with pytest.raises(NonFiniteGradient) as info:
        adam_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state, batch_index=7)
    assert info.value.name == "b" and info.value.batch_index == 7
    assert state.step == 0 and not state.m
    np.testing.assert_array_equal(p["a"].data, np.ones(2))


def test_gate_rule():
    assert gate_discriminator(0.1, 1.0)
    assert not gate_discriminator(0.0999, 1.0)
    assert gate_discriminator(5.0, 1.0)


def test_gate_warns_on_nonpositive_adversarial_loss():
    with pytest.warns(GateWarning):
        assert gate_discriminator(0.5, 0.0)


def test_unfreezing_does_not_reach_recorded_graphs():
    w = Tensor(np.ones(2), requires_grad=True)
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with frozen_tensor(w):
        y = (w * x).sum()
    gw, gx = grad(y, [w, x])
    assert not gw.any()
    np.testing.assert_array_equal(gx, [1.0, 1.0])


class frozen_tensor:
    def __init__(self, t):
        self.t = t

    def __enter__(self):
        self.t.requires_grad = False

    def __exit__(self, *exc):
        self.t.requires_grad = True


def test_frozen_restores_flags():
    net = nn.build(nn.comparator_tiny(8, scale=Fraction(1, 16)), np.random.default_rng(0))
    with frozen(net, None):
        assert not any(p.requires_grad for p in net.parameters())
    assert all(p.requires_grad for p in net.parameters())


def toy_state(seed=0, side=False):
    rng = np.random.default_rng(seed)
    gen = FeatureGenerator(nn.build(nn.generator_fc(4, 8, scale=Fraction(1, 256)), rng))
    disc = nn.build(nn.discriminator(8, scale=Fraction(1, 32), side_input=4 if side else None), rng)
    return TrainState(gen, AdamState(lr=1e-3), disc, AdamState(lr=1e-3), Streams(seed))


def toy_batch(seed=1):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((4, 4))), Tensor(rng.random((4, 3, 8, 8)))


@pytest.mark.parametrize("side", [False, True])
def test_losses_are_isolated(side):
    state = toy_state(side=side)
    x, y = toy_batch()
    weights = LossWeights(0.0, 1.0, 1.0)
    theta = list(state.generator.params.values())
    phi = list(state.discriminator.params.values())
    l_discr, _ = discriminator_loss(state, x, y)
    assert all(not g.any() for g in grad(l_discr, theta))
    assert any(g.any() for g in grad(l_discr, phi))
    total, _ = generator_loss(state, x, y, weights)
    assert all(not g.any() for g in grad(total, phi))
    assert any(g.any() for g in grad(total, theta))


def test_train_step_counts_and_reports():
    state = toy_state()
    weights = LossWeights(0.0, 1.0, 1.0)
    reports = [train_step(state, toy_batch(i), weights) for i in range(5)]
    assert state.iteration == 5
    assert state.disc_updates == sum(r.discriminator_updated for r in reports)
    for r in reports:
        assert r.total == pytest.approx(r.recombined(weights), rel=1e-6)
        # the ratio uses the adversarial loss seen by the discriminator pass
        assert r.gate_ratio > 0 and math.isfinite(r.gate_ratio)


def test_discriminator_skipped_without_adversarial_term():
    state = toy_state()
    before = {k: p.data.copy() for k, p in state.discriminator.params.items()}
    r = train_step(state, toy_batch(), LossWeights(0.0, 0.0, 1.0))
    assert r.discr == 0.0 and r.adv == 0.0 and not r.discriminator_updated
    for k, p in state.discriminator.params.items():
        np.testing.assert_array_equal(p.data, before[k])


def test_divergence_raises_with_report():
    state = toy_state()
    x, y = toy_batch()
    y = Tensor(np.full(y.shape, np.inf))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(TrainingDiverged) as info:
            train_step(state, (x, y), LossWeights(0.0, 0.0, 1.0))
    assert info.value.iteration == 0
    assert not math.isfinite(info.value.report.total)
