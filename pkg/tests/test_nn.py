from fractions import Fraction

import numpy as np
import pytest

from deepsim import nn
from deepsim.tensor import ShapeError, Tensor


def test_solve_padding_puts_odd_unit_after():
    # up-convolution: a 4x4 kernel on a doubled map keeps the doubled size
    assert nn.solve_padding(16, 4, 1, 16) == (1, 2)
    assert nn.solve_padding(32, 5, 2, 16) == (1, 2)
    assert nn.solve_padding(8, 3, 1, 8) == (1, 1)


def test_scaled_widths_round_up():
    spec = nn.autoencoder_enc(32, scale=Fraction(1, 8))
    widths = [rl.out_shape[0] for rl in nn.resolve(spec)]
    assert widths == [4, 4, 8, 8, 16, 16, 8, 8]


def test_min_width_floors_scaled_layers_only():
    spec = nn.with_min_width(nn.autoencoder_dec(32, scale=Fraction(1, 8)), 4)
    widths = [rl.out_shape[0] for rl in nn.resolve(spec)]
    assert widths == [8, 16, 8, 8, 4, 4, 4, 3]
    with pytest.raises(ValueError):
        nn.with_min_width(spec, 0)


def test_tap_index_includes_trailing_pool():
    spec = nn.comparator_tiny(32)
    assert spec.tap_index("input") == -1
    assert spec.layer_names()[spec.tap_index("conv2")] == "pool2"
    assert spec.layer_names()[spec.tap_index("fc4")] == "fc4"


def test_unknown_tap_lists_available():
    with pytest.raises(KeyError, match="conv3"):
        nn.comparator_tiny(32).tap_index("conv9")


def test_bad_spec_names_the_layer():
    spec = nn.NetworkSpec("toy", (3, 4, 4), (
        nn.LayerSpec("a", "conv", 2, 3, 1),
        nn.LayerSpec("b", "conv", 2, 9, 1, padding="valid"),
    ))
    with pytest.raises(nn.SpecError, match="'b'"):
        nn.resolve(spec)


def test_build_is_deterministic_per_seed():
    spec = nn.comparator_tiny(16, scale=Fraction(1, 8))
    a = nn.build(spec, np.random.default_rng(5))
    b = nn.build(spec, np.random.default_rng(5))
    c = nn.build(spec, np.random.default_rng(6))
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params)


def test_glorot_bound_and_zero_bias():
    spec = nn.comparator_tiny(16, scale=Fraction(1, 8))
    net = nn.build(spec, np.random.default_rng(0), init="glorot_uniform")
    w = net.params["conv1.weight"].data  # 8 x 3 x 5 x 5
    bound = np.sqrt(6.0 / (3 * 25 + 8 * 25))
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.9 * bound
    assert not net.params["conv1.bias"].data.any()


def test_he_bound_accounts_for_upsampling():
    spec = nn.autoencoder_dec(32, scale=Fraction(1, 8))
    net = nn.build(spec, np.random.default_rng(0), init="he_uniform")
    w = net.params["uconv3.weight"].data  # 8 x 16 x 4 x 4
    gain = np.sqrt(2.0 / (1.0 + nn.ALPHA**2))
    bound = gain * np.sqrt(3.0 / (16 * 16 / 4))
    assert bound * 0.9 < np.abs(w).max() <= bound


def test_unknown_init():
    with pytest.raises(ValueError, match="init"):
        nn.build(nn.comparator_tiny(16), np.random.default_rng(0), init="orthogonal")


def test_forward_shapes_follow_resolution():
    spec = nn.discriminator(32, scale=Fraction(1, 8))
    net = nn.build(spec, np.random.default_rng(0)).eval()
    out, acts = net.forward(Tensor(np.zeros((2, 3, 32, 32))), capture=True)
    assert out.shape == (2, 2)
    for rl in net.resolved:
        assert acts[rl.spec.name].shape[1:] == rl.out_shape
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0)


def test_forward_rejects_wrong_input():
    net = nn.build(nn.comparator_tiny(16), np.random.default_rng(0))
    with pytest.raises(ShapeError, match="comparator_tiny"):
        net(Tensor(np.zeros((1, 3, 8, 8))))


def test_side_input_is_merged_after_pool():
    spec = nn.discriminator(32, scale=Fraction(1, 8), side_input=10)
    names = [rl.spec.name for rl in nn.resolve(spec)]
    i = names.index("fc1")
    # 256/8 pooled channels + 512/8 from the side branch
    assert nn.resolve(spec)[i].in_shape == (32 + 64,)
    net = nn.build(spec, np.random.default_rng(0)).eval()
    with pytest.raises(ShapeError, match="side input"):
        net(Tensor(np.zeros((1, 3, 32, 32))))
    out = net(Tensor(np.zeros((1, 3, 32, 32))), side=Tensor(np.ones((1, 10))))
    assert out.shape == (1, 2)


def test_dropout_depends_on_mode():
    spec = nn.discriminator(32, scale=Fraction(1, 8))
    net = nn.build(spec, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).random((2, 3, 32, 32)))
    a = net(x, rng=np.random.default_rng(2)).data
    b = net(x, rng=np.random.default_rng(3)).data
    assert not np.allclose(a, b)
    net.eval()
    np.testing.assert_array_equal(net(x).data, net(x).data)


def test_freeze_turns_off_gradients():
    net = nn.build(nn.comparator_tiny(16), np.random.default_rng(0)).freeze()
    assert not any(p.requires_grad for p in net.parameters())
    assert net.mode == "eval"


def test_identity_comparator():
    x = Tensor(np.arange(24.0).reshape(2, 3, 2, 2))
    np.testing.assert_array_equal(nn.comparator_features(None, x, "input").data, x.data.reshape(2, 12))
    with pytest.raises(KeyError):
        nn.comparator_features(None, x, "conv1")
    assert nn.feature_map(None, x, "input") is x


def test_feature_map_keeps_spatial_layout():
    net = nn.build(nn.comparator_tiny(16, scale=Fraction(1, 8)), np.random.default_rng(0))
    fmap = nn.feature_map(net, Tensor(np.zeros((1, 3, 16, 16))), "conv2")
    assert fmap.shape == (1, 16, 4, 4)
    flat = nn.comparator_features(net, Tensor(np.zeros((1, 3, 16, 16))), "conv2")
    assert flat.shape == (1, 256)


def test_generator_tail_needs_power_of_two():
    with pytest.raises(nn.SpecError):
        nn.generator_fc(16, 48)


def test_generator_fc_output_sizes():
    for size in (8, 16, 32):
        spec = nn.generator_fc(16, size, scale=Fraction(1, 16))
        assert nn.resolve(spec)[-1].out_shape == (3, size, size)


def test_generator_conv_from_same_size_uses_plain_conv():
    spec = nn.generator_conv(3, 32, 32, scale=Fraction(1, 8))
    assert spec.layers[-1].name == "conv_out"
    assert nn.resolve(spec)[-1].out_shape == (3, 32, 32)
