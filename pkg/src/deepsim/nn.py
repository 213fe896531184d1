"""Declarative layer lists, shape resolution, parameters and forward passes."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, concat

ALPHA = 0.3
# layers folded into the preceding tap ("pool5", "relu6" style)
TRAILING = ("pool", "dropout", "activation")


class SpecError(ValueError):
    """A network spec whose layer shapes do not chain."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | uconv | fc | pool | reshape | dropout | activation | softmax
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    activation: str = "lrelu"  # lrelu | linear
    padding: str = "same"  # same | valid
    pool_kind: str = "max"
    p: float = 0.5
    size: int = 0  # reshape target spatial extent
    fixed_width: bool = False  # width is set by the task, not by the scale
    table_in: int | None = None  # expected input/output sizes, checked when scale == 1
    table_out: int | None = None

    @property
    def direction(self) -> str:
        if self.kind == "uconv":
            return "up"
        if self.kind == "conv" and self.stride > 1:
            return "down"
        return "none"


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple[int, ...]  # (C, H, W) or (F,)
    layers: tuple[LayerSpec, ...]
    scale: Fraction = Fraction(1)
    side_input: int | None = None
    side_layers: tuple[LayerSpec, ...] = ()
    merge_after: str | None = None
    min_width: int = 1  # floor for scaled (non-fixed) layer widths

    def width(self, layer: LayerSpec) -> int:
        if layer.fixed_width:
            return layer.out_channels
        return max(self.min_width, math.ceil(layer.out_channels * self.scale))

    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def tap_index(self, tap: str) -> int:
        """Index of the last layer that belongs to ``tap``; -1 means the raw input."""
        if tap == "input":
            return -1
        names = self.layer_names()
        if tap not in names:
            raise KeyError(f"unknown tap {tap!r}; available taps: {['input'] + names}")
        i = names.index(tap)
        while i + 1 < len(self.layers) and self.layers[i + 1].kind in TRAILING:
            i += 1
        return i


@dataclass(frozen=True)
class ResolvedLayer:
    spec: LayerSpec
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    pad: tuple[int, int, int, int] = (0, 0, 0, 0)
    weight_shape: tuple[int, ...] | None = None

    @property
    def in_size(self) -> int | None:
        return self.in_shape[1] if len(self.in_shape) == 3 else None

    @property
    def out_size(self) -> int | None:
        return self.out_shape[1] if len(self.out_shape) == 3 else None


def solve_padding(size: int, kernel: int, stride: int, out: int) -> tuple[int, int]:
    """Padding (before, after) so ``floor((size + total - kernel) / stride) + 1 == out``."""
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _resolve_chain(spec: NetworkSpec, layers, shape) -> list[ResolvedLayer]:
    resolved = []
    for layer in layers:
        try:
            out_shape, pad, wshape = _layer_shapes(spec, layer, shape)
        except ShapeError as exc:
            raise SpecError(f"layer {layer.name!r}: {exc}") from None
        if spec.scale == 1 and len(shape) == 3 and layer.table_in is not None and shape[1] != layer.table_in:
            raise SpecError(f"layer {layer.name!r}: input size {shape[1]} != table size {layer.table_in}")
        if spec.scale == 1 and len(out_shape) == 3 and layer.table_out is not None and out_shape[1] != layer.table_out:
            raise SpecError(f"layer {layer.name!r}: output size {out_shape[1]} != table size {layer.table_out}")
        resolved.append(ResolvedLayer(layer, tuple(shape), tuple(out_shape), pad, wshape))
        shape = out_shape
        if layer.name == spec.merge_after:
            shape = (int(np.prod(shape)) + _side_width(spec),)
    return resolved


def _side_width(spec: NetworkSpec) -> int:
    if spec.side_input is None:
        raise SpecError(f"{spec.name}: merge_after set without a side input")
    side = _resolve_chain(replace(spec, merge_after=None), spec.side_layers, (spec.side_input,))
    return side[-1].out_shape[0] if side else spec.side_input


def _layer_shapes(spec: NetworkSpec, layer: LayerSpec, shape):
    kind = layer.kind
    if kind in ("conv", "uconv"):
        if len(shape) != 3:
            raise ShapeError(f"{kind} needs a C x H x W input, got {shape}")
        cin, size, _ = shape
        k = layer.kernel
        if kind == "uconv":
            size, stride, out = size * 2, 1, size * 2
        else:
            stride = layer.stride
            if layer.padding == "valid":
                out = (size - k) // stride + 1
            else:
                out = -(-size // stride)
        if out < 1:
            raise ShapeError(f"kernel {k} / stride {stride} leaves no output from size {size}")
        pad = (0, 0) if layer.padding == "valid" and kind == "conv" else solve_padding(size, k, stride, out)
        if (size + sum(pad) - k) // stride + 1 != out or k > size + sum(pad):
            raise ShapeError(f"no padding reaches output {out} from size {size}")
        cout = spec.width(layer)
        return (cout, out, out), (pad[0], pad[1], pad[0], pad[1]), (cout, cin, k, k)
    if kind == "fc":
        fan_in = int(np.prod(shape))
        cout = spec.width(layer)
        return (cout,), (0, 0, 0, 0), (fan_in, cout)
    if kind == "reshape":
        c = spec.width(layer)
        target = (c, layer.size, layer.size)
        if int(np.prod(shape)) != int(np.prod(target)):
            raise ShapeError(f"cannot reshape {shape} into {target}")
        return target, (0, 0, 0, 0), None
    if kind == "pool":
        if len(shape) != 3:
            raise ShapeError(f"pool needs a C x H x W input, got {shape}")
        c, size, _ = shape
        if layer.pool_kind == "global_avg":
            return (c, 1, 1), (0, 0, 0, 0), None
        if layer.kernel > size:
            raise ShapeError(f"pool kernel {layer.kernel} exceeds size {size}")
        out = (size - layer.kernel) // layer.stride + 1
        return (c, out, out), (0, 0, 0, 0), None
    if kind in ("dropout", "activation", "softmax"):
        return tuple(shape), (0, 0, 0, 0), None
    raise ShapeError(f"unknown layer kind {kind!r}")


def resolve(spec: NetworkSpec) -> list[ResolvedLayer]:
    """Per-layer shapes and paddings; raises :class:`SpecError` on the first bad layer."""
    for layer in spec.layers:
        if layer.kind == "uconv" and layer.stride not in (1, 2):
            raise SpecError(f"layer {layer.name!r}: up-convolutions always upsample by 2")
    return _resolve_chain(spec, spec.layers, tuple(spec.input_shape))


def resolve_side(spec: NetworkSpec) -> list[ResolvedLayer]:
    if spec.side_input is None:
        return []
    return _resolve_chain(replace(spec, merge_after=None), spec.side_layers, (spec.side_input,))


class Network:
    """Parameters for one :class:`NetworkSpec` plus its forward pass."""

    def __init__(self, spec: NetworkSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.resolved = resolve(spec)
        self.side_resolved = resolve_side(spec)
        self.params = params
        self.mode = "train"

    def train(self) -> Network:
        self.mode = "train"
        return self

    def eval(self) -> Network:
        self.mode = "eval"
        return self

    def freeze(self) -> Network:
        for p in self.params.values():
            p.requires_grad = False
        return self.eval()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def __call__(self, x: Tensor, side: Tensor | None = None, rng=None) -> Tensor:
        out, _ = self.forward(x, side=side, rng=rng)
        return out

    def forward(self, x: Tensor, side: Tensor | None = None, rng=None, upto: int | None = None,
                capture: bool = False) -> tuple[Tensor, dict[str, Tensor]]:
        """Run the layers (optionally stopping after index ``upto``).

        Returns the final activation and, when ``capture`` is set, every named
        intermediate activation.
        """
        expected = tuple(self.spec.input_shape)
        if len(expected) == 1 and x.ndim > 2:
            x = x.flatten()
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"{self.spec.name}: input shape {x.shape[1:]} != expected {expected}")
        acts: dict[str, Tensor] = {"input": x} if capture else {}
        side_h = None
        if self.spec.side_input is not None:
            if side is None:
                raise ShapeError(f"{self.spec.name}: side input required")
            side_h = side.flatten() if side.ndim != 2 else side
            for rl in self.side_resolved:
                side_h = self._apply(rl, side_h, rng)
        h = x
        for i, rl in enumerate(self.resolved):
            h = self._apply(rl, h, rng)
            if rl.spec.name == self.spec.merge_after:
                h = concat([h.flatten(), side_h], axis=1)
            if capture:
                acts[rl.spec.name] = h
            if upto is not None and i >= upto:
                break
        return h, acts

    def _apply(self, rl: ResolvedLayer, h: Tensor, rng) -> Tensor:
        layer = rl.spec
        kind = layer.kind
        if kind == "conv":
            h = ops.conv2d(h, self.params[f"{layer.name}.weight"], self.params[f"{layer.name}.bias"],
                           stride=layer.stride, pad=rl.pad)
        elif kind == "uconv":
            h = ops.upsample_bed_of_nails(h, 2)
            h = ops.conv2d(h, self.params[f"{layer.name}.weight"], self.params[f"{layer.name}.bias"],
                           stride=1, pad=rl.pad)
        elif kind == "fc":
            h = ops.fully_connected(h, self.params[f"{layer.name}.weight"], self.params[f"{layer.name}.bias"])
        elif kind == "reshape":
            return h.reshape((h.shape[0],) + rl.out_shape)
        elif kind == "pool":
            return ops.pool(h, layer.pool_kind, layer.kernel, layer.stride)
        elif kind == "dropout":
            return ops.dropout(h, layer.p, self.mode == "train", rng)
        elif kind == "softmax":
            return ops.softmax(h)
        if layer.activation == "lrelu":
            h = ops.leaky_relu(h, ALPHA)
        return h


INIT_SCHEMES = ("glorot_uniform", "he_uniform")


def build(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float64, init: str = "glorot_uniform") -> Network:
    """Allocate parameters; biases start at 0.

    ``glorot_uniform``: weights ~ U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
    ``he_uniform``: a = gain * sqrt(3 / fan_in), with the leaky ReLU gain
    sqrt(2 / (1 + alpha^2)) (1 for linear layers). For up-convolutions only a
    quarter of the inputs under a kernel are nonzero, so fan_in is divided by 4.
    """
    if init not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {init!r}; choose from {', '.join(INIT_SCHEMES)}")
    params: dict[str, Tensor] = {}
    for rl in resolve_side(spec) + resolve(spec):
        if rl.weight_shape is None:
            continue
        name = rl.spec.name
        ws = rl.weight_shape
        if len(ws) == 4:
            fan_in, fan_out = ws[1] * ws[2] * ws[3], ws[0] * ws[2] * ws[3]
            nbias = ws[0]
        else:
            fan_in, fan_out = ws
            nbias = ws[1]
        if init == "glorot_uniform":
            a = math.sqrt(6.0 / (fan_in + fan_out))
        else:
            gain = math.sqrt(2.0 / (1.0 + ALPHA**2)) if rl.spec.activation == "lrelu" else 1.0
            effective = fan_in / 4 if rl.spec.kind == "uconv" else fan_in
            a = gain * math.sqrt(3.0 / effective)
        w = rng.uniform(-a, a, size=ws).astype(dtype)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{spec.name}.{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(nbias, dtype=dtype), requires_grad=True,
                                        name=f"{spec.name}.{name}.bias")
    return Network(spec, params)


def feature_map(net: Network | None, image: Tensor, tap: str) -> Tensor:
    """Activation at ``tap`` keeping its spatial layout; ``net=None`` is the identity."""
    if net is None or net.spec.tap_index(tap) < 0:
        return image
    out, _ = net.forward(image, upto=net.spec.tap_index(tap))
    return out


def comparator_features(comp: Network | None, image: Tensor, tap: str) -> Tensor:
    """Flattened activation at ``tap``, including the pooling/nonlinearity that follows it.

    ``comp=None`` is the identity comparator, whose only tap is ``"input"``.
    """
    if comp is None:
        if tap != "input":
            raise KeyError(f"unknown tap {tap!r}; the identity comparator only has 'input'")
        return image.flatten()
    idx = comp.spec.tap_index(tap)
    if idx < 0:
        return image.flatten()
    mode = comp.mode
    comp.eval()
    try:
        out, _ = comp.forward(image, upto=idx)
    finally:
        comp.mode = mode
    return out.flatten()


# ---------------------------------------------------------------------------
# presets


def _scale(scale) -> Fraction:
    s = Fraction(scale).limit_denominator(1 << 16)
    if s <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return s


def with_min_width(spec: NetworkSpec, min_width: int) -> NetworkSpec:
    """The same topology with scaled widths floored at ``min_width`` instead of 1."""
    if min_width < 1:
        raise ValueError(f"min_width must be >= 1, got {min_width}")
    return replace(spec, min_width=min_width)


def discriminator(input_size: int = 64, channels: int = 3, scale=1, side_input: int | None = None,
                  dropout: float = 0.5) -> NetworkSpec:
    """Five convolutions, global average pooling, two fc layers and a 2-way softmax.

    The table's layer sizes use unpadded convolutions on 64 x 64 inputs; below
    that size the chain would run out of pixels, so 'same' padding is used.
    """
    padding = "valid" if input_size >= 64 else "same"
    at_table = input_size == 64
    rows = [(32, 7, 2, 64, 29), (64, 5, 1, 29, 25), (128, 3, 2, 25, 12), (256, 3, 1, 12, 10), (256, 3, 2, 10, 4)]
    layers = [
        LayerSpec(f"conv{i}", "conv", c, k, s, padding=padding,
                  table_in=tin if at_table else None, table_out=tout if at_table else None)
        for i, (c, k, s, tin, tout) in enumerate(rows, start=1)
    ]
    layers += [
        LayerSpec("pool", "pool", 256, 4, 4, pool_kind="global_avg", table_in=4 if at_table else None,
                  table_out=1 if at_table else None),
        LayerSpec("drop0", "dropout", p=dropout),
        LayerSpec("fc1", "fc", 512),
        LayerSpec("drop1", "dropout", p=dropout),
        LayerSpec("fc2", "fc", 2, activation="linear", fixed_width=True),
        LayerSpec("softmax", "softmax"),
    ]
    side_layers = ()
    merge_after = None
    if side_input is not None:
        side_layers = (LayerSpec("side_fc1", "fc", 1024), LayerSpec("side_fc2", "fc", 512))
        merge_after = "pool"
    return NetworkSpec("discriminator", (channels, input_size, input_size), tuple(layers), _scale(scale),
                       side_input=side_input, side_layers=side_layers, merge_after=merge_after)


AE_ENCODER_ROWS = [  # in, out_channels, kernel, stride
    (64, 32, 5, 2), (32, 32, 3, 1), (32, 64, 5, 2), (16, 64, 3, 1),
    (16, 128, 3, 2), (8, 128, 3, 1), (8, 64, 3, 1), (8, 8, 3, 1),
]
AE_DECODER_ROWS = [  # in, out_channels, kernel, up (True = x2 up-convolution)
    (8, 64, 3, False), (8, 128, 3, False), (8, 64, 4, True), (16, 64, 3, False),
    (16, 32, 4, True), (32, 32, 3, False), (32, 16, 4, True), (64, 3, 3, False),
]


def autoencoder_enc(input_size: int = 64, channels: int = 3, scale=1, code_channels: int = 8) -> NetworkSpec:
    """Encoder down to a code map at 1/8 of the input resolution; the code layer is linear."""
    at_table = input_size == 64
    layers = []
    for i, (tin, c, k, s) in enumerate(AE_ENCODER_ROWS, start=1):
        last = i == len(AE_ENCODER_ROWS)
        layers.append(LayerSpec(
            f"conv{i}", "conv", code_channels if last else c, k, s,
            activation="linear" if last else "lrelu", fixed_width=last,
            table_in=tin if at_table else None,
            table_out=(tin // s) if at_table else None,
        ))
    return NetworkSpec("autoencoder_enc", (channels, input_size, input_size), tuple(layers), _scale(scale))


def autoencoder_dec(output_size: int = 64, channels: int = 3, scale=1, code_channels: int = 8) -> NetworkSpec:
    at_table = output_size == 64
    layers = []
    for i, (tin, c, k, up) in enumerate(AE_DECODER_ROWS, start=1):
        last = i == len(AE_DECODER_ROWS)
        layers.append(LayerSpec(
            f"{'uconv' if up else 'conv'}{i}", "uconv" if up else "conv", channels if last else c, k,
            2 if up else 1, activation="linear" if last else "lrelu", fixed_width=last,
            table_in=tin if at_table else None,
            table_out=(tin * 2 if up else tin) if at_table else None,
        ))
    size = output_size // 8
    return NetworkSpec("autoencoder_dec", (code_channels, size, size), tuple(layers), _scale(scale))


# up-convolution stages of the feature-inversion generator after its 4x4 start
GENERATOR_STAGES = [
    [("uconv", 256, 4), ("conv", 512, 3)],
    [("uconv", 256, 4), ("conv", 256, 3)],
    [("uconv", 128, 4), ("conv", 128, 3)],
    [("uconv", 64, 4)],
    [("uconv", 32, 4)],
]


def _generator_tail(start_size: int, output_size: int, channels: int) -> list[LayerSpec]:
    steps = int(round(math.log2(output_size / start_size)))
    if start_size * 2 ** steps != output_size or steps < 0:
        raise SpecError(f"output size {output_size} is not {start_size} times a power of two")
    full = steps == len(GENERATOR_STAGES) + 1 and start_size == 4
    layers: list[LayerSpec] = []
    size = start_size
    for stage in GENERATOR_STAGES[: max(steps - 1, 0)]:
        for kind, c, k in stage:
            n = sum(1 for l in layers if l.kind == kind) + 1
            out = size * 2 if kind == "uconv" else size
            layers.append(LayerSpec(f"{kind}{n}", kind, c, k, 2 if kind == "uconv" else 1,
                                    table_in=size if full else None, table_out=out if full else None))
            size = out
    if steps == 0:
        layers.append(LayerSpec("conv_out", "conv", channels, 3, 1, activation="linear", fixed_width=True))
    else:
        layers.append(LayerSpec("uconv_out", "uconv", channels, 4, 2, activation="linear", fixed_width=True,
                                table_in=size if full else None, table_out=size * 2 if full else None))
    return layers


def generator_fc(input_dim: int = 4096, output_size: int = 256, channels: int = 3, scale=1) -> NetworkSpec:
    """Three fc layers, a reshape to 4 x 4 and up-convolutions to ``output_size``."""
    layers = [LayerSpec(f"fc{i}", "fc", 4096) for i in (1, 2, 3)]
    layers.append(LayerSpec("reshape", "reshape", 256, size=4, table_in=None, table_out=4))
    layers += _generator_tail(4, output_size, channels)
    return NetworkSpec("generator_fc", (input_dim,), tuple(layers), _scale(scale))


def generator_conv(in_channels: int, in_size: int, output_size: int, channels: int = 3, scale=1) -> NetworkSpec:
    """Inversion generator for spatial feature maps: the fc layers become 3 x 3 convolutions."""
    layers = [LayerSpec(f"conv_in{i}", "conv", 256, 3, 1) for i in (1, 2, 3)]
    layers += _generator_tail(in_size, output_size, channels)
    return NetworkSpec("generator_conv", (in_channels, in_size, in_size), tuple(layers), _scale(scale))


def comparator_tiny(input_size: int = 32, channels: int = 3, scale=1) -> NetworkSpec:
    """Three conv layers and one fc layer, each conv followed by 2 x 2 max pooling."""
    layers = (
        LayerSpec("conv1", "conv", 64, 5, 1),
        LayerSpec("pool1", "pool", kernel=2, stride=2),
        LayerSpec("conv2", "conv", 128, 5, 1),
        LayerSpec("pool2", "pool", kernel=2, stride=2),
        LayerSpec("conv3", "conv", 256, 3, 1),
        LayerSpec("pool3", "pool", kernel=2, stride=2),
        LayerSpec("fc4", "fc", 512),
    )
    return NetworkSpec("comparator_tiny", (channels, input_size, input_size), layers, _scale(scale))


def preset_specs(scale=1, image_size: int = 64, feature_dim: int = 4096) -> dict[str, NetworkSpec]:
    """The six named architectures at one scale.

    ``generator_fc`` is built for the table's 256-pixel output when
    ``image_size`` is 64 (its native setting) and for ``image_size`` otherwise.
    """
    gen_out = 256 if image_size == 64 else image_size
    return {
        "discriminator": discriminator(image_size, scale=scale),
        "autoencoder_enc": autoencoder_enc(image_size, scale=scale),
        "autoencoder_dec": autoencoder_dec(image_size, scale=scale),
        "generator_fc": generator_fc(feature_dim, gen_out, scale=scale),
        "generator_conv": generator_conv(256, 4 if image_size == 64 else image_size // 8, gen_out, scale=scale),
        "comparator_tiny": comparator_tiny(image_size, scale=scale),
    }
