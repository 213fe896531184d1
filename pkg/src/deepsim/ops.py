"""Differentiable network operations on NCHW tensors."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Function, ShapeError, Tensor, as_tensor

Padding = tuple[int, int, int, int]  # top, bottom, left, right


def conv_output_size(size: int, kernel: int, stride: int, pad_total: int) -> int:
    return (size + pad_total - kernel) // stride + 1


class Conv2d(Function):
    """Cross-correlation of NCHW input with OIHW weights, plus a bias per O."""

    def forward(self, x, w, b, stride=1, pad=(0, 0, 0, 0)):
        n, cin, h, wd = x.shape
        cout, wcin, kh, kw = w.shape
        if cin != wcin:
            raise ShapeError(
                f"conv2d: input has {cin} channels but weight expects {wcin} "
                f"(input {x.shape}, weight {w.shape})"
            )
        top, bottom, left, right = pad
        if kh > h + top + bottom or kw > wd + left + right:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {x.shape}")
        if stride < 1:
            raise ShapeError("conv2d: stride must be >= 1")
        xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right))) if any(pad) else x
        ho = conv_output_size(h, kh, stride, top + bottom)
        wo = conv_output_size(wd, kw, stride, left + right)
        self.cols = _im2col(xp, kh, kw, stride, ho, wo)
        self.geometry = (xp.shape, ho, wo, stride, pad)
        out = w.reshape(cout, -1) @ self.cols + b[:, None]
        return np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(self, g):
        x, w, b = self.inputs
        padded_shape, ho, wo, stride, (top, bottom, left, right) = self.geometry
        cout, cin, kh, kw = w.shape
        n = g.shape[0]
        need_x, need_w, need_b = self.needs
        dw = None
        if need_w:
            gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
            dw = (gt @ self.cols.T).reshape(w.shape)
        db = g.sum(axis=(0, 2, 3)) if need_b else None
        dx = None
        if need_x:
            # gradient of a correlation is a full correlation of the (dilated) output
            # gradient with the flipped kernel
            hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            gd = g
            if stride > 1:
                gd = np.zeros((n, cout, hspan, wspan), dtype=g.dtype)
                gd[:, :, ::stride, ::stride] = g
            gd = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            covered = _correlate(gd, wf)
            hp, wp = padded_shape[2], padded_shape[3]
            if covered.shape[2:] != (hp, wp):
                # rows/columns the strided windows never reached get zero gradient
                covered = np.pad(covered, ((0, 0), (0, 0), (0, hp - covered.shape[2]), (0, wp - covered.shape[3])))
            dx = covered[:, :, top : hp - bottom, left : wp - right]
        return dx, dw, db


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Columns of shape (Cin * kH * kW, N * Ho * Wo), one kernel offset at a time."""
    n, cin = xp.shape[:2]
    cols = np.empty((cin, kh, kw, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + hspan : stride, j : j + wspan : stride]
    return cols.reshape(cin * kh * kw, n * ho * wo)


def _correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1 unpadded cross-correlation of plain arrays."""
    n, _, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    out = w.reshape(cout, -1) @ _im2col(x, kh, kw, 1, ho, wo)
    return np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: Padding = (0, 0, 0, 0)) -> Tensor:
    return Conv2d.apply(x, weight, bias, stride=stride, pad=tuple(pad))


class BedOfNails(Function):
    def forward(self, x, factor=2):
        self.factor = factor
        n, c, h, w = x.shape
        out = np.zeros((n, c, h * factor, w * factor), dtype=x.dtype)
        out[:, :, ::factor, ::factor] = x
        return out

    def backward(self, g):
        f = self.factor
        return (np.ascontiguousarray(g[:, :, ::f, ::f]),)


def upsample_bed_of_nails(x: Tensor, factor: int = 2) -> Tensor:
    """Copy each pixel to the top-left cell of a ``factor`` x ``factor`` block of zeros."""
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    return BedOfNails.apply(x, factor=factor)


class LeakyReLU(Function):
    def forward(self, x, alpha=0.3):
        self.slope = np.where(x > 0, 1.0, alpha).astype(x.dtype)
        return x * self.slope

    def backward(self, g):
        return (g * self.slope,)


def leaky_relu(x: Tensor, alpha: float = 0.3) -> Tensor:
    return LeakyReLU.apply(x, alpha=alpha)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        x = x.flatten()
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected: input width {x.shape[1]} != weight rows {weight.shape[0]}")
    return x @ weight + bias


class MaxPool(Function):
    def forward(self, x, kernel=2, stride=2):
        n, c, h, w = x.shape
        if kernel > h or kernel > w:
            raise ShapeError(f"max pool kernel {kernel} exceeds input {x.shape}")
        ho = conv_output_size(h, kernel, stride, 0)
        wo = conv_output_size(w, kernel, stride, 0)
        windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
        windows = windows[:, :, :ho, :wo].reshape(n, c, ho, wo, kernel * kernel)
        # np.argmax returns the first maximum, i.e. row-major tie-breaking
        self.arg = windows.argmax(axis=-1)
        self.kernel, self.stride = kernel, stride
        return np.take_along_axis(windows, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        x = self.inputs[0]
        k, s = self.kernel, self.stride
        ho, wo = g.shape[2], g.shape[3]
        dx = np.zeros_like(x.data)
        hspan, wspan = s * (ho - 1) + 1, s * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                hit = self.arg == i * k + j
                dx[:, :, i : i + hspan : s, j : j + wspan : s] += np.where(hit, g, 0.0)
        return (dx,)


class GlobalAvgPool(Function):
    def forward(self, x):
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, g):
        x = self.inputs[0]
        h, w = x.shape[2], x.shape[3]
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)


def pool(x: Tensor, kind: str = "max", kernel: int = 2, stride: int = 2) -> Tensor:
    """Max pooling, or global average pooling to a 1x1 map (kernel/stride ignored)."""
    if kind == "max":
        return MaxPool.apply(x, kernel=kernel, stride=stride)
    if kind == "global_avg":
        return GlobalAvgPool.apply(x)
    raise ValueError(f"unknown pool kind {kind!r}")


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= p
    return x * (keep / (1.0 - p)).astype(x.dtype)


class Softmax(Function):
    def forward(self, x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, g):
        s = self.out
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def softmax(x: Tensor) -> Tensor:
    return Softmax.apply(x)


def softmax2(logits: Tensor) -> Tensor:
    logits = as_tensor(logits)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ShapeError(f"softmax2 expects (N, 2) logits, got {logits.shape}")
    return Softmax.apply(logits)
