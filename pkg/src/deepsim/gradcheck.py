"""Central finite-difference checks for every differentiable operation and loss.

Each case builds a scalar from float64 inputs; the analytic gradient of every
input is compared with ``(f(x + h) - f(x - h)) / 2h`` element by element.
The reported error is ``|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)``
per input, and a case passes when every input is below the tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import losses, nn, ops
from .tensor import Tensor, grad

H = 1e-5
TOLERANCE = 1e-4
SHAPES_PER_OP = 5


@dataclass
class CheckResult:
    op: str
    shape: str
    error: float
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.op:<22} {self.shape:<34} rel_err={self.error:.2e}"


def numeric_grad(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], index: int, h: float = H):
    x = arrays[index]
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(arrays)
        flat[k] = orig - h
        fm = f(arrays)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check(build: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray], wrt: list[int] | None = None,
          h: float = H) -> float:
    """Worst relative error over the inputs listed in ``wrt`` (default: all)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = list(range(len(arrays))) if wrt is None else wrt

    def f(arrs):
        return float(build([Tensor(a) for a in arrs]).data)

    tensors = [Tensor(a.copy(), requires_grad=i in wrt) for i, a in enumerate(arrays)]
    analytic = grad(build(tensors), [tensors[i] for i in wrt])
    return max(relative_error(g, numeric_grad(f, arrays, i, h)) for g, i in zip(analytic, wrt))


def _projected(op: Callable[..., Tensor], probe: np.ndarray):
    """Scalar <op(...), probe>, so the check covers the whole Jacobian."""

    def build(ts):
        out = op(*ts)
        return (out * Tensor(probe)).sum()

    return build


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _distinct(rng, shape):
    """Values spaced far apart relative to H, so max pooling has no near-ties."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.01 + rng.uniform(-1e-3, 1e-3, size=shape))


# each case factory returns (label, build, arrays, wrt)
def _conv_cases(rng):
    configs = [
        ((2, 3, 7, 7), 4, 3, 1, (1, 1, 1, 1)),
        ((1, 2, 9, 8), 3, 5, 2, (2, 2, 2, 2)),
        ((2, 1, 6, 6), 2, 4, 2, (1, 2, 1, 2)),
        ((1, 4, 5, 7), 2, 1, 1, (0, 0, 0, 0)),
        ((3, 2, 11, 11), 3, 5, 4, (0, 0, 0, 0)),
        ((1, 3, 8, 8), 2, 3, 3, (0, 1, 0, 1)),
    ]
    for shape, cout, k, s, pad in configs:
        x = rng.standard_normal(shape)
        w = rng.standard_normal((cout, shape[1], k, k)) * 0.5
        b = rng.standard_normal(cout)
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), s, pad)
        build = _projected(lambda x, w, b, s=s, pad=pad: ops.conv2d(x, w, b, s, pad), rng.standard_normal(out.shape))
        yield f"x{shape} k{k} s{s} pad{pad}", build, [x, w, b], None


def _uconv_cases(rng):
    configs = [((1, 2, 3, 3), 3, 4, (1, 2, 1, 2)), ((2, 3, 4, 4), 2, 3, (1, 1, 1, 1)),
               ((1, 1, 2, 5), 2, 5, (2, 2, 2, 2)), ((2, 2, 4, 2), 1, 4, (1, 2, 1, 2)),
               ((1, 4, 3, 2), 3, 3, (1, 1, 1, 1))]
    for shape, cout, k, pad in configs:
        x = rng.standard_normal(shape)
        w = rng.standard_normal((cout, shape[1], k, k)) * 0.5
        b = rng.standard_normal(cout)

        def op(x, w, b, pad=pad):
            return ops.conv2d(ops.upsample_bed_of_nails(x, 2), w, b, 1, pad)

        out = op(Tensor(x), Tensor(w), Tensor(b))
        yield f"x{shape} k{k} pad{pad}", _projected(op, rng.standard_normal(out.shape)), [x, w, b], None


def _fc_cases(rng):
    for shape, dout in [((2, 5), 3), ((1, 7), 4), ((3, 2, 2, 2), 5), ((4, 3), 1), ((2, 3, 3, 1), 2)]:
        x = rng.standard_normal(shape)
        din = int(np.prod(shape[1:]))
        w = rng.standard_normal((din, dout))
        b = rng.standard_normal(dout)
        yield f"x{shape} out{dout}", _projected(ops.fully_connected, rng.standard_normal((shape[0], dout))), [x, w, b], None


def _maxpool_cases(rng):
    for shape, k, s in [((1, 2, 4, 4), 2, 2), ((2, 1, 6, 5), 3, 2), ((1, 3, 5, 5), 2, 1),
                        ((2, 2, 8, 8), 4, 4), ((1, 1, 7, 7), 3, 3)]:
        x = _distinct(rng, shape)
        out = ops.pool(Tensor(x), "max", k, s)
        op = lambda x, k=k, s=s: ops.pool(x, "max", k, s)  # noqa: E731
        yield f"x{shape} k{k} s{s}", _projected(op, rng.standard_normal(out.shape)), [x], None


def _avgpool_cases(rng):
    for shape in [(1, 2, 4, 4), (2, 3, 1, 1), (1, 1, 5, 3), (3, 2, 2, 6), (2, 4, 3, 3)]:
        x = rng.standard_normal(shape)
        op = lambda x: ops.pool(x, "global_avg")  # noqa: E731
        yield f"x{shape}", _projected(op, rng.standard_normal(shape[:2] + (1, 1))), [x], None


def _elementwise_cases(op):
    def cases(rng):
        for shape in [(3,), (2, 4), (2, 3, 4, 4), (1, 1, 5, 2), (4, 6)]:
            x = _away_from_zero(rng, shape)
            yield f"x{shape}", _projected(op, rng.standard_normal(shape)), [x], None

    return cases


def _softmax2_cases(rng):
    for n in [1, 2, 3, 5, 8]:
        x = rng.standard_normal((n, 2)) * 2
        yield f"x({n}, 2)", _projected(ops.softmax2, rng.standard_normal((n, 2))), [x], None


def _pair_loss_cases(loss, away=False):
    def cases(rng):
        for shape in [(2, 5), (1, 3, 2, 2), (3, 2, 4, 4), (4, 7), (2, 1, 3, 5)]:
            a = rng.standard_normal(shape)
            b = a + (_away_from_zero(rng, shape) if away else rng.standard_normal(shape))
            yield f"x{shape}", lambda ts: loss(ts[0], ts[1]), [a, b], None

    return cases


def _prob(rng, n):
    return rng.uniform(0.05, 0.95, size=n)


def _discr_cases(rng):
    for n in [1, 2, 4, 7, 16]:
        yield f"n={n}", lambda ts: losses.loss_discr(ts[0], ts[1]), [_prob(rng, n), _prob(rng, n)], None


def _adv_cases(rng):
    for n in [1, 2, 4, 7, 16]:
        yield f"n={n}", lambda ts: losses.loss_adv(ts[0]), [_prob(rng, n)], None


def _feat_cases(rng):
    for size, scale in [(8, 1), (16, 1), (8, 2), (16, 2), (24, 1)]:
        spec = nn.comparator_tiny(size, scale=Fraction(1, 16 * scale))
        comp = nn.build(spec, rng, dtype=np.float64)
        for tap in ("conv1", "pool2"):
            a = rng.standard_normal((2, 3, size, size))
            b = rng.standard_normal((2, 3, size, size))
            # only the generated image carries a gradient
            yield f"x(2, 3, {size}, {size}) tap={tap}", \
                lambda ts, comp=comp, tap=tap: losses.loss_feat(ts[0], ts[1], comp, tap), [a, b], [0]


def _kl_cases(rng):
    for shape in [(1, 1), (2, 3), (4, 2), (1, 8), (3, 5)]:
        mu = rng.standard_normal(shape)
        sigma = rng.uniform(0.3, 2.0, size=shape)
        yield f"x{shape}", lambda ts: losses.kl_loss(ts[0], ts[1]), [mu, sigma], None


def _kl_log_cases(rng):
    for shape in [(1, 1), (2, 3), (4, 2), (1, 8), (3, 5)]:
        yield f"x{shape}", lambda ts: losses.kl_loss_log_sigma(ts[0], ts[1]), \
            [rng.standard_normal(shape), rng.standard_normal(shape) * 0.5], None


def _reparam_cases(rng):
    for shape in [(1, 2), (2, 3), (4, 1), (3, 4), (2, 8)]:
        eps = rng.standard_normal(shape)
        probe = rng.standard_normal(shape)

        def build(ts, eps=eps, probe=probe):
            z = losses.reparameterize(ts[0], ts[1].exp(), Tensor(eps))
            return (z * Tensor(probe)).sum() + (z.square()).sum()

        yield f"x{shape}", build, [rng.standard_normal(shape), rng.standard_normal(shape) * 0.5], None


def _dropout_eval_cases(rng):
    for shape in [(3,), (2, 4), (2, 3, 4, 4), (1, 1, 5, 2), (4, 6)]:
        op = lambda x: ops.dropout(x, 0.5, train=False)  # noqa: E731
        yield f"x{shape}", _projected(op, rng.standard_normal(shape)), [rng.standard_normal(shape)], None


def _dropout_train_cases(rng):
    for shape in [(3,), (2, 4), (2, 3, 4, 4), (1, 1, 5, 2), (4, 6)]:
        seed = int(rng.integers(2**31))
        op = lambda x, seed=seed: ops.dropout(x, 0.5, train=True, rng=np.random.default_rng(seed))  # noqa: E731
        yield f"x{shape}", _projected(op, rng.standard_normal(shape)), [rng.standard_normal(shape)], None


CASES = {
    "conv2d": _conv_cases,
    "uconv": _uconv_cases,
    "fc": _fc_cases,
    "max_pool": _maxpool_cases,
    "global_avg_pool": _avgpool_cases,
    "leaky_relu": _elementwise_cases(lambda x: ops.leaky_relu(x, 0.3)),
    "dropout_eval": _dropout_eval_cases,
    "dropout_train": _dropout_train_cases,
    "softmax2": _softmax2_cases,
    "loss_img": _pair_loss_cases(losses.loss_img),
    "loss_l1": _pair_loss_cases(losses.loss_l1, away=True),
    "loss_feat": _feat_cases,
    "loss_discr": _discr_cases,
    "loss_adv": _adv_cases,
    "kl": _kl_cases,
    "kl_log_sigma": _kl_log_cases,
    "reparameterize": _reparam_cases,
}


def run_case(name: str, seed: int = 0, tolerance: float = TOLERANCE) -> list[CheckResult]:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    results = []
    for label, build, arrays, wrt in CASES[name](rng):
        err = check(build, arrays, wrt)
        results.append(CheckResult(name, label, err, err < tolerance))
    return results


def run_suite(seed: int = 0, tolerance: float = TOLERANCE, names=None, echo=None) -> list[CheckResult]:
    results = []
    start = time.perf_counter()
    for name in names or CASES:
        for r in run_case(name, seed, tolerance):
            results.append(r)
            if echo:
                echo(r.line())
    if echo:
        failed = sum(not r.passed for r in results)
        echo(f"{len(results) - failed}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s")
    return results
