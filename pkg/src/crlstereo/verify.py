"""Registry of finite-difference gradient checks for every differentiable operator."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .stereo_ops import bilinear_downsample, correlation1d, error_map, masked_l1, warp
from .tensor import ConvSpec, Tensor, grad_check_detail

DEFAULT_TOL = 1e-4
DEFAULT_EPS = 1e-3


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, lo=0.1, hi=1.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, shape)


def _conv2d(rng):
    spec = ConvSpec(3, 2, 1, 2, 3)
    ins = [_t(rng.standard_normal((1, 2, 5, 5))), _t(rng.standard_normal((3, 2, 3, 3))), _t(rng.standard_normal(3))]
    return (lambda x, w, b: T.conv2d(x, w, b, spec)), ins


def _transposed_conv2d(rng):
    spec = ConvSpec(4, 2, 1, 2, 3)
    ins = [_t(rng.standard_normal((1, 2, 3, 4))), _t(rng.standard_normal((2, 3, 4, 4))), _t(rng.standard_normal(3))]
    return (lambda x, w, b: T.transposed_conv2d(x, w, b, spec)), ins


def _leaky_relu(rng):
    return (lambda x: T.leaky_relu(x, 0.1)), [_t(_away_from_zero(rng, (1, 2, 4, 4)))]


def _concat(rng):
    ins = [_t(rng.standard_normal((1, c, 3, 4))) for c in (3, 1, 2)]
    return (lambda a, b, c: T.concat_channels([a, b, c])), ins


def _add(rng):
    ins = [_t(rng.standard_normal((1, 2, 3, 4))), _t(rng.standard_normal((1, 2, 3, 4)))]
    return T.add, ins


def _warp(rng):
    # fractional parts in (0.1, 0.4) keep sampling positions off integer kinks
    disp = rng.integers(0, 4, (1, 1, 4, 10)) + rng.uniform(0.1, 0.4, (1, 1, 4, 10))
    ins = [_t(rng.random((1, 3, 4, 10))), _t(disp)]
    return (lambda img, d: warp(img, d, -1)), ins


def _downsample(rng):
    return (lambda x: bilinear_downsample(x, 4, 0.25)), [_t(rng.standard_normal((1, 2, 8, 8)))]


def _correlation(rng):
    ins = [_t(rng.standard_normal((1, 3, 4, 9))), _t(rng.standard_normal((1, 3, 4, 9)))]
    return (lambda a, b: correlation1d(a, b, 4).data), ins


def _masked_l1(rng):
    gt = rng.standard_normal((1, 1, 5, 6))
    pred = _t(gt + _away_from_zero(rng, gt.shape))
    mask = rng.random(gt.shape) > 0.3
    return (lambda p: masked_l1(p, Tensor(gt), mask)), [pred]


def _error_map(rng):
    a = rng.random((1, 3, 4, 5))
    ins = [_t(a), _t(a + _away_from_zero(rng, a.shape))]
    return error_map, ins


OPS: dict[str, Callable] = {
    "conv2d": _conv2d,
    "transposed_conv2d": _transposed_conv2d,
    "leaky_relu": _leaky_relu,
    "concat": _concat,
    "add": _add,
    "warp": _warp,
    "bilinear_downsample": _downsample,
    "correlation1d": _correlation,
    "masked_l1": _masked_l1,
    "error_map": _error_map,
}


def run_gradchecks(ops=None, seed: int = 0, eps: float = DEFAULT_EPS) -> list[dict]:
    """Run every requested check; one result dict per operator."""
    names = list(OPS) if ops is None else list(ops)
    unknown = [n for n in names if n not in OPS]
    if unknown:
        raise KeyError(f"unknown operators: {', '.join(unknown)}")
    results = []
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        fn, inputs = OPS[name](rng)
        err, which, coord = grad_check_detail(fn, inputs, eps=eps, seed=seed)
        results.append({"op": name, "max_rel_error": err, "input": which, "coord": coord})
    return results
