"""Small reverse-mode autodiff engine over dense numpy arrays.

Only the handful of primitives the stereo networks need are provided.  Every
op builds a node holding its parents and a closure that maps the upstream
gradient to one gradient per parent; :func:`backward` walks the graph in
reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from ._kernels import col2im, im2col

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference, frozen stages)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a one-element tensor, got shape {t.shape}")


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=like.dtype), like.shape).copy())


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``root`` must hold exactly one element.  Leaves passed in ``leaves`` that
    are not on a path to ``root`` receive a zero gradient.
    """
    if root.data.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    if root.requires_grad:
        grads[id(root)] = np.ones_like(root.data)
        for node in reversed(_topo_order(root)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    for leaf in leaves or ():
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a constant array of the same shape."""
    if not isinstance(b, Tensor):
        bc = np.asarray(b, dtype=a.dtype)
        if bc.shape != a.shape:
            raise DimensionError(f"mul: shape mismatch {a.shape} vs {bc.shape}")
        return _node(a.data * bc, (a,), lambda g: (g * bc,), "mul_const")
    if a.shape != b.shape:
        raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def shift(a: Tensor, c: float) -> Tensor:
    return _node(a.data + a.dtype.type(c), (a,), lambda g: (g,), "shift")


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    pos = x.data >= 0
    factor = np.where(pos, 1.0, slope).astype(x.dtype)
    return _node(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def sum_(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape, dtype = x.shape, x.dtype
    return _node(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=dtype),), "mean")


# ---------------------------------------------------------------- channel ops


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise DimensionError("concat_channels: empty input list")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(
                f"concat_channels: batch/spatial mismatch {ref} vs {t.shape}"
            )
    sizes = [t.shape[1] for t in inputs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return _node(np.concatenate([t.data for t in inputs], axis=1), tuple(inputs), bw, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _node(x.data[:, start:stop].copy(), (x,), bw, "slice")


# ---------------------------------------------------------------- convolution


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a (transposed) convolution: kernel K, stride S, padding."""

    kernel: int
    stride: int
    padding: int
    in_channels: int
    out_channels: int

    @classmethod
    def same(cls, kernel: int, stride: int, in_channels: int, out_channels: int) -> ConvSpec:
        pad = kernel // 2 if stride == 1 else (kernel - 1) // 2
        return cls(kernel, stride, pad, in_channels, out_channels)

    def out_size(self, n: int) -> int:
        out = (n + 2 * self.padding - self.kernel) // self.stride + 1
        if out <= 0:
            raise DimensionError(f"conv output size {out} is not positive for input size {n}")
        return out

    def transposed_out_size(self, n: int) -> int:
        out = (n - 1) * self.stride - 2 * self.padding + self.kernel
        if out <= 0:
            raise DimensionError(f"transposed conv output size {out} is not positive for input size {n}")
        return out


def _nhwc_pad(x: np.ndarray, p: int) -> np.ndarray:
    xl = x.transpose(0, 2, 3, 1)
    if p:
        xl = np.pad(xl, ((0, 0), (p, p), (p, p), (0, 0)))
    return np.ascontiguousarray(xl)


def _nhwc_to_nchw(x: np.ndarray, p: int = 0) -> np.ndarray:
    if p:
        x = x[:, p:-p, p:-p, :]
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _check_conv(x: Tensor, weight: Tensor, spec: ConvSpec, transposed: bool) -> None:
    if x.data.ndim != 4:
        raise DimensionError(f"expected a rank-4 input, got shape {x.shape}")
    if transposed:
        want = (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
    else:
        want = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    if weight.shape != want:
        raise DimensionError(f"weight shape {weight.shape} does not match spec {want}")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"input has {x.shape[1]} channels, spec expects {spec.in_channels}"
        )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlation, weight layout (out, in, K, K).

    Lowered to a single matrix product over channels-last patches.
    """
    _check_conv(x, weight, spec, transposed=False)
    k, s, p = spec.kernel, spec.stride, spec.padding
    n, c, h, w = x.shape
    cout = spec.out_channels
    ho, wo = spec.out_size(h), spec.out_size(w)
    xp = _nhwc_pad(x.data, p)
    cols = im2col(xp, k, s, ho, wo)
    wm = weight.data.transpose(2, 3, 1, 0).reshape(k * k * c, cout)
    y = cols @ wm
    if bias is not None:
        y += bias.data
    out = _nhwc_to_nchw(y.reshape(n, ho, wo, cout))

    def bw(g):
        gl = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gw = None
        if weight.requires_grad:
            gw = (cols.T @ gl).reshape(k, k, c, cout).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            gcols = gl @ wm.T
            gx = _nhwc_to_nchw(col2im(gcols, n, xp.shape[1], xp.shape[2], c, k, s, ho, wo), p)
        if bias is None:
            return gx, gw
        return gx, gw, gl.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, bw, "conv2d")


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Adjoint of :func:`conv2d` in its input; weight layout (in, out, K, K)."""
    _check_conv(x, weight, spec, transposed=True)
    k, s, p = spec.kernel, spec.stride, spec.padding
    n, cin, h, w = x.shape
    cout = spec.out_channels
    ho, wo = spec.transposed_out_size(h), spec.transposed_out_size(w)
    hp, wp = ho + 2 * p, wo + 2 * p
    xl = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, cin)
    wm = weight.data.transpose(0, 2, 3, 1).reshape(cin, k * k * cout)
    y = col2im(xl @ wm, n, hp, wp, cout, k, s, h, w)
    if p:
        y = y[:, p:-p, p:-p, :]
    if bias is not None:
        y = y + bias.data
    out = _nhwc_to_nchw(y)

    def bw(g):
        gcols = im2col(_nhwc_pad(g, p), k, s, h, w)
        gx = None
        if x.requires_grad:
            gx = _nhwc_to_nchw((gcols @ wm.T).reshape(n, h, w, cin))
        gw = None
        if weight.requires_grad:
            gw = (xl.T @ gcols).reshape(cin, k, k, cout).transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, bw, "transposed_conv2d")


# ---------------------------------------------------------------- verification


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Non-scalar outputs are contracted with a fixed random weight tensor so
    every output coordinate participates.  The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    return grad_check_detail(fn, inputs, eps, seed)[0]


def grad_check_detail(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    seed: int = 0,
) -> tuple[float, int, tuple[int, ...]]:
    """Like :func:`grad_check` but also returns (input index, coordinate) of the worst entry."""
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape) if out.data.size > 1 else None

    def scalar(o: Tensor) -> Tensor:
        return sum_(mul(o, proj)) if proj is not None else o

    for t in inputs:
        t.grad = None
    backward(scalar(out), leaves=[t for t in inputs if t.requires_grad])

    worst, where = 0.0, (-1, ())
    with no_grad():
        for k, t in enumerate(inputs):
            if not t.requires_grad:
                continue
            t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)
            analytic = t.grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(scalar(fn(*inputs)).data)
                flat[i] = orig - eps
                fm = float(scalar(fn(*inputs)).data)
                flat[i] = orig
                numeric = (fp - fm) / (2 * eps)
                err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
                if err > worst:
                    worst, where = err, (k, tuple(int(v) for v in np.unravel_index(i, t.shape)))
    return worst, where[0], where[1]
