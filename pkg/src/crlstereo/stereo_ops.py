"""Differentiable stereo operators: horizontal warp, bilinear resampling,
1-D correlation, photometric error map and masked L1 loss."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import DimensionError, Tensor, _node, abs_, sub


@dataclass
class DisparityMap:
    """Single-channel disparity tensor (N, 1, H, W) in pixels at ``scale``.

    ``scale`` s means the spatial size is the full resolution divided by 2**s.
    A missing ``valid_mask`` means every pixel is valid.
    """

    data: Tensor
    scale: int = 0
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        if not isinstance(self.data, Tensor):
            self.data = Tensor(self.data)
        if self.data.data.ndim != 4 or self.data.shape[1] != 1:
            raise DimensionError(f"disparity must be N x 1 x H x W, got {self.data.shape}")
        if self.valid_mask is not None:
            self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
            if self.valid_mask.shape != self.data.shape:
                raise DimensionError(
                    f"mask shape {self.valid_mask.shape} != disparity shape {self.data.shape}"
                )

    @property
    def shape(self):
        return self.data.shape

    def mask(self) -> np.ndarray:
        if self.valid_mask is None:
            return np.ones(self.data.shape, dtype=bool)
        return self.valid_mask

    def numpy(self) -> np.ndarray:
        return self.data.data


@dataclass
class CostVolume:
    data: Tensor  # N x (D+1) x H x W, channel k = displacement k
    max_displacement: int


def _unwrap(d) -> Tensor:
    return d.data if isinstance(d, DisparityMap) else d


# ---------------------------------------------------------------- warping


def warp(image: Tensor, disparity, sign: int = 1) -> Tensor:
    """Sample ``image`` at (x + sign * d(x, y), y) with linear interpolation in x.

    Sampling positions are clamped to [0, W - 1].  The result is
    differentiable in both the image and the disparity; the disparity
    gradient is zero where the position was clamped.
    """
    disp = _unwrap(disparity)
    if sign not in (1, -1):
        raise ValueError(f"warp sign must be +1 or -1, got {sign}")
    n, c, h, w = image.shape
    if disp.shape != (n, 1, h, w):
        raise DimensionError(f"warp: disparity shape {disp.shape} incompatible with image {image.shape}")
    if w < 2:
        raise DimensionError("warp needs images at least 2 pixels wide")
    dtype = image.dtype
    xs = np.arange(w, dtype=dtype)[None, None, None, :] + sign * disp.data.astype(dtype)
    inside = (xs > 0) & (xs < w - 1)
    xs = np.clip(xs, 0, w - 1)
    x0 = np.minimum(np.floor(xs), w - 2).astype(np.intp)
    t = xs - x0.astype(dtype)
    idx0 = np.broadcast_to(x0, (n, c, h, w))
    v0 = np.take_along_axis(image.data, idx0, axis=3)
    v1 = np.take_along_axis(image.data, idx0 + 1, axis=3)
    out = (1 - t) * v0 + t * v1

    def bw(g):
        gi = None
        if image.requires_grad:
            base = (np.arange(n * c * h, dtype=np.intp) * w).reshape(n, c, h, 1)
            flat0 = (base + idx0).reshape(-1)
            size = n * c * h * w
            gi = np.bincount(flat0, weights=(g * (1 - t)).reshape(-1), minlength=size)
            gi += np.bincount(flat0 + 1, weights=(g * t).reshape(-1), minlength=size)
            gi = gi.reshape(n, c, h, w).astype(dtype)
        gd = None
        if disp.requires_grad:
            slope = (v1 - v0) * g
            gd = (sign * inside * slope.sum(axis=1, keepdims=True)).astype(disp.dtype)
        return gi, gd

    return _node(out, (image, disp), bw, "warp")


def error_map(left: Tensor, warped: Tensor) -> Tensor:
    """Per-pixel, per-channel |left - warped| (zero subgradient at ties)."""
    if left.shape != warped.shape:
        raise DimensionError(f"error_map: shape mismatch {left.shape} vs {warped.shape}")
    return abs_(sub(left, warped))


# ---------------------------------------------------------------- resampling


@lru_cache(maxsize=64)
def _downsample_matrix(n: int, factor: int) -> np.ndarray:
    """Row i holds the linear weights sampling input position (i + .5) * f - .5."""
    m = n // factor
    a = np.zeros((m, n))
    for i in range(m):
        pos = (i + 0.5) * factor - 0.5
        lo = int(np.floor(pos))
        frac = pos - lo
        a[i, lo] += 1.0 - frac
        if frac > 0:
            a[i, lo + 1] += frac
    a.setflags(write=False)
    return a


@lru_cache(maxsize=64)
def _upsample_matrix(m: int, factor: int) -> np.ndarray:
    """Row j holds the weights sampling coarse position (j + .5) / f - .5, edge-clamped."""
    n = m * factor
    a = np.zeros((n, m))
    for j in range(n):
        pos = min(max((j + 0.5) / factor - 0.5, 0.0), m - 1.0)
        lo = min(int(np.floor(pos)), max(m - 2, 0))
        frac = pos - lo
        a[j, lo] += 1.0 - frac
        if frac > 0:
            a[j, lo + 1] += frac
    a.setflags(write=False)
    return a


def _separable(x: Tensor, ah: np.ndarray, aw: np.ndarray, value_scale: float, op: str) -> Tensor:
    ah = ah.astype(x.dtype)
    aw = aw.astype(x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", ah, x.data, aw, optimize=True)
    if value_scale != 1:
        out = out * value_scale

    def bw(g):
        gx = np.einsum("ih,ncij,jw->nchw", ah, g, aw, optimize=True)
        return (gx * value_scale if value_scale != 1 else gx,)

    return _node(np.ascontiguousarray(out), (x,), bw, op)


def bilinear_downsample(x: Tensor, factor: int, value_scale: float = 1.0) -> Tensor:
    """Shrink H and W by ``factor`` with bilinear sampling, then multiply by ``value_scale``.

    Output pixel i samples the input at (i + 0.5) * factor - 0.5, so factor 2
    reduces to a 2x2 box mean.
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"factor {factor} does not divide spatial size {h}x{w}")
    if factor == 1:
        if value_scale == 1:
            return _node(x.data.copy(), (x,), lambda g: (g,), "downsample")
        return _node(x.data * value_scale, (x,), lambda g: (g * value_scale,), "downsample")
    return _separable(x, _downsample_matrix(h, factor), _downsample_matrix(w, factor), value_scale, "downsample")


def bilinear_upsample(x: Tensor, factor: int, value_scale: float = 1.0) -> Tensor:
    """Enlarge H and W by ``factor`` (edge-clamped bilinear), then scale values."""
    _, _, h, w = x.shape
    if factor == 1:
        return _node(x.data * value_scale, (x,), lambda g: (g * value_scale,), "upsample")
    return _separable(x, _upsample_matrix(h, factor), _upsample_matrix(w, factor), value_scale, "upsample")


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Strict validity: a coarse pixel is valid only if every pixel it samples is valid."""
    if factor == 1:
        return np.asarray(mask, dtype=bool).copy()
    _, _, h, w = mask.shape
    ah = _downsample_matrix(h, factor) > 0
    aw = _downsample_matrix(w, factor) > 0
    invalid = (~np.asarray(mask, dtype=bool)).astype(np.int64)
    hits = np.einsum("ih,nchw,jw->ncij", ah.astype(np.int64), invalid, aw.astype(np.int64))
    return hits == 0


def downsample_disparity(d: DisparityMap, factor: int, scale_values: bool = True) -> DisparityMap:
    """Downsample a disparity map, its mask (strictly) and its scale index."""
    steps = int(round(np.log2(factor)))
    if 2 ** steps != factor:
        raise ValueError(f"disparity factors must be powers of two, got {factor}")
    vs = 1.0 / factor if scale_values else 1.0
    data = bilinear_downsample(d.data, factor, vs)
    mask = downsample_mask(d.valid_mask, factor) if d.valid_mask is not None else None
    return DisparityMap(data, d.scale + steps, mask)


# ---------------------------------------------------------------- correlation


def correlation1d(left: Tensor, right: Tensor, max_disp: int) -> CostVolume:
    """Channel k at (x, y) is mean_c left(c, y, x) * right(c, y, x - k); zero out of range."""
    if left.shape != right.shape:
        raise DimensionError(f"correlation1d: shape mismatch {left.shape} vs {right.shape}")
    n, c, h, w = left.shape
    if max_disp >= w:
        raise ValueError(f"max displacement {max_disp} must be smaller than width {w}")
    a, b = left.data, right.data
    out = np.zeros((n, max_disp + 1, h, w), dtype=a.dtype)
    for k in range(max_disp + 1):
        out[:, k, :, k:] = np.einsum("nchw,nchw->nhw", a[..., k:], b[..., : w - k]) / c

    def bw(g):
        ga = np.zeros_like(a) if left.requires_grad else None
        gb = np.zeros_like(b) if right.requires_grad else None
        for k in range(max_disp + 1):
            gk = g[:, k : k + 1, :, k:] / c
            if ga is not None:
                ga[..., k:] += gk * b[..., : w - k]
            if gb is not None:
                gb[..., : w - k] += gk * a[..., k:]
        return ga, gb

    return CostVolume(_node(out, (left, right), bw, "correlation1d"), max_disp)


# ---------------------------------------------------------------- loss


def masked_l1(pred, gt, mask: np.ndarray | None = None) -> Tensor:
    """Mean |pred - gt| over valid pixels; 0 (with zero gradient) if none are valid.

    ``gt`` is treated as a constant.  When ``mask`` is omitted the mask of
    ``gt`` (if a DisparityMap) is used.
    """
    if isinstance(pred, DisparityMap) and isinstance(gt, DisparityMap) and pred.scale != gt.scale:
        raise ValueError(f"masked_l1: scale mismatch {pred.scale} vs {gt.scale}")
    if mask is None and isinstance(gt, DisparityMap):
        mask = gt.valid_mask
    p = _unwrap(pred)
    g_arr = _unwrap(gt).data if isinstance(_unwrap(gt), Tensor) else np.asarray(gt)
    if p.shape != g_arr.shape:
        raise DimensionError(f"masked_l1: shape mismatch {p.shape} vs {g_arr.shape}")
    valid = np.ones(p.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        return _node(np.zeros((), dtype=p.dtype), (p,), lambda g: (np.zeros_like(p.data),), "masked_l1")
    diff = np.where(valid, p.data - g_arr.astype(p.dtype), 0)
    loss = np.abs(diff).sum() / count
    sgn = np.sign(diff)

    def bw(g):
        return ((g / count * sgn).astype(p.dtype),)

    return _node(np.asarray(loss, dtype=p.dtype), (p,), bw, "masked_l1")
