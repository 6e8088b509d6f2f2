"""Semi-global matching baseline: SAD cost, path-wise aggregation, WTA."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stereo_ops import CostVolume, DisparityMap
from .tensor import Tensor

DIRECTIONS_8 = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1))


@dataclass
class SgmParams:
    max_disp: int = 64
    p1: float = 10.0
    p2: float = 120.0
    directions: int = 8
    subpixel: bool = False
    uniqueness: float | None = 0.95
    window: int = 5
    lr_check: bool = False

    def __post_init__(self):
        if not (self.p2 > self.p1 > 0):
            raise ValueError(f"SGM penalties need P2 > P1 > 0, got P1={self.p1}, P2={self.p2}")
        if self.max_disp < 1:
            raise ValueError("max_disp must be >= 1")
        if self.directions not in (1, 2, 4, 8):
            raise ValueError("directions must be 1, 2, 4 or 8")


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return img


def sad_cost_volume(left: np.ndarray, right: np.ndarray, max_disp: int, window: int = 5) -> CostVolume:
    """Window SAD: cost(k, y, x) = sum over the window of |L(y, x) - R(y, x - k)|.

    Right samples are edge-clamped, the window is edge-replicated, and
    displacements reaching past the left border get the volume's maximum cost.
    """
    gl, gr = to_gray(left), to_gray(right)
    h, w = gl.shape
    if max_disp >= w:
        raise ValueError(f"max_disp {max_disp} must be smaller than width {w}")
    r = window // 2
    cost = np.empty((max_disp + 1, h, w))
    cols = np.arange(w)
    for k in range(max_disp + 1):
        ad = np.abs(gl - gr[:, np.clip(cols - k, 0, w - 1)])
        pad = np.pad(ad, r, mode="edge")
        acc = np.zeros((h, w))
        for dy in range(window):
            for dx in range(window):
                acc += pad[dy : dy + h, dx : dx + w]
        cost[k] = acc
    out_of_range = cols[None, :] - np.arange(max_disp + 1)[:, None] < 0  # (D+1, W)
    in_range = np.broadcast_to(~out_of_range[:, None, :], cost.shape)
    cmax = cost[in_range].max() if in_range.any() else 0.0
    cost[np.broadcast_to(out_of_range[:, None, :], cost.shape)] = cmax
    return CostVolume(Tensor(cost[None]), max_disp)


def _step(c: np.ndarray, prev: np.ndarray, p1: float, p2: float) -> np.ndarray:
    # c, prev: (..., D+1)
    m = prev.min(axis=-1, keepdims=True)
    best = np.minimum(prev, m + p2)
    best[..., 1:] = np.minimum(best[..., 1:], prev[..., :-1] + p1)
    best[..., :-1] = np.minimum(best[..., :-1], prev[..., 1:] + p1)
    return (c + best) - m


def aggregate_direction(cost: np.ndarray, dx: int, dy: int, p1: float, p2: float) -> np.ndarray:
    """Path cost L_r for one direction r = (dx, dy); cost is (H, W, D+1)."""
    h, w, _ = cost.shape
    out = np.empty_like(cost)
    if dx != 0:
        xs = range(w) if dx > 0 else range(w - 1, -1, -1)
        first = True
        for x in xs:
            if first:
                out[:, x] = cost[:, x]
                first = False
                continue
            prev = out[:, x - dx]
            if dy == 0:
                out[:, x] = _step(cost[:, x], prev, p1, p2)
                continue
            col = cost[:, x].copy()
            if dy > 0:
                col[dy:] = _step(cost[dy:, x], prev[:-dy], p1, p2)
            else:
                col[:dy] = _step(cost[:dy, x], prev[-dy:], p1, p2)
            out[:, x] = col
    else:
        ys = range(h) if dy > 0 else range(h - 1, -1, -1)
        first = True
        for y in ys:
            if first:
                out[y] = cost[y]
                first = False
                continue
            out[y] = _step(cost[y], out[y - dy], p1, p2)
    return out


def sgm_aggregate(cost: CostVolume, params: SgmParams) -> CostVolume:
    """Sum of path costs over the configured directions (fixed order)."""
    c = np.moveaxis(cost.data.data[0], 0, -1)  # H, W, D+1
    dirs = DIRECTIONS_8[: params.directions]
    total = np.zeros_like(c)
    for dx, dy in dirs:
        total += aggregate_direction(c, dx, dy, params.p1, params.p2)
    return CostVolume(Tensor(np.moveaxis(total, -1, 0)[None].copy()), cost.max_displacement)


def subpixel_offset(c_prev, c_mid, c_next):
    """Vertex of the parabola through (-1, c_prev), (0, c_mid), (1, c_next), clipped to (-0.5, 0.5)."""
    c_prev, c_mid, c_next = (np.asarray(v, dtype=np.float64) for v in (c_prev, c_mid, c_next))
    denom = 2.0 * (c_prev + c_next - 2.0 * c_mid)
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(denom > 0, (c_prev - c_next) / denom, 0.0)
    return np.clip(off, -0.4999999, 0.4999999)


def wta_disparity(cost: CostVolume, subpixel: bool = False) -> DisparityMap:
    """Per-pixel argmin over displacement (ties -> smaller k), optional parabola refinement."""
    c = cost.data.data[0]
    k = np.argmin(c, axis=0)
    d = k.astype(np.float64)
    if subpixel:
        dmax = c.shape[0] - 1
        inner = (k > 0) & (k < dmax)
        kk = np.clip(k, 1, max(dmax - 1, 1))
        take = lambda idx: np.take_along_axis(c, idx[None], axis=0)[0]
        off = subpixel_offset(take(kk - 1), take(kk), take(np.minimum(kk + 1, dmax)))
        d = np.where(inner, d + off, d)
    return DisparityMap(Tensor(d[None, None]), 0)


def _uniqueness_mask(c: np.ndarray, k: np.ndarray, ratio: float) -> np.ndarray:
    best = np.take_along_axis(c, k[None], axis=0)[0]
    ks = np.arange(c.shape[0])[:, None, None]
    far = np.abs(ks - k[None]) > 1
    second = np.where(far, c, np.inf).min(axis=0)
    return best <= ratio * second


def run_sgm(sample, params: SgmParams | None = None) -> DisparityMap:
    """SAD cost -> SGM aggregation -> WTA on a StereoSample (images scaled to 0..255)."""
    params = params or SgmParams()
    left, right = sample.left * 255.0, sample.right * 255.0
    raw = sad_cost_volume(left, right, params.max_disp, params.window)
    agg = sgm_aggregate(raw, params)
    disp = wta_disparity(agg, params.subpixel)
    c = agg.data.data[0]
    k = np.argmin(c, axis=0)
    valid = np.ones(k.shape, dtype=bool)
    if params.uniqueness is not None:
        valid &= _uniqueness_mask(c, k, params.uniqueness)
    if params.lr_check:
        h, w = k.shape
        # right-view costs: C_R(k, y, xr) = C(k, y, xr + k)
        cr = np.full_like(c, np.inf)
        for kk in range(c.shape[0]):
            cr[kk, :, : w - kk] = c[kk, :, kk:]
        kr = np.argmin(cr, axis=0)
        xr = np.clip(np.arange(w)[None, :] - k, 0, w - 1)
        back = np.take_along_axis(kr, xr, axis=1)
        valid &= np.abs(back - k) <= 1
    return DisparityMap(disp.data, 0, valid[None, None])
