"""Disparity evaluation: endpoint error, three-pixel error, reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CameraGeometry:
    focal_length: float  # pixels
    baseline: float  # meters

    def __post_init__(self):
        if self.focal_length <= 0 or self.baseline <= 0:
            raise ValueError("focal length and baseline must be positive")


def disparity_to_depth(d, cam: CameraGeometry):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("depth is undefined for non-positive disparity")
    out = cam.focal_length * cam.baseline / d
    return float(out) if out.ndim == 0 else out


def depth_to_disparity(z, cam: CameraGeometry):
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("disparity is undefined for non-positive depth")
    out = cam.focal_length * cam.baseline / z
    return float(out) if out.ndim == 0 else out


def _errors(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    valid = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return np.abs(pred - gt)[valid], gt[valid]


def epe(pred, gt, mask=None) -> float | None:
    """Mean |pred - gt| over valid pixels, or None when no pixel is valid."""
    err, _ = _errors(pred, gt, mask)
    if err.size == 0:
        return None
    return float(err.mean())


def three_pixel_error(pred, gt, mask=None, mode: str = "plain") -> float | None:
    """Percentage of valid pixels whose error exceeds 3 px.

    ``mode="kitti"`` additionally requires the error to exceed 5% of |gt|.
    Returns None when no pixel is valid.
    """
    err, g = _errors(pred, gt, mask)
    if err.size == 0:
        return None
    bad = err > 3.0
    if mode == "kitti":
        bad &= err > 0.05 * np.abs(g)
    elif mode != "plain":
        raise ValueError(f"unknown 3PE mode {mode!r}")
    return 100.0 * float(bad.mean())


@dataclass
class SampleResult:
    method: str
    sample_id: str
    epe: float | None
    tpe: float | None
    valid_pixels: int
    seconds: float = 0.0


@dataclass
class EvalReport:
    method: str
    samples: list[SampleResult] = field(default_factory=list)

    @property
    def valid_pixels(self) -> int:
        return sum(s.valid_pixels for s in self.samples)

    @property
    def epe(self) -> float | None:
        n = self.valid_pixels
        if n == 0:
            return None
        return sum(s.epe * s.valid_pixels for s in self.samples if s.valid_pixels) / n

    @property
    def tpe(self) -> float | None:
        n = self.valid_pixels
        if n == 0:
            return None
        return sum(s.tpe * s.valid_pixels for s in self.samples if s.valid_pixels) / n

    @property
    def seconds(self) -> float:
        return sum(s.seconds for s in self.samples)


def evaluate_sample(method, sample_id, pred, gt, mask=None, mode="plain", seconds=0.0) -> SampleResult:
    valid = np.ones(np.shape(gt), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return SampleResult(method, sample_id, epe(pred, gt, valid), three_pixel_error(pred, gt, valid, mode),
                        int(valid.sum()), seconds)


def make_report(entries: list[SampleResult]) -> list[EvalReport]:
    """Group per-sample results by method, preserving first-seen order."""
    if not entries:
        raise ValueError("cannot build a report from zero entries")
    reports: dict[str, EvalReport] = {}
    for e in entries:
        reports.setdefault(e.method, EvalReport(e.method)).samples.append(e)
    return list(reports.values())


CSV_HEADER = ["method", "sample", "epe", "3pe", "valid_pixels", "seconds"]


def _fmt(v):
    return "undefined" if v is None else repr(float(v))


def render_csv(reports: list[EvalReport]) -> str:
    """Header row, one row per (method, sample), then one ``ALL`` row per method."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        for s in r.samples:
            w.writerow([r.method, s.sample_id, _fmt(s.epe), _fmt(s.tpe), s.valid_pixels, repr(s.seconds)])
    for r in reports:
        w.writerow([r.method, "ALL", _fmt(r.epe), _fmt(r.tpe), r.valid_pixels, repr(r.seconds)])
    return buf.getvalue()


def parse_csv(text: str) -> list[EvalReport]:
    """Inverse of :func:`render_csv` (aggregate rows are recomputed, not read)."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError("not an evaluation report CSV")
    entries = []
    for method, sid, e, t, n, sec in rows[1:]:
        if sid == "ALL":
            continue
        conv = lambda v: None if v == "undefined" else float(v)
        entries.append(SampleResult(method, sid, conv(e), conv(t), int(n), float(sec)))
    return make_report(entries)


def render_table(reports: list[EvalReport]) -> str:
    lines = [f"{'method':<24}{'EPE':>10}{'3PE (%)':>10}{'pixels':>12}"]
    for r in reports:
        e = "undef" if r.epe is None else f"{r.epe:.4f}"
        t = "undef" if r.tpe is None else f"{r.tpe:.2f}"
        lines.append(f"{r.method:<24}{e:>10}{t:>10}{r.valid_pixels:>12}")
    return "\n".join(lines)
