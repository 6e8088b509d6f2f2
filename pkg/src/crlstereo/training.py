"""Multiscale L1 supervision, staged schedules, Adam, screening and splits."""

from __future__ import annotations

import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data_io import StereoSample
from .metrics import epe
from .networks import (
    CRLModel,
    MultiscalePrediction,
    assemble_stage2_input,
    forward_crl,
    forward_stage1,
    forward_stage2,
)
from .stereo_ops import DisparityMap, downsample_disparity, masked_l1
from .tensor import Tensor

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class SchedulePhase:
    stage: int  # 1, 2, or 0 for the whole network
    tag: str

    @property
    def label(self) -> str:
        return f"{self.stage}{self.tag}"


def parse_schedule(text: str) -> list[SchedulePhase]:
    """Parse strings such as ``1F-1K-2F-2K-0K`` into ordered phases."""
    phases = []
    trained: set[int] = set()
    offset = 0
    for seg in text.split("-"):
        if len(seg) != 2:
            raise ScheduleError(f"segment {seg!r} is not two characters", offset)
        digit, tag = seg
        if digit not in "012":
            raise ScheduleError(f"unknown stage digit {digit!r}", offset)
        if not (tag.isalnum() and not tag.isdigit()):
            raise ScheduleError(f"dataset tag {tag!r} must be a letter", offset + 1)
        stage = int(digit)
        if stage == 0 and not {1, 2} <= trained:
            raise ScheduleError("whole-network phase before both stages were trained", offset)
        trained.add(stage)
        phases.append(SchedulePhase(stage, tag))
        offset += len(seg) + 1
    return phases


# ---------------------------------------------------------------- loss


@dataclass
class LossConfig:
    weights: dict[int, float] = field(default_factory=dict)  # missing scales weigh 1.0
    scale_values: bool = True

    def weight(self, s: int) -> float:
        return self.weights.get(s, 1.0)


def multiscale_loss(preds: MultiscalePrediction, gt: DisparityMap, mask: np.ndarray | None = None,
                    cfg: LossConfig | None = None) -> tuple[Tensor, dict[int, float]]:
    """Weighted sum over scales of masked L1 against downsampled ground truth.

    Returns the scalar loss tensor and the unweighted per-scale losses.
    """
    cfg = cfg or LossConfig()
    ws = {s: cfg.weight(s) for s in preds}
    if any(w < 0 for w in ws.values()) or not any(w > 0 for w in ws.values()):
        raise ValueError("loss weights must be non-negative with at least one positive")
    if mask is None:
        mask = gt.mask()
    values = np.where(mask, gt.numpy(), 0).astype(gt.numpy().dtype)
    base = DisparityMap(Tensor(values), gt.scale, mask)
    total = None
    per_scale = {}
    for s in sorted(preds):
        w = ws[s]
        target = downsample_disparity(base, 2 ** s, cfg.scale_values) if s else base
        term = masked_l1(preds[s], target)
        per_scale[s] = float(term.data)
        if w == 0:
            continue
        term = T.scale(term, w) if w != 1 else term
        total = term if total is None else T.add(total, term)
    return total, per_scale


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Tensor], **kw) -> OptimizerState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_step(state: OptimizerState, params: list[Tensor], grads: list[np.ndarray | None], lr: float = 1e-4) -> bool:
    """One Adam update in place.  Returns False (and warns) if a gradient is non-finite."""
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            warnings.warn("non-finite gradient, Adam step skipped", RuntimeWarning, stacklevel=2)
            return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)
    return True


def lr_at(step: int, total: int, base: float, halve_at: tuple[float, ...] = ()) -> float:
    """Piecewise-constant schedule: halve ``base`` after each listed fraction of ``total``."""
    k = sum(1 for f in halve_at if step >= f * total)
    return base * 0.5 ** k


# ---------------------------------------------------------------- data policy


def screen_sample(disparity: np.ndarray, valid: np.ndarray | None = None,
                  threshold_value: float = 300.0, threshold_frac: float = 0.25) -> bool:
    """Keep unless strictly more than ``threshold_frac`` of the values exceed ``threshold_value``."""
    d = np.asarray(disparity, dtype=np.float64)
    sel = np.isfinite(d) if valid is None else (np.asarray(valid, dtype=bool) & np.isfinite(d))
    vals = d[sel]
    if vals.size == 0:
        return True
    return not (np.count_nonzero(vals > threshold_value) / vals.size > threshold_frac)


def split_dataset(samples: list, train_frac: float = 0.85, seed: int = 0) -> tuple[list, list]:
    if len(samples) < 2:
        raise ValueError("need at least two samples to split")
    n = len(samples)
    n_train = int(math.floor(train_frac * n + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    train_idx = sorted(order[:n_train])
    val_idx = sorted(order[n_train:])
    return [samples[i] for i in train_idx], [samples[i] for i in val_idx]


# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    schedule: str = "1F-2F-0F"
    datasets: dict[str, str] = field(default_factory=dict)
    lr: float = 1e-4
    lr_overall: float | None = None
    lr_halve_at: tuple[float, ...] = ()
    batch: int = 4
    batch_overall: int = 2
    steps: int = 10_000
    steps_stage1: int | None = None
    steps_stage2: int | None = None
    steps_overall: int | None = None
    seed: int = 0
    loss_weights: dict[int, float] = field(default_factory=dict)
    width1: float = 0.25
    width2: float = 0.25
    max_disp: int = 6
    scale_values: bool = True
    train_frac: float = 0.85
    out: str = "runs"
    log: str | None = None

    def steps_for(self, stage: int) -> int:
        return {1: self.steps_stage1, 2: self.steps_stage2, 0: self.steps_overall}[stage] or self.steps

    def lr_for(self, stage: int) -> float:
        return self.lr_overall if stage == 0 and self.lr_overall is not None else self.lr

    def batch_for(self, stage: int) -> int:
        return self.batch_overall if stage == 0 else self.batch


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


_SCALARS = {
    "lr": float, "lr_overall": float, "batch": int, "batch_overall": int, "steps": int,
    "steps_stage1": int, "steps_stage2": int, "steps_overall": int, "seed": int,
    "width1": float, "width2": float, "max_disp": int, "train_frac": float,
    "schedule": str, "out": str, "log": str,
}


def parse_config(text: str) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Dataset paths are given as ``dataset.<TAG> = <path>``; ``width`` sets
    both stage widths and ``loss_weights`` is a comma list indexed by scale.
    """
    cfg = TrainConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.match(r"^([A-Za-z_][\w.]*)\s*=\s*(.*)$", line)
        if not m:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = m.group(1), m.group(2).strip()
        try:
            if key.startswith("dataset."):
                tag = key.split(".", 1)[1]
                if len(tag) != 1:
                    raise ConfigError(f"dataset tag {tag!r} must be one character", lineno)
                cfg.datasets[tag] = value
            elif key == "width":
                cfg.width1 = cfg.width2 = float(value)
            elif key == "loss_weights":
                cfg.loss_weights = dict(enumerate(_floats(value)))
            elif key == "lr_halve_at":
                cfg.lr_halve_at = _floats(value)
            elif key == "scale_values":
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ConfigError(f"scale_values must be a boolean, got {value!r}", lineno)
                cfg.scale_values = value.lower() in ("true", "1")
            elif key in _SCALARS:
                setattr(cfg, key, _SCALARS[key](value))
            else:
                raise ConfigError(f"unknown key {key!r}", lineno)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key}: {value!r}", lineno) from exc
    try:
        parse_schedule(cfg.schedule)
    except ScheduleError as exc:
        raise ConfigError(f"schedule: {exc}") from exc
    return cfg


# ---------------------------------------------------------------- batching


def make_batch(samples: list[StereoSample], dtype=np.float32):
    left = Tensor(np.stack([s.left for s in samples]).astype(dtype))
    right = Tensor(np.stack([s.right for s in samples]).astype(dtype))
    valid = np.stack([s.valid for s in samples])[:, None]
    disp = np.stack([s.disparity for s in samples])[:, None].astype(dtype)
    gt = DisparityMap(Tensor(np.where(valid, disp, 0).astype(dtype)), 0, valid)
    return left, right, gt


class BatchSampler:
    """Epoch-wise shuffled batches drawn from a seeded generator."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng = n, batch, rng
        self._order: list[int] = []

    def next(self) -> list[int]:
        out = []
        while len(out) < self.batch:
            if not self._order:
                self._order = list(self.rng.permutation(self.n))
            out.append(self._order.pop())
        return out


LOG_COLUMNS = ["step", "phase", "loss"] + [f"loss_s{s}" for s in range(7)]


def log_row(step: int, phase: str, loss: float, per_scale: dict[int, float]) -> str:
    vals = [str(step), phase, repr(loss)] + [repr(per_scale[s]) if s in per_scale else "" for s in range(7)]
    return ",".join(vals)


def trainable_params(model: CRLModel, stage: int) -> list[Tensor]:
    if stage == 1:
        return model.stage1.parameters()
    if stage == 2:
        return model.stage2.parameters()
    return model.parameters()


def compute_loss(model: CRLModel, stage: int, left: Tensor, right: Tensor, gt: DisparityMap,
                 loss_cfg: LossConfig):
    """Forward pass and loss for one phase type.

    Stage 1 supervises all DispFulNet scales.  Stage 2 runs stage 1 without a
    graph (frozen) and supervises the DispResNet scales.  Stage 0 supervises
    the stage-2 scales with gradients flowing into both stages.
    """
    if stage == 1:
        preds = forward_stage1(model.stage1, left, right)
    elif stage == 2:
        with T.no_grad():
            d1 = forward_stage1(model.stage1, left, right)[0]
        x13 = assemble_stage2_input(left, right, d1, model.config.warp_sign)
        preds = forward_stage2(model.stage2, x13, d1)
    else:
        _, preds = forward_crl(model, left, right)
    return multiscale_loss(preds, gt, gt.valid_mask, loss_cfg)


def run_phase(model: CRLModel, phase: SchedulePhase, data: dict[str, list[StereoSample]], cfg: TrainConfig,
              rng: np.random.Generator | None = None, step_offset: int = 0,
              on_log: Callable[[str], None] | None = None) -> list[dict]:
    """Train the parameters selected by ``phase.stage`` on ``data[phase.tag]``."""
    if phase.tag not in data or not data[phase.tag]:
        raise ConfigError(f"no dataset configured for tag {phase.tag!r}")
    samples = data[phase.tag]
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    params = trainable_params(model, phase.stage)
    state = OptimizerState.for_params(params)
    sampler = BatchSampler(len(samples), cfg.batch_for(phase.stage), rng)
    loss_cfg = LossConfig(cfg.loss_weights, cfg.scale_values)
    total = cfg.steps_for(phase.stage)
    history = []
    bad_streak = 0
    for i in range(total):
        left, right, gt = make_batch([samples[j] for j in sampler.next()], model.stage1.dtype)
        for p in model.parameters():
            p.grad = None
        loss, per_scale = compute_loss(model, phase.stage, left, right, gt, loss_cfg)
        value = float(loss.data)
        if not math.isfinite(value):
            bad_streak += 1
            if bad_streak >= 3:
                raise DivergenceError(f"phase {phase.label}: non-finite loss for 3 consecutive steps")
        else:
            bad_streak = 0
            T.backward(loss, leaves=params)
            adam_step(state, params, [p.grad for p in params], lr_at(i, total, cfg.lr_for(phase.stage), cfg.lr_halve_at))
        row = {"step": step_offset + i, "phase": phase.label, "loss": value, "per_scale": per_scale}
        history.append(row)
        if on_log is not None:
            on_log(log_row(row["step"], phase.label, value, per_scale))
    for p in model.parameters():
        p.grad = None
    return history


def evaluate_model(model: CRLModel, samples: list[StereoSample], batch: int = 8) -> dict[str, float]:
    """Pixel-weighted validation EPE of the stage-1 (d1) and stage-2 (d2) outputs."""
    sums = {"stage1": 0.0, "stage2": 0.0}
    count = 0
    for i in range(0, len(samples), batch):
        chunk = samples[i : i + batch]
        left, right, gt = make_batch(chunk, model.stage1.dtype)
        with T.no_grad():
            d1, d2 = forward_crl(model, left, right)
        n = int(gt.valid_mask.sum())
        if n == 0:
            continue
        sums["stage1"] += epe(d1[0].numpy(), gt.numpy(), gt.valid_mask) * n
        sums["stage2"] += epe(d2[0].numpy(), gt.numpy(), gt.valid_mask) * n
        count += n
    return {k: v / count for k, v in sums.items()}
