"""Scaled-down ordering experiment: separate vs. overall training on synthetic data."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .data_io import synthesize_dataset
from .networks import CRLConfig, CRLModel
from .training import TrainConfig, evaluate_model, parse_schedule, run_phase, split_dataset


@dataclass
class ToySetup:
    pairs: int = 300
    preset: str = "desk"  # 64 x 128, disparities 0..16
    train_frac: float = 0.85
    schedule: str = "1F-2F-0F"
    width: float = 0.25
    max_disp: int = 6
    lr: float = 1e-3
    lr_overall: float = 2.5e-4
    lr_halve_at: tuple[float, ...] = (0.5, 0.75)
    steps_stage1: int = 3000
    steps_stage2: int = 1500
    steps_overall: int = 600


@dataclass
class ToyResult:
    seed: int
    after: dict[str, dict[str, float]] = field(default_factory=dict)  # phase label -> val EPE per stage
    seconds: float = 0.0

    @property
    def separate(self) -> dict[str, float]:
        return self.after["2F"]

    @property
    def final(self) -> dict[str, float]:
        return self.after["0F"]


def run_toy(seed: int, setup: ToySetup | None = None, log=None) -> ToyResult:
    setup = setup or ToySetup()
    t0 = time.perf_counter()
    samples = synthesize_dataset(setup.pairs, seed, setup.preset)
    train, val = split_dataset(samples, setup.train_frac, seed)
    model = CRLModel.build(CRLConfig(setup.width, setup.width, setup.max_disp), seed=seed)
    cfg = TrainConfig(
        schedule=setup.schedule, lr=setup.lr, lr_overall=setup.lr_overall, lr_halve_at=setup.lr_halve_at,
        steps_stage1=setup.steps_stage1, steps_stage2=setup.steps_stage2, steps_overall=setup.steps_overall,
        seed=seed, width1=setup.width, width2=setup.width, max_disp=setup.max_disp,
    )
    rng = np.random.default_rng(seed)
    result = ToyResult(seed)
    step = 0
    for phase in parse_schedule(setup.schedule):
        hist = run_phase(model, phase, {"F": train}, cfg, rng=rng, step_offset=step)
        step += len(hist)
        result.after[phase.label] = evaluate_model(model, val)
        if log:
            log(f"seed {seed} {phase.label}: {result.after[phase.label]} ({time.perf_counter() - t0:.0f}s)")
    result.seconds = time.perf_counter() - t0
    return result


def summarize(results: list[ToyResult]) -> dict[str, float]:
    """Medians over seeds of the quantities the ordering checks look at."""
    med = lambda xs: float(statistics.median(xs))
    out = {
        "separate_stage1": med([r.separate["stage1"] for r in results]),
        "separate_stage2": med([r.separate["stage2"] for r in results]),
        "final_stage1": med([r.final["stage1"] for r in results]),
        "final_stage2": med([r.final["stage2"] for r in results]),
        "seconds": sum(r.seconds for r in results),
    }
    out["overall_vs_separate"] = out["final_stage2"] / out["separate_stage2"]
    return out
