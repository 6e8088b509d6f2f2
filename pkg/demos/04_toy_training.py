# %% [markdown]
# # A short cascade training run
#
# Stage 1 (DispFulNet) learns disparity from the stereo pair; stage 2
# (DispResNet) then learns residuals on top of the frozen stage 1; finally
# both are finetuned together.  This is a few hundred steps, just enough to
# watch the losses move; validation EPE stays near that of a constant guess
# (about 2.9 px) at this length. `tests/test_acceptance.py` runs the full budget,
# where stage 1 gets under 1 px.

# %%
import numpy as np

from crlstereo.data_io import synthesize_dataset
from crlstereo.networks import CRLConfig, CRLModel
from crlstereo.training import TrainConfig, evaluate_model, parse_schedule, run_phase, split_dataset

samples = synthesize_dataset(60, seed=0)
train, val = split_dataset(samples, 0.85, seed=0)
model = CRLModel.build(CRLConfig(width1=0.25, width2=0.25, max_disp=6), seed=0)
cfg = TrainConfig(lr=1e-3, lr_overall=2.5e-4, steps_stage1=200, steps_stage2=60, steps_overall=30)

rng = np.random.default_rng(0)
for phase in parse_schedule("1F-2F-0F"):
    before = model.stage1.checksum()
    hist = run_phase(model, phase, {"F": train}, cfg, rng=rng)
    ev = evaluate_model(model, val)
    frozen = "frozen" if model.stage1.checksum() == before else "trained"
    print(f"{phase.label}: last loss {hist[-1]['loss']:.3f}  stage 1 {frozen}  "
          f"val EPE d1 {ev['stage1']:.3f}  d2 {ev['stage2']:.3f}")
