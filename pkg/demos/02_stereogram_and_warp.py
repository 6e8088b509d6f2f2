# %% [markdown]
# # Synthetic stereograms and the warp layer
#
# A scene is a background plane plus rectangles at integer disparities.
# The right view is rendered so that right(x - d, y) = left(x, y) wherever
# the left pixel is visible in both views; everything else is masked.

# %%
import numpy as np

from crlstereo.data_io import Rect, SceneSpec, generate_stereogram
from crlstereo.stereo_ops import error_map, warp
from crlstereo.tensor import Tensor

spec = SceneSpec(128, 64, background=2.0,
                 rects=[Rect(20, 10, 40, 30, 12.0), Rect(70, 25, 30, 25, 7.0)], texture_seed=3)
s = generate_stereogram(spec)
print("valid fraction", s.valid.mean().round(3))
print("disparities", np.unique(s.disparity))

# %% [markdown]
# Warping the right image by the true disparity reproduces the left image
# exactly on valid pixels; the error map lights up only in occlusions.

# %%
right = Tensor(s.right[None].astype(np.float64))
d = Tensor(s.disparity[None, None].astype(np.float64))
synth = warp(right, d, sign=-1)
err = error_map(Tensor(s.left[None].astype(np.float64)), synth).data[0].sum(axis=0)
print("max error on valid pixels:", err[s.valid].max())
print("mean error on occluded pixels:", err[~s.valid].mean().round(3))
