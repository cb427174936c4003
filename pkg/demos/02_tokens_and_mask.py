# %% [markdown]
# From frames to tokens: patching into the 7-slot channel union, the
# block-causal mask, and what the model can and cannot see.

# %%
import numpy as np

from vicon.model import DESK, build_block_causal_mask, forward, init_params
from vicon.patching import CHANNEL_NAMES, patchify, to_union_channels, unpatchify

# a velocity + scalar field lands in slots 1, 2 and 5
raw = np.random.default_rng(0).normal(size=(16, 16, 3))
frame = to_union_channels(raw, [1, 2, 5])
print([n for n, m in zip(CHANNEL_NAMES, frame.channel_mask) if m])

# %%
grid = patchify(frame.values, 4, 4)
print("patches:", grid.patches.shape)  # 16 patches of 4*4*7 values
print("lossless:", np.array_equal(unpatchify(grid), frame.values))

# %%
# two pairs, two condition patches and one qoi patch each
mask = build_block_causal_mask(2, 2, 1)
for row in mask.astype(int):
    print(" ".join(map(str, row)))

# %%
# the prediction for pair 0 ignores q_0 and everything after it
params = init_params(DESK, np.random.default_rng(1))
rng = np.random.default_rng(2)
conds = rng.normal(size=(3, 16, 16, 7)).astype(np.float32)
qois = rng.normal(size=(3, 16, 16, 7)).astype(np.float32)
a = forward(params, DESK, conds, qois)[0]
qois[0] += 10.0
conds[1:] = 0.0
b = forward(params, DESK, conds, qois)[0]
print("pair-0 prediction unchanged:", np.array_equal(a, b))
