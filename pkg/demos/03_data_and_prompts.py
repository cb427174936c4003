# %% [markdown]
# Exact PDE families on the periodic unit square, prompt sampling with a
# random stride, and per-prompt normalisation.

# %%
import numpy as np

from vicon.dataio import gen_advection, gen_heat, sample_prompt
from vicon.patching import SCALAR
from vicon.prompt_norm import compute_stats, normalize

heat = gen_heat(16, 16, nu=0.1, dt=0.01, nt=21, seed=0)
adv = gen_advection(16, 16, vx=6.25, vy=-12.5, dt=0.01, nt=21, seed=1)
print(heat.frames.shape, heat.pde_params, adv.pde_params)

# %%
# heat smooths, advection only moves
print("heat std t=0, t=20:", heat.frames[0, ..., SCALAR].std(), heat.frames[20, ..., SCALAR].std())
shifted = np.roll(adv.frames[0, ..., SCALAR], (1, -2), axis=(0, 1))
print("advection is an exact roll:", np.array_equal(shifted, adv.frames[1, ..., SCALAR]))

# %%
rng = np.random.default_rng(3)
prompt = sample_prompt(adv, I=10, s_max=3, rng=rng)
print("stride", prompt.stride, "starts", prompt.starts.tolist())

# %%
stats = compute_stats(prompt.conds, prompt.channel_mask)
conds = normalize(prompt.conds, stats)
print("normalised mean/std of the scalar:", conds[..., SCALAR].mean().round(6),
      conds[..., SCALAR].std().round(6))
