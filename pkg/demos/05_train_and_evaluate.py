# %% [markdown]
# A short in-context training run on mixed heat + advection trajectories,
# then an autoregressive rollout on an unseen trajectory.
# Set STEPS higher (a few thousand) for a model worth looking at.

# %%
import os

from vicon.dataio import make_family
from vicon.metrics import evaluate_rollout
from vicon.model import ModelConfig, ViconModel
from vicon.rollout import execute, make_plan
from vicon.train import TrainConfig, train

STEPS = int(os.environ.get("STEPS", 200))
model_cfg = ModelConfig()
train_cfg = TrainConfig(total_steps=STEPS, warmup_steps=STEPS // 10, batch_size=8, s_max=3,
                        log_every=max(1, STEPS // 10))

trajs = make_family("heat", 32, seed=1) + make_family("advection", 32, seed=2)
state, log = train(trajs, model_cfg, train_cfg, verbose=True)

# %%
model = ViconModel(model_cfg, state.params)
test = make_family("advection", 1, seed=99)[0]
plan = make_plan("single", D=9, T=21, Fa=range(10))
result = execute(plan, {i: test.frames[i] for i in range(10)}, model, test.channel_mask)
report = evaluate_rollout(result.predictions, test.frames, 10, test.channel_mask, with_tke=True)
print(report.aggregates["rel_l2"])

# %%
# the naive "nothing changes" forecast, for scale
still = {t: test.frames[9] for t in range(10, 21)}
print(evaluate_rollout(still, test.frames, 10, test.channel_mask).aggregates["rel_l2"])
