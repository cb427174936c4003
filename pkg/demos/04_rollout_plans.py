# %% [markdown]
# Rollout planning: single-step and flexible-stride plans, and what happens
# when initial frames are missing.

# %%
from vicon.rollout import apply_drops, check_plan, format_plan, make_plan

print(format_plan(make_plan("single", D=9, T=21, Fa=range(10))))

# %%
# strides 1..5 warm up from frame 9, then jump by 5
print(format_plan(make_plan("flexible", D=9, T=21, Fa=range(10), s_max=5)))

# %%
fa = apply_drops("drop:2,5,9")
plan = make_plan("flexible", D=9, T=20, Fa=fa, s_max=3)
print(format_plan(plan, "frames 2, 5, 9 missing"))
print("valid:", check_plan(plan) == [])

# %%
# with only even frames no stride-1 pair exists, so single-step cannot predict anything
plan = make_plan("single", D=9, T=14, Fa=apply_drops("half-rate"))
print("covered", sorted(plan.covered), "gaps", sorted(plan.gaps))
