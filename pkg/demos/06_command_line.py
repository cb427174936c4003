# %% [markdown]
# The same pipeline through the command line entry point.  ``run`` takes the
# argv list that ``vicon <subcommand> ...`` would receive and returns the
# exit code (0 ok, 2 bad config, 3 runtime failure).

# %%
import json
import tempfile
from pathlib import Path

from vicon.cli import load_predictions, run

root = Path(tempfile.mkdtemp())
small = ["--d", "32", "--n-layers", "1", "--n-heads", "2", "--d-ffn", "64", "--I", "6",
         "--I-min", "2", "--batch-size", "4", "--total-steps", "30", "--warmup-steps", "5",
         "--log-every", "10"]

print(run(["gen-data", "--out", str(root / "data"), "--n-heat", "4", "--n-advection", "4"]))
print(run(["train", "--data", str(root / "data"), "--out", str(root / "run"), *small]))

# %%
traj = str(root / "data" / "advection_0001.json")
print(run(["rollout", "--checkpoint", str(root / "run" / "checkpoint.ckpt"), "--trajectory", traj,
           "--out", str(root / "roll"), "--I0", "6", "--strategy", "flexible", "--s-max", "2",
           "--drops", "drop:2"]))
print((root / "roll" / "plan.txt").read_text())
print(sorted(load_predictions(root / "roll")))

# %%
print(run(["eval", "--predictions", str(root / "roll"), "--trajectory", traj,
           "--out", str(root / "eval"), "--start", "6"]))
print(json.loads((root / "eval" / "metrics.json").read_text())["aggregates"])
print(run(["plot", "--reports", str(root / "eval" / "metrics.json"), "--out", str(root / "fig")]))

# %%
# every output directory carries its resolved config, which can be replayed
cfg = json.loads((root / "eval" / "config.json").read_text())
print(cfg)

# problems are reported together and nothing is written
print(run(["gen-data", "--out", str(root / "bad"), "--nt", "-3", "--n-heat", "x"]))
print((root / "bad").exists())
