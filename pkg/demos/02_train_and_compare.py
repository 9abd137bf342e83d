# %% [markdown]
# # Training the limb networks and comparing estimators
#
# This runs the small `configs/quick.yaml` experiment end to end through the
# same pipeline the command line uses (`mobnet eval --config configs/quick.yaml`).
# Logs are short and the networks tiny, so the numbers are only indicative;
# the default config is what the acceptance tests use.

# %%
import tempfile
from pathlib import Path

import numpy as np

from mobnet import experiment as X
from mobnet.cli import Run

root = Path(__file__).resolve().parents[1] if "__file__" in globals() else Path.cwd()
cfg = X.load_config(root / "configs" / "quick.yaml")
out = Path(tempfile.mkdtemp(prefix="mobnet_demo_"))
run = Run(cfg, out, echo=lambda *a: None)
print("experiment", run.hash, "seed", run.seed, "->", out)

# %% [markdown]
# ## One network per limb
#
# The actuated joints split into limb groups following the kinematic tree.
# The virtual base joints get their own network. Each network sees its own
# limb's positions and velocities, the joints above and below it, and the IMU.

# %%
for g in run.grouping.names:
    grp = run.grouping[g]
    print(f"{g:8s} joints {grp.joints}  load bearing {grp.load_bearing}  target {grp.target_mode}")

# %%
tr = run.trained()
print({v: sorted(n) for v, n in (("MOB-Net", tr.mobnet), ("FTS-e2e", tr.fts)) if n})

# %% [markdown]
# ## RMSE against the filtered true external torque
#
# Held-out logs at each uncertainty level. MOB is the raw residual; MOB-fric
# subtracts a fitted Coulomb + viscous + static friction model; MOB-Net subtracts the
# predicted uncertainty torque; FTS-e2e regresses the external torque directly.

# %%
sets = {s: run.logs(s) for s in ("ideal", "noise", "test")}
res = {s: run.residuals(s) for s in sets}
rows = X.evaluate_sets(cfg, tr, sets, res)
levels = ("ideal", "sensor_noise", "all_uncertainty")
print(f"{'':14s}" + "".join(f"{lv:>18s}" for lv in levels))
for name in ("MOB", "MOB-fric", "MOB-fric-BPF", "MOB-Net", "FTS-e2e"):
    print(f"{name:14s}" + "".join(f"{X.mean_rmse(rows, name, lv):18.3f}" for lv in levels))

# %% [markdown]
# The learned corrections are only right where they were trained. On the
# ideal and noise-only logs there is no friction to remove, so MOB-Net and
# MOB-fric subtract torque that is not there; the all-uncertainty column is
# the one that matches the training distribution.

# %% [markdown]
# ## A disturbance the networks never saw
#
# The collision logs add a 30 N·m step on a swing-leg joint. FTS-e2e only
# knows the torque patterns of its training data, while MOB-Net keeps the
# observer in the loop and only removes the uncertainty part.

# %%
unseen = X.unseen_table(cfg, tr, run.logs("collide"), run.residuals("collide"))
for r in unseen:
    if r["log"] == "pooled":
        print(f"{r['estimator']:14s} unseen-disturbance RMSE {r['rmse']:.3f}")

# %% [markdown]
# Everything the run wrote carries the experiment hash and seed:

# %%
for p in sorted(out.rglob("*.csv"))[:8]:
    print(p.relative_to(out))
