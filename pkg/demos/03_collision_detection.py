# %% [markdown]
# # Collision detection and the unexpected base wrench
#
# Two uses of the external-torque estimate. First, thresholding it to detect
# collisions on a swing leg, with the stance leg masked out because contact
# is expected there. Second, mapping the base rows back to a wrench, so a
# push on the torso can be told apart from the feet carrying the body.

# %%
import tempfile
from pathlib import Path

import numpy as np

from mobnet import detect as det
from mobnet import estimator as est
from mobnet import experiment as X
from mobnet.cli import Run
from mobnet.model import reference_model
from mobnet.simulator import UncertaintyConfig, run_scenario

root = Path(__file__).resolve().parents[1] if "__file__" in globals() else Path.cwd()
cfg = X.load_config(root / "configs" / "quick.yaml")
run = Run(cfg, Path(tempfile.mkdtemp(prefix="mobnet_detect_")), echo=lambda *a: None)
tr = run.trained()

# %% [markdown]
# ## Thresholds from collision-free logs
#
# Each detector signal is low-pass filtered at 15 Hz. The threshold per joint
# is 10 % above the largest value seen on the calibration logs outside the
# expected-contact mask. An alarm needs 5 ms of consecutive exceedance.
# MOB-Net has two channels, the mean estimate and the predicted uncertainty
# sigma; the OR detector fires on either.

# %%
calib = run.logs("calib")
out = X.detection_suite(cfg, tr, calib, run.logs("collide"), run.logs("test"))
for name, c in out["configs"].items():
    print(f"{name:14s} mean thresholds", np.round(c.thr_mean, 1))

# %%
print(f"{'detector':14s} {'success':>8s} {'fp':>4s} {'delay ms':>9s}")
for name, s in out["summary"].items():
    print(f"{name:14s} {s['success']:>4d}/{s['windows']:<3d} {s['fp_collide'] + s['fp_clean']:>4d} "
          f"{s['mean_delay_ms']:9.1f}")

# %% [markdown]
# With only two short calibration logs the thresholds are tight, so a few
# false alarms are expected here; the default config calibrates on ten logs.
#
# ## Where is the force coming from?
#
# A 30 N push on the torso of a standing biped. The base rows of the
# residual see the net wrench on the floating base; subtracting the wrenches
# identified at the two feet leaves the unexpected part.

# %%
robot = reference_model("planar_biped")
push = [30.0, 0.0, 0.0, 0.0, 0.0, 0.0]
scenario = {**cfg["scenario"], "duration": 1.6, "motion": {"type": "stand"},
            "disturbances": [{"type": "wrench", "link": "torso", "start": 1.0, "duration": 0.5, "wrench": push}]}
log = run_scenario(robot, scenario, UncertaintyConfig(level="ideal"))
r = est.residual(robot, log)
feet = [("RL_foot", (0.0, 0.0, -0.05)), ("LL_foot", (0.0, 0.0, -0.05))]
for t in (0.9, 1.2, 1.4):
    k = int(round(t / log.dt))
    F, degraded = det.unexpected_base_wrench(robot, log.q[k], r[k], feet)
    print(f"t = {t:.1f} s  unexpected (fx, fz, my) =", np.round(F[[0, 2, 4]], 2), " degraded" * degraded)
