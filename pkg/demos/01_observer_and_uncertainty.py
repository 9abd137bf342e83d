# %% [markdown]
# # What the momentum observer actually measures
#
# The observer residual of a legged robot is often read as "the external
# torque". On a real robot it is the external torque plus everything the
# nominal model gets wrong: inertial errors, joint friction, actuator
# deadzone and sensor noise, all seen through the same first-order filter.
# This script walks a planar biped through a short march at the three
# uncertainty levels and splits the residual into those two parts.

# %%
import numpy as np

from mobnet import estimator as est
from mobnet.experiment import DEFAULT_CONFIG
from mobnet.model import reference_model
from mobnet.observer import lowpass
from mobnet.simulator import UncertaintyConfig, run_scenario

robot = reference_model("planar_biped")
print(robot.n_v, "generalized coordinates:", robot.coordinate_names)

# %% [markdown]
# The scenario is the same one the experiments use: a marching gait under
# joint PD control with softer ankles. Logs are written at 1 kHz.

# %%
scenario = {**DEFAULT_CONFIG["scenario"], "duration": 4.0}
logs = {level: run_scenario(robot, scenario, UncertaintyConfig(level=level), seed=1)
        for level in ("ideal", "sensor_noise", "all_uncertainty")}
log = logs["all_uncertainty"]
print(len(log), "samples at dt =", log.dt)

# %% [markdown]
# ## Residual = filtered external torque + filtered uncertainty torque
#
# The simulator logs the true external torque (ground contact mapped through
# the contact Jacobians) and the uncertainty torque it injected. Filtering
# both with the observer pole and adding them reproduces the residual up to
# the integration error of the simulation. The gap is largest on the base
# translation rows around foot touchdown and shrinks with a smaller step.

# %%
K0 = 100.0
r = est.residual(robot, log, K0)
tau_e = lowpass(log.tau_e, K0, log.dt)
tau_u = lowpass(log.tau_u, K0, log.dt)
gap = np.abs(r - tau_e - tau_u).max(axis=0)
for name, g in zip(log.coords, gap):
    print(f"{name:8s} max |r - LPF(tau_e) - LPF(tau_u)| = {g:.4f}")

# %% [markdown]
# ## How much of the residual is not contact?
#
# Plain MOB reports the residual as the external torque. The RMSE against the
# filtered true external torque grows from essentially zero without
# uncertainty to several N·m once friction and model errors are present.

# %%
legs = list(range(robot.n_virtual, robot.n_v))
for level, L in logs.items():
    e = est.mob(robot, L, K0=K0)
    err = est.rmse(e.tau_e, est.truth(L, K0), legs)
    print(f"{level:16s} MOB RMSE per leg joint:", np.round(err, 3), " mean", round(float(err.mean()), 3))

# %% [markdown]
# The uncertainty part is largest on the swing leg, where friction and the
# deadzone act while there is no contact at all. That is what the limb
# networks are trained to predict and subtract.

# %%
swing = ~log.stance[:, log.groups.index("RL")]
j = log.coords.index("RL2")
print("RL2 during swing: mean |r| =", round(float(np.abs(r[swing, j]).mean()), 3),
      " mean |LPF(tau_e)| =", round(float(np.abs(tau_e[swing, j]).mean()), 3))
