"""Discrete generalized-momentum observer.

With p = M q̇ and beta = C^T q̇ - g, the residual

    r_k = K0 (p_k - p_0 - sum_{i<k} (tau_i + beta_i + r_i) dt)

is the rectangle-rule discretization of the continuous observer. Between two
samples it obeys r_k = (1 - K0 dt) r_{k-1} + K0 dt (tau_ext + tau_unc)_{k-1}
up to O(dt^2) per step, which :func:`lowpass` reproduces exactly on logged
torques.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dynamics as dyn
from .model import RobotModel

DEFAULT_GAIN = 100.0


def _gains(K0, n) -> np.ndarray:
    k = np.broadcast_to(np.asarray(K0, dtype=float), (n,)).copy()
    if np.any(k <= 0):
        raise ValueError("observer gains must be positive")
    return k


@dataclass
class ObserverState:
    p0: np.ndarray
    acc: np.ndarray
    r: np.ndarray
    K0: np.ndarray
    dt: float
    beta: np.ndarray  # beta at the last sample, used by the next rectangle

    def copy(self) -> "ObserverState":
        return ObserverState(self.p0.copy(), self.acc.copy(), self.r.copy(), self.K0.copy(), self.dt,
                             self.beta.copy())


def reset(model: RobotModel, q, qd, K0=DEFAULT_GAIN, dt: float = 1e-3) -> ObserverState:
    """Start an observer at state (q, qd): p0 = M q̇, r = 0."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = model.n_v
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    p0 = dyn.mass_matrix(model, q) @ qd
    return ObserverState(p0=p0, acc=np.zeros(n), r=np.zeros(n), K0=_gains(K0, n), dt=float(dt),
                         beta=dyn.beta_term(model, q, qd))


def update(obs: ObserverState, model: RobotModel, q_m, qd_m, tau) -> np.ndarray:
    """Advance one sample.

    ``tau`` is the generalized control torque that acted since the previous
    sample (virtual entries zero); ``q_m``, ``qd_m`` are the new measurements.
    Mutates ``obs`` and returns the new residual.
    """
    tau = np.asarray(tau, dtype=float)
    if tau.shape != obs.r.shape:
        raise ValueError(f"tau must have shape {obs.r.shape}, got {tau.shape}")
    obs.acc += (tau + obs.beta + obs.r) * obs.dt
    p = dyn.mass_matrix(model, q_m) @ np.asarray(qd_m, dtype=float)
    obs.r = obs.K0 * (p - obs.p0 - obs.acc)
    obs.beta = dyn.beta_term(model, q_m, qd_m)
    return obs.r.copy()


class MomentumObserver:
    """Object form of :func:`reset` / :func:`update` bound to one nominal model."""

    def __init__(self, model: RobotModel, K0=DEFAULT_GAIN, dt: float = 1e-3):
        self.model = model
        self.K0 = K0
        self.dt = dt
        self.state = None

    def reset(self, q, qd) -> np.ndarray:
        self.state = reset(self.model, q, qd, self.K0, self.dt)
        return self.state.r.copy()

    def update(self, q_m, qd_m, tau) -> np.ndarray:
        if self.state is None:
            raise RuntimeError("observer used before reset")
        return update(self.state, self.model, q_m, qd_m, tau)

    @property
    def r(self) -> np.ndarray:
        return self.state.r.copy()


def run_observer(model: RobotModel, q, qd, tau, K0=DEFAULT_GAIN, dt: float = 1e-3) -> np.ndarray:
    """Residual for every row of a log; row k uses torque row k-1 (interval convention)."""
    q = np.asarray(q, dtype=float)
    N = q.shape[0]
    out = np.zeros_like(q)
    obs = reset(model, q[0], qd[0], K0, dt)
    for k in range(1, N):
        out[k] = update(obs, model, q[k], qd[k], tau[k - 1])
    return out


def lowpass(u, K0=DEFAULT_GAIN, dt: float = 1e-3, y0=None) -> np.ndarray:
    """First-order filter with the observer's discrete recurrence.

    ``y_0 = y0`` (zero by default), ``y_k = (1 - K0 dt) y_{k-1} + K0 dt u_{k-1}``,
    i.e. the response the observer shows to an interval-mean input ``u``.
    """
    u = np.asarray(u, dtype=float)
    a = np.broadcast_to(np.asarray(K0, dtype=float) * dt, u.shape[1:])
    if np.any(a <= 0) or np.any(a >= 2):
        raise ValueError("K0 * dt must lie in (0, 2) for a stable filter")
    y = np.zeros_like(u)
    if y0 is not None:
        y[0] = y0
    for k in range(1, u.shape[0]):
        y[k] = (1 - a) * y[k - 1] + a * u[k - 1]
    return y
