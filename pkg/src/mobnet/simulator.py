"""Ground-truth simulation with controllable model uncertainty.

A scenario runs the true model at the control rate (2 kHz by default) with
semi-implicit Euler, a joint-space PD controller tracking a scripted motion,
spring-damper ground contact and optional scripted disturbances. Every
``log_every`` ticks one row is written to a :class:`SimLog`.

Logged torque columns (``tau_d``, ``tau_applied``, ``tau_e``, ``tau_u``) hold
the mean over the interval that *starts* at the row's timestamp, so a
rectangle-rule integrator stepping from row k to k+1 sees exactly the impulse
that acted in between. States and IMU readings are instantaneous.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import dynamics as dyn
from .model import LimbGrouping, RobotModel, derive_groups, perturb_inertial

LEVELS = ("ideal", "sensor_noise", "all_uncertainty")
LOG_SCHEMA_VERSION = 1


class SimulationError(RuntimeError):
    """The state left the admissible region (NaN, fall, runaway velocity)."""


# ---------------------------------------------------------------------------
# uncertainty sources


@dataclass(frozen=True)
class FrictionParams:
    f_c: float = 5.0
    f_s: float = 2.0
    v_s: float = 1.51
    k_vf: float = 4.0
    k_lf: float = 0.002
    tau_loss: float = 10.0

    def __post_init__(self):
        if self.v_s <= 0:
            raise ValueError("friction v_s must be positive")
        if self.tau_loss < 0:
            raise ValueError("friction tau_loss must be non-negative")


LEG_FRICTION = FrictionParams()
OTHER_FRICTION = FrictionParams(k_vf=3.0, tau_loss=8.0)


def friction_torque(qd, tau_m, params: FrictionParams):
    """Stribeck + viscous + load-dependent joint friction (sgn(0) = 0)."""
    qd = np.asarray(qd, dtype=float)
    s = np.sign(qd)
    stribeck = -s * (params.f_c + (params.f_s - params.f_c) * np.exp(-np.abs(qd / params.v_s)))
    load = -s * params.k_lf * np.asarray(tau_m, dtype=float) ** 2
    out = stribeck - params.k_vf * qd + load
    return float(out) if out.ndim == 0 else out


def deadzone(tau, tau_loss):
    """Friction loss: torques with magnitude at or below ``tau_loss`` are dropped."""
    tau = np.asarray(tau, dtype=float)
    return np.where(np.abs(tau) <= tau_loss, 0.0, tau)


@dataclass
class UncertaintyConfig:
    level: str = "all_uncertainty"
    var_q: float = 1e-7
    var_qd: float = 2e-3
    var_acc: float = 1e-4
    var_gyro: float = 5e-3
    var_base_vel: float = 1e-4
    inertial_scale: float = 0.9
    friction_leg: FrictionParams = LEG_FRICTION
    friction_other: FrictionParams = OTHER_FRICTION

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"unknown uncertainty level {self.level!r}; expected one of {LEVELS}")
        for name in ("var_q", "var_qd", "var_acc", "var_gyro", "var_base_vel"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.inertial_scale <= 0:
            raise ValueError("inertial_scale must be positive")

    @property
    def noisy(self) -> bool:
        return self.level != "ideal"

    @property
    def friction(self) -> bool:
        return self.level == "all_uncertainty"

    @property
    def model_scale(self) -> float:
        return self.inertial_scale if self.level == "all_uncertainty" else 1.0

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "UncertaintyConfig":
        d = dict(d or {})
        for key in ("friction_leg", "friction_other"):
            if key in d and isinstance(d[key], dict):
                base = LEG_FRICTION if key == "friction_leg" else OTHER_FRICTION
                d[key] = dataclasses.replace(base, **d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ContactConfig:
    stiffness: float = 5e4
    damping: float = 5e2
    mu: float = 1.0
    ground: float = 0.0


@dataclass
class RteConfig:
    enabled: bool = False
    duration: tuple = (0.1, 0.5)
    bound: float = 50.0
    bounds: Optional[dict] = None  # per-joint override, joint name -> bound
    exclude_support: bool = True

    def __post_init__(self):
        lo, hi = self.duration
        if not 0 < lo <= hi:
            raise ValueError("RTE duration bounds must satisfy 0 < lo <= hi")
        if self.bound < 0:
            raise ValueError("RTE bound must be non-negative")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RteConfig":
        d = dict(d or {})
        if "duration" in d:
            d["duration"] = tuple(d["duration"])
        return cls(**d)


class RandomTorqueExploration:
    """Piecewise-constant random joint torques with random on/off durations.

    Each joint independently alternates between an off period and an on
    period holding a torque drawn from U(-bound, bound); both durations are
    drawn from U(duration). Joints flagged in ``mask`` (support leg) emit 0.
    """

    def __init__(self, cfg: RteConfig, bounds, rng: np.random.Generator):
        self.cfg = cfg
        self.bounds = np.asarray(bounds, dtype=float)
        self.rng = rng
        n = self.bounds.size
        lo, hi = cfg.duration
        self.on = np.zeros(n, dtype=bool)
        self.value = np.zeros(n)
        self.t_switch = rng.uniform(lo, hi, n)

    def __call__(self, t: float, mask=None) -> np.ndarray:
        n = self.bounds.size
        if not self.cfg.enabled:
            return np.zeros(n)
        lo, hi = self.cfg.duration
        for j in range(n):
            while t >= self.t_switch[j]:
                self.on[j] = not self.on[j]
                self.value[j] = self.rng.uniform(-self.bounds[j], self.bounds[j]) if self.on[j] else 0.0
                self.t_switch[j] += self.rng.uniform(lo, hi)
        out = np.where(self.on, self.value, 0.0)
        if mask is not None:
            out = np.where(mask, 0.0, out)
        return out


def rte_overlay(cfg: RteConfig, seed: int, t: float, mask, bounds=None) -> np.ndarray:
    """RTE torque at time ``t`` as a pure function of ``(cfg, seed, t)``.

    Replays a fresh :class:`RandomTorqueExploration` seeded with ``seed`` up to
    ``t``; the simulator keeps one generator alive instead.
    """
    mask = np.asarray(mask, dtype=bool)
    b = np.full(mask.size, cfg.bound) if bounds is None else np.asarray(bounds, dtype=float)
    gen = RandomTorqueExploration(cfg, b, np.random.default_rng(seed))
    return gen(t, mask)


# ---------------------------------------------------------------------------
# motion generators


def _smooth_bump(s):
    """sin^2 bump on [0, 1] and its derivative."""
    return np.sin(np.pi * s) ** 2, np.pi * np.sin(2 * np.pi * s)


class MarchGait:
    """Quasi-static marching in place for legged models.

    Every leg holds a crouch (hip -a, knee 2a, ankle -a on its pitch joints
    so the foot stays parallel to the torso). Legs take turns lifting: the
    swing adds a bump of amplitude ``lift`` to the crouch angle. Step
    durations are drawn from ``step_duration``; a double-support pause of
    ``double_support`` seconds separates steps.
    """

    def __init__(self, model: RobotModel, grouping: LimbGrouping, rng: np.random.Generator,
                 duration: float, step_duration=(0.5, 0.8), lift=(0.5, 0.7), crouch=0.3,
                 double_support=0.15, start_delay=0.5, wiggle=0.0):
        self.model = model
        self.nv = model.n_virtual
        self.legs = [g for g in grouping.actuated_groups if g.load_bearing]
        if not self.legs:
            raise ValueError("march gait needs at least one load-bearing limb")
        self.crouch = crouch
        self.pitch = {}
        for g in self.legs:
            ys = [j for j in g.joints if np.allclose(np.abs(model.joints[j - self.nv].axis), (0, 1, 0))]
            if len(ys) < 3:
                raise ValueError(f"leg {g.name} needs three pitch joints for the march gait")
            self.pitch[g.name] = ys[:3]
        # schedule: list of (group name, t0, t1, amplitude, wiggle amplitude, wiggle freq)
        self.steps = []
        t = start_delay
        k = 0
        while True:
            T = rng.uniform(*step_duration)
            a = rng.uniform(*lift) if np.ndim(lift) else float(lift)
            wa = rng.uniform(-wiggle, wiggle)
            wf = rng.uniform(1.0, 3.0)
            if t + T > duration:
                break
            self.steps.append((self.legs[k % len(self.legs)].name, t, t + T, a, wa, wf))
            t += T + double_support
            k += 1

    def swing_windows(self, group: str):
        return [(t0, t1) for g, t0, t1, *_ in self.steps if g == group]

    def __call__(self, t: float):
        n = self.model.n_v
        q = np.zeros(n)
        qd = np.zeros(n)
        stance = {g.name: True for g in self.legs}
        a = self.crouch
        for g in self.legs:
            hip, knee, ankle = self.pitch[g.name]
            q[hip], q[knee], q[ankle] = -a, 2 * a, -a
        for name, t0, t1, amp, wa, wf in self.steps:
            if t0 <= t < t1:
                T = t1 - t0
                s = (t - t0) / T
                b, db = _smooth_bump(s)
                wig = wa * np.sin(np.pi * s) * np.sin(2 * np.pi * wf * (t - t0))
                dwig = wa * (np.pi / T * np.cos(np.pi * s) * np.sin(2 * np.pi * wf * (t - t0))
                             + np.sin(np.pi * s) * 2 * np.pi * wf * np.cos(2 * np.pi * wf * (t - t0)))
                hip, knee, ankle = self.pitch[name]
                db = db / T
                q[hip] += -amp * b + wig
                qd[hip] += -amp * db + dwig
                q[knee] += 2 * amp * b
                qd[knee] += 2 * amp * db
                q[ankle] += -amp * b - wig
                qd[ankle] += -amp * db - dwig
                stance[name] = False
                break
        return q, qd, stance


class StandPose:
    """Hold the crouch pose of :class:`MarchGait` (or the zero pose without legs)."""

    def __init__(self, model: RobotModel, grouping: LimbGrouping, crouch=0.3):
        try:
            self.gait = MarchGait(model, grouping, np.random.default_rng(0), duration=0.0, crouch=crouch)
        except ValueError:
            self.gait = None
        self.model = model
        self.legs = [g.name for g in grouping.actuated_groups if g.load_bearing]

    def swing_windows(self, group):
        return []

    def __call__(self, t):
        if self.gait is None:
            n = self.model.n_v
            return np.zeros(n), np.zeros(n), {}
        return self.gait(t)


class SinusoidExcitation:
    """Sum of random-phase sinusoids per actuated joint, kept inside the limits.

    Each joint oscillates about the middle of its range; the summed amplitude
    is ``amplitude`` times the half range, so the reference never leaves the
    limits. Joints in ``only`` (names) are excited; the rest hold ``base``.
    """

    def __init__(self, model: RobotModel, rng: np.random.Generator, n_terms=3, freq=(0.2, 1.5),
                 amplitude=0.6, only=None, base=None):
        self.model = model
        nv, n = model.n_virtual, model.n_v
        lo, hi = model.position_limits()
        self.center = np.zeros(n) if base is None else np.asarray(base, dtype=float).copy()
        self.amp = np.zeros((n, n_terms))
        self.freq = rng.uniform(*freq, size=(n, n_terms))
        self.phase = rng.uniform(0, 2 * np.pi, size=(n, n_terms))
        names = model.coordinate_names
        for i in range(nv, n):
            if only is not None and names[i] not in only:
                continue
            mid, half = 0.5 * (lo[i] + hi[i]), 0.5 * (hi[i] - lo[i])
            self.center[i] = mid
            w = rng.uniform(0.2, 1.0, n_terms)
            self.amp[i] = amplitude * half * w / w.sum()

    def swing_windows(self, group):
        return []

    def __call__(self, t):
        arg = 2 * np.pi * self.freq * t + self.phase
        q = self.center + (self.amp * np.sin(arg)).sum(axis=1)
        qd = (self.amp * 2 * np.pi * self.freq * np.cos(arg)).sum(axis=1)
        return q, qd, {}


class AnkleBalance:
    """Ankle strategy: tilt the stance ankles to pull the center of mass over the support center.

    Adds ``kx e + kv de/dt`` to the ankle-pitch references of every stance leg,
    where ``e`` is the sagittal offset of the center of mass from the mean of
    the stance feet's contact points.
    """

    def __init__(self, model: RobotModel, motion, kx=2.0, kv=0.3):
        gait = motion.gait if isinstance(motion, StandPose) else motion
        self.model = model
        self.kx, self.kv = kx, kv
        self.ankle = {name: joints[2] for name, joints in gait.pitch.items()} if gait is not None else {}
        t = model.tree
        self._args = (t.parent, t.jtype, t.axis, t.rot_tree, t.pos_tree, t.mass, t.com)
        bodies, points, self.owner = [], [], []
        for g in gait.legs if gait is not None else ():
            links = {model.joints[j - model.n_virtual].child_link for j in g.joints}
            for c in model.contacts:
                if c.link in links:
                    bodies.append(t.body_of(c.link))
                    points.append(c.point)
                    self.owner.append(g.name)
        self.bodies = np.array(bodies, dtype=np.int64)
        self.points = np.array(points, dtype=float).reshape(-1, 3)
        self.owner = np.array(self.owner)
        self.n = model.n_v

    def __call__(self, q, qd, stance) -> np.ndarray:
        out = np.zeros(self.n)
        legs = [g for g, on in stance.items() if on and g in self.ankle]
        if not legs or self.bodies.size == 0:
            return out
        X, c, cd = dyn._points_and_com(*self._args, q, qd, self.bodies, self.points)
        sel = np.isin(self.owner, legs)
        if not sel.any():
            return out
        delta = self.kx * (c[0] - X[sel, 0].mean()) + self.kv * cd[0]
        for g in legs:
            out[self.ankle[g]] = delta
        return out


def make_motion(model, grouping, spec: dict, rng, duration):
    spec = dict(spec or {"type": "stand"})
    kind = spec.pop("type", "stand")
    if kind == "march":
        for key in ("step_duration", "lift"):
            if key in spec and isinstance(spec[key], list):
                spec[key] = tuple(spec[key])
        return MarchGait(model, grouping, rng, duration, **spec)
    if kind == "stand":
        return StandPose(model, grouping, **spec)
    if kind == "sinusoid":
        if "freq" in spec:
            spec["freq"] = tuple(spec["freq"])
        return SinusoidExcitation(model, rng, **spec)
    raise ValueError(f"unknown motion type {kind!r}")


# ---------------------------------------------------------------------------
# stepping


@dataclass
class SimState:
    q: np.ndarray
    qd: np.ndarray
    t: float = 0.0
    anchors: Optional[np.ndarray] = None
    active: Optional[np.ndarray] = None


@dataclass
class TickRecord:
    qdd: np.ndarray
    tau_applied: np.ndarray
    tau_e: np.ndarray
    tau_u: np.ndarray
    contact_force: np.ndarray


@dataclass
class Disturbance:
    """A scripted external load active on ``[start, end)``.

    ``kind`` is ``joint_torque`` (a generalized force on one coordinate) or
    ``wrench`` (world-axes ``[force; moment]`` at a link point).
    """

    kind: str
    start: float
    end: float
    joint: Optional[str] = None
    value: float = 0.0
    link: Optional[str] = None
    point: tuple = (0.0, 0.0, 0.0)
    wrench: tuple = (0.0,) * 6
    group: Optional[str] = None

    def annotation(self) -> dict:
        d = {"kind": self.kind, "start": self.start, "end": self.end, "group": self.group}
        if self.kind == "joint_torque":
            d.update(joint=self.joint, value=self.value)
        else:
            d.update(link=self.link, point=list(self.point), wrench=list(self.wrench))
        return d


class Simulator:
    """Integrates the true model and evaluates uncertainty terms on the nominal one."""

    def __init__(self, model: RobotModel, cfg: Optional[UncertaintyConfig] = None,
                 contact: Optional[ContactConfig] = None, grouping: Optional[LimbGrouping] = None,
                 integrator: str = "semi_implicit"):
        if integrator not in ("semi_implicit", "rk4"):
            raise ValueError(f"unknown integrator {integrator!r}")
        self.model = model
        self.cfg = cfg or UncertaintyConfig(level="ideal")
        self.contact = contact or ContactConfig()
        self.grouping = grouping or derive_groups(model)
        self.integrator = integrator
        self.nominal = perturb_inertial(model, self.cfg.model_scale) if self.cfg.model_scale != 1.0 else model
        t, tn = model.tree, self.nominal.tree
        self._geom = (t.parent, t.jtype, t.axis, t.rot_tree, t.pos_tree, t.mass, t.com, t.inertia,
                      tn.mass, tn.com, tn.inertia, t.gravity)
        self.contact_names = [c.name for c in model.contacts]
        self._bodies = np.array([t.body_of(c.link) for c in model.contacts], dtype=np.int64)
        self._points = np.array([c.point for c in model.contacts], dtype=float).reshape(-1, 3)
        n = model.n_v
        nv = model.n_virtual
        # per-coordinate friction parameters (virtual joints have none)
        leg = set()
        for g in self.grouping.actuated_groups:
            if g.load_bearing:
                leg.update(g.joints)
        self.friction = [None] * nv + [
            (self.cfg.friction_leg if i in leg else self.cfg.friction_other) for i in range(nv, n)]
        fields = ("f_c", "f_s", "v_s", "k_vf", "k_lf", "tau_loss")
        self._fric = {f: np.array([1.0 if (fp is None and f == "v_s") else (0.0 if fp is None else getattr(fp, f))
                                   for fp in self.friction]) for f in fields}
        self._actuated = np.arange(n) >= nv
        self.effort = np.r_[np.zeros(nv), [j.effort for j in model.joints]]

    def initial_state(self, q, qd=None) -> SimState:
        n = self.model.n_v
        nc = len(self.contact_names)
        q = np.array(q, dtype=float)
        qd = np.zeros(n) if qd is None else np.array(qd, dtype=float)
        return SimState(q=q, qd=qd, t=0.0, anchors=np.zeros((nc, 3)), active=np.zeros(nc, dtype=bool))

    def applied_torque(self, qd, tau_d) -> np.ndarray:
        """Torque reaching the joints: friction-loss deadzone on the command plus joint friction."""
        if not self.cfg.friction:
            return tau_d.copy()
        f = self._fric
        s = np.sign(qd)
        fr = (-s * (f["f_c"] + (f["f_s"] - f["f_c"]) * np.exp(-np.abs(qd / f["v_s"])))
              - f["k_vf"] * qd - s * f["k_lf"] * tau_d ** 2)
        kept = np.where(np.abs(tau_d) <= f["tau_loss"], 0.0, tau_d)
        return np.where(self._actuated, kept + fr, tau_d)

    def _terms(self, q, qd, tau_d, tau_act, tau_dist, fext, anchors, active):
        c = self.contact
        return dyn._sim_terms(*self._geom, q, qd, tau_d, tau_act, tau_dist, fext, self._bodies, self._points,
                              anchors, active, c.stiffness, c.damping, c.mu, c.ground)

    def script_forces(self, q, disturbances, t):
        """Joint disturbance vector and per-body spatial forces for the loads active at ``t``."""
        n = self.model.n_v
        tau = np.zeros(n)
        wrenches = []
        for d in disturbances:
            if d.start <= t < d.end:
                if d.kind == "joint_torque":
                    tau[self.model.joint_index(d.joint)] += d.value
                else:
                    wrenches.append(dyn.PointWrench(d.link, tuple(d.point), np.asarray(d.wrench, dtype=float)))
        fext = dyn._body_forces(self.model, q, wrenches) if wrenches else np.zeros((n, 6))
        return tau, fext

    def step(self, state: SimState, tau_d, dt: float, disturbances=()) -> tuple:
        """Advance one control tick. Returns ``(next_state, TickRecord)``."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        tau_d = np.asarray(tau_d, dtype=float)
        nv = self.model.n_virtual
        if nv and np.any(tau_d[:nv] != 0):
            raise ValueError("virtual-joint entries of tau_d must be zero")
        q, qd = state.q, state.qd
        tau_act = self.applied_torque(qd, tau_d)
        tau_dist, fext = self.script_forces(q, disturbances, state.t)
        anchors, active = state.anchors.copy(), state.active.copy()
        qdd, tau_e, tau_u, F = self._terms(q, qd, tau_d, tau_act, tau_dist, fext, anchors, active)
        if self.integrator == "semi_implicit":
            qd_new = qd + dt * qdd
            q_new = q + dt * qd_new
        else:
            def f(qq, vv):
                a2, v2 = anchors.copy(), active.copy()
                tf, fe = self.script_forces(qq, disturbances, state.t)
                return self._terms(qq, vv, tau_d, self.applied_torque(vv, tau_d), tf, fe, a2, v2)[0]
            k1q, k1v = qd, qdd
            k2q, k2v = qd + 0.5 * dt * k1v, f(q + 0.5 * dt * k1q, qd + 0.5 * dt * k1v)
            k3q, k3v = qd + 0.5 * dt * k2v, f(q + 0.5 * dt * k2q, qd + 0.5 * dt * k2v)
            k4q, k4v = qd + dt * k3v, f(q + dt * k3q, qd + dt * k3v)
            q_new = q + dt / 6 * (k1q + 2 * k2q + 2 * k3q + k4q)
            qd_new = qd + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if not (np.all(np.isfinite(q_new)) and np.all(np.isfinite(qd_new))):
            raise SimulationError(f"non-finite state at t={state.t:.4f}")
        nxt = SimState(q=q_new, qd=qd_new, t=state.t + dt, anchors=anchors, active=active)
        return nxt, TickRecord(qdd=qdd, tau_applied=tau_act, tau_e=tau_e, tau_u=tau_u, contact_force=F)


def step(model: RobotModel, state: SimState, tau_d, wrenches=(), cfg: Optional[UncertaintyConfig] = None,
         dt: float = 5e-4, simulator: Optional[Simulator] = None):
    """One tick of :meth:`Simulator.step`; ``wrenches`` are :class:`Disturbance` entries."""
    sim = simulator or Simulator(model, cfg)
    if state.anchors is None:
        state = dataclasses.replace(state, **dataclasses.asdict(sim.initial_state(state.q, state.qd)),
                                    t=state.t)
    return sim.step(state, tau_d, dt, wrenches)


# ---------------------------------------------------------------------------
# logs


@dataclass
class SimLog:
    """Time series of one scenario at the log rate."""

    coords: list
    contacts: list
    groups: list
    t: np.ndarray
    q_m: np.ndarray
    qd_m: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    tau_d: np.ndarray
    tau_applied: np.ndarray
    imu: np.ndarray
    tau_e: np.ndarray
    tau_u: np.ndarray
    tau_n: np.ndarray
    contact_force: np.ndarray
    stance: np.ndarray
    annotations: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    BLOCKS = ("q_m", "qd_m", "q", "qd", "tau_d", "tau_applied", "tau_e", "tau_u", "tau_n")
    IMU_NAMES = ("R00", "R10", "R20", "R01", "R11", "R21", "wx", "wy", "wz", "ax", "ay", "az")

    def __len__(self):
        return self.t.size

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self) > 1 else float(self.meta.get("dt_log", 1e-3))

    def columns(self) -> list:
        cols = ["t"]
        for b in self.BLOCKS:
            cols += [f"{b}[{c}]" for c in self.coords]
        cols += [f"imu[{c}]" for c in self.IMU_NAMES]
        for c in self.contacts:
            cols += [f"F[{c}].{a}" for a in "xyz"]
        cols += [f"stance[{g}]" for g in self.groups]
        return cols

    def matrix(self) -> np.ndarray:
        parts = [self.t[:, None]] + [getattr(self, b) for b in self.BLOCKS] + [self.imu]
        parts.append(self.contact_force.reshape(len(self), -1))
        parts.append(self.stance.astype(float))
        return np.hstack(parts)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, self.matrix(), delimiter=",", header=",".join(self.columns()), comments="",
                   fmt="%.17g")
        meta = dict(self.meta, schema_version=LOG_SCHEMA_VERSION, coords=self.coords, contacts=self.contacts,
                    groups=self.groups, annotations=self.annotations)
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=1, default=_json_default))
        return path

    @classmethod
    def load(cls, path) -> "SimLog":
        path = Path(path)
        meta = json.loads(path.with_suffix(".meta.json").read_text())
        if meta.get("schema_version") != LOG_SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported log schema {meta.get('schema_version')}")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        coords, contacts, groups = meta.pop("coords"), meta.pop("contacts"), meta.pop("groups")
        annotations = meta.pop("annotations")
        n, nc, ng = len(coords), len(contacts), len(groups)
        k = 1
        blocks = {}
        for b in cls.BLOCKS:
            blocks[b] = data[:, k:k + n]
            k += n
        imu = data[:, k:k + 12]
        k += 12
        F = data[:, k:k + 3 * nc].reshape(-1, nc, 3)
        k += 3 * nc
        stance = data[:, k:k + ng] > 0.5
        return cls(coords=coords, contacts=contacts, groups=groups, t=data[:, 0], imu=imu, contact_force=F,
                   stance=stance, annotations=annotations, meta=meta, **blocks)

    def window(self, i0: int, i1: int) -> "SimLog":
        """Rows ``[i0, i1)`` as a new log (annotations kept as-is)."""
        kw = {b: getattr(self, b)[i0:i1] for b in self.BLOCKS}
        return dataclasses.replace(self, t=self.t[i0:i1], imu=self.imu[i0:i1],
                                   contact_force=self.contact_force[i0:i1], stance=self.stance[i0:i1], **kw)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(type(o))


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serializable config."""
    text = json.dumps(obj, sort_keys=True, default=_json_default)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class Scenario:
    name: str = "scenario"
    duration: float = 1.0
    dt: float = 5e-4
    log_every: int = 2
    motion: dict = field(default_factory=lambda: {"type": "stand"})
    kp: object = 300.0  # scalar or {joint name: gain}
    kd: object = 10.0
    balance: Optional[dict] = field(default_factory=lambda: {"kx": 2.0, "kv": 0.3})
    rte: RteConfig = field(default_factory=RteConfig)
    disturbances: list = field(default_factory=list)
    q0: Optional[list] = None

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        if "rte" in d:
            d["rte"] = RteConfig.from_dict(d["rte"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"scenario: unknown keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _resolve_disturbances(model: RobotModel, specs, motion) -> list:
    out = []
    for k, spec in enumerate(specs):
        s = dict(spec)
        kind = s.get("type", "joint_torque")
        if kind not in ("joint_torque", "wrench"):
            raise ValueError(f"disturbance {k}: unknown type {kind!r}")
        duration = float(s.get("duration", 0.1))
        sign = 1.0
        if "swing" in s:
            sw = s["swing"]
            wins = motion.swing_windows(sw["group"])
            # index "all" places one load in every swing phase, alternating sign if asked
            if sw.get("index", 0) == "all":
                picks = list(range(len(wins)))
            else:
                idx = int(sw.get("index", 0))
                if idx >= len(wins):
                    raise ValueError(f"disturbance {k}: leg {sw['group']} has only {len(wins)} swing phases")
                picks = [idx]
            starts = []
            for n_i, i in enumerate(picks):
                t0, t1 = wins[i]
                sgn = -1.0 if sw.get("alternate_sign") and n_i % 2 else 1.0
                starts.append((t0 + float(sw.get("offset", 0.3)) * (t1 - t0), sgn))
            group = sw["group"]
        else:
            starts = [(float(s["start"]), sign)]
            group = s.get("group")
        for start, sgn in starts:
            if kind == "joint_torque":
                name = s["joint"]
                model.joint_index(name)
                out.append(Disturbance("joint_torque", start, start + duration, joint=name,
                                       value=sgn * float(s.get("value", 0.0)), group=group))
            else:
                model.link(s["link"])
                out.append(Disturbance("wrench", start, start + duration, link=s["link"],
                                       point=tuple(s.get("point", (0, 0, 0))),
                                       wrench=tuple(sgn * float(w) for w in s["wrench"]), group=group))
    out.sort(key=lambda d: d.start)
    return out


def _standing_height(model: RobotModel, q, ground: float, weight_share: float) -> float:
    """Base height placing the lowest contact point slightly below ground (static spring sag)."""
    if not model.contacts:
        return 1.0
    zmin = min(dyn.point_position(model, q, c.link, c.point)[2] for c in model.contacts)
    return ground - zmin - weight_share


def _imu(model: RobotModel, q, qd, qdd, gravity):
    """Rotation columns, body angular velocity and specific force of the root link."""
    root = model.root_link.name
    x, v, a, R, w = dyn.point_motion(model, q, qd, qdd, root, (0.0, 0.0, 0.0))
    return np.r_[R[:, 0], R[:, 1], R.T @ w, R.T @ (a - gravity)]


def run_scenario(model: RobotModel, script, cfg: Optional[UncertaintyConfig] = None, seed: int = 0,
                 contact: Optional[ContactConfig] = None, grouping: Optional[LimbGrouping] = None,
                 integrator: str = "semi_implicit") -> SimLog:
    """Simulate a scenario script and return its log. Deterministic in ``seed``."""
    sc = script if isinstance(script, Scenario) else Scenario.from_dict(script)
    cfg = cfg or UncertaintyConfig(level="ideal")
    grouping = grouping or derive_groups(model)
    sim = Simulator(model, cfg, contact, grouping, integrator)
    ss = np.random.SeedSequence(seed)
    rng_motion, rng_rte, rng_noise = (np.random.default_rng(s) for s in ss.spawn(3))
    motion = make_motion(model, grouping, sc.motion, rng_motion, sc.duration)
    disturbances = _resolve_disturbances(model, sc.disturbances, motion)

    n, nv = model.n_v, model.n_virtual
    names = model.coordinate_names
    leg_groups = [g for g in grouping.actuated_groups]
    group_names = [g.name for g in leg_groups]
    group_joints = {g.name: list(g.joints) for g in leg_groups}
    bounds = np.zeros(n)
    for i in range(nv, n):
        b = sc.rte.bound
        if sc.rte.bounds and names[i] in sc.rte.bounds:
            b = sc.rte.bounds[names[i]]
        bounds[i] = b
    rte = RandomTorqueExploration(sc.rte, bounds, rng_rte)

    kp = _per_joint(sc.kp, names, nv)
    kd = _per_joint(sc.kd, names, nv)
    q_des0, _, _ = motion(0.0)
    if sc.q0 is not None:
        q0 = np.asarray(sc.q0, dtype=float)
    else:
        q0 = q_des0.copy()
        if model.base_mode != "fixed":
            zi = 1 if model.base_mode == "floating_planar" else 2
            share = model_mass(model) * 9.81 / max(len(model.contacts), 1) / sim.contact.stiffness
            q0[zi] = 0.0
            q0[zi] = _standing_height(model, q0, sim.contact.ground, share)
    state = sim.initial_state(q0)
    balancer = AnkleBalance(model, motion, **sc.balance) if sc.balance and isinstance(motion, (MarchGait, StandPose)) \
        and model.base_mode != "fixed" else None

    dt, every = sc.dt, int(sc.log_every)
    n_log = int(round(sc.duration / (dt * every)))
    nc = len(sim.contact_names)
    log = {b: np.zeros((n_log, n)) for b in SimLog.BLOCKS}
    t_log = np.zeros(n_log)
    imu = np.zeros((n_log, 12))
    F_log = np.zeros((n_log, nc, 3))
    stance_log = np.zeros((n_log, len(group_names)), dtype=bool)
    gravity = model.tree.gravity
    lo, hi = model.position_limits()

    for k in range(n_log):
        t_log[k] = state.t
        log["q"][k] = state.q
        log["qd"][k] = state.qd
        acc = {key: np.zeros(n) for key in ("tau_d", "tau_applied", "tau_e", "tau_u")}
        F_acc = np.zeros((nc, 3))
        for sub in range(every):
            q_des, qd_des, stance = motion(state.t)
            if sub == 0:
                stance_log[k] = [stance.get(g, False) for g in group_names]
            if balancer is not None:
                q_des = q_des + balancer(state.q, state.qd, stance)
            tau_d = kp * (q_des - state.q) + kd * (qd_des - state.qd)
            if sc.rte.enabled:
                support = np.zeros(n, dtype=bool)
                if sc.rte.exclude_support:
                    for g, on in stance.items():
                        if on:
                            support[group_joints[g]] = True
                tau_d = tau_d + rte(state.t, support)
            tau_d = np.clip(tau_d, -sim.effort, sim.effort)
            tau_d[:nv] = 0.0
            state, rec = sim.step(state, tau_d, dt, disturbances)
            if sub == 0:
                imu[k] = _imu(model, log["q"][k], log["qd"][k], rec.qdd, gravity)
            acc["tau_d"] += tau_d
            acc["tau_applied"] += rec.tau_applied
            acc["tau_e"] += rec.tau_e
            acc["tau_u"] += rec.tau_u
            F_acc += rec.contact_force
        for key, v in acc.items():
            log[key][k] = v / every
        F_log[k] = F_acc / every
        _check_state(model, state, lo, hi)

    # sensor model
    q_m, qd_m = log["q"].copy(), log["qd"].copy()
    if cfg.noisy:
        q_m += rng_noise.normal(0.0, math.sqrt(cfg.var_q), q_m.shape)
        sd = np.full(n, math.sqrt(cfg.var_qd))
        sd[_translational(model)] = math.sqrt(cfg.var_base_vel)
        qd_m += rng_noise.normal(0.0, 1.0, qd_m.shape) * sd
        gyro = rng_noise.normal(0.0, math.sqrt(cfg.var_gyro), (n_log, 3))
        accn = rng_noise.normal(0.0, math.sqrt(cfg.var_acc), (n_log, 3))
        imu[:, 6:9] += gyro
        imu[:, 9:12] += accn
        _rotational_rates_from_gyro(model, q_m, qd_m, imu)
    log["q_m"], log["qd_m"] = q_m, qd_m
    if cfg.noisy:
        log["tau_n"] = noise_torque(sim.nominal, log["q"], log["qd"], q_m, qd_m, dt * every)
        log["tau_u"] = log["tau_u"] + log["tau_n"]

    meta = {"scenario": sc.to_dict(), "uncertainty": cfg.to_dict(), "seed": int(seed), "model": model.name,
            "dt": dt, "dt_log": dt * every, "nominal_scale": cfg.model_scale, "integrator": integrator}
    meta["config_hash"] = config_hash({k: meta[k] for k in ("scenario", "uncertainty", "seed", "model")})
    return SimLog(coords=list(names), contacts=list(sim.contact_names), groups=group_names, t=t_log,
                  imu=imu, contact_force=F_log, stance=stance_log,
                  annotations=[d.annotation() for d in disturbances], meta=meta, **log)


def _per_joint(value, names, nv) -> np.ndarray:
    """Expand a scalar or ``{joint: value, "default": value}`` gain spec to a vector (0 on virtual joints)."""
    n = len(names)
    out = np.zeros(n)
    if isinstance(value, dict):
        default = float(value.get("default", 0.0))
        unknown = set(value) - set(names) - {"default"}
        if unknown:
            raise ValueError(f"gains reference unknown joints {sorted(unknown)}")
        for i in range(nv, n):
            out[i] = float(value.get(names[i], default))
    else:
        out[nv:] = float(value)
    return out


def model_mass(model: RobotModel) -> float:
    return float(sum(l.mass for l in model.links))


def _check_state(model, state, lo, hi):
    nv = model.n_virtual
    if not np.all(np.isfinite(state.q)):
        raise SimulationError(f"non-finite state at t={state.t:.3f}")
    if np.any(np.abs(state.qd) > 100.0):
        i = int(np.argmax(np.abs(state.qd)))
        raise SimulationError(f"runaway velocity on {model.coordinate_names[i]} at t={state.t:.3f}")
    if model.base_mode != "fixed":
        rot = [2] if model.base_mode == "floating_planar" else [4, 5]
        if np.any(np.abs(state.q[rot]) > 1.2):
            raise SimulationError(f"base tipped over at t={state.t:.3f}: {state.q[:nv]}")


def _translational(model: RobotModel) -> list:
    return {"fixed": [], "floating_planar": [0, 1], "floating_spatial": [0, 1, 2]}[model.base_mode]


def _rotational_rates_from_gyro(model: RobotModel, q_m, qd_m, imu):
    """Overwrite measured base rotational rates with the ones implied by the gyro reading."""
    if model.base_mode == "fixed":
        return
    rot = [2] if model.base_mode == "floating_planar" else [3, 4, 5]
    t = model.tree
    for k in range(q_m.shape[0]):
        R, p, S = dyn._kinematics(t.parent, t.jtype, t.axis, t.rot_tree, t.pos_tree, q_m[k])
        root = model.n_virtual - 1
        w_world = R[root] @ imu[k, 6:9]
        A = S[rot, :3].T
        qd_m[k, rot] = np.linalg.lstsq(A, w_world, rcond=None)[0]


def noise_torque(nominal: RobotModel, q, qd, q_m, qd_m, dt: float) -> np.ndarray:
    """Sensor-noise share of the uncertainty torque.

    The nominal dynamics torque written in momentum form, ``dp/dt - beta``,
    evaluated on measured minus true channels with a forward difference over
    each log interval (so it lines up with the interval-mean torque columns).
    """
    N = q.shape[0]
    p = np.empty_like(q)
    pm = np.empty_like(q)
    b = np.empty_like(q)
    bm = np.empty_like(q)
    for k in range(N):
        p[k] = dyn.mass_matrix(nominal, q[k]) @ qd[k]
        pm[k] = dyn.mass_matrix(nominal, q_m[k]) @ qd_m[k]
        b[k] = dyn.beta_term(nominal, q[k], qd[k])
        bm[k] = dyn.beta_term(nominal, q_m[k], qd_m[k])
    out = np.zeros_like(q)
    out[:-1] = (np.diff(pm, axis=0) - np.diff(p, axis=0)) / dt - (bm[:-1] - b[:-1])
    return out
