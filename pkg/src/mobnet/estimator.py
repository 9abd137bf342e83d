"""External-torque estimators: MOB-Net and the comparison baselines.

MOB-Net subtracts the networks' uncertainty-torque prediction from the
observer residual, ``tau_e_hat = r - tau_u_hat``. MOB is the same path with
``tau_u_hat = 0``. MOB-fric subtracts a fitted joint-friction model passed
through the observer filter, MOB-fric-BPF additionally band-passes that
estimate, and FTS-e2e regresses the filtered external torque directly.
"""
from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import signal as sps

from . import observer as obsv
from .learn.data import tick_features, features
from .learn.gru import SIGMA_MIN
from .model import RobotModel, perturb_inertial
from .simulator import SimLog

TRANSIENT = 500  # rows skipped at the start of a log by the error metrics
EPS_STATIC = 0.01  # rad/s, support of the breakaway regressor


class EstimatorError(ValueError):
    pass


@dataclass
class EstimatorOutput:
    tau_e: np.ndarray
    tau_u: np.ndarray
    sigma_u: np.ndarray
    r: np.ndarray
    latency: float = 0.0


@dataclass
class Tick:
    """Measured inputs of one sample; ``tau_prev`` is the command of the interval just ended."""

    q_m: np.ndarray
    qd_m: np.ndarray
    tau_prev: np.ndarray
    imu: np.ndarray


def nominal_model(model: RobotModel, log: Optional[SimLog] = None, scale: Optional[float] = None) -> RobotModel:
    """The model the observer uses for a log (inertial scale recorded in its metadata)."""
    s = scale if scale is not None else (log.meta.get("nominal_scale", 1.0) if log is not None else 1.0)
    return model if s == 1.0 else perturb_inertial(model, s)


def log_ticks(log: SimLog):
    """Stream a log as Tick records (row 0 has a zero previous torque)."""
    zero = np.zeros(log.tau_d.shape[1])
    for k in range(len(log)):
        yield Tick(log.q_m[k], log.qd_m[k], log.tau_d[k - 1] if k else zero, log.imu[k])


def _check_nets(nets: dict, n_v: int) -> None:
    seen = set()
    for name, net in nets.items():
        outs = set(net.layout.outputs)
        if max(outs, default=-1) >= n_v:
            raise EstimatorError(f"network {name} predicts coordinate outside the model (n_v={n_v})")
        if outs & seen:
            raise EstimatorError(f"network {name} overlaps another group's outputs")
        seen |= outs


class MobNetEstimator:
    """Observer plus per-group networks, advanced one sample at a time."""

    def __init__(self, nominal: RobotModel, nets: Optional[dict] = None, K0=obsv.DEFAULT_GAIN, dt: float = 1e-3):
        self.model = nominal
        self.nets = dict(nets or {})
        _check_nets(self.nets, nominal.n_v)
        self.obs = obsv.MomentumObserver(nominal, K0, dt)
        self.started = False

    def reset(self, q_m, qd_m) -> None:
        self.obs.reset(q_m, qd_m)
        for net in self.nets.values():
            net.reset()
        self.started = True

    def step(self, tick: Tick) -> EstimatorOutput:
        return mobnet_step(self, tick)


def mobnet_step(est: MobNetEstimator, tick: Tick) -> EstimatorOutput:
    """Advance observer and networks by one sample; ``tau_e = r - tau_u`` exactly."""
    t0 = time.perf_counter()
    n = est.model.n_v
    if not est.started:
        est.reset(tick.q_m, tick.qd_m)
        r = np.zeros(n)
    else:
        r = est.obs.update(tick.q_m, tick.qd_m, tick.tau_prev)
    tau_u = np.zeros(n)
    sigma = np.full(n, SIGMA_MIN)
    for net in est.nets.values():
        m, s = net.step(tick_features(net.layout, tick.q_m, tick.qd_m, tick.tau_prev, tick.imu))
        out = list(net.layout.outputs)
        tau_u[out] = m
        sigma[out] = s
    return EstimatorOutput(r - tau_u, tau_u, sigma, r, time.perf_counter() - t0)


def fts_e2e_step(nets: dict, tick: Tick, n_v: int) -> EstimatorOutput:
    """Direct external-torque regression; no observer (``r`` is reported as zeros)."""
    t0 = time.perf_counter()
    tau_e = np.zeros(n_v)
    sigma = np.full(n_v, SIGMA_MIN)
    for net in nets.values():
        m, s = net.step(tick_features(net.layout, tick.q_m, tick.qd_m, tick.tau_prev, tick.imu))
        out = list(net.layout.outputs)
        tau_e[out] = m
        sigma[out] = s
    return EstimatorOutput(tau_e, np.zeros(n_v), sigma, np.zeros(n_v), time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# batch evaluation over a whole log (same numbers as the streaming path)


@dataclass
class Estimate:
    name: str
    tau_e: np.ndarray  # (N, n_v)
    sigma_u: np.ndarray
    joints: list  # coordinates the estimator covers
    r: Optional[np.ndarray] = None
    tau_u: Optional[np.ndarray] = None


def residual(model: RobotModel, log: SimLog, K0=obsv.DEFAULT_GAIN) -> np.ndarray:
    """Observer residual of a log on the model's nominal version."""
    return obsv.run_observer(nominal_model(model, log), log.q_m, log.qd_m, log.tau_d, K0, log.dt)


def _actuated(log_or_model) -> list:
    nv = log_or_model.n_virtual
    return list(range(nv, log_or_model.n_v))


def mob(model: RobotModel, log: SimLog, r=None, K0=obsv.DEFAULT_GAIN) -> Estimate:
    r = residual(model, log, K0) if r is None else r
    return Estimate("MOB", r.copy(), np.full_like(r, SIGMA_MIN), _actuated(model), r, np.zeros_like(r))


def mobnet(model: RobotModel, log: SimLog, nets: dict, r=None, K0=obsv.DEFAULT_GAIN, name="MOB-Net") -> Estimate:
    _check_nets(nets, model.n_v)
    r = residual(model, log, K0) if r is None else r
    tau_u = np.zeros_like(r)
    sigma = np.full_like(r, SIGMA_MIN)
    for net in nets.values():
        m, s = net.run(features(log, net.layout))
        out = list(net.layout.outputs)
        tau_u[:, out] = m
        sigma[:, out] = s
    return Estimate(name, r - tau_u, sigma, _actuated(model), r, tau_u)


def fts_e2e(model: RobotModel, log: SimLog, nets: dict) -> Estimate:
    _check_nets(nets, model.n_v)
    n = model.n_v
    tau_e = np.zeros((len(log), n))
    sigma = np.full((len(log), n), SIGMA_MIN)
    joints = []
    for net in nets.values():
        m, s = net.run(features(log, net.layout))
        out = list(net.layout.outputs)
        tau_e[:, out] = m
        sigma[:, out] = s
        joints += out
    return Estimate("FTS-e2e", tau_e, sigma, sorted(joints))


# ---------------------------------------------------------------------------
# friction baseline


@dataclass
class FrictionFit:
    joints: list
    coulomb: np.ndarray
    viscous: np.ndarray
    static: np.ndarray
    rms_residual: np.ndarray
    degenerate: list = field(default_factory=list)
    eps: float = EPS_STATIC

    def predict(self, qd) -> np.ndarray:
        """Friction-model torque (N, len(joints)) for velocities of the fitted joints."""
        qd = np.atleast_2d(qd)
        s = np.sign(qd)
        return s * self.coulomb + self.viscous * qd + s * (np.abs(qd) < self.eps) * self.static

    def to_dict(self) -> dict:
        return {"joints": self.joints, "coulomb": self.coulomb.tolist(), "viscous": self.viscous.tolist(),
                "static": self.static.tolist(), "rms_residual": self.rms_residual.tolist(),
                "degenerate": self.degenerate, "eps": self.eps}


def friction_regressors(qd, eps: float = EPS_STATIC) -> np.ndarray:
    """(N, 3) columns [sgn(qd), qd, sgn(qd) 1{|qd| < eps}]."""
    s = np.sign(qd)
    return np.stack([s, qd, s * (np.abs(qd) < eps)], axis=-1)


def fit_friction(qd, target, joints, K0=None, dt: float = 1e-3, eps: float = EPS_STATIC) -> FrictionFit:
    """Per-joint least squares of ``target ~ friction_regressors(qd) @ [a, b, c]``.

    ``qd`` and ``target`` are (N, n_v) or lists of such arrays (one per
    trajectory). With ``K0`` set, the regressors pass through the observer's
    first-order filter first, which matches targets built from observer
    residuals. Solved with the normal equations; a joint whose regressor is
    rank deficient gets a zero model and a warning.
    """
    qd_list = qd if isinstance(qd, (list, tuple)) else [qd]
    tg_list = target if isinstance(target, (list, tuple)) else [target]
    if len(qd_list) != len(tg_list) or not qd_list:
        raise ValueError("need matching, non-empty velocity and target sets")
    J = list(joints)
    a, b, c, res = (np.zeros(len(J)) for _ in range(4))
    bad = []
    for i, j in enumerate(J):
        Phi, y = [], []
        for v, t in zip(qd_list, tg_list):
            P = friction_regressors(np.asarray(v)[:, j], eps)
            if K0 is not None:
                P = obsv.lowpass(P, K0, dt)
            Phi.append(P)
            y.append(np.asarray(t)[:, j])
        Phi = np.vstack(Phi)
        y = np.concatenate(y)
        A = Phi.T @ Phi
        keep = np.abs(np.diag(A)) > 1e-12 * max(len(y), 1)
        theta = np.zeros(3)
        if not keep[:2].all():
            bad.append(j)
            warnings.warn(f"fit_friction: joint {j} regressor is rank deficient; using a zero model")
        else:
            idx = np.flatnonzero(keep)
            sub = A[np.ix_(idx, idx)]
            if np.linalg.cond(sub) > 1e12:
                bad.append(j)
                warnings.warn(f"fit_friction: joint {j} regressor is rank deficient; using a zero model")
            else:
                theta[idx] = np.linalg.solve(sub, Phi[:, idx].T @ y)
        a[i], b[i], c[i] = theta
        res[i] = np.sqrt(np.mean((y - Phi @ theta) ** 2))
    return FrictionFit(J, a, b, c, res, bad, eps)


def mob_fric(model: RobotModel, log: SimLog, fit: FrictionFit, r=None, K0=obsv.DEFAULT_GAIN) -> Estimate:
    """Residual minus the observer-filtered friction prediction."""
    r = residual(model, log, K0) if r is None else r
    J = fit.joints
    f = obsv.lowpass(fit.predict(log.qd_m[:, J]), K0, log.dt)
    tau_u = np.zeros_like(r)
    tau_u[:, J] = f
    return Estimate("MOB-fric", r - tau_u, np.full_like(r, SIGMA_MIN), list(J), r, tau_u)


# ---------------------------------------------------------------------------
# band-pass filter


def bandpass_design(f_lo: float = 2.0, f_hi: float = 15.0, fs: float = 1000.0) -> np.ndarray:
    """2nd-order Butterworth high-pass at ``f_lo`` cascaded with 2nd-order low-pass at ``f_hi`` (SOS)."""
    if not 0 < f_lo < f_hi:
        raise ValueError("need 0 < f_lo < f_hi")
    if fs <= 2 * f_hi:
        raise ValueError("sampling rate must exceed twice the upper band edge")
    hp = sps.butter(2, f_lo, btype="highpass", fs=fs, output="sos")
    lp = sps.butter(2, f_hi, btype="lowpass", fs=fs, output="sos")
    return np.vstack([hp, lp])


class BandPass:
    """Streaming form: call with one sample vector at a time."""

    def __init__(self, n: int, f_lo=2.0, f_hi=15.0, fs=1000.0):
        self.sos = bandpass_design(f_lo, f_hi, fs)
        self.zi = np.zeros((self.sos.shape[0], 2, n))

    def __call__(self, x) -> np.ndarray:
        y, self.zi = sps.sosfilt(self.sos, np.asarray(x, float)[None], axis=0, zi=self.zi)
        return y[0]


def bandpass(x, f_lo: float = 2.0, f_hi: float = 15.0, fs: float = 1000.0) -> np.ndarray:
    """Causal band-pass along axis 0 (zero initial state)."""
    return sps.sosfilt(bandpass_design(f_lo, f_hi, fs), np.asarray(x, float), axis=0)


def mob_fric_bpf(est: Estimate, fs: float) -> Estimate:
    return Estimate("MOB-fric-BPF", bandpass(est.tau_e, fs=fs), est.sigma_u, est.joints, est.r, est.tau_u)


# ---------------------------------------------------------------------------
# metrics and reports


def truth(log: SimLog, K0=obsv.DEFAULT_GAIN) -> np.ndarray:
    """Reference external torque: the true one through the observer's filter."""
    return obsv.lowpass(log.tau_e, K0, log.dt)


def rmse(est, ref, joints=None, skip: int = TRANSIENT, window=None) -> np.ndarray:
    """Per-joint RMSE over rows ``skip:`` (or a ``(i0, i1)`` row window)."""
    e = np.asarray(est) - np.asarray(ref)
    if joints is not None:
        e = e[:, list(joints)]
    e = e[window[0]:window[1]] if window is not None else e[skip:]
    return np.sqrt(np.mean(e ** 2, axis=0))


def r_rmse(est, ref, joints=None, skip: int = TRANSIENT) -> np.ndarray:
    """RMSE as a percentage of the per-joint maximum |reference| (nan where it is 0)."""
    ref = np.asarray(ref)
    peak = np.abs(ref[:, list(joints)] if joints is not None else ref)[skip:].max(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(peak > 0, 100.0 * rmse(est, ref, joints, skip) / peak, np.nan)


def evaluation_rows(estimates, log: SimLog, label: str, K0=obsv.DEFAULT_GAIN, joints=None) -> list:
    """One row per (estimator, joint): RMSE and r-RMSE against the filtered true torque."""
    ref = truth(log, K0)
    rows = []
    for est in estimates:
        J = [j for j in (joints if joints is not None else est.joints) if j in est.joints]
        e = rmse(est.tau_e, ref, J)
        p = r_rmse(est.tau_e, ref, J)
        for j, a, b in zip(J, e, p):
            rows.append({"log": label, "estimator": est.name, "joint": log.coords[j], "rmse": float(a),
                         "r_rmse": float(b)})
    return rows


def latency_stats(latencies) -> dict:
    lat = np.asarray(latencies, float)
    return {"mean_ms": float(lat.mean() * 1e3), "p50_ms": float(np.percentile(lat, 50) * 1e3),
            "p99_ms": float(np.percentile(lat, 99) * 1e3), "max_ms": float(lat.max() * 1e3), "n": int(lat.size)}


REPORT_COLUMNS = ("log", "estimator", "joint", "rmse", "r_rmse")


def summary_table(rows) -> list:
    """Mean RMSE / r-RMSE per estimator and joint across logs, plus an ``avg`` joint row."""
    keys = sorted({(r["estimator"], r["joint"]) for r in rows}, key=lambda k: (k[0], k[1]))
    out = []
    for est in sorted({r["estimator"] for r in rows}):
        per = []
        for e, j in keys:
            if e != est:
                continue
            sel = [r for r in rows if r["estimator"] == e and r["joint"] == j]
            row = {"log": "mean", "estimator": e, "joint": j,
                   "rmse": float(np.mean([r["rmse"] for r in sel])),
                   "r_rmse": float(np.nanmean([r["r_rmse"] for r in sel])) if any(
                       np.isfinite(r["r_rmse"]) for r in sel) else float("nan")}
            per.append(row)
        out += per
        out.append({"log": "mean", "estimator": est, "joint": "avg",
                    "rmse": float(np.mean([r["rmse"] for r in per])),
                    "r_rmse": float(np.nanmean([r["r_rmse"] for r in per]))
                    if any(np.isfinite(r["r_rmse"]) for r in per) else float("nan")})
    return out


def write_report(rows, path, meta: Optional[dict] = None) -> None:
    """CSV with :data:`REPORT_COLUMNS`, or JSON (rows plus metadata) if the path ends in .json."""
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps({"meta": meta or {}, "rows": rows}, indent=1, default=float))
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in REPORT_COLUMNS})
