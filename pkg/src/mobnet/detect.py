"""Collision detection on estimator outputs and wrench identification.

Detection path per joint: first-order 15 Hz low-pass, then a persistence
filter (the signal must exceed its threshold for ``ceil(horizon / dt)``
consecutive samples). The mean channel watches ``|tau_e_hat|``, the sigma
channel watches ``sigma_u_hat``. Joints flagged in the expected-contact mask
never raise events.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import signal as sps

from . import dynamics as dyn
from .model import LimbGrouping, RobotModel
from .simulator import SimLog

MODES = ("or", "mean", "sigma")
MARGIN = 1.1


@dataclass
class DetectionConfig:
    thr_mean: np.ndarray
    thr_sigma: Optional[np.ndarray] = None
    horizon: float = 0.005  # s
    cutoff: float = 15.0  # Hz
    mode: str = "or"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.horizon <= 0 or self.cutoff <= 0:
            raise ValueError("horizon and cutoff must be positive")
        for thr in (self.thr_mean, self.thr_sigma):
            if thr is not None and np.any(np.asarray(thr) <= 0):
                raise ValueError("thresholds must be positive")

    def ticks(self, dt: float) -> int:
        return max(1, math.ceil(self.horizon / dt - 1e-9))

    def with_mode(self, mode: str) -> "DetectionConfig":
        return DetectionConfig(self.thr_mean, self.thr_sigma, self.horizon, self.cutoff, mode)


@dataclass
class DetectionEvent:
    time: float
    joint: int
    channel: str
    value: float
    window: Optional[int] = None


def lowpass15(x, dt: float, cutoff: float = 15.0) -> np.ndarray:
    """Causal first-order Butterworth low-pass along axis 0."""
    b, a = sps.butter(1, cutoff, fs=1.0 / dt)
    return sps.lfilter(b, a, np.asarray(x, float), axis=0)


def detection_signals(tau_e, sigma_u, dt: float, cutoff: float = 15.0) -> tuple:
    """Filtered mean channel ``|LPF(tau_e)|`` and sigma channel ``LPF(sigma_u)``."""
    m = np.abs(lowpass15(tau_e, dt, cutoff))
    s = lowpass15(sigma_u, dt, cutoff) if sigma_u is not None else None
    return m, s


def contact_mask(log: SimLog, grouping: LimbGrouping, guard: float = 0.1, watch=None) -> np.ndarray:
    """Expected-contact mask (N, n_v); True where detection is suppressed.

    A leg is masked while its stance flag is set and for ``guard`` seconds
    around every stance phase (lift-off and touch-down are not collisions).
    Only the coordinates listed in ``watch`` (default: joints of the logged
    limb groups) are ever unmasked, so base rows stay masked.
    """
    N, n = len(log), log.q.shape[1]
    mask = np.ones((N, n), dtype=bool)
    g_idx = {name: i for i, name in enumerate(log.groups)}
    pad = int(round(guard / log.dt))
    for g in grouping.actuated_groups:
        joints = [j for j in g.joints if watch is None or j in watch]
        if g.name in g_idx:
            st = log.stance[:, g_idx[g.name]].astype(bool)
            if pad:
                kernel = np.ones(2 * pad + 1, dtype=int)
                st = np.convolve(st.astype(int), kernel, mode="same") > 0
        else:
            st = np.zeros(N, dtype=bool)
        for j in joints:
            mask[:, j] = st
    return mask


def calibrate_thresholds(signals, masks=None, margin: float = MARGIN) -> np.ndarray:
    """``margin`` times the per-joint maximum over unmasked samples of collision-free runs.

    ``signals`` is a list of (N_i, n) filtered signals. Joints that are never
    unmasked get an infinite threshold. A watched joint whose maximum is zero
    is rejected.
    """
    if not signals:
        raise ValueError("empty calibration set")
    n = signals[0].shape[1]
    peak = np.full(n, -np.inf)
    for i, s in enumerate(signals):
        m = np.zeros_like(s, dtype=bool) if masks is None else masks[i]
        v = np.where(m, -np.inf, np.abs(s))
        peak = np.maximum(peak, v.max(axis=0))
    watched = np.isfinite(peak)
    if np.any(peak[watched] <= 0):
        bad = np.flatnonzero(watched & (peak <= 0)).tolist()
        raise ValueError(f"calibration signal identically zero on joints {bad}")
    return np.where(watched, margin * peak, np.inf)


def calibrate(estimates, masks, dt: float, horizon=0.005, cutoff=15.0, mode="or") -> DetectionConfig:
    """Thresholds for both channels from collision-free ``(tau_e, sigma_u)`` pairs."""
    ms, ss = [], []
    for tau_e, sig in estimates:
        m, s = detection_signals(tau_e, sig, dt, cutoff)
        ms.append(m)
        ss.append(s)
    thr_s = calibrate_thresholds(ss, masks) if all(s is not None for s in ss) else None
    return DetectionConfig(calibrate_thresholds(ms, masks), thr_s, horizon, cutoff, mode)


def _persistent_onsets(over: np.ndarray, n: int) -> list:
    """(row, col) where a run of True reaches length ``n`` (one onset per run)."""
    out = []
    N, J = over.shape
    for j in range(J):
        run = 0
        for k in range(N):
            run = run + 1 if over[k, j] else 0
            if run == n:
                out.append((k, j))
    return out


def detect(tau_e, sigma_u, cfg: DetectionConfig, dt: float, mask=None, t0: float = 0.0) -> list:
    """Events sorted by time. ``mask`` (N, n) True suppresses a joint at that sample."""
    m, s = detection_signals(tau_e, sigma_u, dt, cfg.cutoff)
    n = cfg.ticks(dt)
    allowed = np.ones_like(m, dtype=bool) if mask is None else ~np.asarray(mask, bool)
    events = []
    channels = []
    if cfg.mode in ("or", "mean"):
        channels.append(("mean", m, cfg.thr_mean))
    if cfg.mode in ("or", "sigma"):
        if cfg.thr_sigma is None or s is None:
            raise ValueError("sigma channel requested without sigma thresholds/signal")
        channels.append(("sigma", s, cfg.thr_sigma))
    for name, sig, thr in channels:
        over = (sig > np.asarray(thr)) & allowed
        for k, j in _persistent_onsets(over, n):
            events.append(DetectionEvent(t0 + k * dt, int(j), name, float(sig[k, j])))
    events.sort(key=lambda e: (e.time, e.joint, e.channel))
    return events


@dataclass
class DetectionResult:
    windows: list  # dicts: window, start, end, detected, channel, delay_ms
    false_positives: int
    events: list = field(default_factory=list)

    @property
    def successes(self) -> int:
        return sum(w["detected"] for w in self.windows)

    @property
    def mean_delay_ms(self) -> float:
        d = [w["delay_ms"] for w in self.windows if w["detected"]]
        return float(np.mean(d)) if d else float("nan")


def score(events, annotations, slack: float = 0.05) -> DetectionResult:
    """Match events to collision windows ``[start, end + slack]``; the rest are false positives."""
    wins = []
    for i, a in enumerate(annotations):
        hit = [e for e in events if a["start"] <= e.time <= a["end"] + slack]
        first = hit[0] if hit else None
        for e in hit:
            e.window = i
        wins.append({"window": i, "start": a["start"], "end": a["end"], "detected": bool(hit),
                     "channel": first.channel if first else "", "delay_ms": (first.time - a["start"]) * 1e3
                     if first else float("nan")})
    fp = sum(1 for e in events if e.window is None)
    return DetectionResult(wins, fp, list(events))


def write_detection_report(rows, path) -> None:
    """Rows with keys scenario, window, detected, channel, delay_ms."""
    cols = ("scenario", "window", "detected", "channel", "delay_ms")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in cols})


def aggregate(rows) -> list:
    """Success count and mean delay per scenario (detector), Table-7 style."""
    out = []
    for sc in dict.fromkeys(r["scenario"] for r in rows):
        sel = [r for r in rows if r["scenario"] == sc]
        d = [r["delay_ms"] for r in sel if r["detected"]]
        out.append({"scenario": sc, "success": sum(bool(r["detected"]) for r in sel), "total": len(sel),
                    "mean_delay_ms": float(np.mean(d)) if d else float("nan")})
    return out


# ---------------------------------------------------------------------------
# wrench identification


@dataclass
class WrenchEstimate:
    wrench: np.ndarray  # [force; moment] about the contact point, world axes
    residual: float
    rank: int
    degraded: bool
    rows: list


def support_path(model: RobotModel, link: str) -> list:
    """Coordinates from the world to ``link`` (virtual joints included)."""
    body = model.tree.body_of(link)
    path = []
    while body >= 0:
        path.append(int(body))
        body = int(model.tree.parent[body])
    return sorted(path)


def wrench_dim(model: RobotModel) -> int:
    """Identifiable wrench components: 3 for planar models (fx, fz, my), else 6."""
    return 3 if model.base_mode == "floating_planar" else 6


def identify_wrench(model: RobotModel, q, link: str, point, tau_e, rows=None) -> WrenchEstimate:
    """Least-squares ``J_c^T F = tau_e`` over the support path rows (virtual rows included).

    Rank below :func:`wrench_dim` gives the minimum-norm solution flagged as degraded.
    """
    J = dyn.contact_jacobian(model, q, link, point)
    rows = support_path(model, link) if rows is None else list(rows)
    A = J[:, rows].T
    b = np.asarray(tau_e, float)[rows]
    F, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    res = float(np.linalg.norm(A @ F - b))
    return WrenchEstimate(F, res, int(rank), bool(rank < wrench_dim(model)), rows)


def unexpected_base_wrench(model: RobotModel, q, tau_e, expected=()) -> tuple:
    """Total external wrench seen by the base minus the identified expected-contact wrenches.

    ``expected`` lists ``(link, point)`` frames. Each expected wrench is
    identified from the actuated joints of its own support path only, since
    the virtual rows carry every external wrench and are the quantity being
    split. Wrenches are expressed about the root-link origin in world axes.
    Returns ``(wrench, degraded)``.
    """
    nv = model.n_virtual
    if nv == 0:
        raise ValueError("unexpected_base_wrench needs a floating base")
    tau_e = np.asarray(tau_e, float)
    root = model.root_link.name
    _, p_base = dyn.link_pose(model, q, root)
    Jb = dyn.contact_jacobian(model, q, root, (0.0, 0.0, 0.0))[:, :nv]
    F_tot, _, rank, _ = np.linalg.lstsq(Jb.T, tau_e[:nv], rcond=None)
    degraded = rank < wrench_dim(model)
    for link, point in expected:
        rows = [j for j in support_path(model, link) if j >= nv]
        est = identify_wrench(model, q, link, point, tau_e, rows)
        degraded |= est.degraded
        x = dyn.point_position(model, q, link, point)
        F_tot = F_tot - dyn.wrench_transform(x, p_base) @ est.wrench
    return F_tot, bool(degraded)
