"""Per-group feature layouts and datasets built from simulation logs.

A group's input at tick k is

    [Q blocks, T block, U block]

where each Q block is ``[q(k), qd(k)]`` of one joint set (the group itself,
then its ancestor chain, then its descendants), the T block is the control
torque of the group's joints over the previous interval (load-bearing limbs
only), and U is the 12-vector IMU record. The virtual group takes Q of every
actuated joint in the grouping plus U.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..model import LimbGrouping
from ..observer import DEFAULT_GAIN, lowpass
from ..simulator import SimLog

IMU_WIDTH = 12
TARGET_KINDS = ("mobnet", "fts")


@dataclass(frozen=True)
class FeatureLayout:
    group: str
    q_blocks: tuple  # tuple of coordinate tuples
    torque: tuple  # coordinates whose previous-interval tau_d is fed
    outputs: tuple  # coordinates predicted
    target_mode: str  # residual_minus_external | residual_only | external

    @property
    def width(self) -> int:
        return 2 * sum(len(b) for b in self.q_blocks) + len(self.torque) + IMU_WIDTH

    def to_dict(self) -> dict:
        return {"group": self.group, "q_blocks": [list(b) for b in self.q_blocks], "torque": list(self.torque),
                "outputs": list(self.outputs), "target_mode": self.target_mode}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureLayout":
        return cls(d["group"], tuple(tuple(b) for b in d["q_blocks"]), tuple(d["torque"]), tuple(d["outputs"]),
                   d["target_mode"])


def feature_layout(grouping: LimbGrouping, group: str, kind: str = "mobnet",
                   torque: Optional[bool] = None) -> FeatureLayout:
    """Table-style input composition for one group.

    ``torque`` forces the T block on or off; by default it is fed to
    load-bearing limbs. ``kind="fts"`` keeps the inputs and switches the
    target to the (filtered) measured external torque.
    """
    if kind not in TARGET_KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    g = grouping[group]
    if g.virtual:
        joints = tuple(j for a in grouping.actuated_groups for j in a.joints)
        blocks = (joints,)
        tq = ()
    else:
        blocks = tuple(b for b in (tuple(g.joints), tuple(g.ancestors), tuple(g.descendants)) if b)
        use_t = g.load_bearing if torque is None else torque
        tq = tuple(g.joints) if use_t else ()
    mode = "external" if kind == "fts" else g.target_mode
    return FeatureLayout(g.name, blocks, tq, tuple(g.joints), mode)


def features(log: SimLog, layout: FeatureLayout) -> np.ndarray:
    """Input matrix (N, width) from the measured channels of a log."""
    cols = []
    for b in layout.q_blocks:
        idx = list(b)
        cols += [log.q_m[:, idx], log.qd_m[:, idx]]
    if layout.torque:
        prev = np.zeros((len(log), len(layout.torque)))
        prev[1:] = log.tau_d[:-1, list(layout.torque)]
        cols.append(prev)
    cols.append(log.imu)
    return np.hstack(cols)


def tick_features(layout: FeatureLayout, q_m, qd_m, tau_prev, imu) -> np.ndarray:
    """One row of :func:`features` from streaming inputs (``tau_prev``: torque of the last interval)."""
    parts = []
    for b in layout.q_blocks:
        idx = list(b)
        parts += [q_m[idx], qd_m[idx]]
    if layout.torque:
        parts.append(np.asarray(tau_prev)[list(layout.torque)])
    parts.append(imu)
    return np.concatenate(parts)


def targets(log: SimLog, residual: np.ndarray, layout: FeatureLayout, K0=DEFAULT_GAIN,
            tau_e_filtered: Optional[np.ndarray] = None) -> np.ndarray:
    """Training target (N, n_out).

    The external-torque measurement is passed through the observer's own
    first-order filter before subtraction, so ``r - LPF(tau_e)`` contains the
    filtered uncertainty torque only (no filter-lag artefacts).
    """
    out = list(layout.outputs)
    if layout.target_mode == "residual_only":
        return residual[:, out].copy()
    te = tau_e_filtered if tau_e_filtered is not None else lowpass(log.tau_e, K0, log.dt)
    if layout.target_mode == "external":
        return te[:, out].copy()
    return residual[:, out] - te[:, out]


@dataclass
class GroupDataset:
    layout: FeatureLayout
    X: list = field(default_factory=list)  # one (N_i, width) array per trajectory
    Y: list = field(default_factory=list)
    names: list = field(default_factory=list)

    def __len__(self):
        return len(self.X)

    @property
    def ticks(self) -> int:
        return int(sum(x.shape[0] for x in self.X))

    def subset(self, idx) -> "GroupDataset":
        return GroupDataset(self.layout, [self.X[i] for i in idx], [self.Y[i] for i in idx],
                            [self.names[i] for i in idx])


def build_dataset(logs, grouping: LimbGrouping, residuals, kind: str = "mobnet", K0=DEFAULT_GAIN,
                  groups=None) -> dict:
    """Per-group datasets from logs and their observer residuals.

    ``residuals[i]`` is the residual matrix of ``logs[i]`` (same rows). FTS
    datasets are built only for load-bearing limbs, the ones with a measured
    external torque.
    """
    if len(logs) != len(residuals):
        raise ValueError("one residual matrix per log is required")
    if not logs:
        raise ValueError("no logs given")
    names = groups or grouping.names
    if kind == "fts":
        names = [g for g in names if not grouping[g].virtual and grouping[g].load_bearing]
    layouts = {g: feature_layout(grouping, g, kind) for g in names}
    out = {g: GroupDataset(layouts[g]) for g in names}
    for i, (log, r) in enumerate(zip(logs, residuals)):
        if r.shape != log.q.shape:
            raise ValueError(f"log {i}: residual shape {r.shape} does not match states {log.q.shape}")
        te = lowpass(log.tau_e, K0, log.dt)
        for g in names:
            X = features(log, layouts[g])
            if X.shape[1] != layouts[g].width:
                raise ValueError(f"group {g}: feature width {X.shape[1]} != layout width {layouts[g].width}")
            Y = targets(log, r, layouts[g], K0, te)
            if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
                raise ValueError(f"log {i}: non-finite features or targets for group {g}")
            out[g].X.append(X)
            out[g].Y.append(Y)
            out[g].names.append(log.meta.get("name", f"log{i}"))
    return out


def split_indices(n: int, ratio: float = 0.9, rng: Optional[np.random.Generator] = None):
    """Trajectory-level train/validation split (at least one of each when n >= 2)."""
    if n < 2:
        return [0], []
    idx = np.arange(n) if rng is None else rng.permutation(n)
    n_val = min(max(1, int(round((1 - ratio) * n))), n - 1)
    return sorted(idx[n_val:].tolist()), sorted(idx[:n_val].tolist())
