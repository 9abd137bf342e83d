"""Experiment orchestration shared by the command line and the acceptance tests.

An experiment is one config document. It names a robot, a base scenario and
a set of log collections (training with and without random torque
exploration, calibration, held-out test logs per uncertainty level, and logs
with scripted swing-leg collisions). Every log seed derives from the
experiment seed and the collection name, so any artifact can be rebuilt from
(config, seed).
"""
from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import detect as det
from . import estimator as est
from .learn import build_dataset
from .learn.train import NetworkConfig, TrainConfig, train_all
from .model import RobotModel, derive_groups, load_model, reference_model, REFERENCE_MODELS
from .simulator import Scenario, SimLog, UncertaintyConfig, config_hash, run_scenario

DEFAULT_CONFIG = {
    "model": "planar_biped",
    "seed": 0,
    "K0": 100.0,
    "scenario": {
        "duration": 10.0,
        "dt": 5e-4,
        "log_every": 2,
        "motion": {"type": "march"},
        "kp": {"default": 300.0, "RL3": 150.0, "LL3": 150.0},
        "kd": {"default": 10.0, "RL3": 3.0, "LL3": 3.0},
    },
    "rte": {"bound": 15.0, "duration": [0.1, 0.5]},
    "sets": {
        "train": {"n": 6, "level": "all_uncertainty", "rte": True},
        "train_plain": {"n": 6, "level": "all_uncertainty", "rte": False, "seed_from": "train"},
        "calib": {"n": 10, "level": "all_uncertainty"},
        "ideal": {"n": 1, "level": "ideal", "duration": 8.0},
        "noise": {"n": 2, "level": "sensor_noise", "duration": 8.0},
        "test": {"n": 10, "level": "all_uncertainty", "duration": 6.0},
        "collide": {"n": 3, "level": "all_uncertainty", "collisions": True},
    },
    "collision": {
        "joints": {"RL": ["RL2", "RL1"], "LL": ["LL2", "LL1"]},
        "value": 30.0,
        "duration": 0.1,
        "offset": 0.3,
    },
    "grouping": {"single": False, "ignore": []},
    "network": {"hidden": 64, "horizon": 50, "virtual_horizon": 100},
    "train": {"epochs": 40, "batch": 64, "chunk": 1000, "lr_start": 0.05, "lr_end": 5e-4},
    "detection": {"guard": 0.1, "horizon": 0.005, "cutoff": 15.0, "slack": 0.05},
    "ablation": {"sizes": [16, 32, 64], "groups": ["RL", "LL"]},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "sets":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: Optional[dict] = None) -> dict:
    """Defaults, updated by a YAML document and then by ``overrides``."""
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        try:
            doc = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config {p}: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {p}: top level must be a mapping")
        base_dir = p.parent
        m = doc.get("model")
        if isinstance(m, str) and m not in REFERENCE_MODELS and not Path(m).is_absolute():
            doc["model"] = str(base_dir / m)
    cfg = _merge(DEFAULT_CONFIG, doc)
    cfg = _merge(cfg, overrides or {})
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    unknown = set(cfg) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    m = cfg["model"]
    if m not in REFERENCE_MODELS and not Path(m).exists():
        raise ConfigError(f"model {m!r} is neither a reference model nor an existing file")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    for name, s in cfg["sets"].items():
        if int(s.get("n", 0)) < 0:
            raise ConfigError(f"set {name}: n must be >= 0")
        UncertaintyConfig.from_dict({"level": s.get("level", "all_uncertainty")})
        if s.get("seed_from") and s["seed_from"] not in cfg["sets"]:
            raise ConfigError(f"set {name}: seed_from names unknown set {s['seed_from']!r}")
    if cfg["K0"] <= 0:
        raise ConfigError("K0 must be positive")
    if cfg["train"].get("epochs", 1) < 1:
        raise ConfigError("train.epochs must be >= 1")


def experiment_hash(cfg: dict) -> str:
    return config_hash(cfg)


def get_model(cfg: dict) -> RobotModel:
    m = cfg["model"]
    return reference_model(m) if m in REFERENCE_MODELS else load_model(m)


def get_grouping(cfg: dict, model: RobotModel, single: Optional[bool] = None):
    g = cfg.get("grouping", {})
    return derive_groups(model, single=g.get("single", False) if single is None else single,
                         ignore=tuple(g.get("ignore", ())))


def log_seed(base: int, set_name: str, index: int) -> int:
    ss = np.random.SeedSequence([int(base), zlib.crc32(set_name.encode()), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def set_scenario(cfg: dict, set_name: str, index: int) -> dict:
    """Scenario document for one log of a collection."""
    spec = cfg["sets"][set_name]
    sc = copy.deepcopy(cfg["scenario"])
    sc["name"] = f"{set_name}_{index:03d}"
    if "duration" in spec:
        sc["duration"] = float(spec["duration"])
    rte = dict(cfg["rte"])
    rte["enabled"] = bool(spec.get("rte", False))
    sc["rte"] = rte
    if spec.get("collisions"):
        col = cfg["collision"]
        dist = []
        for group, joints in col["joints"].items():
            # rotate through the listed joints and signs from log to log
            joint = joints[index % len(joints)]
            dist.append({"type": "joint_torque", "joint": joint, "value": float(col["value"]) * (-1) ** (index // 2),
                         "duration": float(col["duration"]),
                         "swing": {"group": group, "index": "all", "offset": float(col["offset"]),
                                   "alternate_sign": True}})
        sc["disturbances"] = dist
    return sc


def simulate_log(cfg: dict, set_name: str, index: int, model: Optional[RobotModel] = None) -> SimLog:
    """Log ``index`` of collection ``set_name``, tagged with the experiment hash and seed."""
    model = model or get_model(cfg)
    spec = cfg["sets"][set_name]
    level = UncertaintyConfig.from_dict({"level": spec.get("level", "all_uncertainty")})
    sc = set_scenario(cfg, set_name, index)
    seed = log_seed(cfg["seed"], spec.get("seed_from", set_name), index)
    log = run_scenario(model, sc, level, seed=seed, grouping=get_grouping(cfg, model, single=False))
    log.meta.update(name=sc["name"], set=set_name, experiment_hash=experiment_hash(cfg), experiment_seed=cfg["seed"])
    return log


def simulate_set(cfg: dict, set_name: str, model: Optional[RobotModel] = None, progress=None) -> list:
    model = model or get_model(cfg)
    logs = []
    for i in range(int(cfg["sets"][set_name].get("n", 0))):
        logs.append(simulate_log(cfg, set_name, i, model))
        if progress:
            progress(f"simulated {logs[-1].meta['name']}")
    return logs


def simulate_all(cfg: dict, names=None, progress=None) -> dict:
    model = get_model(cfg)
    return {s: simulate_set(cfg, s, model, progress) for s in (names or cfg["sets"])}


# ---------------------------------------------------------------------------
# training


def network_configs(cfg: dict, grouping) -> dict:
    n = cfg["network"]
    out = {}
    for g in grouping.names:
        hz = n.get("virtual_horizon", n["horizon"]) if grouping[g].virtual else n["horizon"]
        out[g] = NetworkConfig(hidden=int(n["hidden"]), horizon=int(hz))
    return out


def train_variant(cfg: dict, model: RobotModel, logs, residuals, kind: str = "mobnet", grouping=None,
                  groups=None, log=None) -> tuple:
    """Datasets, then one network per group. Returns (nets, curves)."""
    grouping = grouping or get_grouping(cfg, model)
    data = build_dataset(logs, grouping, residuals, kind=kind, K0=cfg["K0"], groups=groups)
    tc = TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})
    return train_all(data, network_configs(cfg, grouping), tc, log)


def residual_set(cfg: dict, model: RobotModel, logs) -> list:
    return [est.residual(model, L, cfg["K0"]) for L in logs]


def fit_friction_baseline(cfg: dict, model: RobotModel, logs, residuals) -> est.FrictionFit:
    """MOB-fric model regressed on the training logs' uncertainty targets."""
    K0 = cfg["K0"]
    joints = list(range(model.n_virtual, model.n_v))
    targets = [r - est.truth(L, K0) for L, r in zip(logs, residuals)]
    return est.fit_friction([L.qd_m for L in logs], targets, joints, K0=K0, dt=logs[0].dt)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Trained:
    """Everything the evaluation stages consume."""

    model: RobotModel
    grouping: object
    mobnet: dict
    fts: dict
    friction: est.FrictionFit
    mobnet_plain: Optional[dict] = None
    curves: list = field(default_factory=list)


def estimates_for(cfg: dict, tr: Trained, log: SimLog, r=None, which=("MOB", "MOB-fric", "MOB-fric-BPF",
                                                                      "MOB-Net", "FTS-e2e")) -> dict:
    K0 = cfg["K0"]
    r = est.residual(tr.model, log, K0) if r is None else r
    out = {}
    if "MOB" in which:
        out["MOB"] = est.mob(tr.model, log, r, K0)
    if "MOB-fric" in which or "MOB-fric-BPF" in which:
        f = est.mob_fric(tr.model, log, tr.friction, r, K0)
        out["MOB-fric"] = f
        if "MOB-fric-BPF" in which:
            out["MOB-fric-BPF"] = est.mob_fric_bpf(f, 1.0 / log.dt)
    if "MOB-Net" in which:
        out["MOB-Net"] = est.mobnet(tr.model, log, tr.mobnet, r, K0)
    if "MOB-Net-noRTE" in which and tr.mobnet_plain:
        out["MOB-Net-noRTE"] = est.mobnet(tr.model, log, tr.mobnet_plain, r, K0, name="MOB-Net-noRTE")
    if "FTS-e2e" in which and tr.fts:
        out["FTS-e2e"] = est.fts_e2e(tr.model, log, tr.fts)
    return out


def leg_joints(grouping) -> list:
    return sorted(j for g in grouping.actuated_groups if g.load_bearing for j in g.joints)


def evaluate_sets(cfg: dict, tr: Trained, sets: dict, residuals: Optional[dict] = None,
                  names=("ideal", "noise", "test")) -> list:
    """Per-joint RMSE rows on the held-out collections, tagged with the uncertainty level."""
    rows = []
    legs = leg_joints(tr.grouping)
    for s in names:
        for i, log in enumerate(sets.get(s, [])):
            r = residuals[s][i] if residuals and s in residuals else None
            ests = estimates_for(cfg, tr, log, r)
            for row in est.evaluation_rows(ests.values(), log, log.meta.get("name", s), cfg["K0"], legs):
                row["level"] = log.meta["uncertainty"]["level"]
                rows.append(row)
    return rows


def mean_rmse(rows, estimator: str, level: str) -> float:
    sel = [r["rmse"] for r in rows if r["estimator"] == estimator and r["level"] == level]
    return float(np.mean(sel)) if sel else float("nan")


def disturbance_windows(log: SimLog, pad: float = 0.05) -> list:
    """(coordinate, i0, i1) row windows of the scripted joint-torque loads."""
    out = []
    for a in log.annotations:
        if a["kind"] != "joint_torque":
            continue
        j = log.coords.index(a["joint"])
        i0 = int(round(a["start"] / log.dt))
        i1 = min(len(log), int(round((a["end"] + pad) / log.dt)))
        out.append((j, i0, i1))
    return out


def unseen_errors(cfg: dict, estimate: est.Estimate, log: SimLog) -> np.ndarray:
    """Estimation error on the disturbed joint inside every disturbance window of a log."""
    ref = est.truth(log, cfg["K0"])
    err = [estimate.tau_e[i0:i1, j] - ref[i0:i1, j] for j, i0, i1 in disturbance_windows(log)]
    return np.concatenate(err) if err else np.zeros(0)


def _rms(e) -> float:
    return float(np.sqrt(np.mean(np.square(e)))) if len(e) else float("nan")


def unseen_rmse(cfg: dict, estimate: est.Estimate, log: SimLog) -> float:
    """RMSE on the disturbed joint pooled over every disturbance window of a log."""
    return _rms(unseen_errors(cfg, estimate, log))


def unseen_table(cfg: dict, tr: Trained, logs, residuals=None,
                 which=("MOB", "MOB-Net", "MOB-Net-noRTE", "FTS-e2e")) -> list:
    """Per-log and pooled (``log == "pooled"``) unseen-disturbance RMSE rows."""
    rows, pooled = [], {}
    for i, L in enumerate(logs):
        r = residuals[i] if residuals else None
        for name, e in estimates_for(cfg, tr, L, r, which=which).items():
            err = unseen_errors(cfg, e, L)
            pooled.setdefault(name, []).append(err)
            rows.append({"log": L.meta.get("name", str(i)), "estimator": name, "rmse": _rms(err)})
    for name, errs in pooled.items():
        rows.append({"log": "pooled", "estimator": name, "rmse": _rms(np.concatenate(errs))})
    return rows


def pooled(rows, estimator: str) -> float:
    return next((r["rmse"] for r in rows if r["log"] == "pooled" and r["estimator"] == estimator), float("nan"))


# ---------------------------------------------------------------------------
# detection


DETECTORS = ("MOB-Net-OR", "MOB-Net-mean", "MOB-Net-sigma", "MOB", "MOB-fric", "MOB-fric-BPF")


def _detector_signals(cfg, tr: Trained, log: SimLog, r=None) -> dict:
    e = estimates_for(cfg, tr, log, r, which=("MOB", "MOB-fric", "MOB-fric-BPF", "MOB-Net"))
    net = e["MOB-Net"]
    return {"MOB-Net": (net.tau_e, net.sigma_u), "MOB": (e["MOB"].tau_e, None),
            "MOB-fric": (e["MOB-fric"].tau_e, None), "MOB-fric-BPF": (e["MOB-fric-BPF"].tau_e, None)}


def detection_suite(cfg: dict, tr: Trained, calib_logs, collide_logs, clean_logs, residuals=None) -> dict:
    """Calibrate every detector on ``calib_logs``; score collisions and false positives.

    ``residuals`` optionally maps "calib", "collide" and "clean" to precomputed
    residual lists. Returns ``{"rows": per-window rows, "summary": per-detector
    dicts, "configs": calibrated thresholds}``.
    """
    d = cfg["detection"]
    watch = set(leg_joints(tr.grouping))
    residuals = residuals or {}

    def sig(kind, i, L):
        r = residuals.get(kind, [None] * (i + 1))[i]
        return _detector_signals(cfg, tr, L, r)

    def mask(L):
        return det.contact_mask(L, tr.grouping, d["guard"], watch)

    cal = [sig("calib", i, L) for i, L in enumerate(calib_logs)]
    cal_masks = [mask(L) for L in calib_logs]
    dt = calib_logs[0].dt
    configs = {}
    for base in ("MOB-Net", "MOB", "MOB-fric", "MOB-fric-BPF"):
        configs[base] = det.calibrate([c[base] for c in cal], cal_masks, dt, d["horizon"], d["cutoff"])
    modes = {"MOB-Net-OR": ("MOB-Net", "or"), "MOB-Net-mean": ("MOB-Net", "mean"),
             "MOB-Net-sigma": ("MOB-Net", "sigma"), "MOB": ("MOB", "mean"), "MOB-fric": ("MOB-fric", "mean"),
             "MOB-fric-BPF": ("MOB-fric-BPF", "mean")}
    rows, summary = [], {}
    for kind, logs in (("collide", collide_logs), ("clean", clean_logs)):
        for i, L in enumerate(logs):
            s = sig(kind, i, L)
            m = mask(L)
            for name, (base, mode) in modes.items():
                tau_e, sigma = s[base]
                ev = det.detect(tau_e, sigma, configs[base].with_mode(mode), L.dt, m, float(L.t[0]))
                res = det.score(ev, L.annotations if kind == "collide" else [], d["slack"])
                agg = summary.setdefault(name, {"success": 0, "windows": 0, "delays": [], "fp_collide": 0,
                                                "fp_clean": 0})
                agg["success"] += res.successes
                agg["windows"] += len(res.windows)
                agg["delays"] += [w["delay_ms"] for w in res.windows if w["detected"]]
                agg["fp_" + kind] += res.false_positives
                for w in res.windows:
                    rows.append({"scenario": name, "log": L.meta.get("name", ""), "window": w["window"],
                                 "detected": w["detected"], "channel": w["channel"], "delay_ms": w["delay_ms"]})
    for agg in summary.values():
        agg["mean_delay_ms"] = float(np.mean(agg["delays"])) if agg["delays"] else float("nan")
    return {"rows": rows, "summary": summary, "configs": configs}
