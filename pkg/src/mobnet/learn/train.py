"""Training and stateful inference for the per-group GRU networks.

Training uses truncated backprop through time. Each epoch cuts the training
trajectories into contiguous chunks, shuffles them, and feeds ``batch``
chunks in parallel, one ``horizon``-tick window at a time, carrying the hidden
state across windows of the same chunk. Inputs and targets are standardized
with statistics from the training split; the stored network undoes this.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import gru
from .data import FeatureLayout, GroupDataset, split_indices
from .optim import Adam, lr_at

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    hidden: int = 64
    horizon: int = 50


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch: int = 64
    lr_start: float = 0.05
    lr_end: float = 5e-4
    decay_epochs: Optional[int] = None  # None: half the epochs
    clip: Optional[float] = 1.0  # global-norm clip; None or 0 disables
    chunk: int = 1000
    val_ratio: float = 0.1
    seed: int = 0

    @property
    def decay(self) -> int:
        return self.epochs // 2 if self.decay_epochs is None else self.decay_epochs

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in (d or {}).items() if k in cls.__dataclass_fields__})


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, arrays) -> "Normalizer":
        a = np.vstack(arrays)
        std = a.std(axis=0)
        std[std < 1e-8] = 1.0
        return cls(a.mean(axis=0), std)

    def apply(self, x):
        return (x - self.mean) / self.std

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float))


@dataclass
class GroupNetwork:
    """A trained group network with its normalization, usable tick by tick."""

    layout: FeatureLayout
    params: dict
    x_norm: Normalizer
    y_norm: Normalizer
    config: NetworkConfig = field(default_factory=NetworkConfig)
    h: Optional[np.ndarray] = None

    @property
    def n_out(self) -> int:
        return len(self.layout.outputs)

    def reset(self) -> None:
        self.h = np.zeros(self.config.hidden)

    def step(self, x) -> tuple:
        """Advance one tick; returns (mean, sigma) in physical units."""
        if self.h is None:
            self.reset()
        x = np.asarray(x, float)
        if x.shape != (self.layout.width,):
            raise ValueError(f"expected input of width {self.layout.width}, got {x.shape}")
        self.h, m, s = gru.gru_step(self.params, self.x_norm.apply(x), self.h)
        return self.y_norm.mean + self.y_norm.std * m, self.y_norm.std * s

    def run(self, X) -> tuple:
        """Predict a whole sequence from a zero hidden state; returns (N, k) means and sigmas."""
        X = np.asarray(X, float)
        Xn = self.x_norm.apply(X)[None]
        mean, sigma = _predict_normalized(self.params, Xn, self.config.hidden)
        return self.y_norm.mean + self.y_norm.std * mean[0], self.y_norm.std * sigma[0]

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "layout": self.layout.to_dict(),
            "config": asdict(self.config),
            "x_norm": self.x_norm.to_dict(),
            "y_norm": self.y_norm.to_dict(),
            "params": [{"name": k, "shape": list(self.params[k].shape),
                        "values": self.params[k].ravel().tolist()} for k in gru.PARAM_NAMES],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupNetwork":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        params = {p["name"]: np.asarray(p["values"], float).reshape(p["shape"]) for p in d["params"]}
        missing = set(gru.PARAM_NAMES) - set(params)
        if missing:
            raise ValueError(f"checkpoint lacks parameters {sorted(missing)}")
        layout = FeatureLayout.from_dict(d["layout"])
        if params["Wx"].shape[0] != layout.width:
            raise ValueError("checkpoint input width does not match its layout")
        return cls(layout, params, Normalizer.from_dict(d["x_norm"]), Normalizer.from_dict(d["y_norm"]),
                   NetworkConfig(**d["config"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GroupNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _predict_normalized(params, Xn, hidden):
    """Forward pass without caches, for long sequences."""
    B, T, _ = Xn.shape
    H = hidden
    GX = Xn @ params["Wx"] + params["bx"]
    Wh, bh = params["Wh"], params["bh"]
    h = np.zeros((B, H))
    hs = np.empty((B, T, H))
    for t in range(T):
        gh = h @ Wh + bh
        gx = GX[:, t]
        r = gru.sigmoid(gx[:, :H] + gh[:, :H])
        z = gru.sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
        h = (1.0 - z) * n + z * h
        hs[:, t] = h
    return gru.head_forward(params, hs)


def _pad_batch(seqs, width):
    T = max(s.shape[0] for s in seqs)
    out = np.zeros((len(seqs), T, width))
    mask = np.zeros((len(seqs), T))
    for i, s in enumerate(seqs):
        out[i, :s.shape[0]] = s
        mask[i, :s.shape[0]] = 1.0
    return out, mask


def _chunks(ds: GroupDataset, length: int):
    out = []
    for X, Y in zip(ds.X, ds.Y):
        for a in range(0, X.shape[0], length):
            if X.shape[0] - a >= 2:
                out.append((X[a:a + length], Y[a:a + length]))
    return out


def evaluate_nll(params, X_list, Y_list, hidden) -> float:
    """Mean NLL (normalized units) over whole trajectories, each from a zero hidden state."""
    if not X_list:
        return float("nan")
    Xb, mask = _pad_batch(X_list, X_list[0].shape[1])
    Yb, _ = _pad_batch(Y_list, Y_list[0].shape[1])
    mean, sigma = _predict_normalized(params, Xb, hidden)
    return gru.gaussian_nll(mean, sigma, Yb, mask)


def split_dataset(ds: GroupDataset, val_ratio: float, rng) -> tuple:
    """Trajectory-level split; a single trajectory is cut at the (1 - val_ratio) point."""
    if len(ds) >= 2:
        tr, va = split_indices(len(ds), 1.0 - val_ratio, rng)
        return ds.subset(tr), ds.subset(va)
    X, Y = ds.X[0], ds.Y[0]
    cut = int(round((1.0 - val_ratio) * X.shape[0]))
    return (GroupDataset(ds.layout, [X[:cut]], [Y[:cut]], ds.names),
            GroupDataset(ds.layout, [X[cut:]], [Y[cut:]], ds.names))


def train_group(ds: GroupDataset, net_cfg: NetworkConfig = NetworkConfig(), cfg: TrainConfig = TrainConfig(),
                log=None) -> tuple:
    """Fit one group network. Returns (GroupNetwork, curves) with one curve row per epoch."""
    if len(ds) == 0 or ds.ticks < 2:
        raise ValueError(f"group {ds.layout.group}: empty dataset")
    rng = np.random.default_rng(cfg.seed)
    train, val = split_dataset(ds, cfg.val_ratio, rng)
    x_norm = Normalizer.fit(train.X)
    y_norm = Normalizer.fit(train.Y)
    Xtr = [x_norm.apply(x) for x in train.X]
    Ytr = [y_norm.apply(y) for y in train.Y]
    Xva = [x_norm.apply(x) for x in val.X]
    Yva = [y_norm.apply(y) for y in val.Y]
    chunks = _chunks(GroupDataset(ds.layout, Xtr, Ytr), cfg.chunk)
    params = gru.init_params(ds.layout.width, net_cfg.hidden, len(ds.layout.outputs), rng)
    opt = Adam(params)
    H, L = net_cfg.hidden, net_cfg.horizon
    curves = []
    batch_id = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.lr_start, cfg.lr_end, cfg.decay)
        order = rng.permutation(len(chunks))
        tot, cnt = 0.0, 0.0
        for b0 in range(0, len(order), cfg.batch):
            sel = [chunks[i] for i in order[b0:b0 + cfg.batch]]
            Xb, mask = _pad_batch([c[0] for c in sel], ds.layout.width)
            Yb, _ = _pad_batch([c[1] for c in sel], len(ds.layout.outputs))
            h = np.zeros((len(sel), H))
            for t0 in range(0, Xb.shape[1], L):
                m = mask[:, t0:t0 + L]
                if m.sum() == 0:
                    break
                loss, grads, h = gru.loss_and_grad(params, Xb[:, t0:t0 + L], Yb[:, t0:t0 + L], h, m)
                gn = gru.global_norm(grads)
                if not (np.isfinite(loss) and np.isfinite(gn)):
                    raise TrainingError(f"group {ds.layout.group}: non-finite loss at epoch {epoch}, "
                                        f"batch {batch_id}")
                if cfg.clip and gn > cfg.clip:
                    for g in grads.values():
                        g *= cfg.clip / gn
                opt.step(params, grads, lr)
                tot += loss * m.sum()
                cnt += m.sum()
                batch_id += 1
        row = {"group": ds.layout.group, "epoch": epoch, "lr": lr, "train_nll": float(tot / max(cnt, 1.0)),
               "val_nll": evaluate_nll(params, Xva, Yva, H)}
        curves.append(row)
        if log is not None:
            log(row)
    return GroupNetwork(ds.layout, params, x_norm, y_norm, net_cfg), curves


def train_all(datasets: dict, net_cfg=NetworkConfig(), cfg: TrainConfig = TrainConfig(), log=None) -> tuple:
    """Train every group independently; each group gets its own seed offset.

    ``net_cfg`` is one NetworkConfig for all groups or a ``{group: NetworkConfig}`` map.
    """
    nets, curves = {}, []
    for i, (name, ds) in enumerate(datasets.items()):
        sub = TrainConfig(**{**asdict(cfg), "seed": cfg.seed + 1000 * i})
        nc = net_cfg[name] if isinstance(net_cfg, dict) else net_cfg
        nets[name], c = train_group(ds, nc, sub, log)
        curves += c
    return nets, curves


def save_curves(curves, path) -> None:
    keys = ["group", "epoch", "lr", "train_nll", "val_nll"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for row in curves:
            w.writerow({k: row[k] for k in keys})


def save_networks(nets: dict, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, net in nets.items():
        net.save(d / f"{name}.json")
    (d / "groups.json").write_text(json.dumps(sorted(nets)))


def load_networks(directory) -> dict:
    d = Path(directory)
    names = json.loads((d / "groups.json").read_text())
    return {n: GroupNetwork.load(d / f"{n}.json") for n in names}
