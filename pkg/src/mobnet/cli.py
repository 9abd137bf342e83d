"""Command line driver: ``mobnet <stage> --config exp.yaml --seed 0 --out runs/x``.

Stages build on each other through the output directory. A stage first looks
for the artifacts it needs under ``--out`` and only recomputes what is
missing, so ``mobnet eval`` on an empty directory runs the whole chain while
``mobnet eval`` after ``mobnet train`` reuses the checkpoints. Every artifact
records the experiment hash and seed, and loading one that was produced by a
different config is refused.

Wall-clock measurements go under ``timing/``; everything else is bit-identical
when a run is repeated with ``--deterministic``.

Exit status: 0 on success, 1 for a bad config or command line, 2 when a
stage fails (the stage name and the artifacts written so far are printed).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
import zipfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import estimator as est
from . import experiment as X
from .learn import GroupNetwork, build_dataset
from .simulator import SimLog

STAGES = ("simulate", "collect", "train", "eval", "detect", "ablate", "all")
ABLATIONS = ("rte", "single", "size")

EVAL_COLUMNS = ("config_hash", "seed", "level", "log", "estimator", "joint", "rmse", "r_rmse")
SUMMARY_COLUMNS = ("config_hash", "seed", "level", "estimator", "joint", "rmse", "r_rmse")
LATENCY_COLUMNS = ("config_hash", "seed", "estimator", "mean_ms", "p50_ms", "p99_ms", "max_ms", "n")
UNSEEN_COLUMNS = ("config_hash", "seed", "log", "estimator", "rmse")
DETECT_COLUMNS = ("config_hash", "seed", "scenario", "log", "window", "detected", "channel", "delay_ms")
DETECT_SUMMARY_COLUMNS = ("config_hash", "seed", "scenario", "success", "windows", "fp_collide", "fp_clean",
                          "mean_delay_ms")
CURVE_COLUMNS = ("config_hash", "seed", "variant", "group", "epoch", "lr", "train_nll", "val_nll")
ABLATION_COLUMNS = ("config_hash", "seed", "ablation", "variant", "metric", "value")

LATENCY_TICKS = 2000
VARIANTS = ("mobnet", "fts", "mobnet_plain")


class StageError(RuntimeError):
    pass


def _simulate_one(args):
    cfg, set_name, index = args
    model = X.get_model(cfg)
    return X.simulate_log(cfg, set_name, index, model)


class Run:
    """One experiment bound to an output directory."""

    def __init__(self, cfg: dict, out, threads: int = 1, echo=print):
        self.cfg = cfg
        self.out = Path(out)
        self.hash = X.experiment_hash(cfg)
        self.seed = int(cfg["seed"])
        self.threads = max(1, int(threads))
        self.echo = echo
        self.stage = "setup"
        self.written = []
        self.model = X.get_model(cfg)
        self.grouping = X.get_grouping(cfg, self.model)
        self._logs, self._res, self._trained = {}, {}, None
        self._claim()

    # -- bookkeeping -------------------------------------------------------

    @property
    def meta(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed}

    def _claim(self):
        man = self.out / "manifest.json"
        if man.exists():
            old = json.loads(man.read_text())
            if old.get("config_hash") != self.hash:
                raise X.ConfigError(f"{self.out} holds artifacts of experiment {old.get('config_hash')}, "
                                    f"not {self.hash}; use a fresh --out")
            return
        self.out.mkdir(parents=True, exist_ok=True)
        man.write_text(json.dumps({**self.meta, "config": self.cfg}, indent=1, sort_keys=True))

    def _check(self, meta: dict, what):
        if meta.get("config_hash") != self.hash or int(meta.get("seed", -1)) != self.seed:
            raise StageError(f"{what} was produced by experiment {meta.get('config_hash')} "
                             f"seed {meta.get('seed')}, not {self.hash} seed {self.seed}")

    def _wrote(self, path):
        self.written.append(str(path))
        return path

    def _csv(self, name, columns, rows):
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt({**self.meta, **r}.get(k, "")) for k in columns})
        return self._wrote(path)

    def _json(self, name, obj):
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"meta": self.meta, **obj}, indent=1, sort_keys=True, default=float))
        return self._wrote(path)

    # -- simulate ----------------------------------------------------------

    def log_path(self, set_name, i):
        return self.out / "logs" / set_name / f"{set_name}_{i:03d}.csv"

    def logs(self, set_name) -> list:
        if set_name in self._logs:
            return self._logs[set_name]
        n = int(self.cfg["sets"][set_name].get("n", 0))
        paths = [self.log_path(set_name, i) for i in range(n)]
        if paths and all(p.exists() for p in paths):
            logs = [SimLog.load(p) for p in paths]
            for p, L in zip(paths, logs):
                self._check({"config_hash": L.meta.get("experiment_hash"), "seed": L.meta.get("experiment_seed")}, p)
        else:
            logs = self._simulate(set_name, n)
            for p, L in zip(paths, logs):
                L.save(p)
                self._wrote(p)
        self._logs[set_name] = logs
        return logs

    def _simulate(self, set_name, n):
        self.stage = "simulate"
        jobs = [(self.cfg, set_name, i) for i in range(n)]
        if self.threads > 1 and n > 1:
            with ProcessPoolExecutor(max_workers=self.threads) as pool:
                logs = list(pool.map(_simulate_one, jobs))
        else:
            logs = [X.simulate_log(self.cfg, set_name, i, self.model) for i in range(n)]
        self.echo(f"simulated {n} {set_name} logs")
        return logs

    def simulate(self):
        for s in self.cfg["sets"]:
            self.logs(s)

    # -- collect -----------------------------------------------------------

    def residuals(self, set_name) -> list:
        if set_name in self._res:
            return self._res[set_name]
        path = self.out / "residuals" / f"{set_name}.npz"
        logs = self.logs(set_name)
        if path.exists():
            z = np.load(path)
            self._check({"config_hash": str(z["config_hash"]), "seed": int(z["seed"])}, path)
            res = [z[f"r_{i:03d}"] for i in range(len(logs))]
        else:
            self.stage = "collect"
            res = X.residual_set(self.cfg, self.model, logs)
            path.parent.mkdir(parents=True, exist_ok=True)
            _savez(path, config_hash=self.hash, seed=self.seed, **{f"r_{i:03d}": r for i, r in enumerate(res)})
            self._wrote(path)
        self._res[set_name] = res
        return res

    def collect(self):
        for s in self.cfg["sets"]:
            self.residuals(s)
        self.stage = "collect"
        for kind in ("mobnet", "fts"):
            data = build_dataset(self.logs("train"), self.grouping, self.residuals("train"), kind=kind,
                                 K0=self.cfg["K0"])
            for g, ds in data.items():
                path = self.out / "datasets" / kind / f"{g}.npz"
                path.parent.mkdir(parents=True, exist_ok=True)
                arrays = {f"X_{i:03d}": x for i, x in enumerate(ds.X)}
                arrays.update({f"Y_{i:03d}": y for i, y in enumerate(ds.Y)})
                _savez(path, config_hash=self.hash, seed=self.seed, layout=json.dumps(ds.layout.to_dict()),
                         names=np.array(ds.names), **arrays)
                self._wrote(path)

    # -- train -------------------------------------------------------------

    def _save_nets(self, variant, nets):
        d = self.out / "checkpoints" / variant
        d.mkdir(parents=True, exist_ok=True)
        for g, net in nets.items():
            path = d / f"{g}.json"
            path.write_text(json.dumps({**net.to_dict(), "meta": self.meta}))
            self._wrote(path)
        self._json(f"checkpoints/{variant}/groups.json", {"groups": sorted(nets)})

    def _load_nets(self, variant):
        d = self.out / "checkpoints" / variant
        if not (d / "groups.json").exists():
            return None
        doc = json.loads((d / "groups.json").read_text())
        self._check(doc["meta"], d)
        nets = {}
        for g in doc["groups"]:
            raw = json.loads((d / f"{g}.json").read_text())
            self._check(raw.get("meta", {}), d / f"{g}.json")
            nets[g] = GroupNetwork.from_dict(raw)
        return nets

    def trained(self) -> X.Trained:
        if self._trained is not None:
            return self._trained
        self.stage = "train"
        nets = {v: self._load_nets(v) for v in VARIANTS}
        fr_path = self.out / "checkpoints" / "friction.json"
        curves = []
        train, res = self.logs("train"), self.residuals("train")
        self.stage = "train"
        for variant, kind, logs, r in (("mobnet", "mobnet", train, res), ("fts", "fts", train, res)):
            if nets[variant] is None:
                nets[variant], c = X.train_variant(self.cfg, self.model, logs, r, kind, self.grouping)
                curves += [dict(row, variant=variant) for row in c]
                self._save_nets(variant, nets[variant])
                self.echo(f"trained {variant}")
        if nets["mobnet_plain"] is None and int(self.cfg["sets"].get("train_plain", {}).get("n", 0)):
            plain, plain_res = self.logs("train_plain"), self.residuals("train_plain")
            self.stage = "train"
            legs = [g.name for g in self.grouping.actuated_groups if g.load_bearing]
            nets["mobnet_plain"], c = X.train_variant(self.cfg, self.model, plain, plain_res, "mobnet",
                                                      self.grouping, groups=legs)
            curves += [dict(row, variant="mobnet_plain") for row in c]
            self._save_nets("mobnet_plain", nets["mobnet_plain"])
            self.echo("trained mobnet_plain")
        if fr_path.exists():
            doc = json.loads(fr_path.read_text())
            self._check(doc["meta"], fr_path)
            fr = est.FrictionFit(**{k: (np.asarray(v) if k in ("coulomb", "viscous", "static", "rms_residual")
                                        else v) for k, v in doc["fit"].items()})
        else:
            fr = X.fit_friction_baseline(self.cfg, self.model, train, res)
            self._json("checkpoints/friction.json", {"fit": fr.to_dict()})
        if curves:
            self._csv("curves.csv", CURVE_COLUMNS, curves)
        plain = nets["mobnet_plain"]
        if plain is not None:
            # the no-RTE pipeline swaps only the leg networks
            plain = {**nets["mobnet"], **plain}
        self._trained = X.Trained(self.model, self.grouping, nets["mobnet"], nets["fts"], fr, plain)
        return self._trained

    def train(self):
        self.trained()

    # -- eval --------------------------------------------------------------

    def eval(self):
        tr = self.trained()
        names = [s for s in ("ideal", "noise", "test") if s in self.cfg["sets"]]
        res = {s: self.residuals(s) for s in names}
        self.stage = "eval"
        rows = X.evaluate_sets(self.cfg, tr, {s: self.logs(s) for s in names}, res, names)
        self._csv("tables/eval_rows.csv", EVAL_COLUMNS, rows)
        summary = []
        for level in dict.fromkeys(r["level"] for r in rows):
            summary += [dict(s, level=level) for s in est.summary_table([r for r in rows if r["level"] == level])]
        self._csv("tables/eval_summary.csv", SUMMARY_COLUMNS, summary)
        if "collide" in self.cfg["sets"] and self.logs("collide"):
            self.stage = "eval"
            unseen = X.unseen_table(self.cfg, tr, self.logs("collide"), self.residuals("collide"))
            self._csv("tables/unseen.csv", UNSEEN_COLUMNS, unseen)
        lat_log = next((self.logs(s)[0] for s in ("test", "noise", "ideal") if s in names and self.logs(s)), None)
        if lat_log is not None:
            self._csv("timing/latency.csv", LATENCY_COLUMNS, [self._latency(tr, lat_log)])
        self.echo(_summary_text(summary))

    def _latency(self, tr, log):
        self.stage = "eval"
        stream = est.MobNetEstimator(est.nominal_model(self.model, log), tr.mobnet, dt=log.dt)
        lat = []
        for k, tick in enumerate(est.log_ticks(log)):
            if k == LATENCY_TICKS:
                break
            lat.append(stream.step(tick).latency)
        return {"estimator": "MOB-Net", **est.latency_stats(lat)}

    # -- detect ------------------------------------------------------------

    def detect(self):
        tr = self.trained()
        calib, collide, clean = self.logs("calib"), self.logs("collide"), self.logs("test")
        res = {"calib": self.residuals("calib"), "collide": self.residuals("collide"), "clean": self.residuals("test")}
        self.stage = "detect"
        out = X.detection_suite(self.cfg, tr, calib, collide, clean, res)
        self._csv("tables/detection_windows.csv", DETECT_COLUMNS, out["rows"])
        summ = [{"scenario": k, **{c: v[c] for c in DETECT_SUMMARY_COLUMNS[3:]}} for k, v in out["summary"].items()]
        self._csv("tables/detection_summary.csv", DETECT_SUMMARY_COLUMNS, summ)
        self._json("checkpoints/thresholds.json", {k: {"mean": np.asarray(c.thr_mean).tolist(), "sigma": None if c.thr_sigma is None
                                                       else np.asarray(c.thr_sigma).tolist()}
                                                   for k, c in out["configs"].items()})
        for s in summ:
            self.echo(f"{s['scenario']:14s} success {s['success']}/{s['windows']}  false positives "
                      f"{s['fp_collide']}+{s['fp_clean']}  delay {s['mean_delay_ms']:.1f} ms")

    # -- ablate ------------------------------------------------------------

    def ablate(self, which):
        rows = {"rte": self._ablate_rte, "single": self._ablate_single, "size": self._ablate_size}[which]()
        timing = [r for r in rows if r["metric"].startswith("latency")]
        self._csv(f"tables/ablation_{which}.csv", ABLATION_COLUMNS,
                  [dict(r, ablation=which) for r in rows if r not in timing])
        if timing:
            self._csv(f"timing/ablation_{which}.csv", ABLATION_COLUMNS, [dict(r, ablation=which) for r in timing])
        for r in rows:
            self.echo(f"{which:6s} {r['variant']:16s} {r['metric']:22s} {r['value']:.4f}")

    def _ablate_rte(self):
        tr = self.trained()
        if tr.mobnet_plain is None:
            raise StageError("the rte ablation needs a train_plain set")
        unseen = X.unseen_table(self.cfg, tr, self.logs("collide"), self.residuals("collide"),
                                which=("MOB-Net", "MOB-Net-noRTE"))
        self.stage = "ablate"
        return [{"variant": "with_rte" if r["estimator"] == "MOB-Net" else "without_rte",
                 "metric": f"unseen_rmse:{r['log']}", "value": r["rmse"]} for r in unseen]

    def _test_rmse(self, tr, name="MOB-Net"):
        logs, res = self.logs("test"), self.residuals("test")
        self.stage = "ablate"
        rows = X.evaluate_sets(self.cfg, tr, {"test": logs}, {"test": res}, ("test",))
        return float(np.mean([r["rmse"] for r in rows if r["estimator"] == name]))

    def _ablate_single(self):
        tr = self.trained()
        self.stage = "ablate"
        single = X.get_grouping(self.cfg, self.model, single=True)
        nets, _ = X.train_variant(self.cfg, self.model, self.logs("train"), self.residuals("train"), "mobnet",
                                  single)
        tr_single = X.Trained(self.model, single, nets, {}, tr.friction)
        return [{"variant": "modular", "metric": "test_rmse", "value": self._test_rmse(tr)},
                {"variant": "single", "metric": "test_rmse", "value": self._test_rmse(tr_single)},
                {"variant": "modular", "metric": "latency_mean_ms",
                 "value": self._latency(tr, self.logs("test")[0])["mean_ms"]},
                {"variant": "single", "metric": "latency_mean_ms",
                 "value": self._latency(tr_single, self.logs("test")[0])["mean_ms"]}]

    def _ablate_size(self):
        tr = self.trained()
        ab = self.cfg["ablation"]
        rows = []
        for hidden in ab["sizes"]:
            self.stage = "ablate"
            cfg = {**self.cfg, "network": {**self.cfg["network"], "hidden": int(hidden)}}
            nets, _ = X.train_variant(cfg, self.model, self.logs("train"), self.residuals("train"), "mobnet",
                                      self.grouping, groups=list(ab["groups"]))
            sized = X.Trained(self.model, self.grouping, {**tr.mobnet, **nets}, {}, tr.friction)
            rows.append({"variant": f"hidden_{hidden}", "metric": "test_rmse", "value": self._test_rmse(sized)})
            rows.append({"variant": f"hidden_{hidden}", "metric": "latency_mean_ms",
                         "value": self._latency(sized, self.logs("test")[0])["mean_ms"]})
        return rows

    def all(self):
        self.simulate()
        self.collect()
        self.train()
        self.eval()
        self.detect()
        for a in ABLATIONS:
            self.ablate(a)


def _savez(path, **arrays):
    """``np.savez`` with fixed member timestamps, so reruns give identical bytes."""
    with zipfile.ZipFile(path, "w") as z:
        for k, a in arrays.items():
            info = zipfile.ZipInfo(f"{k}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with z.open(info, "w", force_zip64=True) as f:
                np.lib.format.write_array(f, np.asanyarray(a), allow_pickle=False)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return v


def _summary_text(summary) -> str:
    lines = []
    for s in summary:
        if s["joint"] == "avg":
            lines.append(f"{s['level']:16s} {s['estimator']:14s} rmse {s['rmse']:.4f}")
    return "\n".join(lines)


class _Parser(argparse.ArgumentParser):
    # command line mistakes count as configuration errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mobnet", description="Momentum observer + limb GRU experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment YAML (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="experiment seed, overrides the config")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker processes for simulation and BLAS threads")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    sub = p.add_subparsers(dest="stage", required=True, parser_class=_Parser)
    for s in STAGES:
        sp = sub.add_parser(s, parents=[common])
        if s == "ablate":
            sp.add_argument("which", choices=ABLATIONS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = 1 if args.deterministic else args.threads
    if threads < 1:
        print("mobnet: --threads must be >= 1", file=sys.stderr)
        return 1
    if args.seed is not None and args.seed < 0:
        print("mobnet: --seed must be non-negative", file=sys.stderr)
        return 1
    try:
        cfg = X.load_config(args.config, {"seed": args.seed} if args.seed is not None else None)
        run = Run(cfg, args.out, threads)
    except X.ConfigError as e:
        print(f"mobnet: config error: {e}", file=sys.stderr)
        return 1
    t0 = time.perf_counter()
    try:
        with threadpool_limits(limits=threads):
            if args.stage == "ablate":
                run.ablate(args.which)
            else:
                getattr(run, args.stage)()
    except X.ConfigError as e:
        print(f"mobnet: config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # any stage failure: report where it stopped and what exists
        print(f"mobnet: stage {run.stage} failed: {type(e).__name__}: {e}", file=sys.stderr)
        for p in run.written:
            print(f"  wrote {p}", file=sys.stderr)
        return 2
    print(f"{args.stage} done in {time.perf_counter() - t0:.1f} s, experiment {run.hash} seed {run.seed}, "
          f"{len(run.written)} files written to {run.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
