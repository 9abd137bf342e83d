import csv
import json
from pathlib import Path

import pytest

from mobnet import cli

TINY = """\
model: planar_biped
scenario: {duration: 1.5}
sets:
  train: {n: 1, level: all_uncertainty, rte: true}
  train_plain: {n: 1, level: all_uncertainty, rte: false, seed_from: train}
  calib: {n: 1, level: all_uncertainty}
  ideal: {n: 1, level: ideal, duration: 1.0}
  noise: {n: 1, level: sensor_noise, duration: 1.0}
  test: {n: 1, level: all_uncertainty, duration: 1.0}
  collide: {n: 1, level: all_uncertainty, collisions: true}
network: {hidden: 4, horizon: 10, virtual_horizon: 10}
train: {epochs: 1, batch: 8, chunk: 200}
ablation: {sizes: [4], groups: [RL]}
"""

# golden column layouts of the emitted tables
GOLDEN = {
    "tables/eval_rows.csv": "config_hash,seed,level,log,estimator,joint,rmse,r_rmse",
    "tables/eval_summary.csv": "config_hash,seed,level,estimator,joint,rmse,r_rmse",
    "tables/unseen.csv": "config_hash,seed,log,estimator,rmse",
    "tables/detection_windows.csv": "config_hash,seed,scenario,log,window,detected,channel,delay_ms",
    "tables/detection_summary.csv": "config_hash,seed,scenario,success,windows,fp_collide,fp_clean,mean_delay_ms",
    "tables/ablation_rte.csv": "config_hash,seed,ablation,variant,metric,value",
    "timing/latency.csv": "config_hash,seed,estimator,mean_ms,p50_ms,p99_ms,max_ms,n",
    "curves.csv": "config_hash,seed,variant,group,epoch,lr,train_nll,val_nll",
}


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def run_dir(config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "a"
    assert cli.main(["all", "--config", str(config), "--out", str(out), "--deterministic"]) == 0
    return out


def files(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_golden_columns(run_dir):
    for name, header in GOLDEN.items():
        assert (run_dir / name).read_text().splitlines()[0] == header, name


def test_eval_rows_cover_levels_and_estimators(run_dir):
    rows = list(csv.DictReader(open(run_dir / "tables/eval_rows.csv")))
    assert {r["level"] for r in rows} == {"ideal", "sensor_noise", "all_uncertainty"}
    assert {r["estimator"] for r in rows} == {"MOB", "MOB-fric", "MOB-fric-BPF", "MOB-Net", "FTS-e2e"}
    ideal = [float(r["rmse"]) for r in rows if r["level"] == "ideal" and r["estimator"] == "MOB"]
    assert max(ideal) < 0.05


def test_every_artifact_carries_hash_and_seed(run_dir):
    man = json.loads((run_dir / "manifest.json").read_text())
    h, seed = man["config_hash"], man["seed"]
    for p in run_dir.rglob("*.csv"):
        if p.parent.parent.name == "logs":
            meta = json.loads(p.with_suffix(".meta.json").read_text())
            assert meta["experiment_hash"] == h and meta["experiment_seed"] == seed
            continue
        rows = list(csv.DictReader(open(p)))
        assert rows and all(r["config_hash"] == h and int(r["seed"]) == seed for r in rows), p
    for p in (run_dir / "checkpoints").rglob("*.json"):
        assert json.loads(p.read_text())["meta"] == {"config_hash": h, "seed": seed}


def test_rerun_is_bit_identical(run_dir, config, tmp_path):
    out = tmp_path / "b"
    assert cli.main(["all", "--config", str(config), "--out", str(out), "--deterministic"]) == 0
    a, b = files(run_dir), files(out)
    assert a.keys() == b.keys()
    differ = [k for k in a if a[k] != b[k] and not k.startswith("timing/")]
    assert differ == []


def test_stage_reuses_artifacts(run_dir, config):
    before = files(run_dir)
    assert cli.main(["eval", "--config", str(config), "--out", str(run_dir), "--deterministic"]) == 0
    after = files(run_dir)
    assert {k: v for k, v in after.items() if not k.startswith("timing/")} == \
        {k: v for k, v in before.items() if not k.startswith("timing/")}


def test_parallel_simulation_matches_serial(config, tmp_path):
    assert cli.main(["simulate", "--config", str(config), "--out", str(tmp_path / "s"), "--deterministic"]) == 0
    assert cli.main(["simulate", "--config", str(config), "--out", str(tmp_path / "p"), "--threads", "2"]) == 0
    assert files(tmp_path / "s") == files(tmp_path / "p")


def test_config_errors_exit_1(config, tmp_path, capsys):
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("bogus_key: 1\n")
    assert cli.main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert cli.main(["simulate", "--config", str(config), "--seed", "-3", "--out", str(tmp_path / "y")]) == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 1
    assert "config error" in capsys.readouterr().err


def test_foreign_output_directory_rejected(run_dir, config):
    # same directory, different seed: a different experiment
    assert cli.main(["eval", "--config", str(config), "--seed", "5", "--out", str(run_dir)]) == 1


def test_stage_failure_exit_2(run_dir, config, tmp_path, capsys):
    out = tmp_path / "c"
    assert cli.main(["simulate", "--config", str(config), "--out", str(out), "--deterministic"]) == 0
    meta = out / "logs" / "train" / "train_000.meta.json"
    doc = json.loads(meta.read_text())
    doc["experiment_seed"] = 99
    meta.write_text(json.dumps(doc))
    capsys.readouterr()
    assert cli.main(["train", "--config", str(config), "--out", str(out)]) == 2
    err = capsys.readouterr().err
    assert "stage" in err and "train_000" in err
