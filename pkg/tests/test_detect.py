import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mobnet import detect as det
from mobnet import dynamics as dyn
from mobnet import estimator as est
from mobnet.model import derive_groups, reference_model
from mobnet.simulator import UncertaintyConfig, run_scenario

DT = 1e-3
GAINS = {"kp": {"default": 300.0, "RL3": 150.0, "LL3": 150.0}, "kd": {"default": 10.0, "RL3": 3.0, "LL3": 3.0}}


def noise(n=3000, j=3, seed=0, scale=1.0):
    return scale * np.random.default_rng(seed).normal(size=(n, j))


# ---------------------------------------------------------------------------
# calibration


def test_threshold_is_ten_percent_above_max():
    s = np.zeros((100, 2))
    s[40, 0] = 10.0
    s[:, 1] = 1.0
    s[7, 1] = -4.0
    assert np.allclose(det.calibrate_thresholds([s]), [11.0, 4.4])


def test_calibration_guards():
    with pytest.raises(ValueError, match="empty"):
        det.calibrate_thresholds([])
    with pytest.raises(ValueError, match="zero"):
        det.calibrate_thresholds([np.zeros((10, 2))])
    s = np.ones((10, 2))
    m = np.zeros((10, 2), bool)
    m[:, 1] = True
    thr = det.calibrate_thresholds([s], [m])
    assert thr[0] == pytest.approx(1.1) and np.isinf(thr[1])
    for bad in (np.array([1.0, 0.0]), np.array([1.0, -2.0])):
        with pytest.raises(ValueError):
            det.DetectionConfig(bad)
    with pytest.raises(ValueError):
        det.DetectionConfig(np.ones(2), mode="and")
    assert det.DetectionConfig(np.ones(2)).ticks(1e-3) == 5
    assert det.DetectionConfig(np.ones(2)).ticks(5e-4) == 10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 4))
def test_recalibration_on_superset_is_monotone(seed, extra):
    rng = np.random.default_rng(seed)
    logs = [rng.normal(size=(50, 3)) * rng.uniform(0.5, 3) for _ in range(2 + extra)]
    a = det.calibrate_thresholds(logs[:2])
    b = det.calibrate_thresholds(logs)
    assert np.all(b >= a)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_no_false_positives_on_calibration_logs(seed):
    rng = np.random.default_rng(seed)
    logs = [(noise(800, 3, seed + i, rng.uniform(0.5, 5)), np.abs(noise(800, 3, seed + 10 + i))) for i in range(3)]
    cfg = det.calibrate(logs, [None] * 3, DT)
    for tau_e, sig in logs:
        assert det.detect(tau_e, sig, cfg, DT) == []


# ---------------------------------------------------------------------------
# detection


def step_log(amplitude, start=1.0, n=3000, seed=0):
    tau = noise(n, 3, seed)
    tau[int(start / DT):int((start + 0.1) / DT), 1] += amplitude
    return tau


def quiet_config():
    cal = [(noise(3000, 3, s), None) for s in range(1, 4)]
    return det.calibrate(cal, [None] * 3, DT, mode="mean")


def test_step_detected_within_30ms():
    cfg = quiet_config()
    ev = det.detect(step_log(30.0), None, cfg, DT)
    res = det.score(ev, [{"start": 1.0, "end": 1.1}])
    assert res.successes == 1 and res.false_positives == 0
    assert 0 < res.windows[0]["delay_ms"] <= 30.0
    assert ev[0].joint == 1 and ev[0].channel == "mean"


def test_subthreshold_disturbance_is_silent():
    thr = np.full(3, 10.0)
    tau = np.zeros((2000, 3))
    tau[500:1500, 0] = 5.0
    assert det.detect(tau, None, det.DetectionConfig(thr, mode="mean"), DT) == []


def test_persistence_filter():
    over = np.zeros((20, 2), bool)
    over[2:6, 0] = True  # 4 ticks: too short
    over[8:13, 0] = True  # 5 ticks: fires on the 5th
    over[3:15, 1] = True
    assert det._persistent_onsets(over, 5) == [(12, 0), (7, 1)]


def test_delay_monotone_in_threshold():
    tau = step_log(30.0)
    delays = []
    for thr in (25.0, 20.0, 15.0, 10.0, 6.0):
        ev = det.detect(tau, None, det.DetectionConfig(np.full(3, thr), mode="mean"), DT)
        delays.append(det.score(ev, [{"start": 1.0, "end": 1.1}]).windows[0]["delay_ms"])
    assert np.all(np.diff(delays) <= 0)


def test_mask_soundness_and_or_superset():
    tau = noise(3000, 3, 7, 3.0)
    sig = np.abs(noise(3000, 3, 8, 2.0))
    mask = np.zeros((3000, 3), bool)
    mask[:, 2] = True
    mask[1000:2000] = True
    cfg = det.DetectionConfig(np.full(3, 1.5), np.full(3, 1.0))
    ev_or = det.detect(tau, sig, cfg, DT, mask)
    assert ev_or
    for e in ev_or:
        assert not mask[int(round(e.time / DT)), e.joint]
    key = lambda evs: {(e.time, e.joint, e.channel) for e in evs}
    both = key(det.detect(tau, sig, cfg.with_mode("mean"), DT, mask)) | key(
        det.detect(tau, sig, cfg.with_mode("sigma"), DT, mask))
    assert key(ev_or) == both


def test_score_and_reports(tmp_path):
    ev = [det.DetectionEvent(0.5, 3, "mean", 2.0), det.DetectionEvent(1.02, 3, "sigma", 2.0),
          det.DetectionEvent(1.2, 4, "mean", 2.0)]
    res = det.score(ev, [{"start": 1.0, "end": 1.1}, {"start": 2.0, "end": 2.1}], slack=0.05)
    assert res.successes == 1 and res.false_positives == 2
    assert res.windows[0]["delay_ms"] == pytest.approx(20.0) and res.windows[0]["channel"] == "sigma"
    assert not res.windows[1]["detected"]
    rows = [{"scenario": "A", "window": w["window"], "detected": w["detected"], "channel": w["channel"],
             "delay_ms": w["delay_ms"]} for w in res.windows]
    det.write_detection_report(rows, tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "scenario,window,detected,channel,delay_ms"
    agg = det.aggregate(rows)
    assert agg == [{"scenario": "A", "success": 1, "total": 2, "mean_delay_ms": pytest.approx(20.0)}]


def test_lowpass_is_first_order_15hz():
    y = det.lowpass15(np.ones(2000), DT)
    assert y[-1] == pytest.approx(1.0, abs=1e-9)
    t = np.arange(0, 2, DT)
    out = det.lowpass15(np.sin(2 * np.pi * 15 * t), DT)
    assert np.abs(out[1000:]).max() == pytest.approx(1 / np.sqrt(2), abs=0.02)


def test_contact_mask():
    m = reference_model("planar_biped")
    g = derive_groups(m)
    log = run_scenario(m, {"duration": 1.5, "motion": {"type": "march"}, **GAINS}, UncertaintyConfig(level="ideal"))
    mask = det.contact_mask(log, g, guard=0.1)
    assert mask[:, :3].all()
    rl = log.stance[:, log.groups.index("RL")]
    assert np.all(mask[rl, 3])
    assert (~mask[:, 3]).any()
    # every unmasked sample is at least the guard away from stance
    pad = int(round(0.1 / log.dt))
    for k in np.flatnonzero(~mask[:, 3]):
        assert not rl[max(0, k - pad):k + pad + 1].any()


# ---------------------------------------------------------------------------
# wrench identification


def test_zero_torque_zero_wrench():
    m = reference_model("spatial_biped")
    w = det.identify_wrench(m, np.zeros(m.n_v), "RL_foot", (0, 0, -0.08), np.zeros(m.n_v))
    assert np.all(w.wrench == 0) and not w.degraded


def test_wrench_synthesis_recovery_and_noise_bound():
    m = reference_model("spatial_biped")
    rng = np.random.default_rng(2)
    q = rng.uniform(-0.3, 0.3, m.n_v)
    point = (0.05, 0.0, -0.08)
    J = dyn.contact_jacobian(m, q, "RL_foot", point)
    F = rng.normal(0, 50, 6)
    w = det.identify_wrench(m, q, "RL_foot", point, J.T @ F)
    assert np.abs(w.wrench - F).max() < 1e-8 and w.rank == 6 and w.residual < 1e-8
    rows = w.rows
    pinv = np.linalg.pinv(J[:, rows].T)
    for s in range(5):
        n = np.random.default_rng(s).normal(0, 0.5, m.n_v)
        err = det.identify_wrench(m, q, "RL_foot", point, J.T @ F + n).wrench - F
        assert np.linalg.norm(err) <= np.linalg.norm(pinv, 2) * np.linalg.norm(n[rows]) + 1e-9


def synth_tau(m, q, loads):
    tau = np.zeros(m.n_v)
    for link, point, F in loads:
        tau += dyn.contact_jacobian(m, q, link, point).T @ F
    return tau


def test_unexpected_wrench_cancels_expected_contacts():
    m = reference_model("spatial_biped")
    q = np.random.default_rng(3).uniform(-0.2, 0.2, m.n_v)
    feet = [("RL_foot", (0.0, 0.0, -0.08)), ("LL_foot", (0.0, 0.0, -0.08))]
    loads = [(l, p, np.array([5.0, -3.0, 200.0, 1.0, 2.0, 0.5])) for l, p in feet]
    Fu, degraded = det.unexpected_base_wrench(m, q, synth_tau(m, q, loads), feet)
    assert np.abs(Fu).max() < 1e-8 and not degraded
    push = np.array([40.0, -10.0, 0.0, 0.0, 0.0, 3.0])
    Fu, _ = det.unexpected_base_wrench(m, q, synth_tau(m, q, loads + [("pelvis", (0, 0, 0), push)]), feet)
    assert np.allclose(Fu, push, atol=1e-8)


def test_degraded_when_path_lacks_rank():
    m = reference_model("spatial_biped")
    q = np.zeros(m.n_v)
    frames = [("RL_thigh", (0.0, 0.0, -0.1))]
    F = np.array([10.0, 5.0, 0.0, 0.0, 0.0, 0.0])
    tau = synth_tau(m, q, [(l, p, F) for l, p in frames] + [("RL_thigh", (0.0, 0.0, -0.3), F)])
    _, degraded = det.unexpected_base_wrench(m, q, tau, frames)
    assert degraded
    with pytest.raises(ValueError):
        det.unexpected_base_wrench(reference_model("two_link_arm"), np.zeros(2), np.zeros(2))


def test_simulated_torso_push_recovered():
    m = reference_model("planar_biped")
    push = [30.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    sc = {"duration": 1.6, "motion": {"type": "stand"}, **GAINS,
          "disturbances": [{"type": "wrench", "link": "torso", "start": 1.0, "duration": 0.5, "wrench": push}]}
    log = run_scenario(m, sc, UncertaintyConfig(level="ideal"))
    r = est.residual(m, log)
    feet = [("RL_foot", (0.0, 0.0, -0.05)), ("LL_foot", (0.0, 0.0, -0.05))]
    k = int(round(1.4 / log.dt))
    Fu, degraded = det.unexpected_base_wrench(m, log.q[k], r[k], feet)
    assert not degraded
    planar = Fu[[0, 2, 4]]
    assert np.linalg.norm(planar - [30.0, 0.0, 0.0]) <= 0.1 * 30.0
    k0 = int(round(0.9 / log.dt))
    Fq, _ = det.unexpected_base_wrench(m, log.q[k0], r[k0], feet)
    assert np.linalg.norm(Fq[[0, 2, 4]]) < 0.1 * 30.0
