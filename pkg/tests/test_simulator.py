import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mobnet import dynamics as dyn
from mobnet.model import perturb_inertial, reference_model
from mobnet.simulator import (FrictionParams, LEG_FRICTION, RandomTorqueExploration, RteConfig, Scenario,
                              SimLog, Simulator, UncertaintyConfig, deadzone, friction_torque, rte_overlay,
                              run_scenario)


@pytest.fixture(scope="module")
def biped():
    return reference_model("planar_biped")


# softer ankles, as in the experiment defaults
GAINS = {"kp": {"default": 300.0, "RL3": 150.0, "LL3": 150.0}, "kd": {"default": 10.0, "RL3": 3.0, "LL3": 3.0}}


@pytest.fixture(scope="module")
def gait_log(biped):
    sc = {"duration": 1.5, "motion": {"type": "march"}, "log_every": 1, **GAINS,
          "disturbances": [{"joint": "RL2", "value": 30.0, "duration": 0.1, "swing": {"group": "RL"}}]}
    return run_scenario(biped, sc, UncertaintyConfig(level="all_uncertainty"), seed=3)


def test_friction_examples():
    # Stribeck + viscous at unit speed, evaluated by hand
    expected = -(5 + (2 - 5) * math.exp(-1 / 1.51)) - 4
    assert friction_torque(1.0, 0.0, LEG_FRICTION) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(-7.45293, abs=1e-5)
    assert friction_torque(1.0, 10.0, LEG_FRICTION) - expected == pytest.approx(-0.2, abs=1e-12)
    assert friction_torque(0.0, 50.0, LEG_FRICTION) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20), st.floats(-200, 200))
def test_friction_is_dissipative(qd, tau):
    assert friction_torque(qd, tau, LEG_FRICTION) * qd <= 0.0


def test_deadzone():
    out = deadzone([-10.0, -10.5, 3.0, 10.0, 11.0], 10.0)
    assert np.array_equal(out, [0.0, -10.5, 0.0, 0.0, 11.0])


@pytest.mark.parametrize("kw", [{"var_q": -1.0}, {"var_qd": -1e-9}, {"level": "bogus"}, {"inertial_scale": 0.0}])
def test_uncertainty_config_rejects(kw):
    with pytest.raises(ValueError):
        UncertaintyConfig(**kw)


def test_friction_params_reject():
    with pytest.raises(ValueError):
        FrictionParams(v_s=0.0)
    with pytest.raises(ValueError):
        FrictionParams(tau_loss=-1.0)


def test_ideal_static_equilibrium():
    m = reference_model("two_link_arm")
    sim = Simulator(m, UncertaintyConfig(level="ideal"))
    q0 = np.array([0.3, -0.8])
    s = sim.initial_state(q0)
    g = dyn.gravity_forces(m, q0)
    for _ in range(2000):
        s, rec = sim.step(s, g, 5e-4)
        assert np.abs(rec.tau_u).max() < 1e-9
    assert np.abs(s.q - q0).max() < 1e-9 and np.abs(s.qd).max() < 1e-9


def test_all_uncertainty_static_hold():
    # elbow hanging straight down: no elbow load, so the deadzone leaves the hold intact
    m = reference_model("two_link_arm")
    sim = Simulator(m, UncertaintyConfig(level="all_uncertainty"))
    q0 = np.array([0.0, math.pi / 2])
    g = dyn.gravity_forces(m, q0)
    assert abs(g[0]) > OTHER_LOSS and abs(g[1]) < 1e-12
    s = sim.initial_state(q0)
    for _ in range(200):
        s, rec = sim.step(s, g, 5e-4)
        assert np.allclose(rec.tau_u, -0.1 * g, atol=1e-9)
    assert np.abs(s.q - q0).max() < 1e-9


OTHER_LOSS = 8.0


def test_deadzone_blocks_small_command():
    m = reference_model("two_link_arm")
    sim = Simulator(m, UncertaintyConfig(level="all_uncertainty"))
    assert np.array_equal(sim.applied_torque(np.zeros(2), np.array([5.0, -7.9])), [0.0, 0.0])
    assert np.array_equal(sim.applied_torque(np.zeros(2), np.array([9.0, -8.5])), [9.0, -8.5])


def test_sensor_noise_static_mean(biped):
    sc = {"duration": 2.0, "motion": {"type": "stand"}, **GAINS}
    log = run_scenario(biped, sc, UncertaintyConfig(level="sensor_noise"), seed=1)
    tu = log.tau_u[200:]
    # the only uncertainty left is the noise term
    assert np.allclose(log.tau_u, log.tau_n, atol=1e-6)
    N = tu.shape[0]
    assert np.all(np.abs(tu.mean(axis=0)) < 3 * tu.std(axis=0) / math.sqrt(N) + 1e-9)


def test_ideal_gait_has_no_uncertainty(biped):
    log = run_scenario(biped, {"duration": 1.0, "motion": {"type": "march"}, **GAINS}, UncertaintyConfig(level="ideal"))
    assert np.abs(log.tau_u).max() < 1e-6
    assert np.array_equal(log.q, log.q_m) and np.array_equal(log.qd, log.qd_m)


def test_external_torque_is_contact_jacobian_sum(biped, gait_log):
    log = gait_log
    rows = [k for k in range(len(log)) if not any(a["start"] <= log.t[k] < a["end"] for a in log.annotations)]
    for k in rows[::50]:
        te = np.zeros(biped.n_v)
        for c, F in zip(biped.contacts, log.contact_force[k]):
            J = dyn.contact_jacobian(biped, log.q[k], c.link, c.point)
            te += J[:3].T @ F
        assert np.allclose(log.tau_e[k], te, atol=1e-8)


def test_unilateral_contact(gait_log):
    assert gait_log.contact_force[..., 2].min() >= 0.0


def test_uncertainty_bookkeeping(biped, gait_log):
    # nominal dynamics minus command and external torque reproduces logged tau_u tick by tick
    log = gait_log
    nominal = perturb_inertial(biped, 0.9)
    dt = log.dt
    tu = log.tau_u - log.tau_n
    for k in range(10, len(log) - 1, 97):
        qdd = (log.qd[k + 1] - log.qd[k]) / dt
        lhs = dyn.inverse_dynamics(nominal, log.q[k], log.qd[k], qdd) - log.tau_d[k] - log.tau_e[k]
        assert np.allclose(lhs, tu[k], atol=1e-6)


def test_swing_disturbance_annotated(gait_log):
    ann = [a for a in gait_log.annotations if a["kind"] == "joint_torque"]
    assert len(ann) == 1 and ann[0]["joint"] == "RL2" and ann[0]["group"] == "RL"
    k = int(round((ann[0]["start"] + 0.05) / gait_log.dt))
    j = gait_log.coords.index("RL2")
    assert gait_log.stance[k, gait_log.groups.index("RL")] == False  # noqa: E712
    assert gait_log.tau_e[k, j] == pytest.approx(30.0, abs=1e-9)


def test_deterministic(biped):
    sc = {"duration": 0.3, "motion": {"type": "march"}, **GAINS, "rte": {"enabled": True, "bound": 10.0}}
    cfg = UncertaintyConfig(level="all_uncertainty")
    a, b = run_scenario(biped, sc, cfg, seed=7), run_scenario(biped, sc, cfg, seed=7)
    assert np.array_equal(a.matrix(), b.matrix())
    c = run_scenario(biped, sc, cfg, seed=8)
    assert not np.array_equal(a.matrix(), c.matrix())


def test_log_round_trip(tmp_path, gait_log):
    p = gait_log.save(tmp_path / "log.csv")
    back = SimLog.load(p)
    assert np.array_equal(back.matrix(), gait_log.matrix())
    assert back.annotations == gait_log.annotations
    assert back.meta["config_hash"] == gait_log.meta["config_hash"]
    assert np.all(np.diff(back.t) > 0)
    w = gait_log.window(10, 20)
    assert len(w) == 10 and w.t[0] == gait_log.t[10]


def test_sinusoid_excitation_stays_in_limits():
    m = reference_model("two_link_arm")
    sc = {"duration": 60.0, "motion": {"type": "sinusoid"}, "kp": 400.0, "kd": 20.0, "log_every": 20}
    log = run_scenario(m, sc, UncertaintyConfig(level="ideal"), seed=2)
    lo, hi = m.position_limits()
    assert np.all(log.q >= lo) and np.all(log.q <= hi)


def test_rte_disabled_is_zero():
    cfg = RteConfig(enabled=False)
    for t in np.linspace(0, 5, 11):
        assert np.all(rte_overlay(cfg, 0, t, np.zeros(4, bool)) == 0)


def test_rte_bounds_mask_and_determinism():
    cfg = RteConfig(enabled=True, bound=50.0)
    mask = np.array([False, False, True, False])
    ts = np.arange(0, 10, 0.01)
    gen = RandomTorqueExploration(cfg, np.full(4, 50.0), np.random.default_rng(4))
    seq = np.array([gen(t, mask) for t in ts])
    again = RandomTorqueExploration(cfg, np.full(4, 50.0), np.random.default_rng(4))
    assert np.array_equal(seq, np.array([again(t, mask) for t in ts]))
    assert np.abs(seq).max() <= 50.0
    assert np.all(seq[:, 2] == 0)
    assert (seq[:, 0] == 0).any() and (seq[:, 0] != 0).any()
    assert np.array_equal(rte_overlay(cfg, 4, 3.0, mask), RandomTorqueExploration(
        cfg, np.full(4, 50.0), np.random.default_rng(4))(3.0, mask))


def test_rte_config_validation():
    with pytest.raises(ValueError):
        RteConfig(duration=(0.0, 0.5))
    with pytest.raises(ValueError):
        RteConfig(duration=(0.5, 0.1))
    with pytest.raises(ValueError):
        Scenario.from_dict({"bogus": 1})
