import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mobnet import dynamics as dyn
from mobnet.model import (ModelError, derive_groups, parse_model, perturb_inertial, reference_model,
                          serialize_model, model_to_dict)

PENDULUM = """
schema_version: 1
name: pendulum
base_mode: fixed
links:
- {name: base, parent_joint: null, mass: 1.0, com: [0, 0, 0], inertia: [0.01, 0.01, 0.01, 0, 0, 0]}
- {name: link1, parent_joint: j1, mass: 1.0, com: [0, 0, -1.0], inertia: [1e-4, 1e-4, 1e-4, 0, 0, 0]}
joints:
- name: j1
  type: revolute
  parent_link: base
  child_link: link1
  axis: [0, 1, 0]
  origin: {rpy: [0, 0, 0], xyz: [0, 0, 0]}
  limits: {lower: -3, upper: 3, velocity: 10, effort: 100}
"""


def test_parse_pendulum():
    m = parse_model(PENDULUM)
    assert m.n_v == 1
    assert m.base_mode == "fixed"
    assert m.coordinate_names == ["j1"]


def test_reference_planar_biped_dimensions():
    m = reference_model("planar_biped")
    assert m.n_v == 9 and m.n_virtual == 3 and m.n_actuated == 6
    g = derive_groups(m)
    assert [x.name for x in g.actuated_groups] == ["RL", "LL"]
    assert all(len(x.joints) == 3 for x in g.actuated_groups)


def test_reference_humanoid_has_39_dof():
    m = reference_model("humanoid39")
    assert m.n_v == 39 and m.n_virtual == 6 and m.n_actuated == 33


@pytest.mark.parametrize("text,msg", [
    (PENDULUM.replace("schema_version: 1", "schema_version: 7"), "schema_version"),
    (PENDULUM.replace("mass: 1.0, com: [0, 0, -1.0]", "mass: -1.0, com: [0, 0, -1.0]"), "mass"),
    (PENDULUM.replace("inertia: [1e-4, 1e-4, 1e-4", "inertia: [1e-4, -1e-4, 1e-4"), "inertia"),
    (PENDULUM.replace("axis: [0, 1, 0]", "axis: [0, 2, 0]"), "axis"),
    (PENDULUM.replace("lower: -3, upper: 3", "lower: 3, upper: -3"), "limit"),
    (PENDULUM.replace("name: link1", "name: base"), "duplicate"),
    (PENDULUM.replace("type: revolute", "type: helical"), "type"),
    (PENDULUM.replace("parent_link: base", "parent_link: link1"), "cycle"),
])
def test_parse_rejects_bad_documents(text, msg):
    with pytest.raises(ModelError, match=msg):
        parse_model(text)


def test_parse_error_names_location():
    bad = PENDULUM.replace("  type: revolute\n", "")
    with pytest.raises(ModelError, match=r"joints\[0\]"):
        parse_model(bad)


@pytest.mark.parametrize("name", ["pendulum", "two_link_arm", "planar_biped", "spatial_biped", "humanoid39"])
def test_round_trip(name):
    m = reference_model(name)
    again = parse_model(serialize_model(m))
    assert again == m
    assert model_to_dict(again) == model_to_dict(m)


def test_perturb_identity_and_scale():
    m = reference_model("pendulum")
    assert perturb_inertial(m, 1.0) == m
    p = perturb_inertial(m, 0.9)
    assert p.links[1].mass == pytest.approx(0.9)
    assert np.allclose(p.links[1].inertia, 0.9 * np.asarray(m.links[1].inertia))
    assert p.joints == m.joints
    with pytest.raises(ModelError):
        perturb_inertial(m, 0.0)


def test_perturbed_mass_matrix_scales_linearly():
    m = reference_model("planar_biped")
    q = np.zeros(m.n_v)
    M = dyn.mass_matrix(m, q)
    assert np.allclose(dyn.mass_matrix(perturb_inertial(m, 0.9), q), 0.9 * M, rtol=1e-12, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(0.2, 3.0))
def test_perturb_composes(a, b):
    m = reference_model("two_link_arm")
    one = perturb_inertial(m, a * b)
    two = perturb_inertial(perturb_inertial(m, a), b)
    for l1, l2 in zip(one.links, two.links):
        assert l1.mass == pytest.approx(l2.mass, rel=1e-12)
        assert np.allclose(l1.inertia, l2.inertia, rtol=1e-12)


def test_groups_fixed_arm():
    g = derive_groups(reference_model("two_link_arm"))
    assert len(g.groups) == 1
    assert g.virtual_group is None
    assert g.groups[0].ancestors == ()


def test_groups_planar_biped():
    m = reference_model("planar_biped")
    g = derive_groups(m)
    assert g.virtual_group.joints == (0, 1, 2)
    for leg in g.actuated_groups:
        assert leg.ancestors == ()
        assert leg.load_bearing and leg.target_mode == "residual_minus_external"


def test_groups_humanoid_arms_see_waist():
    m = reference_model("humanoid39")
    g = derive_groups(m, ignore=("N1", "N2"))
    waist = g["W"].joints
    assert g["RA"].ancestors == waist and g["LA"].ancestors == waist
    assert not g["RA"].load_bearing and g["RA"].target_mode == "residual_only"


def test_single_grouping_collapses():
    m = reference_model("planar_biped")
    g = derive_groups(m, single=True)
    assert [x.name for x in g.actuated_groups] == ["all"]
    assert g["all"].joints == tuple(range(3, 9))


@pytest.mark.parametrize("name,ignore", [("planar_biped", ()), ("spatial_biped", ()), ("humanoid39", ()),
                                         ("humanoid39", ("N1", "N2")), ("two_link_arm", ())])
def test_groups_partition_actuated_joints(name, ignore):
    m = reference_model(name)
    g = derive_groups(m, ignore=ignore)
    joints = [j for x in g.actuated_groups for j in x.joints]
    ignored = [m.joint_index(n) for n in g.ignored]
    assert sorted(joints + ignored) == list(range(m.n_virtual, m.n_v))
    assert len(set(joints)) == len(joints)
    for x in g.actuated_groups:
        assert not set(x.ancestors) & set(x.joints)
