"""Regenerate the reference robot files under src/mobnet/models/."""
from pathlib import Path

import yaml

OUT = Path(__file__).resolve().parents[1] / "src" / "mobnet" / "models"


def box_inertia(m, x, y, z):
    return [m * (y * y + z * z) / 12, m * (x * x + z * z) / 12, m * (x * x + y * y) / 12, 0.0, 0.0, 0.0]


def link(name, parent, mass, com, inertia):
    return {"name": name, "parent_joint": parent, "mass": mass, "com": list(com), "inertia": inertia}


def joint(name, parent, child, axis, xyz=(0, 0, 0), rpy=(0, 0, 0), lower=-3.1, upper=3.1, velocity=20.0, effort=300.0):
    return {"name": name, "type": "revolute", "parent_link": parent, "child_link": child, "axis": list(axis),
            "origin": {"rpy": list(rpy), "xyz": list(xyz)},
            "limits": {"lower": lower, "upper": upper, "velocity": velocity, "effort": effort}}


def doc(name, base_mode, links, joints, contacts=()):
    return {"schema_version": 1, "name": name, "base_mode": base_mode, "gravity": [0.0, 0.0, -9.81],
            "links": links, "joints": joints, "contacts": list(contacts)}


def pendulum():
    links = [link("base", None, 1.0, (0, 0, 0), [0.01, 0.01, 0.01, 0, 0, 0]),
             link("link1", "j1", 1.0, (0, 0, -1.0), [1e-4, 1e-4, 1e-4, 0, 0, 0])]
    joints = [joint("j1", "base", "link1", (0, 1, 0))]
    return doc("pendulum", "fixed", links, joints)


def two_link_arm():
    links = [link("base", None, 1.0, (0, 0, 0), [0.01, 0.01, 0.01, 0, 0, 0]),
             link("upper", "shoulder", 1.0, (0.5, 0, 0), [0.01, 0.1, 0.1, 0, 0, 0]),
             link("fore", "elbow", 0.8, (0.4, 0, 0), [0.008, 0.05, 0.05, 0, 0, 0])]
    joints = [joint("shoulder", "base", "upper", (0, 1, 0)),
              joint("elbow", "upper", "fore", (0, 1, 0), xyz=(1.0, 0, 0))]
    return doc("two_link_arm", "fixed", links, joints)


# planar biped: torso + two 3-joint legs moving in the sagittal (x-z) plane
def planar_biped(torso=10.0, thigh=(1.0, 0.25), shank=(0.6, 0.25), foot=0.8):
    links = [link("torso", None, torso, (0, 0, 0.15), box_inertia(torso, 0.15, 0.25, 0.4))]
    joints = []
    contacts = []
    (mt, lt), (ms, ls) = thigh, shank
    for side, y in (("R", -0.08), ("L", 0.08)):
        p = f"{side}L"
        links += [
            link(f"{p}_thigh", f"{p}1", mt, (0, 0, -lt / 2), box_inertia(mt, 0.06, 0.06, lt)),
            link(f"{p}_shank", f"{p}2", ms, (0, 0, -ls / 2), box_inertia(ms, 0.05, 0.05, ls)),
            link(f"{p}_foot", f"{p}3", foot, (0.03, 0, -0.03), box_inertia(foot, 0.18, 0.08, 0.04)),
        ]
        joints += [
            joint(f"{p}1", "torso", f"{p}_thigh", (0, 1, 0), xyz=(0, y, 0), lower=-1.6, upper=1.0),
            joint(f"{p}2", f"{p}_thigh", f"{p}_shank", (0, 1, 0), xyz=(0, 0, -lt), lower=-0.1, upper=2.4),
            joint(f"{p}3", f"{p}_shank", f"{p}_foot", (0, 1, 0), xyz=(0, 0, -ls), lower=-0.9, upper=0.9),
        ]
        contacts += [
            {"name": f"{p}_heel", "link": f"{p}_foot", "point": [-0.05, 0.0, -0.05]},
            {"name": f"{p}_toe", "link": f"{p}_foot", "point": [0.12, 0.0, -0.05]},
        ]
    return doc("planar_biped", "floating_planar", links, joints, contacts)


def _leg6(p, parent, y, masses=(1.0, 1.0, 3.0, 2.0, 0.5, 1.0), thigh=0.35, shank=0.35):
    names = [f"{p}{i}" for i in range(1, 7)]
    links_ = [f"{p}_hip_yaw", f"{p}_hip_roll", f"{p}_thigh", f"{p}_shank", f"{p}_ankle", f"{p}_foot"]
    axes = [(0, 0, 1), (1, 0, 0), (0, 1, 0), (0, 1, 0), (0, 1, 0), (1, 0, 0)]
    xyz = [(0, y, -0.05), (0, 0, -0.05), (0, 0, 0), (0, 0, -thigh), (0, 0, -shank), (0, 0, 0)]
    lims = [(-0.8, 0.8), (-0.6, 0.6), (-1.6, 1.0), (-0.1, 2.4), (-0.9, 0.9), (-0.6, 0.6)]
    coms = [(0, 0, -0.02), (0, 0, -0.02), (0, 0, -thigh / 2), (0, 0, -shank / 2), (0, 0, 0), (0.03, 0, -0.05)]
    dims = [(0.08, 0.08, 0.08), (0.08, 0.08, 0.08), (0.1, 0.1, thigh), (0.08, 0.08, shank), (0.06, 0.06, 0.06), (0.22, 0.1, 0.05)]
    links, joints = [], []
    prev = parent
    for n, ln, ax, o, (lo, hi), m, c, d in zip(names, links_, axes, xyz, lims, masses, coms, dims):
        links.append(link(ln, n, m, c, box_inertia(m, *d)))
        joints.append(joint(n, prev, ln, ax, xyz=o, lower=lo, upper=hi))
        prev = ln
    contacts = []
    for dx, dy, tag in ((-0.07, -0.04, "heel_r"), (-0.07, 0.04, "heel_l"), (0.14, -0.04, "toe_r"), (0.14, 0.04, "toe_l")):
        contacts.append({"name": f"{p}_{tag}", "link": f"{p}_foot", "point": [dx, dy, -0.08]})
    return links, joints, contacts


def spatial_biped():
    links = [link("pelvis", None, 10.0, (0, 0, 0.1), box_inertia(10.0, 0.2, 0.3, 0.3))]
    joints, contacts = [], []
    for side, y in (("R", -0.1), ("L", 0.1)):
        l, j, c = _leg6(f"{side}L", "pelvis", y)
        links += l
        joints += j
        contacts += c
    return doc("spatial_biped", "floating_spatial", links, joints, contacts)


def humanoid39():
    """6 virtual + 12 leg + 3 waist + 16 arm + 2 neck joints."""
    links = [link("pelvis", None, 12.0, (0, 0, 0.05), box_inertia(12.0, 0.2, 0.3, 0.2))]
    joints, contacts = [], []
    for side, y in (("R", -0.11), ("L", 0.11)):
        l, j, c = _leg6(f"{side}L", "pelvis", y, masses=(2.0, 2.5, 6.0, 3.5, 1.0, 2.0), thigh=0.4, shank=0.4)
        links += l
        joints += j
        contacts += c
    waist = [("W1", "waist_yaw_link", (0, 0, 1), (0, 0, 0.15), 3.0),
             ("W2", "waist_pitch_link", (0, 1, 0), (0, 0, 0.05), 3.0),
             ("W3", "upper_body", (1, 0, 0), (0, 0, 0.05), 20.0)]
    prev = "pelvis"
    for n, ln, ax, o, m in waist:
        dims = (0.3, 0.4, 0.4) if ln == "upper_body" else (0.1, 0.1, 0.1)
        com = (0, 0, 0.2) if ln == "upper_body" else (0, 0, 0.02)
        links.append(link(ln, n, m, com, box_inertia(m, *dims)))
        joints.append(joint(n, prev, ln, ax, xyz=o, lower=-0.6, upper=0.6))
        prev = ln
    for side, y in (("R", -0.2), ("L", 0.2)):
        p = f"{side}A"
        axes = [(0, 1, 0), (1, 0, 0), (0, 0, 1), (0, 1, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0), (0, 0, 1)]
        masses = [1.0, 1.5, 1.5, 1.5, 1.0, 0.8, 0.5, 0.6]
        offs = [(0, y, 0.35), (0, 0, 0), (0, 0, -0.05), (0, 0, -0.25), (0, 0, -0.05), (0, 0, -0.2), (0, 0, -0.05), (0, 0, 0)]
        prev = "upper_body"
        for i, (ax, m, o) in enumerate(zip(axes, masses, offs), start=1):
            ln = f"{p}_link{i}"
            links.append(link(ln, f"{p}{i}", m, (0, 0, -0.08), box_inertia(m, 0.08, 0.08, 0.16)))
            joints.append(joint(f"{p}{i}", prev, ln, ax, xyz=o, lower=-2.5, upper=2.5))
            prev = ln
    prev = "upper_body"
    for i, (ax, o) in enumerate((((0, 0, 1), (0, 0, 0.45)), ((0, 1, 0), (0, 0, 0.05))), start=1):
        ln = f"neck_link{i}" if i == 1 else "head"
        m = 0.5 if i == 1 else 2.5
        links.append(link(ln, f"N{i}", m, (0, 0, 0.08), box_inertia(m, 0.15, 0.15, 0.15)))
        joints.append(joint(f"N{i}", prev, ln, ax, xyz=o, lower=-1.0, upper=1.0))
        prev = ln
    return doc("humanoid39", "floating_spatial", links, joints, contacts)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for fn in (pendulum, two_link_arm, planar_biped, spatial_biped, humanoid39):
        d = fn()
        (OUT / f"{d['name']}.yaml").write_text(yaml.safe_dump(d, sort_keys=False, default_flow_style=None))
        print("wrote", d["name"])


if __name__ == "__main__":
    main()
