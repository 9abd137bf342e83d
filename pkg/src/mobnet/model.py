"""Kinematic-tree robot descriptions.

A model file is a YAML document describing links, joints and ground-contact
points of a tree-structured robot. Parsing validates the tree and computes
the generalized coordinate layout ``q_v = [virtual joints, actuated joints]``.
"""
from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Sequence

import numpy as np
import yaml

SCHEMA_VERSION = 1
BASE_MODES = ("fixed", "floating_planar", "floating_spatial")
N_VIRTUAL = {"fixed": 0, "floating_planar": 3, "floating_spatial": 6}
JOINT_TYPES = ("revolute", "prismatic")

_REVOLUTE, _PRISMATIC = 0, 1


class ModelError(ValueError):
    """Raised for invalid model files or inconsistent trees."""


@dataclass(frozen=True)
class LinkSpec:
    name: str
    parent_joint: Optional[str]
    mass: float
    com: tuple
    inertia: tuple  # ixx, iyy, izz, ixy, ixz, iyz about the COM

    def inertia_matrix(self) -> np.ndarray:
        ixx, iyy, izz, ixy, ixz, iyz = self.inertia
        return np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])


@dataclass(frozen=True)
class JointSpec:
    name: str
    type: str
    parent_link: str
    child_link: str
    axis: tuple
    rpy: tuple = (0.0, 0.0, 0.0)
    xyz: tuple = (0.0, 0.0, 0.0)
    lower: float = -np.pi
    upper: float = np.pi
    velocity: float = 30.0
    effort: float = 500.0


@dataclass(frozen=True)
class ContactPoint:
    name: str
    link: str
    point: tuple


@dataclass(frozen=True)
class RobotModel:
    """Validated robot description.

    ``joints`` holds the actuated joints only; the virtual joints implied by
    ``base_mode`` are generated and always occupy the first generalized
    coordinates.
    """

    name: str
    base_mode: str
    links: tuple
    joints: tuple
    contacts: tuple = ()
    gravity: tuple = (0.0, 0.0, -9.81)
    nominal_scale: float = 1.0

    @property
    def n_virtual(self) -> int:
        return N_VIRTUAL[self.base_mode]

    @property
    def n_actuated(self) -> int:
        return len(self.joints)

    @property
    def n_v(self) -> int:
        return self.n_virtual + self.n_actuated

    @property
    def root_link(self) -> LinkSpec:
        return next(l for l in self.links if l.parent_joint is None)

    @property
    def virtual_joint_names(self) -> list:
        if self.base_mode == "floating_planar":
            return ["base_x", "base_z", "base_pitch"]
        if self.base_mode == "floating_spatial":
            return ["base_x", "base_y", "base_z", "base_yaw", "base_pitch", "base_roll"]
        return []

    @property
    def coordinate_names(self) -> list:
        return self.virtual_joint_names + [j.name for j in self.joints]

    def joint_index(self, name: str) -> int:
        """Generalized-coordinate index of a joint (virtual or actuated)."""
        names = self.coordinate_names
        if name not in names:
            raise ModelError(f"unknown joint {name!r}")
        return names.index(name)

    def link(self, name: str) -> LinkSpec:
        for l in self.links:
            if l.name == name:
                return l
        raise ModelError(f"unknown link {name!r}")

    def contact(self, name: str) -> ContactPoint:
        for c in self.contacts:
            if c.name == name:
                return c
        raise ModelError(f"unknown contact {name!r}")

    def nominal(self) -> "RobotModel":
        """The nominal model used by observers (perturbation block applied)."""
        if self.nominal_scale == 1.0:
            return self
        return dataclasses.replace(perturb_inertial(self, self.nominal_scale), nominal_scale=1.0)

    def position_limits(self) -> tuple:
        lo = np.array([j.lower for j in self.joints])
        hi = np.array([j.upper for j in self.joints])
        return lo, hi

    @functools.cached_property
    def tree(self) -> "KinematicTree":
        return KinematicTree.build(self)


@dataclass(frozen=True, eq=False)
class KinematicTree:
    """Flat array form of a model consumed by the dynamics kernels."""

    parent: np.ndarray
    jtype: np.ndarray
    axis: np.ndarray
    rot_tree: np.ndarray
    pos_tree: np.ndarray
    mass: np.ndarray
    com: np.ndarray
    inertia: np.ndarray
    gravity: np.ndarray
    link_body: dict = field(default_factory=dict)

    @classmethod
    def build(cls, model: RobotModel) -> "KinematicTree":
        nv = model.n_v
        parent = np.full(nv, -1, dtype=np.int64)
        jtype = np.zeros(nv, dtype=np.int64)
        axis = np.zeros((nv, 3))
        rot_tree = np.tile(np.eye(3), (nv, 1, 1))
        pos_tree = np.zeros((nv, 3))
        mass = np.zeros(nv)
        com = np.zeros((nv, 3))
        inertia = np.zeros((nv, 3, 3))
        link_body = {}

        virtual = {
            "fixed": [],
            "floating_planar": [(_PRISMATIC, (1, 0, 0)), (_PRISMATIC, (0, 0, 1)), (_REVOLUTE, (0, 1, 0))],
            "floating_spatial": [
                (_PRISMATIC, (1, 0, 0)),
                (_PRISMATIC, (0, 1, 0)),
                (_PRISMATIC, (0, 0, 1)),
                (_REVOLUTE, (0, 0, 1)),
                (_REVOLUTE, (0, 1, 0)),
                (_REVOLUTE, (1, 0, 0)),
            ],
        }[model.base_mode]
        for i, (jt, ax) in enumerate(virtual):
            parent[i] = i - 1
            jtype[i] = jt
            axis[i] = ax

        root = model.root_link
        nvirt = model.n_virtual
        if nvirt:
            link_body[root.name] = nvirt - 1
            _set_inertia(root, nvirt - 1, mass, com, inertia)
        else:
            link_body[root.name] = -1

        for k, j in enumerate(model.joints):
            b = nvirt + k
            parent[b] = link_body[j.parent_link]
            jtype[b] = _REVOLUTE if j.type == "revolute" else _PRISMATIC
            axis[b] = j.axis
            rot_tree[b] = rpy_to_matrix(j.rpy)
            pos_tree[b] = j.xyz
            link_body[j.child_link] = b
            _set_inertia(model.link(j.child_link), b, mass, com, inertia)

        return cls(parent, jtype, axis, rot_tree, pos_tree, mass, com, inertia,
                   np.asarray(model.gravity, dtype=float), link_body)

    def body_of(self, link: str) -> int:
        try:
            return self.link_body[link]
        except KeyError:
            raise ModelError(f"unknown link {link!r}") from None

    def ancestors(self, body: int) -> list:
        out = []
        while body >= 0:
            out.append(body)
            body = self.parent[body]
        return out


def _set_inertia(link: LinkSpec, b: int, mass, com, inertia) -> None:
    mass[b] = link.mass
    com[b] = link.com
    inertia[b] = link.inertia_matrix()


def rpy_to_matrix(rpy) -> np.ndarray:
    """Fixed-axis roll-pitch-yaw to rotation matrix (R = Rz Ry Rx)."""
    r, p, y = rpy
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


# ---------------------------------------------------------------------------
# parsing / serialization


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ModelError(f"{where}: missing field {key!r}")
    return d[key]


def _vec(value, n: int, where: str) -> tuple:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ModelError(f"{where}: expected {n} numbers") from None
    if arr.shape != (n,) or not np.all(np.isfinite(arr)):
        raise ModelError(f"{where}: expected {n} finite numbers, got {value!r}")
    return tuple(float(x) for x in arr)


def parse_model(text: str) -> RobotModel:
    """Parse and validate a model document."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ModelError(f"not a valid YAML document: {exc}") from None
    if not isinstance(doc, dict):
        raise ModelError("model document must be a mapping")
    version = _require(doc, "schema_version", "model")
    if version != SCHEMA_VERSION:
        raise ModelError(f"model: unsupported schema_version {version!r}")
    base_mode = doc.get("base_mode", "fixed")
    if base_mode not in BASE_MODES:
        raise ModelError(f"model.base_mode: must be one of {BASE_MODES}, got {base_mode!r}")

    links = []
    for i, ld in enumerate(_require(doc, "links", "model") or []):
        where = f"links[{i}]"
        name = str(_require(ld, "name", where))
        links.append(LinkSpec(
            name=name,
            parent_joint=ld.get("parent_joint"),
            mass=float(_require(ld, "mass", f"{where} ({name})")),
            com=_vec(ld.get("com", [0, 0, 0]), 3, f"{where}.com"),
            inertia=_vec(_require(ld, "inertia", f"{where} ({name})"), 6, f"{where}.inertia"),
        ))

    joints = []
    for i, jd in enumerate(doc.get("joints") or []):
        where = f"joints[{i}]"
        name = str(_require(jd, "name", where))
        where = f"{where} ({name})"
        jtype = _require(jd, "type", where)
        if jtype not in JOINT_TYPES:
            raise ModelError(f"{where}.type: must be one of {JOINT_TYPES}, got {jtype!r}")
        origin = jd.get("origin") or {}
        limits = jd.get("limits") or {}
        joints.append(JointSpec(
            name=name,
            type=jtype,
            parent_link=str(_require(jd, "parent_link", where)),
            child_link=str(_require(jd, "child_link", where)),
            axis=_vec(_require(jd, "axis", where), 3, f"{where}.axis"),
            rpy=_vec(origin.get("rpy", [0, 0, 0]), 3, f"{where}.origin.rpy"),
            xyz=_vec(origin.get("xyz", [0, 0, 0]), 3, f"{where}.origin.xyz"),
            lower=float(limits.get("lower", -np.pi)),
            upper=float(limits.get("upper", np.pi)),
            velocity=float(limits.get("velocity", 30.0)),
            effort=float(limits.get("effort", 500.0)),
        ))

    contacts = []
    for i, cd in enumerate(doc.get("contacts") or []):
        where = f"contacts[{i}]"
        contacts.append(ContactPoint(
            name=str(_require(cd, "name", where)),
            link=str(_require(cd, "link", where)),
            point=_vec(cd.get("point", [0, 0, 0]), 3, f"{where}.point"),
        ))

    nominal = doc.get("nominal") or {}
    scale = float(nominal.get("inertial_scale", 1.0))
    if scale <= 0:
        raise ModelError("nominal.inertial_scale: must be positive")

    model = RobotModel(
        name=str(doc.get("name", "robot")),
        base_mode=base_mode,
        links=tuple(links),
        joints=tuple(joints),
        contacts=tuple(contacts),
        gravity=_vec(doc.get("gravity", [0, 0, -9.81]), 3, "model.gravity"),
        nominal_scale=scale,
    )
    validate_model(model)
    return model


def validate_model(model: RobotModel) -> None:
    link_names = [l.name for l in model.links]
    joint_names = [j.name for j in model.joints]
    for kind, names in (("link", link_names), ("joint", joint_names), ("contact", [c.name for c in model.contacts])):
        seen = set()
        for n in names:
            if n in seen:
                raise ModelError(f"duplicate {kind} name {n!r}")
            seen.add(n)
    clash = set(joint_names) & set(model.virtual_joint_names)
    if clash:
        raise ModelError(f"joint names reserved for virtual joints: {sorted(clash)}")

    for l in model.links:
        if not l.mass > 0:
            raise ModelError(f"link {l.name!r}: mass must be positive")
        I = l.inertia_matrix()
        try:
            np.linalg.cholesky(I)
        except np.linalg.LinAlgError:
            raise ModelError(f"link {l.name!r}: inertia is not positive definite") from None

    for j in model.joints:
        ax = np.asarray(j.axis)
        if abs(np.linalg.norm(ax) - 1.0) > 1e-9:
            raise ModelError(f"joint {j.name!r}: axis must have unit norm")
        if not j.lower < j.upper:
            raise ModelError(f"joint {j.name!r}: limits must satisfy lower < upper")
        if j.velocity <= 0 or j.effort <= 0:
            raise ModelError(f"joint {j.name!r}: velocity/effort limits must be positive")
        for ln in (j.parent_link, j.child_link):
            if ln not in link_names:
                raise ModelError(f"joint {j.name!r}: unknown link {ln!r}")

    roots = [l for l in model.links if l.parent_joint is None]
    if len(roots) != 1:
        raise ModelError(f"exactly one root link (parent_joint: null) required, found {len(roots)}")
    children = {}
    for j in model.joints:
        if j.child_link in children:
            raise ModelError(f"cycle detected: link {j.child_link!r} has more than one parent joint")
        children[j.child_link] = j
    for l in model.links:
        if l.parent_joint is None:
            if l.name in children:
                raise ModelError(f"cycle detected: root link {l.name!r} is the child of joint {children[l.name].name!r}")
            continue
        j = children.get(l.name)
        if j is None or j.name != l.parent_joint:
            raise ModelError(f"link {l.name!r}: parent_joint {l.parent_joint!r} does not name the joint whose child it is")

    # every link reachable from the root, and joints listed parent-first
    placed = {roots[0].name}
    for j in model.joints:
        if j.parent_link not in placed:
            reachable = _reachable(model, roots[0].name)
            if j.parent_link not in reachable:
                raise ModelError(f"cycle detected: link {j.parent_link!r} is not connected to the root")
            raise ModelError(f"joint {j.name!r}: joints must be listed parent-first (parent link {j.parent_link!r} not yet placed)")
        placed.add(j.child_link)
    if len(placed) != len(model.links):
        raise ModelError(f"links not connected to the root: {sorted(set(link_names) - placed)}")

    for c in model.contacts:
        if c.link not in link_names:
            raise ModelError(f"contact {c.name!r}: unknown link {c.link!r}")


def _reachable(model: RobotModel, root: str) -> set:
    out = {root}
    changed = True
    while changed:
        changed = False
        for j in model.joints:
            if j.parent_link in out and j.child_link not in out:
                out.add(j.child_link)
                changed = True
    return out


def model_to_dict(model: RobotModel) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "name": model.name,
        "base_mode": model.base_mode,
        "gravity": list(model.gravity),
        "links": [
            {"name": l.name, "parent_joint": l.parent_joint, "mass": l.mass,
             "com": list(l.com), "inertia": list(l.inertia)}
            for l in model.links
        ],
        "joints": [
            {"name": j.name, "type": j.type, "parent_link": j.parent_link, "child_link": j.child_link,
             "axis": list(j.axis), "origin": {"rpy": list(j.rpy), "xyz": list(j.xyz)},
             "limits": {"lower": j.lower, "upper": j.upper, "velocity": j.velocity, "effort": j.effort}}
            for j in model.joints
        ],
        "contacts": [{"name": c.name, "link": c.link, "point": list(c.point)} for c in model.contacts],
    }
    if model.nominal_scale != 1.0:
        doc["nominal"] = {"inertial_scale": model.nominal_scale}
    return doc


def serialize_model(model: RobotModel) -> str:
    return yaml.safe_dump(model_to_dict(model), sort_keys=False, default_flow_style=None)


def load_model(path) -> RobotModel:
    with open(path) as fh:
        return parse_model(fh.read())


REFERENCE_MODELS = ("pendulum", "two_link_arm", "planar_biped", "spatial_biped", "humanoid39")


def reference_model(name: str) -> RobotModel:
    """Load one of the robot files shipped with the package."""
    if name not in REFERENCE_MODELS:
        raise ModelError(f"unknown reference model {name!r}; choose from {REFERENCE_MODELS}")
    text = resources.files("mobnet.models").joinpath(f"{name}.yaml").read_text()
    return parse_model(text)


# ---------------------------------------------------------------------------
# perturbation and grouping


def perturb_inertial(model: RobotModel, scale: float) -> RobotModel:
    """Scale every link mass and inertia by ``scale``; kinematics unchanged."""
    if not scale > 0:
        raise ModelError(f"inertial scale must be positive, got {scale}")
    links = tuple(
        dataclasses.replace(l, mass=l.mass * scale, inertia=tuple(v * scale for v in l.inertia))
        for l in model.links
    )
    return dataclasses.replace(model, links=links)


@dataclass(frozen=True)
class LimbGroup:
    name: str
    joints: tuple           # generalized-coordinate indices
    ancestors: tuple = ()   # joints between the base and this group's root
    descendants: tuple = ()  # joints of groups hanging below this one
    load_bearing: bool = False
    target_mode: str = "residual_only"  # or residual_minus_external
    virtual: bool = False


@dataclass(frozen=True)
class LimbGrouping:
    groups: tuple
    ignored: tuple = ()

    @property
    def names(self) -> list:
        return [g.name for g in self.groups]

    def __getitem__(self, name: str) -> LimbGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    @property
    def virtual_group(self) -> Optional[LimbGroup]:
        return next((g for g in self.groups if g.virtual), None)

    @property
    def actuated_groups(self) -> list:
        return [g for g in self.groups if not g.virtual]


def derive_groups(model: RobotModel, single: bool = False, ignore: Sequence[str] = ()) -> LimbGrouping:
    """Split the actuated joints into limb groups following the tree.

    A group is a maximal serial chain of joints: it starts at a joint whose
    parent link is the root or a branching link, and continues while each
    link carries exactly one child joint. Groups of joints in the same
    subtree are coupled through the mass matrix, so each group records its
    ancestor chain (joints between the base and the group) and the joints
    of the groups hanging below it.

    ``single`` collapses all actuated joints into one group. Joints listed in
    ``ignore`` (and everything below them) are left out of every group.
    """
    nvirt = model.n_virtual
    ignored = set()
    for name in ignore:
        model.joint_index(name)
        ignored.add(name)
    changed = True
    while changed:
        changed = False
        for j in model.joints:
            if j.name in ignored:
                continue
            pj = model.link(j.parent_link).parent_joint
            if pj in ignored:
                ignored.add(j.name)
                changed = True

    contact_links = {c.link for c in model.contacts}
    child_joints = {}
    for j in model.joints:
        if j.name not in ignored:
            child_joints.setdefault(j.parent_link, []).append(j)

    virtual = None
    if nvirt:
        virtual = LimbGroup(name="virtual", joints=tuple(range(nvirt)), load_bearing=False,
                            target_mode="residual_minus_external", virtual=True)

    active = [j for j in model.joints if j.name not in ignored]
    if single:
        idx = tuple(model.joint_index(j.name) for j in active)
        load = any(j.child_link in contact_links for j in active)
        g = LimbGroup(name="all", joints=idx, load_bearing=load,
                      target_mode="residual_minus_external" if (load or nvirt) else "residual_only")
        groups = (virtual, g) if virtual else (g,)
        return LimbGrouping(groups=groups, ignored=tuple(sorted(ignored, key=model.joint_index)))

    chains = []  # (joint list, ancestor joint indices)

    def walk(link: str, ancestors: tuple) -> None:
        for start in child_joints.get(link, []):
            chain = [start]
            cur = start
            while len(child_joints.get(cur.child_link, [])) == 1:
                cur = child_joints[cur.child_link][0]
                chain.append(cur)
            chains.append((chain, ancestors))
            idx = tuple(model.joint_index(j.name) for j in chain)
            walk(cur.child_link, ancestors + idx)

    walk(model.root_link.name, ())

    def subtree_links(chain):
        links = set()
        stack = [chain[-1].child_link]
        links.update(j.child_link for j in chain)
        while stack:
            ln = stack.pop()
            for j in child_joints.get(ln, []):
                links.add(j.child_link)
                stack.append(j.child_link)
        return links

    groups = []
    for chain, anc in chains:
        idx = tuple(model.joint_index(j.name) for j in chain)
        below = subtree_links(chain) - {j.child_link for j in chain}
        desc = tuple(sorted(model.joint_index(j.name) for j in active
                            if j.child_link in below))
        # load-bearing: the chain's own links carry a ground-contact point
        load = any(j.child_link in contact_links for j in chain) or bool(
            below & contact_links)
        groups.append(LimbGroup(
            name=_group_name(chain),
            joints=idx,
            ancestors=anc,
            descendants=desc,
            load_bearing=load,
            target_mode="residual_minus_external" if load else "residual_only",
        ))
    if virtual:
        groups.insert(0, virtual)
    return LimbGrouping(groups=tuple(groups), ignored=tuple(sorted(ignored, key=model.joint_index)))


def _group_name(chain) -> str:
    """Common name prefix of the chain's joints, e.g. ``l_hip``/``l_knee`` -> ``l``."""
    names = [j.name for j in chain]
    prefix = names[0]
    for n in names[1:]:
        while not n.startswith(prefix):
            prefix = prefix[:-1]
    prefix = prefix.rstrip("_0123456789")
    return prefix or names[0]
