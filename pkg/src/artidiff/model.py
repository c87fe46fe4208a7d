"""Kinematic-tree robot description, state layout, and the scene file format.

A scene is a YAML document::

    name: pendulum_1
    gravity: [0, 0, -9.81]
    links:
      - name: link1
        parent: null              # index or name of an earlier link
        joint:
          type: revolute          # revolute | prismatic | fixed | floating_base
          axis: [0, 1, 0]
          xyz: [0, 0, 0]          # joint frame origin in the parent frame
          rpy: [0, 0, 0]          # joint frame orientation in the parent frame
          damping: 0.0
          effort_limit: .inf
        mass: 1.0
        com: [0, 0, -1]
        inertia: [0, 0, 0]        # diagonal, or a full 3x3 list, about the COM
        collision:
          - {type: sphere, radius: 0.1, center: [0, 0, -1]}
          - {type: capsule, radius: 0.05, center: [0, 0, -0.5], axis: [0, 0, 1], half_length: 0.5}
    initial_state: {q: [0.5], qdot: [0.0]}
    dt: 0.005
    steps: 100
    integrator: explicit          # explicit | symplectic
    contact: {enabled: false, mu: 0.5, restitution: 0.0, pgs_iterations: 50,
              baumgarte: 0.2, margin: 1.0e-4, ground: true, ground_height: 0.0,
              self_collision: false}
    objective: {...}              # see artidiff.objectives
    optimizer: {learning_rate: 0.1, iterations: 100}

Every section except ``links`` is optional.  The state is ``x = [q, qdot]``;
a floating base contributes ``[position(3), quaternion xyzw(4)]`` to ``q`` and
``[angular velocity(3), linear velocity(3)]`` in body coordinates to ``qdot``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import spatial as sp
from .errors import DimensionMismatch, NonFiniteInput, ParseError, ValidationError

JOINT_KINDS = ("revolute", "prismatic", "fixed", "floating_base")
JOINT_NQ = {"revolute": 1, "prismatic": 1, "fixed": 0, "floating_base": 7}
JOINT_NV = {"revolute": 1, "prismatic": 1, "fixed": 0, "floating_base": 6}
SHAPE_KINDS = ("sphere", "capsule")
INTEGRATORS = ("explicit", "symplectic")
DEFAULT_GRAVITY = (0.0, 0.0, -9.81)


@dataclass(frozen=True, eq=False)
class JointSpec:
    kind: str
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    parent_to_joint: sp.SpatialTransform = field(default_factory=sp.SpatialTransform.identity)
    damping: float = 0.0
    effort_limit: float = math.inf
    xyz: tuple = (0.0, 0.0, 0.0)
    rpy: tuple = (0.0, 0.0, 0.0)

    @property
    def nq(self):
        return JOINT_NQ[self.kind]

    @property
    def nv(self):
        return JOINT_NV[self.kind]

    @property
    def actuated(self):
        return self.kind in ("revolute", "prismatic")

    @classmethod
    def make(cls, kind, axis=(0.0, 0.0, 1.0), xyz=(0.0, 0.0, 0.0), rpy=(0.0, 0.0, 0.0),
             damping=0.0, effort_limit=math.inf):
        xyz = tuple(float(c) for c in xyz)
        rpy = tuple(float(c) for c in rpy)
        # E maps parent coordinates into joint-frame coordinates
        E = sp.rpy_matrix(rpy).T
        return cls(kind, np.asarray(axis, dtype=float), sp.SpatialTransform(E, np.array(xyz)),
                   float(damping), float(effort_limit), xyz, rpy)


@dataclass(frozen=True, eq=False)
class Shape:
    kind: str
    radius: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    half_length: float = 0.0

    def points(self):
        """Sphere centers that make up the shape, in link coordinates."""
        if self.kind == "sphere":
            return [self.center]
        return [self.center - self.half_length * self.axis, self.center + self.half_length * self.axis]


@dataclass(frozen=True, eq=False)
class LinkSpec:
    name: str
    parent: int | None
    joint: JointSpec
    mass: float
    com: np.ndarray
    inertia: np.ndarray
    collision: tuple = ()

    def spatial_inertia(self):
        return sp.spatial_inertia(self.mass, self.com, self.inertia)


@dataclass(frozen=True, eq=False)
class RobotModel:
    links: tuple
    gravity: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_GRAVITY))

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float))
        validate_model(self)
        qi, vi, ui = [], [], []
        nq = nv = nu = 0
        for link in self.links:
            qi.append(nq)
            vi.append(nv)
            ui.append(nu if link.joint.actuated else -1)
            nq += link.joint.nq
            nv += link.joint.nv
            nu += 1 if link.joint.actuated else 0
        object.__setattr__(self, "q_index", tuple(qi))
        object.__setattr__(self, "v_index", tuple(vi))
        object.__setattr__(self, "u_index", tuple(ui))
        object.__setattr__(self, "nq", nq)
        object.__setattr__(self, "nv", nv)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "inertias", tuple(l.spatial_inertia() for l in self.links))
        children = [[] for _ in self.links]
        for i, link in enumerate(self.links):
            if link.parent is not None:
                children[link.parent].append(i)
        object.__setattr__(self, "children", tuple(tuple(c) for c in children))

    @property
    def n_links(self):
        return len(self.links)

    @property
    def floating(self):
        return bool(self.links) and self.links[0].joint.kind == "floating_base"

    @property
    def nx(self):
        return self.nq + self.nv

    def actuated_v_index(self):
        """Velocity index of each control input."""
        return np.array([self.v_index[i] for i, link in enumerate(self.links) if link.joint.actuated],
                        dtype=int)

    def ancestors(self, i):
        """Link indices on the path from ``i`` to its root, ``i`` first."""
        out = []
        while i is not None:
            out.append(i)
            i = self.links[i].parent
        return out

    def with_params(self, mass=None, inertia=None, com=None, damping=None, gravity=None):
        """Copy with per-link parameters replaced (arrays indexed by link)."""
        links = []
        for i, link in enumerate(self.links):
            changes = {}
            if mass is not None:
                changes["mass"] = float(mass[i])
            if inertia is not None:
                changes["inertia"] = np.array(inertia[i], dtype=float)
            if com is not None:
                changes["com"] = np.array(com[i], dtype=float)
            if damping is not None:
                changes["joint"] = dataclasses.replace(link.joint, damping=float(damping[i]))
            links.append(dataclasses.replace(link, **changes))
        return RobotModel(tuple(links), self.gravity if gravity is None else gravity)

    def neutral_q(self):
        q = np.zeros(self.nq)
        if self.floating:
            q[6] = 1.0
        return q


def validate_model(model):
    for i, link in enumerate(model.links):
        j = link.joint
        where = f"link {i} ({link.name})"
        if j.kind not in JOINT_KINDS:
            raise ValidationError(f"{where}: unknown joint type {j.kind!r}")
        if link.parent is not None and not 0 <= link.parent < i:
            raise ValidationError(f"{where}: parent {link.parent} violates topological order "
                                  "(parent index must be smaller than the child index)")
        if j.kind == "floating_base" and (i != 0 or link.parent is not None):
            raise ValidationError(f"{where}: a floating_base joint is only allowed on the root link 0")
        if j.kind in ("revolute", "prismatic") and abs(np.linalg.norm(j.axis) - 1.0) > 1e-9:
            raise ValidationError(f"{where}: joint axis must be unit norm")
        if not (link.mass > 0 and math.isfinite(link.mass)):
            raise ValidationError(f"{where}: mass must be positive")
        if j.damping < 0:
            raise ValidationError(f"{where}: damping must be non-negative")
        if j.effort_limit < 0:
            raise ValidationError(f"{where}: effort_limit must be non-negative")
        I = link.inertia
        if I.shape != (3, 3) or not np.all(np.isfinite(I)):
            raise ValidationError(f"{where}: inertia must be a finite 3x3 matrix")
        if np.max(np.abs(I - I.T)) > 1e-12:
            raise ValidationError(f"{where}: inertia is not symmetric")
        # point masses (zero rotational inertia) are allowed; the 6x6 inertia stays PD
        if np.linalg.eigvalsh(I).min() < -1e-12:
            raise ValidationError(f"{where}: inertia is not positive semi-definite")
        for s in link.collision:
            if s.kind not in SHAPE_KINDS:
                raise ValidationError(f"{where}: unknown collision shape {s.kind!r}")
            if not s.radius > 0:
                raise ValidationError(f"{where}: collision radius must be positive")
            if s.kind == "capsule" and (s.half_length < 0 or abs(np.linalg.norm(s.axis) - 1) > 1e-9):
                raise ValidationError(f"{where}: capsule needs a unit axis and half_length >= 0")
    if model.gravity.shape != (3,) or not np.all(np.isfinite(model.gravity)):
        raise ValidationError("gravity must be a finite 3-vector")


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SystemState:
    q: np.ndarray
    qdot: np.ndarray

    def copy(self):
        return SystemState(self.q.copy(), self.qdot.copy())


def check_state(model, q, qdot, tol=1e-9):
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    if q.shape != (model.nq,) or qdot.shape != (model.nv,):
        raise DimensionMismatch(f"state needs q[{model.nq}] and qdot[{model.nv}], "
                                f"got {q.shape} and {qdot.shape}")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qdot))):
        raise NonFiniteInput("state has non-finite entries")
    if model.floating and abs(np.linalg.norm(q[3:7]) - 1.0) > tol:
        raise ValidationError("floating-base quaternion is not unit norm")
    return SystemState(q, qdot)


def state_pack(model, q, qdot):
    """Flat state ``x = [q, qdot]``."""
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    if q.shape != (model.nq,) or qdot.shape != (model.nv,):
        raise DimensionMismatch(f"expected q[{model.nq}] and qdot[{model.nv}]")
    return np.concatenate((q, qdot))


def state_unpack(model, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (model.nx,):
        raise DimensionMismatch(f"expected a state of length {model.nx}, got {x.shape}")
    return x[:model.nq].copy(), x[model.nq:].copy()


# ---------------------------------------------------------------------------
# Scene
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContactMaterial:
    mu: float = 0.5
    restitution: float = 0.0

    def __post_init__(self):
        if not self.mu >= 0:
            raise ValidationError("friction coefficient mu must be >= 0")
        if not 0 <= self.restitution <= 1:
            raise ValidationError("restitution must lie in [0, 1]")


@dataclass(frozen=True)
class ContactSettings:
    enabled: bool = False
    material: ContactMaterial = ContactMaterial()
    pgs_iterations: int = 50
    baumgarte: float = 0.2
    margin: float = 1e-4
    ground: bool = True
    ground_height: float = 0.0
    self_collision: bool = False

    def with_mu(self, mu):
        return dataclasses.replace(self, material=dataclasses.replace(self.material, mu=float(mu)))


@dataclass(frozen=True, eq=False)
class Scene:
    name: str
    model: RobotModel
    q0: np.ndarray
    qdot0: np.ndarray
    dt: float = 0.01
    steps: int = 100
    integrator: str = "symplectic"
    contact: ContactSettings = ContactSettings()
    objective: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)

    @property
    def x0(self):
        return state_pack(self.model, self.q0, self.qdot0)


class _Doc:
    """Plain-Python view of a YAML node tree that remembers source lines."""

    def __init__(self, node):
        self.lines = {}
        self.data = self._build(node, ())

    def _build(self, node, path):
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            out = {}
            for k, v in node.value:
                key = yaml.safe_load(yaml.serialize(k))
                out[key] = self._build(v, path + (key,))
                self.lines.setdefault(path + (key,), k.start_mark.line + 1)
            return out
        if isinstance(node, yaml.SequenceNode):
            return [self._build(v, path + (i,)) for i, v in enumerate(node.value)]
        return yaml.safe_load(yaml.serialize(node))

    def line(self, path):
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path)


def _field_name(path):
    return ".".join(str(p) for p in path)


class _Reader:
    def __init__(self, doc):
        self.doc = doc

    def fail(self, path, msg):
        raise ParseError(msg, line=self.doc.line(path), field=_field_name(path))

    def get(self, obj, path, key, default=KeyError):
        if not isinstance(obj, dict):
            self.fail(path, "expected a mapping")
        if key not in obj:
            if default is KeyError:
                self.fail(path + (key,), f"missing required field {key!r}")
            return default
        return obj[key]

    def number(self, obj, path, key, default=KeyError):
        v = self.get(obj, path, key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(path + (key,), f"field {key!r} must be a number")
        return float(v)

    def vector(self, obj, path, key, n, default=KeyError):
        v = self.get(obj, path, key, default)
        arr = self._array(v, path + (key,))
        if n is not None and arr.shape != (n,):
            self.fail(path + (key,), f"field {key!r} must have {n} entries")
        return arr

    def _array(self, v, path):
        try:
            arr = np.array(v, dtype=float)
        except (TypeError, ValueError):
            self.fail(path, "expected numbers")
        return arr


def _parse_shape(rd, obj, path):
    kind = rd.get(obj, path, "type")
    if kind not in SHAPE_KINDS:
        rd.fail(path + ("type",), f"unknown collision shape {kind!r}")
    radius = rd.number(obj, path, "radius")
    center = rd.vector(obj, path, "center", 3, [0.0, 0.0, 0.0])
    if kind == "sphere":
        return Shape("sphere", radius, center)
    axis = rd.vector(obj, path, "axis", 3, [0.0, 0.0, 1.0])
    return Shape("capsule", radius, center, axis, rd.number(obj, path, "half_length"))


def _parse_link(rd, obj, path, names):
    name = str(rd.get(obj, path, "name", f"link{path[-1]}"))
    parent = rd.get(obj, path, "parent", None)
    if isinstance(parent, str):
        if parent not in names:
            rd.fail(path + ("parent",), f"parent {parent!r} is not an earlier link "
                                        "(links must be listed in topological order)")
        parent = names[parent]
    elif parent is not None and (isinstance(parent, bool) or not isinstance(parent, int)):
        rd.fail(path + ("parent",), "parent must be a link index, a link name, or null")
    jobj = rd.get(obj, path, "joint")
    jpath = path + ("joint",)
    kind = rd.get(jobj, jpath, "type")
    if kind not in JOINT_KINDS:
        rd.fail(jpath + ("type",), f"unknown joint type {kind!r}")
    joint = JointSpec.make(
        kind,
        axis=rd.vector(jobj, jpath, "axis", 3, [0.0, 0.0, 1.0]),
        xyz=rd.vector(jobj, jpath, "xyz", 3, [0.0, 0.0, 0.0]),
        rpy=rd.vector(jobj, jpath, "rpy", 3, [0.0, 0.0, 0.0]),
        damping=rd.number(jobj, jpath, "damping", 0.0),
        effort_limit=rd.number(jobj, jpath, "effort_limit", math.inf),
    )
    inertia = rd._array(rd.get(obj, path, "inertia", [0.0, 0.0, 0.0]), path + ("inertia",))
    if inertia.shape == (3,):
        inertia = np.diag(inertia)
    elif inertia.shape != (3, 3):
        rd.fail(path + ("inertia",), "inertia must be 3 diagonal entries or a 3x3 matrix")
    shapes = rd.get(obj, path, "collision", [])
    if not isinstance(shapes, list):
        rd.fail(path + ("collision",), "collision must be a list of shapes")
    collision = tuple(_parse_shape(rd, s, path + ("collision", k)) for k, s in enumerate(shapes))
    return LinkSpec(name, parent, joint, rd.number(obj, path, "mass"),
                    rd.vector(obj, path, "com", 3, [0.0, 0.0, 0.0]), inertia, collision)


def _parse_model(rd, data):
    links_raw = rd.get(data, (), "links")
    if not isinstance(links_raw, list) or not links_raw:
        rd.fail(("links",), "links must be a non-empty list")
    links, names = [], {}
    for i, obj in enumerate(links_raw):
        link = _parse_link(rd, obj, ("links", i), names)
        names[link.name] = i
        links.append(link)
    gravity = rd.vector(data, (), "gravity", 3, list(DEFAULT_GRAVITY))
    try:
        return RobotModel(tuple(links), gravity)
    except ValidationError as exc:
        raise ValidationError(str(exc)) from None


def _load_doc(text):
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(f"malformed document: {getattr(exc, 'problem', exc)}",
                         line=mark.line + 1 if mark else None) from None
    if node is None:
        raise ParseError("empty document")
    doc = _Doc(node)
    if not isinstance(doc.data, dict):
        raise ParseError("top level must be a mapping", line=1)
    return doc


def load_model(text):
    """Parse a scene document and return its validated RobotModel."""
    doc = _load_doc(text)
    return _parse_model(_Reader(doc), doc.data)


def load_scene(text, name=None):
    doc = _load_doc(text)
    rd = _Reader(doc)
    data = doc.data
    model = _parse_model(rd, data)
    init = rd.get(data, (), "initial_state", {})
    q0 = rd.vector(init, ("initial_state",), "q", model.nq, list(model.neutral_q()))
    qdot0 = rd.vector(init, ("initial_state",), "qdot", model.nv, [0.0] * model.nv)
    integrator = rd.get(data, (), "integrator", "symplectic")
    if integrator not in INTEGRATORS:
        rd.fail(("integrator",), f"integrator must be one of {INTEGRATORS}")
    c = rd.get(data, (), "contact", {})
    cp = ("contact",)
    material = ContactMaterial(rd.number(c, cp, "mu", 0.5), rd.number(c, cp, "restitution", 0.0))
    contact = ContactSettings(
        enabled=bool(rd.get(c, cp, "enabled", bool(c))),
        material=material,
        pgs_iterations=int(rd.number(c, cp, "pgs_iterations", 50)),
        baumgarte=rd.number(c, cp, "baumgarte", 0.2),
        margin=rd.number(c, cp, "margin", 1e-4),
        ground=bool(rd.get(c, cp, "ground", True)),
        ground_height=rd.number(c, cp, "ground_height", 0.0),
        self_collision=bool(rd.get(c, cp, "self_collision", False)),
    )
    dt = rd.number(data, (), "dt", 0.01)
    steps = int(rd.number(data, (), "steps", 100))
    if not dt > 0:
        rd.fail(("dt",), "dt must be positive")
    if steps < 1:
        rd.fail(("steps",), "steps must be >= 1")
    if contact.pgs_iterations < 1:
        rd.fail(("contact", "pgs_iterations"), "pgs_iterations must be >= 1")
    try:
        check_state(model, q0, qdot0, tol=1e-6)
    except (ValidationError, NonFiniteInput) as exc:
        rd.fail(("initial_state",), str(exc))
    if model.floating:
        q0 = q0.copy()
        q0[3:7] /= np.linalg.norm(q0[3:7])
    objective = rd.get(data, (), "objective", {}) or {}
    optimizer = rd.get(data, (), "optimizer", {}) or {}
    return Scene(str(data.get("name", name or "scene")), model, q0, qdot0, dt, steps,
                 integrator, contact, objective, optimizer)


def _num(x):
    x = float(x)
    if math.isinf(x):
        return x
    return int(x) if x == int(x) and abs(x) < 1e15 else x


def _vec(a):
    return [_num(x) for x in np.asarray(a).ravel()]


def model_to_dict(model):
    links = []
    for link in model.links:
        j = link.joint
        jd = {"type": j.kind}
        if j.kind in ("revolute", "prismatic"):
            jd["axis"] = _vec(j.axis)
        jd["xyz"] = _vec(j.xyz)
        jd["rpy"] = _vec(j.rpy)
        jd["damping"] = _num(j.damping)
        jd["effort_limit"] = _num(j.effort_limit)
        shapes = []
        for s in link.collision:
            sd = {"type": s.kind, "radius": _num(s.radius), "center": _vec(s.center)}
            if s.kind == "capsule":
                sd["axis"] = _vec(s.axis)
                sd["half_length"] = _num(s.half_length)
            shapes.append(sd)
        links.append({"name": link.name, "parent": link.parent, "joint": jd,
                      "mass": _num(link.mass), "com": _vec(link.com),
                      "inertia": [_vec(row) for row in link.inertia], "collision": shapes})
    return {"gravity": _vec(model.gravity), "links": links}


def scene_to_dict(scene):
    c = scene.contact
    d = {"name": scene.name}
    d.update(model_to_dict(scene.model))
    d["initial_state"] = {"q": _vec(scene.q0), "qdot": _vec(scene.qdot0)}
    d["dt"] = _num(scene.dt)
    d["steps"] = scene.steps
    d["integrator"] = scene.integrator
    d["contact"] = {"enabled": c.enabled, "mu": _num(c.material.mu),
                    "restitution": _num(c.material.restitution),
                    "pgs_iterations": c.pgs_iterations, "baumgarte": _num(c.baumgarte),
                    "margin": _num(c.margin), "ground": c.ground,
                    "ground_height": _num(c.ground_height), "self_collision": c.self_collision}
    d["objective"] = scene.objective
    d["optimizer"] = scene.optimizer
    return d


def dump_model(model):
    """Canonical serialization; loading the output reproduces the model."""
    return yaml.safe_dump(model_to_dict(model), sort_keys=False, default_flow_style=None)


def dump_scene(scene):
    return yaml.safe_dump(scene_to_dict(scene), sort_keys=False, default_flow_style=None)


def shipped_scenes():
    """Names of the scenes bundled with the package."""
    root = resources.files("artidiff") / "scenes"
    return sorted(p.name[:-len(".scene")] for p in root.iterdir() if p.name.endswith(".scene"))


def read_scene(path_or_name):
    """Load a scene from a file path, or by bundled name (``pendulum_3``)."""
    p = Path(path_or_name)
    if p.is_file():
        return load_scene(p.read_text(), name=p.stem)
    name = p.name[:-len(".scene")] if p.name.endswith(".scene") else p.name
    res = resources.files("artidiff") / "scenes" / f"{name}.scene"
    if res.is_file():
        return load_scene(res.read_text(), name=name)
    raise FileNotFoundError(f"scene not found: {path_or_name}")
