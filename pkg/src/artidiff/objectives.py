"""Per-step loss terms ``Phi = sum_k l_k`` with exact gradients.

A term sees the flat state ``x^k = [q^k, qd^k]`` for ``k = 0..n_t`` (and the
previous state, for terms that compare consecutive steps) plus the control
``u^k`` for ``k = 0..n_t-1``.  Terms are registered by name so scenes can
select them::

    objective:
      terms:
        - {type: target_distance, link: 2, point: [0, 0, -0.5], target: [0.4, 0, -1], mode: terminal}
        - {type: control_effort, weight: 1.0e-4}
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import kinematics as kin_
from .errors import ValidationError

REGISTRY = {}


def register(name):
    def deco(cls):
        cls.kind = name
        REGISTRY[name] = cls
        return cls
    return deco


def _link_index(model, link):
    if isinstance(link, str):
        for i, l in enumerate(model.links):
            if l.name == link:
                return i
        raise ValidationError(f"objective refers to unknown link {link!r}")
    link = int(link)
    if link < 0:
        link += model.n_links
    if not 0 <= link < model.n_links:
        raise ValidationError(f"objective link index {link} out of range")
    return link


def point_value_grad(model, x, link, point, target):
    """``|p(q) - target|^2`` for a point fixed in ``link``, with its state gradient."""
    q = x[:model.nq]
    kin = kin_.forward_kinematics(model, q)
    p = kin_.world_point(kin, link, point)
    diff = p - target
    E0_bar, r0_bar = kin_.zero_transform_adjoints(model.n_links)
    kin_.world_point_adjoint(kin, link, point, 2.0 * diff, E0_bar, r0_bar)
    Eup_bar, rup_bar = kin_.zero_transform_adjoints(model.n_links)
    qbar = kin_.kinematics_adjoint(model, q, kin, Eup_bar, rup_bar, E0_bar, r0_bar)
    g = np.zeros_like(x)
    g[:model.nq] = qbar
    return float(diff @ diff), g


class Term:
    kind = "term"
    weight = 1.0

    def state(self, model, k, nt, x, x_prev):
        """``(value, grad_x, grad_x_prev)``; gradients may be None."""
        return 0.0, None, None

    def control(self, k, nt, u):
        return 0.0, None

    def to_dict(self):
        raise NotImplementedError


@register("target_distance")
@dataclass
class TargetDistance(Term):
    """``weight * |p - target|^2`` for a link point, at the final step or every step."""

    link: int
    point: np.ndarray
    target: np.ndarray
    weight: float = 1.0
    mode: str = "terminal"

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        self.target = np.asarray(self.target, dtype=float)
        if self.mode not in ("terminal", "all"):
            raise ValidationError("target_distance mode must be 'terminal' or 'all'")

    def state(self, model, k, nt, x, x_prev):
        if k == 0 or (self.mode == "terminal" and k != nt):
            return 0.0, None, None
        v, g = point_value_grad(model, x, self.link, self.point, self.target)
        return self.weight * v, self.weight * g, None

    def to_dict(self):
        return {"type": self.kind, "link": self.link, "point": self.point.tolist(),
                "target": self.target.tolist(), "weight": self.weight, "mode": self.mode}


@register("state_target")
@dataclass
class StateTarget(Term):
    """Terminal ``weight * sum (x[i] - target_i)^2`` over chosen flat-state indices."""

    indices: list
    target: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.indices = [int(i) for i in self.indices]
        self.target = np.asarray(self.target, dtype=float)
        if self.target.shape != (len(self.indices),):
            raise ValidationError("state_target needs one target per index")

    def state(self, model, k, nt, x, x_prev):
        if k != nt:
            return 0.0, None, None
        if max(self.indices, default=-1) >= x.size:
            raise ValidationError("state_target index out of range")
        diff = x[self.indices] - self.target
        g = np.zeros_like(x)
        np.add.at(g, self.indices, 2.0 * self.weight * diff)
        return self.weight * float(diff @ diff), g, None

    def to_dict(self):
        return {"type": self.kind, "indices": self.indices, "target": self.target.tolist(),
                "weight": self.weight}


@register("progress")
@dataclass
class Progress(Term):
    """``weight * (|p_k - g|^2 - |p_{k-1} - g|^2)`` summed over steps.

    The negative of this term is the per-step reward for moving a link point
    toward ``target`` between consecutive steps.
    """

    link: int
    point: np.ndarray
    target: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        self.target = np.asarray(self.target, dtype=float)

    def state(self, model, k, nt, x, x_prev):
        if k == 0:
            return 0.0, None, None
        v1, g1 = point_value_grad(model, x, self.link, self.point, self.target)
        v0, g0 = point_value_grad(model, x_prev, self.link, self.point, self.target)
        return self.weight * (v1 - v0), self.weight * g1, -self.weight * g0

    def to_dict(self):
        return {"type": self.kind, "link": self.link, "point": self.point.tolist(),
                "target": self.target.tolist(), "weight": self.weight}


@register("control_effort")
@dataclass
class ControlEffort(Term):
    """``weight * sum_k |u_k|^2``."""

    weight: float = 1.0

    def control(self, k, nt, u):
        return self.weight * float(u @ u), 2.0 * self.weight * u

    def to_dict(self):
        return {"type": self.kind, "weight": self.weight}


@dataclass
class ObjectiveSpec:
    terms: list = field(default_factory=list)

    def state(self, model, k, nt, x, x_prev):
        val = 0.0
        g = np.zeros_like(x)
        gp = np.zeros_like(x)
        for t in self.terms:
            v, gx, gpx = t.state(model, k, nt, x, x_prev)
            val += v
            if gx is not None:
                g += gx
            if gpx is not None:
                gp += gpx
        return val, g, gp

    def control(self, k, nt, u):
        val = 0.0
        g = np.zeros_like(u)
        for t in self.terms:
            v, gu = t.control(k, nt, u)
            val += v
            if gu is not None:
                g += gu
        return val, g

    def to_dict(self):
        return {"terms": [t.to_dict() for t in self.terms]}

    def scaled(self, alpha):
        """Copy with every term weight multiplied by ``alpha``."""
        out = copy.deepcopy(self)
        for t in out.terms:
            t.weight = alpha * t.weight
        return out


def make_objective(model, spec):
    """Build an ObjectiveSpec from a scene ``objective`` mapping."""
    if isinstance(spec, ObjectiveSpec):
        return spec
    terms = []
    for raw in (spec or {}).get("terms", []):
        raw = dict(raw)
        kind = raw.pop("type", None)
        if kind not in REGISTRY:
            raise ValidationError(f"unknown objective term {kind!r}; known: {sorted(REGISTRY)}")
        if "link" in raw:
            raw["link"] = _link_index(model, raw["link"])
        try:
            terms.append(REGISTRY[kind](**raw))
        except TypeError as exc:
            raise ValidationError(f"bad fields for objective term {kind!r}: {exc}") from None
    return ObjectiveSpec(terms)
