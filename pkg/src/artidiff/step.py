"""One simulation step ``x^{k+1} = f(x^k, u^k)`` and its adjoint.

A step runs forward dynamics, integrates the velocity without contact, resolves
contact impulses, and updates positions.  The ``explicit`` integrator moves
positions with the start-of-step velocity; ``symplectic`` uses the post-contact
velocity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import aba as aba_
from . import contact as contact_
from . import kinematics as kin_
from .errors import NonFiniteState
from .model import ContactSettings

PARAMETERS = ("mass", "com", "inertia", "damping", "gravity", "mu", "restitution")
_INERTIAL = {"mass", "com", "inertia"}


@dataclass(frozen=True)
class StepSettings:
    dt: float = 0.01
    integrator: str = "symplectic"
    contact: ContactSettings = ContactSettings()
    params: frozenset = frozenset()

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.integrator not in ("explicit", "symplectic"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        unknown = set(self.params) - set(PARAMETERS)
        if unknown:
            raise ValueError(f"unknown parameters {sorted(unknown)}; choose from {PARAMETERS}")

    @classmethod
    def from_scene(cls, scene, **overrides):
        kw = dict(dt=scene.dt, integrator=scene.integrator, contact=scene.contact)
        kw.update(overrides)
        if "params" in kw:
            kw["params"] = frozenset(kw["params"])
        return cls(**kw)


@dataclass(eq=False)
class StepTape:
    """Every intermediate of one step; regenerable from its checkpoint."""

    q: np.ndarray
    qd: np.ndarray
    u: np.ndarray
    aba: aba_.AbaTape
    qd_free: np.ndarray
    qd_new: np.ndarray
    contact: contact_.ContactTape | None
    q_new: np.ndarray

    def nbytes(self):
        n = self.q.nbytes + self.qd.nbytes + self.u.nbytes + self.aba.nbytes()
        n += self.qd_free.nbytes + self.qd_new.nbytes + self.q_new.nbytes
        if self.contact is not None:
            n += self.contact.nbytes()
        return n

    @property
    def n_contacts(self):
        return 0 if self.contact is None else len(self.contact.contacts)


@dataclass
class StepAdjoint:
    qbar: np.ndarray
    qdbar: np.ndarray
    ubar: np.ndarray
    params: dict = field(default_factory=dict)


def step_forward(model, q, qd, u, settings, step=None):
    """Advance one step; returns ``(q_new, qd_new, tape)``."""
    dt = settings.dt
    qdd, atape = aba_.aba_forward(model, q, qd, u, step=step)
    qd_free = qd + dt * qdd
    ctape = None
    if settings.contact.enabled:
        qd_new, ctape = contact_.contact_step(model, atape.kin, q, qd, qd_free, dt, settings.contact)
    else:
        qd_new = qd_free
    v = qd if settings.integrator == "explicit" else qd_new
    q_new = kin_.integrate_q(model, q, v, dt)
    if not (np.all(np.isfinite(q_new)) and np.all(np.isfinite(qd_new))):
        raise NonFiniteState(f"non-finite state after step {step}", pass_name="integrate", step=step)
    return q_new, qd_new, StepTape(q, qd, u, atape, qd_free, qd_new, ctape, q_new)


def zero_params(model, names):
    n = model.n_links
    shapes = {"mass": (n,), "com": (n, 3), "inertia": (n, 3, 3), "damping": (n,),
              "gravity": (3,), "mu": (), "restitution": ()}
    return {k: np.zeros(shapes[k]) for k in names}


def step_adjoint(model, tape, settings, q_new_bar, qd_new_bar):
    """Reverse-mode derivative of one step; parameter adjoints follow ``settings.params``."""
    dt = settings.dt
    n = model.n_links
    want = settings.params
    want_inertia = bool(want & _INERTIAL)
    q, qd = tape.q, tape.qd
    explicit = settings.integrator == "explicit"
    v = qd if explicit else tape.qd_new
    qbar, vbar = kin_.integrate_q_adjoint(model, q, v, dt, q_new_bar)
    qdbar = np.zeros(model.nv)
    if explicit:
        qdbar += vbar
        qd_new_total = qd_new_bar
    else:
        qd_new_total = qd_new_bar + vbar

    E0_bar, r0_bar = kin_.zero_transform_adjoints(n)
    inertia_bar = [None] * n if want_inertia else None
    params = zero_params(model, want)
    if tape.contact is not None:
        ca = contact_.contact_step_adjoint(model, tape.aba.kin, tape.contact, qd, tape.qd_free, dt,
                                           settings.contact, qd_new_total, E0_bar, r0_bar,
                                           inertia_bar)
        qd_free_bar = ca.qd_free_bar
        qdbar += ca.qd_pre_bar
        if "mu" in want:
            params["mu"] += ca.mu_bar
        if "restitution" in want:
            params["restitution"] += ca.restitution_bar
    else:
        qd_free_bar = qd_new_total
    qdbar += qd_free_bar
    d = aba_.aba_adjoint(model, q, qd, tape.u, tape.aba, dt * qd_free_bar, E0_bar, r0_bar,
                         want_inertia=want_inertia)
    qbar += d.qbar
    qdbar += d.qdbar
    if "damping" in want:
        params["damping"] += d.damping_bar
    if "gravity" in want:
        params["gravity"] += d.gravity_bar
    if want_inertia:
        for i in range(n):
            if inertia_bar[i] is not None:
                d.inertia_bar[i] = d.inertia_bar[i] + inertia_bar[i]
        mb, cb, ib = aba_.inertia_param_bars(model, d.inertia_bar)
        for name, val in (("mass", mb), ("com", cb), ("inertia", ib)):
            if name in want:
                params[name] += val
    return StepAdjoint(qbar, qdbar, d.ubar, params)


def step_jacobian(model, q, qd, u, settings):
    """Jacobians of the next state ``[q', qd']`` with respect to ``(x, u)``.

    Assembled row by row from unit adjoint seeds; returns ``(dx_dx, dx_du)``.
    """
    q_new, qd_new, tape = step_forward(model, q, qd, u, settings)
    nx = model.nq + model.nv
    dx_dx = np.zeros((nx, nx))
    dx_du = np.zeros((nx, model.nu))
    for r in range(nx):
        seed = np.zeros(nx)
        seed[r] = 1.0
        adj = step_adjoint(model, tape, settings, seed[:model.nq], seed[model.nq:])
        dx_dx[r] = np.concatenate((adj.qbar, adj.qdbar))
        dx_du[r] = adj.ubar
    return dx_dx, dx_du
