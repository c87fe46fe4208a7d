"""Collision detection, the contact MLCP, projected Gauss-Seidel and their adjoints.

Contact quantities live in world coordinates.  The joint-space mass matrix is
assembled from world-frame composite inertias, the contact Jacobian maps joint
velocities to relative point velocities along each contact direction, and the
MLCP ``A x = b`` with box bounds is solved for impulses ``x`` by a fixed number
of PGS sweeps.  Rows are ordered with every normal row first, followed by the
two tangent rows of each contact, so a tangent row always reads the normal
impulse already updated in the same sweep.

The PGS adjoint differentiates the truncated iteration map itself.  A row whose
update was clamped passes its adjoint to the active bound: a static bound
collects it in ``c_minus_bar``/``c_plus_bar``, and a friction bound
``+-mu * x_normal`` forwards it to ``mu`` and to the normal impulse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kinematics as kin_
from . import spatial as sp
from .errors import DimensionMismatch, RecordMismatch, SingularMassMatrix, SingularMatrix, ZeroDiagonal
from .model import ContactMaterial

REGULARIZATION = 1e-10
NORMAL, TANGENT1, TANGENT2 = "normal", "tangent1", "tangent2"
GROUND = -1
_EY = np.array([0.0, 1.0, 0.0])
_EZ = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class ContactPoint:
    """A touching or penetrating pair; ``normal`` points from body b into body a.

    ``depth`` is positive for penetration and may be slightly negative (down to
    ``-margin``) for near contacts.  ``body_b`` is ``GROUND`` (-1) for the plane.
    """

    body_a: int
    body_b: int
    point: np.ndarray
    normal: np.ndarray
    depth: float
    material: ContactMaterial
    local_a: np.ndarray
    radius_a: float
    local_b: np.ndarray | None = None
    radius_b: float = 0.0


def _shape_spheres(link):
    for s in link.collision:
        for c in s.points():
            yield np.asarray(c, dtype=float), s.radius


def detect_contacts(model, q, settings, kin=None):
    """All sphere/capsule contacts against the ground plane and (optionally) each other."""
    if kin is None:
        kin = kin_.forward_kinematics(model, q)
    mat = settings.material
    out = []
    centers = []
    for i, link in enumerate(model.links):
        for c, rho in _shape_spheres(link):
            centers.append((i, c, rho, kin_.world_point(kin, i, c)))
    if settings.ground:
        for i, c, rho, C in centers:
            depth = rho + settings.ground_height - C[2]
            if depth >= -settings.margin:
                out.append(ContactPoint(i, GROUND, C - rho * _EZ, _EZ.copy(), float(depth),
                                        mat, c, rho))
    if settings.self_collision:
        for ia in range(len(centers)):
            for ib in range(ia):
                a, ca, ra, Ca = centers[ia]
                b, cb, rb, Cb = centers[ib]
                if a == b or model.links[a].parent == b or model.links[b].parent == a:
                    continue
                if a < b:
                    a, ca, ra, Ca, b, cb, rb, Cb = b, cb, rb, Cb, a, ca, ra, Ca
                delta = Ca - Cb
                dist = sp.vec_norm(delta)
                depth = ra + rb - dist
                if depth >= -settings.margin and dist > 1e-12:
                    n = delta / dist
                    p = 0.5 * (Ca + Cb) + 0.5 * (rb - ra) * n
                    out.append(ContactPoint(a, b, p, n, float(depth), mat, ca, ra, cb, rb))
    out.sort(key=lambda cp: (cp.body_a, cp.body_b, tuple(cp.point)))
    return out


def tangent_basis(n):
    e = _EZ if abs(n[1]) > 0.9 else _EY
    u1 = sp.cross3(e, n)
    t1 = u1 / sp.vec_norm(u1)
    return e, u1, t1, sp.cross3(n, t1)


# ---------------------------------------------------------------------------
# MLCP and PGS
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class MlcpProblem:
    """``A x = b`` with bounds; row ``i`` of a tangent direction has ``friction_of[i]``
    set to its normal row and bounds ``+-mu[i] * x[friction_of[i]]``."""

    A: np.ndarray
    b: np.ndarray
    c_minus: np.ndarray
    c_plus: np.ndarray
    rows: list
    friction_of: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        m = self.b.shape[0]
        if self.A.shape != (m, m) or not np.all(np.isfinite(self.A)):
            raise DimensionMismatch("A must be a finite square matrix matching b")
        if self.friction_of.shape != (m,) or self.mu.shape != (m,):
            raise DimensionMismatch("friction coupling arrays must have one entry per row")

    @property
    def m(self):
        return self.b.shape[0]

    @classmethod
    def boxed(cls, A, b, c_minus=None, c_plus=None):
        """Problem with static bounds only (defaults: unbounded)."""
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        m = b.shape[0]
        lo = np.full(m, -np.inf) if c_minus is None else np.asarray(c_minus, dtype=float)
        hi = np.full(m, np.inf) if c_plus is None else np.asarray(c_plus, dtype=float)
        return cls(A, b, lo, hi, [(None, None)] * m, np.full(m, -1), np.zeros(m))


@dataclass(eq=False)
class PgsRecord:
    V_d: np.ndarray
    V_x1: np.ndarray
    V_x2: np.ndarray
    clamp_mask: np.ndarray
    niter: int

    def nbytes(self):
        return self.V_d.nbytes + self.V_x1.nbytes + self.V_x2.nbytes + self.clamp_mask.nbytes


class PgsAdjoint(NamedTuple):
    A_bar: np.ndarray
    b_bar: np.ndarray
    c_minus_bar: np.ndarray
    c_plus_bar: np.ndarray
    mu_bar: np.ndarray


def _bounds(P, i, x):
    f = P.friction_of[i]
    if f >= 0:
        hi = P.mu[i] * x[f]
        return -hi, hi
    return P.c_minus[i], P.c_plus[i]


def pgs_solve(P, niter=50):
    """``niter`` projected Gauss-Seidel sweeps from ``x = 0``; returns ``(x, record)``."""
    if niter < 1:
        raise ValueError("niter must be >= 1")
    m = P.m
    A, b = P.A, P.b
    diag = np.diag(A).copy()
    if m and np.any(diag == 0):
        raise ZeroDiagonal(f"A({int(np.argmin(np.abs(diag)))}, i) is zero")
    x = np.zeros(m)
    V_d = np.zeros((niter, m))
    V_x1 = np.zeros((niter, m))
    V_x2 = np.zeros((niter, m))
    mask = np.zeros((niter, m), dtype=np.int8)
    for t in range(niter):
        V_x1[t] = x
        for i in range(m):
            d = A[i] @ x - A[i, i] * x[i]
            raw = (b[i] - d) / A[i, i]
            lo, hi = _bounds(P, i, x)
            if raw > hi:
                x[i] = hi
                mask[t, i] = 1
            elif raw < lo:
                x[i] = lo
                mask[t, i] = -1
            else:
                x[i] = raw
            V_d[t, i] = d
        V_x2[t] = x
    return x.copy(), PgsRecord(V_d, V_x1, V_x2, mask, niter)


def pgs_adjoint(P, record, xbar):
    """Reverse-mode derivative of the ``niter``-sweep PGS iterate map."""
    m = P.m
    if record.V_d.shape != (record.niter, m) or np.shape(xbar) != (m,):
        raise RecordMismatch("record or seed does not match the problem")
    A, b = P.A, P.b
    A_bar = np.zeros((m, m))
    b_bar = np.zeros(m)
    cm_bar = np.zeros(m)
    cp_bar = np.zeros(m)
    mu_bar = np.zeros(m)
    xb = np.array(xbar, dtype=float)
    for t in range(record.niter - 1, -1, -1):
        x1, x2 = record.V_x1[t], record.V_x2[t]
        for i in range(m - 1, -1, -1):
            g = xb[i]
            xb[i] = 0.0
            if g == 0.0:
                continue
            side = record.clamp_mask[t, i]
            if side:
                f = P.friction_of[i]
                if f >= 0:
                    # bound is side * mu * x[f], with x[f] already updated this sweep
                    mu_bar[i] += side * g * x2[f]
                    xb[f] += side * g * P.mu[i]
                if side > 0:
                    cp_bar[i] += g
                else:
                    cm_bar[i] += g
                continue
            aii = A[i, i]
            b_bar[i] += g / aii
            A_bar[i, i] -= g * (b[i] - record.V_d[t, i]) / (aii * aii)
            dbar = -g / aii
            # x_j for j < i is this sweep's update, for j > i the previous sweep's
            xu = np.concatenate((x2[:i], [0.0], x1[i + 1:]))
            A_bar[i] += dbar * xu
            xb[:i] += dbar * A[i, :i]
            xb[i + 1:] += dbar * A[i, i + 1:]
    return PgsAdjoint(A_bar, b_bar, cm_bar, cp_bar, mu_bar)


def clamp_margin(P, record):
    """Smallest distance between any recorded PGS update and a finite bound.

    Finite-difference checks need states where a small perturbation cannot
    flip a clamp decision; a margin below the probe size marks such a state.
    """
    out = np.inf
    for t in range(record.niter):
        x2 = record.V_x2[t]
        for i in range(P.m):
            raw = (P.b[i] - record.V_d[t, i]) / P.A[i, i]
            f = P.friction_of[i]
            bounds = (-P.mu[i] * x2[f], P.mu[i] * x2[f]) if f >= 0 else (P.c_minus[i], P.c_plus[i])
            for c in bounds:
                if np.isfinite(c):
                    out = min(out, abs(raw - c))
    return out


def complementarity_residual(P, x):
    """``sum_i max(0, x_i) * |(A x - b)_i|``; zero at an exact LCP solution."""
    w = P.A @ x - P.b
    return float(np.sum(np.maximum(x, 0.0) * np.abs(w)))


# ---------------------------------------------------------------------------
# Joint-space quantities in world coordinates
# ---------------------------------------------------------------------------

def world_subspaces(model, kin):
    out = []
    for i in range(model.n_links):
        E0, r0 = kin.X0[i]
        S = kin.S[i]
        out.append(np.column_stack([sp.apply_inv(E0, r0, S[:, k]) for k in range(S.shape[1])])
                   if S.shape[1] else S)
    return out


def world_subspaces_adjoint(model, kin, Sw_bar, E0_bar, r0_bar):
    for i in range(model.n_links):
        E0, r0 = kin.X0[i]
        S = kin.S[i]
        for k in range(S.shape[1]):
            Eb, rb, _ = sp.apply_inv_adjoint(E0, r0, S[:, k], Sw_bar[i][:, k])
            E0_bar[i] += Eb
            r0_bar[i] += rb


def mass_matrix(model, kin, Sw):
    """Joint-space mass matrix by composite rigid bodies in world coordinates."""
    n = model.n_links
    Ic = [sp.shift(model.inertias[i], *kin.X0[i]) for i in range(n)]
    for i in range(n - 1, -1, -1):
        p = model.links[i].parent
        if p is not None:
            Ic[p] = Ic[p] + Ic[i]
    M = np.zeros((model.nv, model.nv))
    for j in range(n):
        kj = Sw[j].shape[1]
        if not kj:
            continue
        F = Ic[j] @ Sw[j]
        vj = model.v_index[j]
        for l in model.ancestors(j):
            kl = Sw[l].shape[1]
            if not kl:
                continue
            vl = model.v_index[l]
            blk = F.T @ Sw[l]
            M[vj:vj + kj, vl:vl + kl] = blk
            M[vl:vl + kl, vj:vj + kj] = blk.T
    return M, Ic


def mass_matrix_adjoint(model, kin, Sw, Ic, M_bar, Sw_bar, E0_bar, r0_bar, inertia_bar):
    n = model.n_links
    Ic_bar = [np.zeros((6, 6)) for _ in range(n)]
    for j in range(n):
        kj = Sw[j].shape[1]
        if not kj:
            continue
        F = Ic[j] @ Sw[j]
        F_bar = np.zeros_like(F)
        vj = model.v_index[j]
        for l in model.ancestors(j):
            kl = Sw[l].shape[1]
            if not kl:
                continue
            vl = model.v_index[l]
            B = M_bar[vj:vj + kj, vl:vl + kl]
            if l != j:
                B = B + M_bar[vl:vl + kl, vj:vj + kj].T
            F_bar += Sw[l] @ B.T
            Sw_bar[l] += F @ B
        Ic_bar[j] += F_bar @ Sw[j].T
        Sw_bar[j] += Ic[j].T @ F_bar
    for i in range(n):
        p = model.links[i].parent
        if p is not None:
            Ic_bar[i] += Ic_bar[p]
        E0, r0 = kin.X0[i]
        Ib, Eb, rb = sp.shift_adjoint(model.inertias[i], E0, r0, Ic_bar[i])
        E0_bar[i] += Eb
        r0_bar[i] += rb
        if inertia_bar is not None:
            inertia_bar[i] = Ib if inertia_bar[i] is None else inertia_bar[i] + Ib


def _chain(model, body):
    return [] if body == GROUND else model.ancestors(body)


def contact_jacobian(model, Sw, contacts):
    """Rows ordered normals first, then (tangent1, tangent2) per contact."""
    nc = len(contacts)
    J = np.zeros((3 * nc, model.nv))
    dirs = []
    rows = []
    for c, cp in enumerate(contacts):
        _, _, t1, t2 = tangent_basis(cp.normal)
        dirs.append((cp.normal, t1, t2))
    for c, cp in enumerate(contacts):
        for k, (row, label) in enumerate(((c, NORMAL), (nc + 2 * c, TANGENT1),
                                          (nc + 2 * c + 1, TANGENT2))):
            d = dirs[c][k]
            f = np.concatenate((sp.cross3(cp.point, d), d))
            for body, sign in ((cp.body_a, 1.0), (cp.body_b, -1.0)):
                for l in _chain(model, body):
                    kl = Sw[l].shape[1]
                    if kl:
                        vl = model.v_index[l]
                        J[row, vl:vl + kl] += sign * (f @ Sw[l])
    for c in range(nc):
        rows.append((c, NORMAL))
    for c in range(nc):
        rows.extend(((c, TANGENT1), (c, TANGENT2)))
    return J, dirs, rows


@dataclass(eq=False)
class ContactTape:
    contacts: list
    Sw: list
    Ic: list
    M: np.ndarray
    Minv: np.ndarray
    J: np.ndarray
    dirs: list
    problem: MlcpProblem
    x: np.ndarray
    record: PgsRecord
    v_pre: np.ndarray
    v_free: np.ndarray

    def nbytes(self):
        n = self.M.nbytes + self.Minv.nbytes + self.J.nbytes + self.x.nbytes
        n += self.problem.A.nbytes + 4 * self.problem.b.nbytes + self.record.nbytes()
        n += sum(s.nbytes for s in self.Sw) + sum(i.nbytes for i in self.Ic)
        n += self.v_pre.nbytes + self.v_free.nbytes
        n += sum(3 * 3 * 8 + 3 * 8 + 8 for _ in self.contacts)
        return n


def build_mlcp(model, kin, contacts, qd_pre, qd_free, dt, settings):
    """Assemble the contact MLCP; returns ``(problem, tape)``.

    ``b`` is the velocity change each row needs: the Baumgarte and restitution
    target minus the unconstrained relative velocity, so that ``A x = b``.
    """
    Sw = world_subspaces(model, kin)
    M, Ic = mass_matrix(model, kin, Sw)
    try:
        Minv = sp.inverse(M)
    except SingularMatrix as exc:
        raise SingularMassMatrix(str(exc)) from None
    J, dirs, rows = contact_jacobian(model, Sw, contacts)
    nc = len(contacts)
    m = 3 * nc
    A = J @ Minv @ J.T + REGULARIZATION * np.eye(m)
    v_free = J @ qd_free
    v_pre = J[:nc] @ qd_pre
    b = -v_free
    e = settings.material.restitution
    beta = settings.baumgarte / dt
    for c, cp in enumerate(contacts):
        b[c] += beta * max(cp.depth, 0.0) + e * max(-v_pre[c], 0.0)
    c_minus = np.concatenate((np.zeros(nc), np.full(2 * nc, -np.inf)))
    c_plus = np.full(m, np.inf)
    friction_of = np.concatenate((np.full(nc, -1), np.repeat(np.arange(nc), 2)))
    mu = np.concatenate((np.zeros(nc), np.full(2 * nc, settings.material.mu)))
    P = MlcpProblem(A, b, c_minus, c_plus, rows, friction_of, mu)
    tape = ContactTape(contacts, Sw, Ic, M, Minv, J, dirs, P, np.zeros(m), None, v_pre, v_free)
    return P, tape


def apply_impulses(Minv, J, x, qd_free):
    """Post-contact joint velocity ``qd_free + M^-1 J^T x``."""
    if J.shape[0] != x.shape[0] or J.shape[1] != qd_free.shape[0]:
        raise DimensionMismatch("impulse and Jacobian shapes do not match")
    return qd_free + Minv @ (J.T @ x)


def apply_impulses_adjoint(Minv, J, x, qd_bar):
    """Returns ``(Minv_bar, J_bar, x_bar, qd_free_bar)``."""
    y = J.T @ x
    ybar = Minv.T @ qd_bar
    return np.outer(qd_bar, y), np.outer(x, ybar), J @ ybar, qd_bar.copy()


def contact_step(model, kin, q, qd_pre, qd_free, dt, settings):
    """Resolve contacts; returns ``(qd_new, tape or None)``."""
    contacts = detect_contacts(model, q, settings, kin)
    if not contacts:
        return qd_free, None
    P, tape = build_mlcp(model, kin, contacts, qd_pre, qd_free, dt, settings)
    x, record = pgs_solve(P, settings.pgs_iterations)
    tape.x = x
    tape.record = record
    return apply_impulses(tape.Minv, tape.J, x, qd_free), tape


def _geometry_adjoint(model, kin, cp, p_bar, n_bar, depth_bar, E0_bar, r0_bar):
    if cp.body_b == GROUND:
        C_bar = p_bar.copy()
        C_bar[2] -= depth_bar
        kin_.world_point_adjoint(kin, cp.body_a, cp.local_a, C_bar, E0_bar, r0_bar)
        return
    Ca = kin_.world_point(kin, cp.body_a, cp.local_a)
    Cb = kin_.world_point(kin, cp.body_b, cp.local_b)
    delta = Ca - Cb
    dist = sp.vec_norm(delta)
    n_bar = n_bar + 0.5 * (cp.radius_b - cp.radius_a) * p_bar
    delta_bar = sp.unit_vector_adjoint(delta, n_bar) - depth_bar * delta / dist
    kin_.world_point_adjoint(kin, cp.body_a, cp.local_a, 0.5 * p_bar + delta_bar, E0_bar, r0_bar)
    kin_.world_point_adjoint(kin, cp.body_b, cp.local_b, 0.5 * p_bar - delta_bar, E0_bar, r0_bar)


@dataclass
class ContactAdjoint:
    qd_free_bar: np.ndarray
    qd_pre_bar: np.ndarray
    mu_bar: float
    restitution_bar: float


def contact_step_adjoint(model, kin, tape, qd_pre, qd_free, dt, settings, qd_new_bar,
                         E0_bar, r0_bar, inertia_bar=None):
    """Adjoint of contact_step.

    World-transform adjoints are added to ``E0_bar``/``r0_bar`` and spatial
    inertia adjoints to ``inertia_bar`` (when given) in place.
    """
    contacts = tape.contacts
    nc = len(contacts)
    P = tape.problem
    J, Minv = tape.J, tape.Minv
    Minv_bar, J_bar, x_bar, qd_free_bar = apply_impulses_adjoint(Minv, J, tape.x, qd_new_bar)
    pa = pgs_adjoint(P, tape.record, x_bar)
    A_bar = pa.A_bar
    J_bar += A_bar @ J @ Minv.T + A_bar.T @ J @ Minv
    Minv_bar += J.T @ A_bar @ J

    e = settings.material.restitution
    beta = settings.baumgarte / dt
    v_free_bar = -pa.b_bar
    depth_bar = np.zeros(nc)
    v_pre_bar = np.zeros(nc)
    e_bar = 0.0
    for c, cp in enumerate(contacts):
        if cp.depth > 0:
            depth_bar[c] = beta * pa.b_bar[c]
        if -tape.v_pre[c] > 0:
            v_pre_bar[c] = -e * pa.b_bar[c]
            e_bar += -tape.v_pre[c] * pa.b_bar[c]
    J_bar += np.outer(v_free_bar, qd_free)
    qd_free_bar += J.T @ v_free_bar
    J_bar[:nc] += np.outer(v_pre_bar, qd_pre)
    qd_pre_bar = J[:nc].T @ v_pre_bar

    M_bar = sp.inverse_adjoint(tape.M, Minv, Minv_bar)
    Sw = tape.Sw
    Sw_bar = [np.zeros_like(s) for s in Sw]
    mass_matrix_adjoint(model, kin, Sw, tape.Ic, M_bar, Sw_bar, E0_bar, r0_bar, inertia_bar)

    for c, cp in enumerate(contacts):
        p_bar = np.zeros(3)
        d_bars = [np.zeros(3), np.zeros(3), np.zeros(3)]
        for k, row in enumerate((c, nc + 2 * c, nc + 2 * c + 1)):
            d = tape.dirs[c][k]
            f = np.concatenate((sp.cross3(cp.point, d), d))
            f_bar = np.zeros(6)
            for body, sign in ((cp.body_a, 1.0), (cp.body_b, -1.0)):
                for l in _chain(model, body):
                    kl = Sw[l].shape[1]
                    if kl:
                        vl = model.v_index[l]
                        jb = J_bar[row, vl:vl + kl]
                        f_bar += sign * (Sw[l] @ jb)
                        Sw_bar[l] += sign * np.outer(f, jb)
            pb, db = sp.cross3_adjoint(cp.point, d, f_bar[:3])
            p_bar += pb
            d_bars[k] += db + f_bar[3:]
        n = cp.normal
        ev, u1, t1, t2 = tangent_basis(n)
        nb, t1b = sp.cross3_adjoint(n, t1, d_bars[2])
        t1b = t1b + d_bars[1]
        u1b = sp.unit_vector_adjoint(u1, t1b)
        n_bar = d_bars[0] + nb + sp.cross3_adjoint(ev, n, u1b)[1]
        _geometry_adjoint(model, kin, cp, p_bar, n_bar, depth_bar[c], E0_bar, r0_bar)

    world_subspaces_adjoint(model, kin, Sw_bar, E0_bar, r0_bar)
    return ContactAdjoint(qd_free_bar, qd_pre_bar, float(np.sum(pa.mu_bar)), e_bar)
