"""Articulated Body Algorithm and its reverse-mode adjoint.

Forward dynamics runs three sweeps over the tree:

(a) root to leaves: joint transforms, link velocities, velocity-product
    accelerations ``c`` and bias forces ``pA``;
(b) leaves to root: articulated inertias ``IA`` and bias forces, folded into
    each parent with ``shift`` and ``apply_trans``;
(c) root to leaves: link accelerations and joint accelerations ``qdd``.

The adjoint replays the sweeps backwards: (c) leaves to root, (b) root to
leaves (a parent's adjoint is complete before its children read it), then (a)
leaves to root, ending in the forward-kinematics adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kinematics as kin_
from . import spatial as sp
from .errors import NonFiniteState, TapeMismatch

_Z6 = np.zeros(6)


@dataclass
class AbaTape:
    kin: kin_.KinTape
    v: list
    vJ: list
    c: list
    Iv: list
    pA: list
    IA: list
    U: list
    D: list
    Dinv: list
    uu: list
    Ia: list
    pa: list
    ap: list
    a: list
    qdd: np.ndarray
    a_root: np.ndarray

    def nbytes(self):
        n = self.kin.nbytes() + self.qdd.nbytes + self.a_root.nbytes
        for group in (self.v, self.vJ, self.c, self.Iv, self.pA, self.IA, self.U, self.D,
                      self.Dinv, self.uu, self.Ia, self.pa, self.ap, self.a):
            n += sum(x.nbytes for x in group if x is not None)
        return n


@dataclass
class DynamicsDerivatives:
    """Adjoints of the ABA inputs.

    ``inertia_bar`` holds one 6x6 spatial-inertia adjoint per link when inertial
    parameters were requested, else None.
    """

    qbar: np.ndarray
    qdbar: np.ndarray
    ubar: np.ndarray
    damping_bar: np.ndarray
    gravity_bar: np.ndarray
    inertia_bar: list | None = None
    extra: dict = field(default_factory=dict)


def joint_torque(joint, uj, qdj):
    """Applied joint force: control clipped to the effort limit, minus damping."""
    return np.clip(uj, -joint.effort_limit, joint.effort_limit) - joint.damping * qdj


def _check(name, values, step=None):
    for i, x in enumerate(values):
        if x is not None and not np.all(np.isfinite(x)):
            raise NonFiniteState(f"non-finite value in ABA pass {name} at link {i}",
                                 pass_name=name, link=i, step=step)


def aba_forward(model, q, qd, u, step=None):
    """Joint accelerations for state ``(q, qd)`` and controls ``u``; returns ``(qdd, tape)``."""
    n = model.n_links
    links = model.links
    I = model.inertias
    kin = kin_.forward_kinematics(model, q)

    # pass (a)
    v, vJ, c, Iv, pA, IA = [], [], [], [], [], []
    for i in range(n):
        S = kin.S[i]
        k0 = model.v_index[i]
        vj = S @ qd[k0:k0 + S.shape[1]]
        p = links[i].parent
        if p is None:
            vi = vj
        else:
            Eu, ru = kin.Xup[i]
            vi = sp.apply(Eu, ru, v[p]) + vj
        iv = I[i] @ vi
        v.append(vi)
        vJ.append(vj)
        c.append(sp.crossm(vi, vj))
        Iv.append(iv)
        pA.append(sp.crossf(vi, iv))
        IA.append(I[i])
    _check("a", v, step)

    # pass (b)
    U, D, Dinv, uu = [None] * n, [None] * n, [None] * n, [None] * n
    Ia, pa = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        link = links[i]
        S = kin.S[i]
        k = S.shape[1]
        if k:
            k0 = model.v_index[i]
            U[i] = IA[i] @ S
            D[i] = sp.AtBA(S, IA[i])
            Dinv[i] = sp.inverse(D[i])
            if link.joint.actuated:
                ui = model.u_index[i]
                tau = joint_torque(link.joint, u[ui:ui + 1], qd[k0:k0 + 1])
            else:
                tau = np.zeros(k)
            uu[i] = tau - S.T @ pA[i]
        p = link.parent
        if p is None:
            continue
        Eu, ru = kin.Xup[i]
        if k:
            Ia[i] = IA[i] - sp.three_mat(U[i], Dinv[i], U[i].T)
            pa[i] = pA[i] + Ia[i] @ c[i] + U[i] @ (Dinv[i] @ uu[i])
        else:
            Ia[i] = IA[i]
            pa[i] = pA[i] + IA[i] @ c[i]
        IA[p] = IA[p] + sp.shift(Ia[i], Eu, ru)
        pA[p] = pA[p] + sp.apply_trans(Eu, ru, pa[i])
    _check("b", pA, step)

    # pass (c)
    a_root = np.concatenate((np.zeros(3), -model.gravity))
    qdd = np.zeros(model.nv)
    ap, a = [], []
    for i in range(n):
        Eu, ru = kin.Xup[i]
        p = links[i].parent
        api = sp.apply(Eu, ru, a_root if p is None else a[p]) + c[i]
        S = kin.S[i]
        if S.shape[1]:
            k0 = model.v_index[i]
            qi = Dinv[i] @ (uu[i] - U[i].T @ api)
            qdd[k0:k0 + S.shape[1]] = qi
            ai = api + S @ qi
        else:
            ai = api
        ap.append(api)
        a.append(ai)
    _check("c", [qdd], step)
    tape = AbaTape(kin, v, vJ, c, Iv, pA, IA, U, D, Dinv, uu, Ia, pa, ap, a, qdd, a_root)
    return qdd, tape


def aba_adjoint(model, q, qd, u, tape, qdd_bar, E0_bar=None, r0_bar=None, want_inertia=False):
    """Reverse-mode derivatives of ``qdd`` (plus optional world-transform seeds).

    ``E0_bar``/``r0_bar`` are per-link adjoints of the world-to-link transforms
    recorded in ``tape.kin.X0``; other consumers of those transforms (contact,
    objectives) pass their adjoints here so a single kinematics adjoint runs.
    """
    n = model.n_links
    if len(tape.v) != n or tape.qdd.shape != (model.nv,):
        raise TapeMismatch("tape does not match the model")
    links = model.links
    I = model.inertias
    kin = tape.kin
    qdd_bar = np.asarray(qdd_bar, dtype=float)
    if E0_bar is None:
        E0_bar, r0_bar = kin_.zero_transform_adjoints(n)
    Eup_bar, rup_bar = kin_.zero_transform_adjoints(n)
    qdbar = np.zeros(model.nv)
    ubar = np.zeros(model.nu)
    damping_bar = np.zeros(n)
    gravity_bar = np.zeros(3)

    abar = [np.zeros(6) for _ in range(n)]
    cbar = [np.zeros(6) for _ in range(n)]
    Ubar = [None] * n
    Dinvbar = [None] * n
    uubar = [None] * n

    # adjoint of pass (c)
    for i in range(n - 1, -1, -1):
        S = kin.S[i]
        k = S.shape[1]
        api = tape.ap[i]
        apbar = abar[i]
        if k:
            k0 = model.v_index[i]
            qb = qdd_bar[k0:k0 + k] + S.T @ abar[i]
            g = tape.Dinv[i].T @ qb
            Dinvbar[i] = np.outer(qb, tape.uu[i] - tape.U[i].T @ api)
            uubar[i] = g
            Ubar[i] = -np.outer(api, g)
            apbar = apbar - tape.U[i] @ g
        cbar[i] += apbar
        p = links[i].parent
        Eu, ru = kin.Xup[i]
        a_in = tape.a_root if p is None else tape.a[p]
        Eb, rb, ab = sp.apply_adjoint(Eu, ru, a_in, apbar)
        Eup_bar[i] += Eb
        rup_bar[i] += rb
        if p is None:
            gravity_bar -= ab[3:]
        else:
            abar[p] += ab

    # adjoint of pass (b)
    IAbar = [np.zeros((6, 6)) for _ in range(n)]
    pAbar = [np.zeros(6) for _ in range(n)]
    for i in range(n):
        link = links[i]
        S = kin.S[i]
        k = S.shape[1]
        p = link.parent
        if p is not None:
            Eu, ru = kin.Xup[i]
            Eb, rb, pab = sp.apply_trans_adjoint(Eu, ru, tape.pa[i], pAbar[p])
            Iab, Eb2, rb2 = sp.shift_adjoint(tape.Ia[i], Eu, ru, IAbar[p])
            Eup_bar[i] += Eb + Eb2
            rup_bar[i] += rb + rb2
            pAbar[i] += pab
            Iab += np.outer(pab, tape.c[i])
            cbar[i] += tape.Ia[i].T @ pab
            IAbar[i] += Iab
            if k:
                U, Dinv, uu = tape.U[i], tape.Dinv[i], tape.uu[i]
                w = Dinv @ uu
                wbar = U.T @ pab
                Ubar[i] += np.outer(pab, w)
                Dinvbar[i] += np.outer(wbar, uu)
                uubar[i] += Dinv.T @ wbar
                U1, Dv1, U2 = sp.three_mat_adjoint(U, Dinv, U.T, -Iab)
                Ubar[i] += U1 + U2.T
                Dinvbar[i] += Dv1
        if not k:
            continue
        k0 = model.v_index[i]
        pAbar[i] -= S @ uubar[i]
        if link.joint.actuated:
            j = link.joint
            ui = model.u_index[i]
            tb = uubar[i][0]
            if abs(u[ui]) <= j.effort_limit:
                ubar[ui] += tb
            qdbar[k0] -= j.damping * tb
            damping_bar[i] -= qd[k0] * tb
        Dbar = sp.inverse_adjoint(tape.D[i], tape.Dinv[i], Dinvbar[i])
        IAbar[i] += S @ Dbar @ S.T + Ubar[i] @ S.T

    # adjoint of pass (a)
    vbar = [np.zeros(6) for _ in range(n)]
    inertia_bar = [None] * n if want_inertia else None
    for i in range(n - 1, -1, -1):
        vi = tape.v[i]
        vb, hb = sp.crossf_adjoint(vi, tape.Iv[i], pAbar[i])
        vbar[i] += vb + I[i] @ hb
        if want_inertia:
            inertia_bar[i] = IAbar[i] + np.outer(hb, vi)
        vb2, vJb = sp.crossm_adjoint(vi, tape.vJ[i], cbar[i])
        vbar[i] += vb2
        vJb += vbar[i]
        p = links[i].parent
        if p is not None:
            Eu, ru = kin.Xup[i]
            Eb, rb, vpb = sp.apply_adjoint(Eu, ru, tape.v[p], vbar[i])
            Eup_bar[i] += Eb
            rup_bar[i] += rb
            vbar[p] += vpb
        S = kin.S[i]
        if S.shape[1]:
            k0 = model.v_index[i]
            qdbar[k0:k0 + S.shape[1]] += S.T @ vJb

    qbar = kin_.kinematics_adjoint(model, q, kin, Eup_bar, rup_bar, E0_bar, r0_bar)
    return DynamicsDerivatives(qbar, qdbar, ubar, damping_bar, gravity_bar, inertia_bar)


def inertia_param_bars(model, inertia_bar):
    """Convert per-link spatial-inertia adjoints to (mass, com, rotational inertia) adjoints."""
    n = model.n_links
    mass_bar = np.zeros(n)
    com_bar = np.zeros((n, 3))
    rot_bar = np.zeros((n, 3, 3))
    for i, link in enumerate(model.links):
        if inertia_bar[i] is None:
            continue
        mb, cb, ib = sp.spatial_inertia_adjoint(link.mass, link.com, link.inertia, inertia_bar[i])
        mass_bar[i] = mb
        com_bar[i] = cb
        rot_bar[i] = ib
    return mass_bar, com_bar, rot_bar
