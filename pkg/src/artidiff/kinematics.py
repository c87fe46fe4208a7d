"""Joint transforms, forward kinematics and position integration, with adjoints.

Gradients with respect to a floating-base quaternion are taken in the ambient
4-D coordinates.  Every map normalizes the quaternion before using it, so the
ambient gradient has no radial component; ``tangent_gradient`` converts it to
the 3-D body-frame rotation tangent when that chart is preferred.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import spatial as sp

_I3 = np.eye(3)
_Z3 = np.zeros(3)
_S_FLOAT = np.eye(6)
_S_FIXED = np.zeros((6, 0))


def motion_subspace(joint):
    if joint.kind == "revolute":
        return np.concatenate((joint.axis, _Z3))[:, None]
    if joint.kind == "prismatic":
        return np.concatenate((_Z3, joint.axis))[:, None]
    if joint.kind == "floating_base":
        return _S_FLOAT
    return _S_FIXED


def jcalc(joint, qj):
    """Joint transform ``(E, r)`` for joint coordinates ``qj``."""
    kind = joint.kind
    if kind == "revolute":
        return sp.rotation_about_axis(joint.axis, qj[0]).T, _Z3
    if kind == "prismatic":
        return _I3, joint.axis * qj[0]
    if kind == "floating_base":
        n = sp.quat_normalize(qj[3:7])
        return sp.quat_to_matrix(n).T, qj[:3].copy()
    return _I3, _Z3


def jcalc_adjoint(joint, qj, Ebar, rbar):
    kind = joint.kind
    if kind == "revolute":
        dR = sp.rotation_about_axis_derivative(joint.axis, qj[0])
        return np.array([np.sum(Ebar * dR.T)])
    if kind == "prismatic":
        return np.array([joint.axis @ rbar])
    if kind == "floating_base":
        n = sp.quat_normalize(qj[3:7])
        nbar = sp.quat_to_matrix_adjoint(n, Ebar.T)
        return np.concatenate((rbar, sp.quat_normalize_adjoint(qj[3:7], nbar)))
    return np.zeros(0)


@dataclass
class KinTape:
    """Per-link joint transforms, parent-to-child transforms and world-to-link transforms."""

    XJ: list
    Xup: list
    X0: list
    S: list

    def nbytes(self):
        n = 0
        for group in (self.XJ, self.Xup, self.X0):
            n += sum(E.nbytes + r.nbytes for E, r in group)
        return n + sum(s.nbytes for s in self.S)


def forward_kinematics(model, q):
    XJ, Xup, X0, S = [], [], [], []
    for i, link in enumerate(model.links):
        j = link.joint
        qj = q[model.q_index[i]:model.q_index[i] + j.nq]
        EJ, rJ = jcalc(j, qj)
        Et, rt = j.parent_to_joint
        Eu, ru = sp.multiply(EJ, rJ, Et, rt)
        if link.parent is None:
            E0, r0 = Eu, ru
        else:
            Ep, rp = X0[link.parent]
            E0, r0 = sp.multiply(Eu, ru, Ep, rp)
        XJ.append((EJ, rJ))
        Xup.append((Eu, ru))
        X0.append((E0, r0))
        S.append(motion_subspace(j))
    return KinTape(XJ, Xup, X0, S)


def zero_transform_adjoints(n):
    return [np.zeros((3, 3)) for _ in range(n)], [np.zeros(3) for _ in range(n)]


def kinematics_adjoint(model, q, kin, Eup_bar, rup_bar, E0_bar, r0_bar):
    """Adjoint of forward_kinematics; the adjoint lists are consumed in place."""
    qbar = np.zeros(model.nq)
    for i in range(model.n_links - 1, -1, -1):
        link = model.links[i]
        j = link.joint
        Eu, ru = kin.Xup[i]
        if link.parent is None:
            Eup_bar[i] += E0_bar[i]
            rup_bar[i] += r0_bar[i]
        else:
            p = link.parent
            Ep, rp = kin.X0[p]
            Eub, rub, Epb, rpb = sp.multiply_adjoint(Eu, ru, Ep, rp, E0_bar[i], r0_bar[i])
            Eup_bar[i] += Eub
            rup_bar[i] += rub
            E0_bar[p] += Epb
            r0_bar[p] += rpb
        if j.nq == 0:
            continue
        EJ, rJ = kin.XJ[i]
        Et, rt = j.parent_to_joint
        EJb, rJb, _, _ = sp.multiply_adjoint(EJ, rJ, Et, rt, Eup_bar[i], rup_bar[i])
        k = model.q_index[i]
        qbar[k:k + j.nq] += jcalc_adjoint(j, q[k:k + j.nq], EJb, rJb)
    return qbar


def world_point(kin, i, point):
    """World coordinates of a point fixed in link ``i``."""
    E0, r0 = kin.X0[i]
    return r0 + E0.T @ point


def world_point_adjoint(kin, i, point, pbar, E0_bar, r0_bar):
    E0_bar[i] += np.outer(point, pbar)
    r0_bar[i] += pbar


def link_point_position(model, q, i, point):
    return world_point(forward_kinematics(model, q), i, np.asarray(point, dtype=float))


# ---------------------------------------------------------------------------
# Position integration
# ---------------------------------------------------------------------------

def integrate_q(model, q, v, dt):
    """One Euler position update; the floating-base quaternion is renormalized."""
    out = q + 0.0
    if not model.floating:
        out += dt * v
        return out
    n = sp.quat_normalize(q[3:7])
    R = sp.quat_to_matrix(n)
    out[:3] = q[:3] + dt * (R @ v[3:6])
    out[3:7] = sp.quat_normalize(n + 0.5 * dt * sp.mul_vec(n, v[:3]))
    out[7:] = q[7:] + dt * v[6:]
    return out


def integrate_q_adjoint(model, q, v, dt, qbar_new):
    """Returns ``(qbar, vbar)`` for ``integrate_q``."""
    if not model.floating:
        return qbar_new.copy(), dt * qbar_new
    qbar = np.zeros_like(q)
    vbar = np.zeros_like(v)
    quat = q[3:7]
    n = sp.quat_normalize(quat)
    R = sp.quat_to_matrix(n)
    qbar[:3] = qbar_new[:3]
    vbar[3:6] = dt * (R.T @ qbar_new[:3])
    nbar = sp.quat_to_matrix_adjoint(n, dt * np.outer(qbar_new[:3], v[3:6]))
    m = n + 0.5 * dt * sp.mul_vec(n, v[:3])
    mbar = sp.quat_normalize_adjoint(m, qbar_new[3:7])
    nb, wb = sp.mul_vec_adjoint(n, v[:3], 0.5 * dt * mbar)
    nbar += mbar + nb
    vbar[:3] = wb
    qbar[3:7] = sp.quat_normalize_adjoint(quat, nbar)
    qbar[7:] = qbar_new[7:]
    vbar[6:] = dt * qbar_new[7:]
    return qbar, vbar


def tangent_gradient(model, q, qbar):
    """Map an ambient q-gradient to tangent coordinates (length ``nq - 1``).

    The quaternion block becomes the gradient with respect to a small body-frame
    rotation ``delta`` applied as ``quat * exp(delta / 2)``.
    """
    if not model.floating:
        return qbar.copy()
    n = sp.quat_normalize(q[3:7])
    L = np.array([[n[3], -n[2], n[1]],
                  [n[2], n[3], -n[0]],
                  [-n[1], n[0], n[3]],
                  [-n[0], -n[1], -n[2]]])
    return np.concatenate((qbar[:3], 0.5 * L.T @ qbar[3:7], qbar[7:]))
