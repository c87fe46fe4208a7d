"""Independent verification: dense dynamics oracle, finite differences, dot tests.

The dense oracle shares no code with the recursive dynamics.  Link poses come
from scipy rotations, world-frame motion subspaces are built directly from
joint axes, inverse dynamics is evaluated with 6x6 Pluecker matrices, and the
mass matrix is assembled by probing unit accelerations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from . import spatial as sp
from .errors import NonFiniteProbe, SingularMassMatrix


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _crm(V):
    """6x6 motion cross-product matrix."""
    out = np.zeros((6, 6))
    out[:3, :3] = _skew(V[:3])
    out[3:, 3:] = _skew(V[:3])
    out[3:, :3] = _skew(V[3:])
    return out


def _world_to_body(R, p):
    """Pluecker motion transform from world coordinates to a body at pose (R, p)."""
    X = np.zeros((6, 6))
    X[:3, :3] = R.T
    X[3:, 3:] = R.T
    X[3:, :3] = -R.T @ _skew(p)
    return X


def link_poses(model, q):
    """World rotation and origin of every link frame."""
    R, P = [], []
    for i, link in enumerate(model.links):
        j = link.joint
        k = model.q_index[i]
        if link.parent is None:
            Rp, pp = np.eye(3), np.zeros(3)
        else:
            Rp, pp = R[link.parent], P[link.parent]
        Rt = Rotation.from_euler("xyz", j.rpy).as_matrix()
        Rf = Rp @ Rt
        pf = pp + Rp @ np.array(j.xyz)
        if j.kind == "revolute":
            Ri = Rf @ Rotation.from_rotvec(j.axis * q[k]).as_matrix()
            pi = pf
        elif j.kind == "prismatic":
            Ri = Rf
            pi = pf + Rf @ (j.axis * q[k])
        elif j.kind == "floating_base":
            Ri = Rf @ Rotation.from_quat(q[k + 3:k + 7]).as_matrix()
            pi = pf + Rf @ q[k:k + 3]
        else:
            Ri, pi = Rf, pf
        R.append(Ri)
        P.append(pi)
    return R, P


def world_subspaces(model, R, P):
    """World-frame motion subspace (velocity of the point at the world origin)."""
    out = []
    for i, link in enumerate(model.links):
        j = link.joint
        if j.kind == "revolute":
            w = R[i] @ j.axis
            out.append(np.concatenate((w, np.cross(P[i], w)))[:, None])
        elif j.kind == "prismatic":
            out.append(np.concatenate((np.zeros(3), R[i] @ j.axis))[:, None])
        elif j.kind == "floating_base":
            Sw = np.zeros((6, 6))
            Sw[:3, :3] = R[i]
            Sw[3:, 3:] = R[i]
            Sw[3:, :3] = _skew(P[i]) @ R[i]
            out.append(Sw)
        else:
            out.append(np.zeros((6, 0)))
    return out


def _body_inertia(link):
    m, c = link.mass, link.com
    C = _skew(c)
    Ib = np.zeros((6, 6))
    Ib[:3, :3] = link.inertia + m * C @ C.T
    Ib[:3, 3:] = m * C
    Ib[3:, :3] = m * C.T
    Ib[3:, 3:] = m * np.eye(3)
    return Ib


def world_frames(model, q):
    """World motion subspaces and world-frame spatial inertias at ``q``."""
    R, P = link_poses(model, q)
    Sw = world_subspaces(model, R, P)
    Iw = []
    for i, link in enumerate(model.links):
        X = _world_to_body(R[i], P[i])
        Iw.append(X.T @ _body_inertia(link) @ X)
    return Sw, Iw


def inverse_dynamics_batch(model, q, qd, qdd_cols, gravity=True, frames=None):
    """Generalized forces for several acceleration columns at one ``(q, qd)``.

    Returns an ``nv x ncols`` array; the velocity product and gravity terms are
    included in every column.  ``frames`` reuses a world_frames result.
    """
    Sw, Iw = world_frames(model, q) if frames is None else frames
    n = model.n_links
    ncol = qdd_cols.shape[1]
    g = model.gravity if gravity else np.zeros(3)
    a_grav = np.concatenate((np.zeros(3), -g))
    V, A, F = [None] * n, [None] * n, [None] * n
    for i, link in enumerate(model.links):
        k0, k = model.v_index[i], Sw[i].shape[1]
        vJ = Sw[i] @ qd[k0:k0 + k]
        Vp = np.zeros(6) if link.parent is None else V[link.parent]
        Ap = np.tile(a_grav[:, None], (1, ncol)) if link.parent is None else A[link.parent]
        V[i] = Vp + vJ
        # d/dt of the world subspace is V_i x Sw_i
        A[i] = Ap + (Sw[i] @ qdd_cols[k0:k0 + k]) + (_crm(V[i]) @ vJ)[:, None]
        h = Iw[i] @ V[i]
        F[i] = Iw[i] @ A[i] + (-_crm(V[i]).T @ h)[:, None]
    tau = np.zeros((model.nv, ncol))
    for i in range(n - 1, -1, -1):
        link = model.links[i]
        k0, k = model.v_index[i], Sw[i].shape[1]
        tau[k0:k0 + k] = Sw[i].T @ F[i]
        if link.parent is not None:
            F[link.parent] = F[link.parent] + F[i]
    return tau


def mass_matrix_and_bias(model, q, qd, frames=None):
    """``M(q)`` from unit accelerations with no velocity or gravity, and ``h(q, qd)``."""
    nv = model.nv
    frames = world_frames(model, q) if frames is None else frames
    M = inverse_dynamics_batch(model, q, np.zeros(nv), np.eye(nv), gravity=False, frames=frames)
    h = inverse_dynamics_batch(model, q, qd, np.zeros((nv, 1)), frames=frames)[:, 0]
    return 0.5 * (M + M.T), h


def applied_forces(model, qd, u):
    tau = np.zeros(model.nv)
    for i, link in enumerate(model.links):
        j = link.joint
        if j.actuated:
            k0 = model.v_index[i]
            ui = model.u_index[i]
            tau[k0] = np.clip(u[ui], -j.effort_limit, j.effort_limit) - j.damping * qd[k0]
    return tau


def dense_forward_dynamics(model, q, qd, u, refine=1):
    """``qdd = M(q)^-1 (tau - h(q, qd))`` from the dense oracle.

    ``refine`` rounds of iterative refinement recompute the residual
    ``tau - ID(q, qd, qdd)`` by inverse dynamics and solve for a correction,
    which removes most of the error of the dense solve on stiff models.
    """
    frames = world_frames(model, q)
    M, h = mass_matrix_and_bias(model, q, qd, frames)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise SingularMassMatrix("mass matrix is not positive definite") from None
    solve = lambda b: np.linalg.solve(L.T, np.linalg.solve(L, b))
    tau = applied_forces(model, qd, u)
    qdd = solve(tau - h)
    for _ in range(refine):
        qdd = qdd + solve(tau - inverse_dynamics_batch(model, q, qd, qdd[:, None], frames=frames)[:, 0])
    return qdd


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FdConfig:
    h: float = 1e-6
    scheme: str = "central"
    rtol: float = 1e-5
    atol: float = 1e-9

    def __post_init__(self):
        if not self.h > 0 or not self.rtol > 0 or self.atol < 0:
            raise ValueError("FdConfig needs h > 0, rtol > 0 and atol >= 0")
        if self.scheme != "central":
            raise ValueError("only central differences are supported")


@dataclass
class OracleResult:
    analytic: np.ndarray
    numeric: np.ndarray
    worst_rel_error: float
    failing_index: int | None = None
    seed: int | None = None
    name: str = ""
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.failing_index is None


def fd_gradient(fn, at, cfg=FdConfig(), indices=None):
    """Central-difference Jacobian of ``fn`` at ``at`` (columns per coordinate).

    Scalar-valued functions give a gradient shaped like ``at``.  ``indices``
    restricts the probed (flat) coordinates and returns one entry per index.
    """
    x = np.array(at, dtype=float)
    flat = x.ravel()
    idx = range(flat.size) if indices is None else indices
    cols = []
    for i in idx:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += cfg.h
        xm[i] -= cfg.h
        fp = np.asarray(fn(xp.reshape(x.shape)), dtype=float)
        fm = np.asarray(fn(xm.reshape(x.shape)), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteProbe(f"non-finite function value probing coordinate {i}")
        cols.append((fp - fm) / (2.0 * cfg.h))
    out = np.array(cols)
    if out.ndim == 1:
        return out.reshape(x.shape) if indices is None else out
    return out.T


def compare(analytic, numeric, cfg=FdConfig(), name=""):
    """Element-wise relative comparison with an absolute floor.

    The relative error of an entry is ``|a - b| / max(|a|, |b|, atol)``; an
    entry passes when that is within ``rtol`` or ``|a - b| <= atol``.
    """
    a = np.atleast_1d(np.asarray(analytic, dtype=float)).ravel()
    b = np.atleast_1d(np.asarray(numeric, dtype=float)).ravel()
    diff = np.abs(a - b)
    err = diff / np.maximum(np.maximum(np.abs(a), np.abs(b)), cfg.atol)
    bad = (err > cfg.rtol) & (diff > cfg.atol)
    w = float(err.max()) if err.size else 0.0
    failing = int(np.argmax(np.where(bad, err, -1.0))) if bad.any() else None
    return OracleResult(a, b, w, failing, name=name)


# ---------------------------------------------------------------------------
# Dot-product adjoint tests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdjointOp:
    """Forward map and adjoint over lists of array arguments.

    ``forward(*args)`` returns an array or tuple of arrays; ``adjoint(*args,
    *ybars)`` returns a tuple of input adjoints in argument order;
    ``sample(rng)`` draws a valid argument list.  ``active`` selects which
    arguments are perturbed (all by default).
    """

    name: str
    forward: Callable
    adjoint: Callable
    sample: Callable
    active: tuple | None = None


def _tuple(x):
    return x if isinstance(x, tuple) else (x,)


def _dot(xs, ys):
    return float(sum(np.sum(np.asarray(x) * np.asarray(y)) for x, y in zip(xs, ys)))


def adjoint_dot_test(op, trials=100, seed=0, h=1e-6, rtol=1e-5):
    """Compare ``<ybar, J delta>`` (central differences) against ``<adj(ybar), delta>``.

    The relative error of a trial is ``|lhs - rhs| / max(|lhs|, |rhs|)``, so a
    sign-flipped adjoint reports 2.0.
    """
    rng = np.random.default_rng(seed)
    lhs_all, rhs_all, errs = [], [], []
    for _ in range(trials):
        args = [np.asarray(a, dtype=float) for a in op.sample(rng)]
        active = op.active if op.active is not None else tuple(range(len(args)))
        deltas = [rng.standard_normal(a.shape) if i in active else np.zeros(a.shape)
                  for i, a in enumerate(args)]
        y = _tuple(op.forward(*args))
        ybar = tuple(rng.standard_normal(np.shape(v)) for v in y)
        fp = _tuple(op.forward(*[a + h * d for a, d in zip(args, deltas)]))
        fm = _tuple(op.forward(*[a - h * d for a, d in zip(args, deltas)]))
        lhs = _dot(ybar, [(np.asarray(p) - np.asarray(m)) / (2 * h) for p, m in zip(fp, fm)])
        adj = _tuple(op.adjoint(*args, *ybar))
        rhs = _dot([adj[i] for i in active], [deltas[i] for i in active])
        scale = max(abs(lhs), abs(rhs))
        errs.append(abs(lhs - rhs) / scale if scale > 0 else 0.0)
        lhs_all.append(lhs)
        rhs_all.append(rhs)
    errs = np.array(errs)
    worst = int(np.argmax(errs))
    w = float(errs[worst])
    return OracleResult(np.array(rhs_all), np.array(lhs_all), w,
                        worst if not w < rtol else None, seed=seed, name=op.name)


def _rot(rng):
    return Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()


def _v(rng, n=6):
    return rng.standard_normal(n)


def _sym6(rng):
    B = rng.standard_normal((6, 6))
    return B + B.T


def _spd6(rng):
    B = rng.standard_normal((6, 6))
    return B @ B.T + 6 * np.eye(6)


def _apply_op(mode):
    fwd = getattr(sp, mode)
    adj = getattr(sp, mode + "_adjoint")
    return AdjointOp(f"st_apply[{mode}]", fwd, adj, lambda rng: (_rot(rng), _v(rng, 3), _v(rng)))


def operator_registry():
    """Every spatial-algebra operator paired with its adjoint and an input sampler."""
    ops = [_apply_op(m) for m in ("apply", "apply_inv", "apply_trans", "apply_invtrans")]
    ops += [
        AdjointOp("st_multiply", sp.multiply, sp.multiply_adjoint,
                  lambda rng: (_rot(rng), _v(rng, 3), _rot(rng), _v(rng, 3))),
        AdjointOp("crossm", sp.crossm, sp.crossm_adjoint, lambda rng: (_v(rng), _v(rng))),
        AdjointOp("crossf", sp.crossf, sp.crossf_adjoint, lambda rng: (_v(rng), _v(rng))),
        AdjointOp("mul_ori", sp.mul_ori, sp.mul_ori_adjoint,
                  lambda rng: (rng.standard_normal((6, 6)), _v(rng))),
        AdjointOp("mul_inv", sp.mul_inv, sp.mul_inv_adjoint,
                  lambda rng: (rng.standard_normal((6, 6)), _v(rng))),
        AdjointOp("vvT", sp.vvT, sp.vvT_adjoint, lambda rng: (_v(rng), _v(rng))),
        AdjointOp("vcross_matrix", sp.vcross_matrix, sp.vcross_matrix_adjoint,
                  lambda rng: (_v(rng, 3),)),
        AdjointOp("st2sd", sp.st2sd, sp.st2sd_adjoint, lambda rng: (_rot(rng), _v(rng, 3))),
        AdjointOp("shift", sp.shift, sp.shift_adjoint,
                  lambda rng: (_sym6(rng), _rot(rng), _v(rng, 3))),
        AdjointOp("matvec", sp.matvec, sp.matvec_adjoint,
                  lambda rng: (rng.standard_normal((6, 6)), _v(rng))),
        AdjointOp("matmul", sp.matmul, sp.matmul_adjoint,
                  lambda rng: (rng.standard_normal((6, 4)), rng.standard_normal((4, 3)))),
        AdjointOp("inverse", sp.inverse, lambda a, bbar: sp.inverse_adjoint(a, sp.inverse(a), bbar),
                  lambda rng: (_spd6(rng),)),
        AdjointOp("AtBA", sp.AtBA, sp.AtBA_adjoint,
                  lambda rng: (rng.standard_normal((6, 3)), _sym6(rng))),
        AdjointOp("three_mat", sp.three_mat, sp.three_mat_adjoint,
                  lambda rng: (rng.standard_normal((6, 3)), rng.standard_normal((3, 3)),
                               rng.standard_normal((3, 6)))),
        AdjointOp("mul_vec", sp.mul_vec, sp.mul_vec_adjoint, lambda rng: (_v(rng, 4), _v(rng, 3))),
        AdjointOp("mul_qt", sp.mul_qt, sp.mul_qt_adjoint, lambda rng: (_v(rng, 4), _v(rng, 4))),
        AdjointOp("quat_normalize", sp.quat_normalize, sp.quat_normalize_adjoint,
                  lambda rng: (_v(rng, 4),)),
        AdjointOp("quat_from_axis_angle", sp.quat_from_axis_angle, sp.quat_from_axis_angle_adjoint,
                  lambda rng: (_v(rng, 3), rng.standard_normal())),
        AdjointOp("quat_to_matrix", sp.quat_to_matrix, sp.quat_to_matrix_adjoint,
                  lambda rng: (_v(rng, 4),)),
        AdjointOp("spatial_inertia", sp.spatial_inertia, sp.spatial_inertia_adjoint,
                  lambda rng: (abs(rng.standard_normal()) + 0.5, _v(rng, 3), _sym6(rng)[:3, :3])),
    ]
    return {op.name: op for op in ops}


def corrupted(op):
    """Copy of ``op`` whose adjoint has its sign flipped (harness self-test fixture)."""
    def adjoint(*args):
        return tuple(-np.asarray(x) for x in _tuple(op.adjoint(*args)))
    return AdjointOp(op.name, op.forward, adjoint, op.sample, op.active)


# ---------------------------------------------------------------------------
# End-to-end rollout check
# ---------------------------------------------------------------------------

def rollout_gradient_check(scene, coords=20, seed=0, cfg=FdConfig(rtol=1e-4), steps=None,
                           integrator="explicit", control_scale=0.1):
    """backward() against central differences of the rollout loss.

    Probes ``coords`` random control entries (initial-velocity entries when the
    model has no actuators) around seeded random controls.  Uses the explicit
    integrator unless told otherwise.
    """
    from . import objectives, step, timeline

    model = scene.model
    n_t = scene.steps if steps is None else steps
    settings = step.StepSettings.from_scene(scene, integrator=integrator or scene.integrator)
    obj = objectives.make_objective(model, scene.objective)
    rng = np.random.default_rng(seed)
    U = control_scale * rng.standard_normal((n_t, model.nu))
    x0 = scene.x0
    rep = timeline.value_and_grad(model, x0, U, settings, obj)
    if model.nu:
        flat = rng.choice(U.size, size=min(coords, U.size), replace=False)
        fn = lambda v: timeline.loss(model, x0, v, settings, obj)
        numeric = fd_gradient(fn, U, cfg, indices=flat)
        analytic = rep.dphi_du.ravel()[flat]
    else:
        flat = model.nq + rng.choice(model.nv, size=min(coords, model.nv), replace=False)
        fn = lambda v: timeline.loss(model, v, U, settings, obj)
        numeric = fd_gradient(fn, x0, cfg, indices=flat)
        analytic = rep.dphi_dx0[flat]
    res = compare(analytic, numeric, cfg, name=f"rollout:{scene.name}")
    res.seed = seed
    res.details = {"coordinates": [int(i) for i in flat], "phi": rep.phi, "steps": n_t}
    if res.failing_index is not None:
        res.failing_index = int(flat[res.failing_index])
    return res


class KinkMargin(NamedTuple):
    clamp: float
    geometry: float


def contact_kink_margin(traj):
    """Distance of a full-tape trajectory from the contact model's nonsmooth points.

    ``clamp`` is the smallest PGS clamp margin over all steps.  ``geometry`` is
    the smallest of the penetration depth (Baumgarte term), the depth relative
    to the detection margin and, with restitution, the pre-impact normal
    velocity.  Finite differences whose probe moves these by much less than
    the margins see a smooth map.
    """
    from . import contact

    if traj.tapes is None:
        raise ValueError("contact_kink_margin needs a full_tape trajectory")
    cs = traj.settings.contact
    clamp = geom = np.inf
    for tape in traj.tapes:
        ct = tape.contact
        if ct is None:
            continue
        clamp = min(clamp, contact.clamp_margin(ct.problem, ct.record))
        for c, cp in enumerate(ct.contacts):
            geom = min(geom, abs(cp.depth + cs.margin))
            if cs.baumgarte:
                geom = min(geom, abs(cp.depth))
            if cs.material.restitution:
                geom = min(geom, abs(ct.v_pre[c]))
    return KinkMargin(clamp, geom)
