"""Spatial vector algebra with reverse-mode adjoints.

Every forward operator ``f`` has a partner ``f_adjoint`` that takes the forward
inputs plus the adjoint of the output and returns the adjoints of the inputs.
Adjoints are returned, never written in place; callers accumulate them with
``+=`` because one forward value may feed several consumers.

Conventions
-----------
* Spatial 6-vectors are float64 arrays laid out ``[w, v]`` (angular first).
* A transform ``(E, r)`` maps motion vectors from frame A to frame B, where
  ``E`` rotates A coordinates into B coordinates and ``r`` is the position of
  B's origin expressed in A.  As a 6x6 motion matrix it is ``st2sd(E, r)``.
* Matrix adjoints are element-wise: ``Ebar[i, j] = d(phi)/d(E[i, j])``.
* Quaternions are stored ``(x, y, z, w)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .errors import NonFiniteInput, ShapeMismatch, SingularMatrix, ZeroNormQuaternion

PIVOT_TOL = 1e-12

_I3 = np.eye(3)


# ---------------------------------------------------------------------------
# 3-vector helpers
# ---------------------------------------------------------------------------

def cross3(a, b):
    # np.cross is ~10x slower on length-3 inputs
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def cross3_adjoint(a, b, vbar):
    return -cross3(vbar, b), cross3(vbar, a)


def vec_norm(b):
    return math.sqrt(float(b @ b))


def vec_norm_adjoint(b, abar):
    return (abar / vec_norm(b)) * b


def unit_vector_adjoint(b, nbar):
    """Adjoint of ``b / |b|`` for a vector of any length."""
    n = vec_norm(b)
    u = b / n
    return (nbar - u * (u @ nbar)) / n


# ---------------------------------------------------------------------------
# Spatial transform
# ---------------------------------------------------------------------------

def apply(E, r, a):
    """Motion transform ``X a``."""
    a1 = a[:3]
    return np.concatenate((E @ a1, E @ (a[3:] - cross3(r, a1))))


def apply_adjoint(E, r, a, bbar):
    a1, a2 = a[:3], a[3:]
    b1bar, b2bar = bbar[:3], bbar[3:]
    g1 = E.T @ b1bar
    g2 = E.T @ b2bar
    Ebar = np.outer(b1bar, a1) + np.outer(b2bar, a2 - cross3(r, a1))
    rbar = cross3(g2, a1)
    abar = np.concatenate((g1 - cross3(g2, r), g2))
    return Ebar, rbar, abar


def apply_inv(E, r, a):
    """Inverse motion transform ``X^-1 a``."""
    e1 = E.T @ a[:3]
    return np.concatenate((e1, E.T @ a[3:] + cross3(r, e1)))


def apply_inv_adjoint(E, r, a, bbar):
    a1, a2 = a[:3], a[3:]
    b1bar, b2bar = bbar[:3], bbar[3:]
    e1 = E.T @ a1
    e1bar = b1bar + cross3(b2bar, r)
    Ebar = np.outer(a1, e1bar) + np.outer(a2, b2bar)
    rbar = -cross3(b2bar, e1)
    abar = np.concatenate((E @ e1bar, E @ b2bar))
    return Ebar, rbar, abar


def apply_trans(E, r, a):
    """``X^T f``: carries a force from frame B back to frame A."""
    e2 = E.T @ a[3:]
    return np.concatenate((E.T @ a[:3] + cross3(r, e2), e2))


def apply_trans_adjoint(E, r, a, bbar):
    a1, a2 = a[:3], a[3:]
    b1bar, b2bar = bbar[:3], bbar[3:]
    e2 = E.T @ a2
    e2bar = b2bar + cross3(b1bar, r)
    Ebar = np.outer(a1, b1bar) + np.outer(a2, e2bar)
    rbar = -cross3(b1bar, e2)
    abar = np.concatenate((E @ b1bar, E @ e2bar))
    return Ebar, rbar, abar


def apply_invtrans(E, r, a):
    """``X^-T f``: carries a force from frame A to frame B."""
    a2 = a[3:]
    return np.concatenate((E @ (a[:3] - cross3(r, a2)), E @ a2))


def apply_invtrans_adjoint(E, r, a, bbar):
    a1, a2 = a[:3], a[3:]
    b1bar, b2bar = bbar[:3], bbar[3:]
    g = E.T @ b1bar
    Ebar = np.outer(b1bar, a1 - cross3(r, a2)) + np.outer(b2bar, a2)
    rbar = cross3(g, a2)
    abar = np.concatenate((g, E.T @ b2bar - cross3(g, r)))
    return Ebar, rbar, abar


def multiply(E1, r1, E2, r2):
    """Compose transforms; the result applies ``X2`` first, then ``X1``."""
    return E1 @ E2, r2 + E2.T @ r1


def multiply_adjoint(E1, r1, E2, r2, E0bar, r0bar):
    E1bar = E0bar @ E2.T
    r1bar = E2 @ r0bar
    E2bar = E1.T @ E0bar + np.outer(r1, r0bar)
    return E1bar, r1bar, E2bar, r0bar.copy()


# ---------------------------------------------------------------------------
# Spatial cross products
# ---------------------------------------------------------------------------

def crossm(a, b):
    """Motion cross product ``a x b`` (both motion vectors)."""
    w1, v1, w2, v2 = a[:3], a[3:], b[:3], b[3:]
    return np.concatenate((cross3(w1, w2), cross3(w1, v2) + cross3(v1, w2)))


def crossm_adjoint(a, b, cbar):
    w1, v1, w2, v2 = a[:3], a[3:], b[:3], b[3:]
    w0bar, v0bar = cbar[:3], cbar[3:]
    abar = np.concatenate((-cross3(w0bar, w2) - cross3(v0bar, v2), -cross3(v0bar, w2)))
    bbar = np.concatenate((cross3(w0bar, w1) + cross3(v0bar, v1), cross3(v0bar, w1)))
    return abar, bbar


def crossf(a, b):
    """Force cross product ``a x* b`` (a motion, b force)."""
    w1, v1, w2, v2 = a[:3], a[3:], b[:3], b[3:]
    return np.concatenate((cross3(w1, w2) + cross3(v1, v2), cross3(w1, v2)))


def crossf_adjoint(a, b, cbar):
    w1, v1, w2, v2 = a[:3], a[3:], b[:3], b[3:]
    w0bar, v0bar = cbar[:3], cbar[3:]
    abar = np.concatenate((-cross3(w0bar, w2) - cross3(v0bar, v2), -cross3(w0bar, v2)))
    bbar = np.concatenate((cross3(w0bar, w1), cross3(w0bar, v1) + cross3(v0bar, w1)))
    return abar, bbar


# ---------------------------------------------------------------------------
# Spatial dyads (6x6 arrays with 3x3 blocks m11 m12 / m21 m22)
# ---------------------------------------------------------------------------

def mul_ori(M, a):
    return M @ a


def mul_ori_adjoint(M, a, bbar):
    return np.outer(bbar, a), M.T @ bbar


def mul_inv(M, a):
    """Block-wise transposed product ``[m11^T w + m12^T v, m21^T w + m22^T v]``."""
    w, v = a[:3], a[3:]
    return np.concatenate((M[:3, :3].T @ w + M[:3, 3:].T @ v,
                           M[3:, :3].T @ w + M[3:, 3:].T @ v))


def mul_inv_adjoint(M, a, bbar):
    w, v = a[:3], a[3:]
    w0bar, v0bar = bbar[:3], bbar[3:]
    Mbar = np.empty((6, 6))
    Mbar[:3, :3] = np.outer(w, w0bar)
    Mbar[:3, 3:] = np.outer(v, w0bar)
    Mbar[3:, :3] = np.outer(w, v0bar)
    Mbar[3:, 3:] = np.outer(v, v0bar)
    abar = np.concatenate((M[:3, :3] @ w0bar + M[3:, :3] @ v0bar,
                           M[:3, 3:] @ w0bar + M[3:, 3:] @ v0bar))
    return Mbar, abar


def vvT(a, b):
    return np.outer(a, b)


def vvT_adjoint(a, b, Mbar):
    return Mbar @ b, Mbar.T @ a


def vcross_matrix(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def vcross_matrix_adjoint(v, Mbar):
    return np.array([Mbar[2, 1] - Mbar[1, 2],
                     Mbar[0, 2] - Mbar[2, 0],
                     Mbar[1, 0] - Mbar[0, 1]])


def st2sd(E, r):
    """6x6 motion matrix ``[[E, 0], [-E r_x, E]]`` of a transform."""
    N = np.zeros((6, 6))
    N[:3, :3] = E
    N[3:, 3:] = E
    N[3:, :3] = -E @ vcross_matrix(r)
    return N


def st2sd_adjoint(E, r, Nbar):
    R = vcross_matrix(r)
    n21bar = Nbar[3:, :3]
    Ebar = Nbar[:3, :3] + Nbar[3:, 3:] + n21bar @ R
    rbar = vcross_matrix_adjoint(r, -E.T @ n21bar)
    return Ebar, rbar


def shift(B, E, r):
    """Transform a spatial inertia from frame B to frame A: ``X^T B X``."""
    A = st2sd(E, r)
    return A.T @ B @ A


def shift_adjoint(B, E, r, Nbar):
    A = st2sd(E, r)
    Abar, Bbar = AtBA_adjoint(A, B, Nbar)
    Ebar, rbar = st2sd_adjoint(E, r, Abar)
    return Bbar, Ebar, rbar


# ---------------------------------------------------------------------------
# Dense linear algebra
# ---------------------------------------------------------------------------

def matvec(m, a):
    return m @ a


def matvec_adjoint(m, a, vbar):
    return np.outer(vbar, a), m.T @ vbar


def matmul(a, b):
    return a @ b


def matmul_adjoint(a, b, cbar):
    return cbar @ b.T, a.T @ cbar


def AtBA(a, b):
    """``a^T b a``."""
    return a.T @ b @ a


def AtBA_adjoint(a, b, cbar):
    abar = b.T @ a @ cbar + b @ a @ cbar.T
    bbar = a @ cbar @ a.T
    return abar, bbar


def inverse(a):
    """Matrix inverse; raises SingularMatrix when an LU pivot drops below 1e-12."""
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeMismatch(f"inverse needs a square matrix, got {a.shape}")
    if n == 1:
        if abs(a[0, 0]) < PIVOT_TOL:
            raise SingularMatrix(f"pivot {a[0, 0]:.3e} below {PIVOT_TOL}")
        return np.array([[1.0 / a[0, 0]]])
    lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if pivots.min() < PIVOT_TOL:
        raise SingularMatrix(f"pivot {pivots.min():.3e} below {PIVOT_TOL}")
    return scipy.linalg.lu_solve((lu, piv), np.eye(n), check_finite=False)


def inverse_adjoint(a, b, bbar):
    """``b = a^-1`` is passed in so the factorization is not repeated."""
    return -b.T @ bbar @ b.T


def condition_number(a):
    return float(np.linalg.cond(a))


def three_mat(a, b, c):
    return a @ b @ c


def three_mat_adjoint(a, b, c, mbar):
    return mbar @ c.T @ b.T, a.T @ mbar @ c.T, b.T @ a.T @ mbar


# ---------------------------------------------------------------------------
# Quaternions (x, y, z, w)
# ---------------------------------------------------------------------------

def _left(q):
    x, y, z, w = q
    return np.array([[w, -z, y, x],
                     [z, w, -x, y],
                     [-y, x, w, z],
                     [-x, -y, -z, w]])


def _right(p):
    x, y, z, w = p
    return np.array([[w, z, -y, x],
                     [-z, w, x, y],
                     [y, -x, w, z],
                     [-x, -y, -z, w]])


def mul_qt(q1, q2):
    """Hamilton product ``q1 * q2``."""
    x1, y1, z1, w1 = q1
    x2, y2, z2, w2 = q2
    return np.array([w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                     w1 * y2 + y1 * w2 + z1 * x2 - x1 * z2,
                     w1 * z2 + z1 * w2 + x1 * y2 - y1 * x2,
                     w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2])


def mul_qt_adjoint(q1, q2, qbar):
    return _right(q2).T @ qbar, _left(q1).T @ qbar


def mul_vec(q, v):
    """``q * (v, 0)``; the pure-vector quaternion product."""
    x, y, z, w = q
    return np.array([w * v[0] + y * v[2] - z * v[1],
                     w * v[1] + z * v[0] - x * v[2],
                     w * v[2] + x * v[1] - y * v[0],
                     -x * v[0] - y * v[1] - z * v[2]])


def mul_vec_adjoint(q, v, qbar):
    p = np.array([v[0], v[1], v[2], 0.0])
    return _right(p).T @ qbar, (_left(q).T @ qbar)[:3]


def quat_normalize(q):
    n = vec_norm(q)
    if n < PIVOT_TOL:
        raise ZeroNormQuaternion(f"quaternion norm {n:.3e}")
    return q / n


def quat_normalize_adjoint(q, nbar):
    n = vec_norm(q)
    u = q / n
    return (nbar - u * (u @ nbar)) / n


def quat_from_axis_angle(axis, angle):
    s, c = math.sin(0.5 * angle), math.cos(0.5 * angle)
    return np.array([s * axis[0], s * axis[1], s * axis[2], c])


def quat_from_axis_angle_adjoint(axis, angle, qbar):
    s, c = math.sin(0.5 * angle), math.cos(0.5 * angle)
    axis_bar = s * qbar[:3]
    angle_bar = 0.5 * c * float(axis @ qbar[:3]) - 0.5 * s * qbar[3]
    return axis_bar, angle_bar


def quat_to_matrix(q):
    """Rotation matrix (body to world) of a unit quaternion."""
    x, y, z, w = q
    return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                     [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                     [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])


def quat_to_matrix_adjoint(q, Rbar):
    x, y, z, w = q
    B = Rbar
    xb = 2 * (y * (B[0, 1] + B[1, 0]) + z * (B[0, 2] + B[2, 0]) + w * (B[2, 1] - B[1, 2])) \
        - 4 * x * (B[1, 1] + B[2, 2])
    yb = 2 * (x * (B[0, 1] + B[1, 0]) + z * (B[1, 2] + B[2, 1]) + w * (B[0, 2] - B[2, 0])) \
        - 4 * y * (B[0, 0] + B[2, 2])
    zb = 2 * (x * (B[0, 2] + B[2, 0]) + y * (B[1, 2] + B[2, 1]) + w * (B[1, 0] - B[0, 1])) \
        - 4 * z * (B[0, 0] + B[1, 1])
    wb = 2 * (x * (B[2, 1] - B[1, 2]) + y * (B[0, 2] - B[2, 0]) + z * (B[1, 0] - B[0, 1]))
    return np.array([xb, yb, zb, wb])


def rotation_about_axis(axis, angle):
    """Rodrigues rotation matrix for a unit axis."""
    K = vcross_matrix(axis)
    return _I3 + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def rotation_about_axis_derivative(axis, angle):
    K = vcross_matrix(axis)
    return math.cos(angle) * K + math.sin(angle) * (K @ K)


def rpy_matrix(rpy):
    """Rotation matrix from fixed-axis roll, pitch, yaw (applied x, then y, then z)."""
    r, p, y = rpy
    Rx = rotation_about_axis(np.array([1.0, 0, 0]), r)
    Ry = rotation_about_axis(np.array([0, 1.0, 0]), p)
    Rz = rotation_about_axis(np.array([0, 0, 1.0]), y)
    return Rz @ Ry @ Rx


# ---------------------------------------------------------------------------
# Typed value layer
# ---------------------------------------------------------------------------

MOTION = "motion"
FORCE = "force"


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput("non-finite input to spatial operator")


@dataclass(frozen=True, eq=False)
class SpatialVector:
    """A 6-D motion or force quantity with angular part ``w`` and linear part ``v``."""

    w: np.ndarray
    v: np.ndarray
    kind: str = MOTION

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).reshape(3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))
        if self.kind not in (MOTION, FORCE):
            raise ValueError(f"unknown spatial vector kind {self.kind!r}")
        _finite(self.w, self.v)

    @classmethod
    def from_array(cls, a, kind=MOTION):
        a = np.asarray(a, dtype=float)
        if a.shape != (6,):
            raise ShapeMismatch(f"spatial vector needs 6 entries, got {a.shape}")
        return cls(a[:3], a[3:], kind)

    def to_array(self):
        return np.concatenate((self.w, self.v))


class SpatialTransform(NamedTuple):
    E: np.ndarray
    r: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def check(self, tol=1e-9):
        _finite(self.E, self.r)
        if np.max(np.abs(self.E.T @ self.E - _I3)) > tol or abs(np.linalg.det(self.E) - 1.0) > tol:
            raise NonFiniteInput("E is not a proper rotation")
        return self

    def matrix(self):
        return st2sd(self.E, self.r)


@dataclass(frozen=True, eq=False)
class SpatialDyad:
    """6x6 block operator; ``m`` holds the blocks m11 m12 / m21 m22."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        if m.shape != (6, 6):
            raise ShapeMismatch(f"spatial dyad needs a 6x6 array, got {m.shape}")
        _finite(m)
        object.__setattr__(self, "m", m)

    @classmethod
    def from_blocks(cls, m11, m12, m21, m22):
        return cls(np.block([[m11, m12], [m21, m22]]))

    m11 = property(lambda self: self.m[:3, :3])
    m12 = property(lambda self: self.m[:3, 3:])
    m21 = property(lambda self: self.m[3:, :3])
    m22 = property(lambda self: self.m[3:, 3:])


@dataclass(frozen=True)
class Quaternion:
    x: float
    y: float
    z: float
    w: float

    @classmethod
    def identity(cls):
        return cls(0.0, 0.0, 0.0, 1.0)

    @classmethod
    def from_array(cls, q):
        return cls(*(float(c) for c in q))

    def to_array(self):
        return np.array([self.x, self.y, self.z, self.w])


@dataclass(frozen=True, eq=False)
class AdjointPair:
    """A forward value together with its accumulated adjoint."""

    value: np.ndarray
    adjoint: np.ndarray

    def __post_init__(self):
        if np.shape(self.value) != np.shape(self.adjoint):
            raise ShapeMismatch("value and adjoint shapes differ")

    @classmethod
    def zero(cls, value):
        value = np.asarray(value, dtype=float)
        return cls(value, np.zeros_like(value))


_APPLY = {
    "apply": (apply, apply_adjoint, MOTION),
    "apply_inv": (apply_inv, apply_inv_adjoint, MOTION),
    "apply_trans": (apply_trans, apply_trans_adjoint, FORCE),
    "apply_invtrans": (apply_invtrans, apply_invtrans_adjoint, FORCE),
}


def _as_array(a):
    return a.to_array() if isinstance(a, SpatialVector) else np.asarray(a, dtype=float)


def st_apply(mode, X, a):
    """Apply transform ``X`` in one of the four modes.

    ``a`` may be a SpatialVector (the result keeps its kind) or a raw 6-array.
    """
    try:
        fn = _APPLY[mode][0]
    except KeyError:
        raise ValueError(f"unknown st_apply mode {mode!r}") from None
    arr = _as_array(a)
    if arr.shape != (6,):
        raise ShapeMismatch(f"spatial vector needs 6 entries, got {arr.shape}")
    _finite(X.E, X.r, arr)
    out = fn(X.E, X.r, arr)
    if isinstance(a, SpatialVector):
        return SpatialVector.from_array(out, a.kind)
    return out


def st_apply_adjoint(mode, X, a, bbar):
    """Returns ``(Xbar, abar)`` with ``Xbar`` shaped like a SpatialTransform."""
    fn = _APPLY[mode][1]
    arr, barr = _as_array(a), _as_array(bbar)
    _finite(X.E, X.r, arr, barr)
    Ebar, rbar, abar = fn(X.E, X.r, arr, barr)
    return SpatialTransform(Ebar, rbar), abar


def st_multiply(X1, X2):
    _finite(X1.E, X1.r, X2.E, X2.r)
    return SpatialTransform(*multiply(X1.E, X1.r, X2.E, X2.r))


def st_multiply_adjoint(X1, X2, X0bar):
    E1b, r1b, E2b, r2b = multiply_adjoint(X1.E, X1.r, X2.E, X2.r, X0bar.E, X0bar.r)
    return SpatialTransform(E1b, r1b), SpatialTransform(E2b, r2b)


def spatial_cross(a: SpatialVector, b: SpatialVector) -> SpatialVector:
    """Kind-aware cross product: motion x motion -> motion, motion x* force -> force."""
    if a.kind != MOTION:
        raise ValueError("left operand of a spatial cross product must be a motion vector")
    if b.kind == MOTION:
        return SpatialVector.from_array(crossm(a.to_array(), b.to_array()), MOTION)
    return SpatialVector.from_array(crossf(a.to_array(), b.to_array()), FORCE)


def spatial_inertia(mass, com, inertia_com):
    """Rigid-body spatial inertia about the link origin."""
    C = vcross_matrix(com)
    M = np.empty((6, 6))
    M[:3, :3] = inertia_com + mass * C @ C.T
    M[:3, 3:] = mass * C
    M[3:, :3] = mass * C.T
    M[3:, 3:] = mass * _I3
    return M


def spatial_inertia_adjoint(mass, com, inertia_com, Mbar):
    """Returns ``(mass_bar, com_bar, inertia_bar)``."""
    C = vcross_matrix(com)
    mass_bar = float(np.sum(Mbar[:3, :3] * (C @ C.T)) + np.sum(Mbar[:3, 3:] * C)
                     + np.sum(Mbar[3:, :3] * C.T) + np.trace(Mbar[3:, 3:]))
    B11 = Mbar[:3, :3]
    Cbar = mass * (B11 @ C + B11.T @ C) + mass * Mbar[:3, 3:] + mass * Mbar[3:, :3].T
    com_bar = vcross_matrix_adjoint(com, Cbar)
    return mass_bar, com_bar, B11.copy()
