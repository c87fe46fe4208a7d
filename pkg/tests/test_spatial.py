import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from artidiff import gradcheck as gc
from artidiff import spatial as sp
from artidiff.errors import NonFiniteInput, ShapeMismatch, SingularMatrix, ZeroNormQuaternion

I3 = np.eye(3)
MODES = ("apply", "apply_inv", "apply_trans", "apply_invtrans")


def rand_transform(rng):
    E = Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()
    return sp.SpatialTransform(E, rng.standard_normal(3))


finite = st.floats(-10, 10, allow_nan=False)
vec6 = st.lists(finite, min_size=6, max_size=6).map(np.array)


def test_apply_identity():
    X = sp.SpatialTransform.identity()
    a = np.array([1.0, 2, 3, 4, 5, 6])
    assert np.array_equal(sp.st_apply("apply", X, a), a)


def test_apply_offset_hand_value():
    # v = E (a2 - r x a1) with r x a1 = [0,0,1] x [1,0,0] = [0,1,0]
    X = sp.SpatialTransform(I3, np.array([0.0, 0, 1]))
    b = sp.st_apply("apply", X, np.array([1.0, 0, 0, 0, 0, 0]))
    assert np.allclose(b, [1, 0, 0, 0, -1, 0])


def test_apply_adjoint_identity_passes_seed():
    X = sp.SpatialTransform.identity()
    bbar = np.array([1.0, 0, 0, 0, 0, 0])
    _, abar = sp.st_apply_adjoint("apply", X, np.ones(6), bbar)
    assert np.allclose(abar, bbar)


def test_apply_adjoint_rbar_hand_value():
    X = sp.SpatialTransform(I3, np.array([0.0, 0, 1]))
    a = np.array([1.0, 0, 0, 0, 0, 0])
    Xbar, _ = sp.st_apply_adjoint("apply", X, a, np.array([0.0, 0, 0, 0, 1, 0]))
    assert np.allclose(Xbar.r, [0, 0, -1])


@pytest.mark.parametrize("mode", MODES)
def test_apply_adjoint_matches_fd_all_entries(mode):
    rng = np.random.default_rng(3)
    X = rand_transform(rng)
    a = rng.standard_normal(6)
    bbar = rng.standard_normal(6)
    Xbar, abar = sp.st_apply_adjoint(mode, X, a, bbar)
    theta = np.concatenate((X.E.ravel(), X.r, a))
    fn = lambda t: bbar @ sp.st_apply(mode, sp.SpatialTransform(t[:9].reshape(3, 3), t[9:12]), t[12:])
    num = gc.fd_gradient(fn, theta)
    ana = np.concatenate((Xbar.E.ravel(), Xbar.r, abar))
    assert np.max(np.abs(num - ana)) / np.max(np.abs(ana)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(vec6, st.integers(0, 2**31))
def test_inverse_round_trips(a, seed):
    X = rand_transform(np.random.default_rng(seed))
    back = sp.st_apply("apply_inv", X, sp.st_apply("apply", X, a))
    assert np.allclose(back, a, atol=1e-12 * (1 + np.abs(a).max()) * 10)
    back = sp.st_apply("apply_invtrans", X, sp.st_apply("apply_trans", X, a))
    assert np.allclose(back, a, atol=1e-12 * (1 + np.abs(a).max()) * 10)


def test_kind_is_preserved():
    X = rand_transform(np.random.default_rng(0))
    f = sp.SpatialVector([1, 0, 0], [0, 1, 0], sp.FORCE)
    assert sp.st_apply("apply_trans", X, f).kind == sp.FORCE
    m = sp.SpatialVector([1, 0, 0], [0, 1, 0])
    assert sp.spatial_cross(m, m).kind == sp.MOTION
    assert sp.spatial_cross(m, f).kind == sp.FORCE


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteInput):
        sp.st_apply("apply", sp.SpatialTransform.identity(), np.array([np.nan, 0, 0, 0, 0, 0]))
    with pytest.raises(NonFiniteInput):
        sp.SpatialVector([np.inf, 0, 0], [0, 0, 0])


def test_transform_check_rejects_non_rotation():
    with pytest.raises(NonFiniteInput):
        sp.SpatialTransform(2 * I3, np.zeros(3)).check()


def test_multiply_examples():
    rng = np.random.default_rng(1)
    X2 = rand_transform(rng)
    out = sp.st_multiply(sp.SpatialTransform.identity(), X2)
    assert np.allclose(out.E, X2.E) and np.allclose(out.r, X2.r)
    out = sp.st_multiply(sp.SpatialTransform(I3, np.array([1.0, 0, 0])), sp.SpatialTransform.identity())
    assert np.allclose(out.E, I3) and np.allclose(out.r, [1, 0, 0])


def test_multiply_matches_matrix_product():
    rng = np.random.default_rng(2)
    X1, X2 = rand_transform(rng), rand_transform(rng)
    X = sp.st_multiply(X1, X2)
    assert np.allclose(X.matrix(), X1.matrix() @ X2.matrix())


def test_cross_examples():
    a = np.array([1.0, 0, 0, 1, 0, 0])
    assert np.allclose(sp.crossm(a, a), 0)
    c = sp.crossf(np.array([0.0, 0, 1, 0, 0, 0]), np.array([1.0, 0, 0, 0, 0, 0]))
    assert np.allclose(c, [0, 1, 0, 0, 0, 0])


def test_crossf_is_negative_transpose_of_crossm():
    rng = np.random.default_rng(4)
    a, b, c = rng.standard_normal((3, 6))
    assert np.isclose(c @ sp.crossf(a, b), -(sp.crossm(a, c) @ b))


def test_dyad_examples():
    M = sp.SpatialDyad.from_blocks(I3, I3, I3, I3)
    assert np.allclose(sp.mul_ori(M.m, np.array([1.0, 2, 3, 4, 5, 6])), [5, 7, 9, 5, 7, 9])
    N = sp.st2sd(I3, np.zeros(3))
    assert np.allclose(N, np.eye(6))


def test_mat_examples():
    assert np.allclose(sp.inverse(np.eye(6)), np.eye(6))
    cbar = np.random.default_rng(0).standard_normal((6, 6))
    assert np.allclose(sp.inverse_adjoint(np.eye(6), np.eye(6), cbar), -cbar)
    B = np.random.default_rng(1).standard_normal((6, 6))
    assert np.allclose(sp.AtBA(np.eye(6), B), B)
    abar, bbar = sp.AtBA_adjoint(np.eye(6), B, cbar)
    assert np.allclose(bbar, cbar)


@pytest.mark.filterwarnings("ignore::scipy.linalg.LinAlgWarning")
def test_inverse_singular():
    with pytest.raises(SingularMatrix):
        sp.inverse(np.zeros((3, 3)))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        sp.SpatialVector.from_array(np.zeros(5))
    with pytest.raises(ShapeMismatch):
        sp.SpatialDyad(np.zeros((5, 6)))


def test_quaternion_examples():
    rng = np.random.default_rng(5)
    q = rng.standard_normal(4)
    assert np.allclose(sp.mul_qt(q, np.array([0.0, 0, 0, 1])), q)
    for _ in range(50):
        q1, q2 = rng.standard_normal((2, 4))
        assert abs(np.linalg.norm(sp.mul_qt(q1, q2)) - np.linalg.norm(q1) * np.linalg.norm(q2)) < 1e-12
    with pytest.raises(ZeroNormQuaternion):
        sp.quat_normalize(np.zeros(4))


def test_quaternion_matches_scipy():
    rng = np.random.default_rng(6)
    q = sp.quat_normalize(rng.standard_normal(4))
    v = rng.standard_normal(3)
    R = Rotation.from_quat(q).as_matrix()
    assert np.allclose(sp.quat_to_matrix(q), R)
    conj = q * np.array([-1, -1, -1, 1])
    assert np.allclose(sp.mul_qt(sp.mul_vec(q, v), conj)[:3], R @ v)


@pytest.mark.parametrize("name", sorted(gc.operator_registry()))
def test_operator_dot_test(name):
    res = gc.adjoint_dot_test(gc.operator_registry()[name], trials=100, seed=11)
    assert res.passed, (name, res.worst_rel_error, res.failing_index)


@pytest.mark.parametrize("name", ["crossm", "st_apply[apply]", "shift", "mul_qt"])
def test_adjoint_linear_in_seed(name):
    op = gc.operator_registry()[name]
    rng = np.random.default_rng(8)
    args = op.sample(rng)
    y = op.forward(*args)
    ys = y if isinstance(y, tuple) else (y,)
    s1 = tuple(rng.standard_normal(np.shape(v)) for v in ys)
    s2 = tuple(rng.standard_normal(np.shape(v)) for v in ys)
    mix = tuple(2.0 * a - 3.0 * b for a, b in zip(s1, s2))
    as_t = lambda x: x if isinstance(x, tuple) else (x,)
    a1, a2, am = as_t(op.adjoint(*args, *s1)), as_t(op.adjoint(*args, *s2)), as_t(op.adjoint(*args, *mix))
    for x1, x2, xm in zip(a1, a2, am):
        assert np.allclose(xm, 2.0 * np.asarray(x1) - 3.0 * np.asarray(x2), atol=1e-12, rtol=0)


def test_spatial_inertia_point_mass():
    M = sp.spatial_inertia(2.0, np.array([1.0, 0, 0]), np.zeros((3, 3)))
    assert np.allclose(M, M.T)
    assert np.linalg.eigvalsh(M).min() > -1e-12
    # a unit angular velocity about z moves the point at x=1 with velocity y
    h = M @ np.array([0, 0, 1.0, 0, 0, 0])
    assert np.allclose(h[3:], [0, 2, 0])


def test_adjoint_pair_shapes():
    p = sp.AdjointPair.zero(np.ones(3))
    assert p.adjoint.shape == (3,)
    with pytest.raises(ShapeMismatch):
        sp.AdjointPair(np.ones(3), np.ones(2))
