import numpy as np
import pytest

from artidiff import applications as A
from artidiff import gradcheck as gc
from artidiff import model as M
from artidiff import objectives as O
from artidiff import timeline as T
from artidiff.errors import DivergenceDetected, ShapeMismatch
from artidiff.step import StepSettings


def scene(name):
    sc = M.read_scene(name)
    return sc, sc.model


def test_point_mass_converges():
    sc, m = scene("point_mass")
    res = A.optimize_controls(m, sc, None, A.OptimizeConfig.from_scene(sc, threshold=1e-6))
    assert res.history[-1] < 1e-6
    assert len(res.history) <= 201


def test_zero_learning_rate_is_a_fixed_point():
    sc, m = scene("arm2")
    res = A.optimize_controls(m, sc, None, A.OptimizeConfig(iterations=5, learning_rate=0.0))
    assert np.all(res.value == 0)
    assert len(set(res.history)) == 1 and len(res.history) == 6


def test_history_starts_at_zero_control_loss():
    sc, m = scene("arm2")
    res = A.optimize_controls(m, sc, None, A.OptimizeConfig(iterations=3, learning_rate=1.0))
    obj = O.make_objective(m, sc.objective)
    zero = T.loss(m, sc.x0, np.zeros((sc.steps, m.nu)), StepSettings.from_scene(sc), obj)
    assert res.history[0] == zero
    assert min(res.history) == res.history[int(np.argmin(res.history))]


def test_divergence_detected():
    sc, m = scene("arm2")
    with pytest.raises(DivergenceDetected):
        A.optimize_controls(m, sc, None, A.OptimizeConfig(iterations=50, learning_rate=1e4))


def test_config_validation():
    with pytest.raises(ValueError):
        A.OptimizeConfig(iterations=0)
    with pytest.raises(ValueError):
        A.OptimizeConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        A.OptimizeConfig(params=("spin",))


def test_iterations_to():
    assert A.iterations_to([5.0, 3.0, 1.0], 3.0) == 1
    assert A.iterations_to([5.0], 1.0) is None


def test_random_search_is_reproducible():
    sc, m = scene("arm2")
    a = A.random_search(m, sc, None, 6, seed=3)
    b = A.random_search(m, sc, None, 6, seed=3)
    assert a.history == b.history
    assert np.all(np.diff(a.history) <= 0) and len(a.history) == 6


def test_estimation_at_own_stopping_point():
    sc, m = scene("sliding_box")
    st = StepSettings.from_scene(sc, contact=sc.contact.with_mu(0.02))
    traj = T.rollout(m, sc.x0, None, st, n_t=sc.steps)
    res = A.estimate_parameters(m, sc, [traj.final_q[0]], ["mu"], A.OptimizeConfig(iterations=20),
                                init={"mu": 0.02})
    assert res.history[0] == 0.0 and len(res.history) == 1
    assert res.value["mu"] == 0.02


def test_friction_gradient_matches_fd():
    sc, m = scene("sliding_box")
    obj = A.estimation_objective(sc, [0.6])
    rng = np.random.default_rng(0)
    for mu in rng.uniform(0.05, 0.5, 10):
        st = StepSettings.from_scene(sc, contact=sc.contact.with_mu(mu), params={"mu"})
        rep = T.value_and_grad(m, sc.x0, None if m.nu == 0 else np.zeros((sc.steps, m.nu)), st, obj)
        f = lambda v: T.loss(m, sc.x0, np.zeros((sc.steps, m.nu)),
                             StepSettings.from_scene(sc, contact=sc.contact.with_mu(v[0])), obj)
        num = gc.fd_gradient(f, np.array([mu]))[0]
        assert abs(float(rep.params["mu"]) - num) <= 1e-3 * abs(num)


def test_estimated_mu_stays_nonnegative():
    sc, m = scene("sliding_box")
    # a far target pushes mu toward zero; the projection must hold it there
    res = A.estimate_parameters(m, sc, [5.0], ["mu"], A.OptimizeConfig(iterations=5, learning_rate=10.0),
                                init={"mu": 0.05})
    assert res.value["mu"] >= 0


def test_enhance_zero_perturbation():
    s = A.TransitionSample(np.zeros(2), np.array([0.5]), np.array([1.0, 2.0]), 3.0,
                           np.array([[1.0], [2.0]]), np.array([0.5]))
    (a, sn, r), = A.enhance_samples(s, [np.zeros(1)])
    assert np.array_equal(a, s.a0) and np.array_equal(sn, s.s0_next) and r == s.r0


def test_enhance_exact_on_linear_dynamics():
    rng = np.random.default_rng(1)
    Mx = rng.standard_normal((4, 3))
    c = rng.standard_normal(3)
    a0 = rng.standard_normal(3)
    s = A.TransitionSample(np.zeros(4), a0, Mx @ a0, float(c @ a0), Mx, c)
    das = list(rng.standard_normal((5, 3)))
    for da, (a, sn, r) in zip(das, A.enhance_samples(s, das)):
        assert np.allclose(sn, Mx @ a, atol=1e-12) and np.isclose(r, c @ a, atol=1e-12)


def test_enhance_is_linear_in_perturbation():
    rng = np.random.default_rng(2)
    s = A.TransitionSample(np.zeros(2), np.zeros(2), rng.standard_normal(2), 0.3,
                           rng.standard_normal((2, 2)), rng.standard_normal(2))
    d1, d2 = rng.standard_normal((2, 2))
    (_, s1, r1), (_, s2, r2), (_, s12, r12) = A.enhance_samples(s, [d1, d2, d1 + d2])
    assert np.allclose(s12 - s.s0_next, (s1 - s.s0_next) + (s2 - s.s0_next), atol=1e-12)
    assert abs((r12 - s.r0) - (r1 - s.r0) - (r2 - s.r0)) < 1e-12


def test_enhance_shape_errors():
    with pytest.raises(ShapeMismatch):
        A.TransitionSample(np.zeros(2), np.zeros(2), np.zeros(3), 0.0, np.zeros((2, 2)), np.zeros(2))
    s = A.TransitionSample(np.zeros(2), np.zeros(2), np.zeros(2), 0.0, np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ShapeMismatch):
        A.enhance_samples(s, [np.zeros(3)])


def test_enhance_error_is_quadratic_on_pendulum():
    # one step is affine in the torque, so the action is held for several steps
    sc, m = scene("pendulum_3")
    st = StepSettings.from_scene(sc)
    rng = np.random.default_rng(3)
    K = 10
    for _ in range(20):
        x = np.concatenate((rng.uniform(-1, 1, m.nq), rng.uniform(-1, 1, m.nv)))
        u0 = rng.uniform(-1, 1, m.nu)
        s = A.sample_from_step(m, x, u0, st, substeps=K)
        d = rng.standard_normal(m.nu)
        d /= np.linalg.norm(d)
        errs = []
        for da in (d, d / 2):
            (_, approx, _), = A.enhance_samples(s, [da])
            true = T.rollout(m, (x[:m.nq], x[m.nq:]), np.tile(u0 + da, (K, 1)), st)
            errs.append(np.linalg.norm(approx - np.concatenate(true.state(K))))
        assert 3.0 <= errs[0] / errs[1] <= 5.0


def test_sample_from_step_jacobian_matches_fd():
    sc, m = scene("pendulum_2")
    st = StepSettings.from_scene(sc)
    x, u = np.array([0.3, -0.2, 0.1, 0.4]), np.array([0.5, -0.5])
    obj = O.make_objective(m, sc.objective)
    s = A.sample_from_step(m, x, u, st, objective=obj, substeps=3)
    nxt = lambda v: np.concatenate(T.rollout(m, (x[:2], x[2:]), np.tile(v, (3, 1)), st).state(3))
    assert np.allclose(s.ds_da, gc.fd_gradient(nxt, u), atol=1e-8)
    rew = lambda v: -T.loss(m, (x[:2], x[2:]), np.tile(v, (3, 1)), st, obj)
    assert np.allclose(s.dr_da, gc.fd_gradient(rew, u), atol=1e-8)


def quadratic_q_fixture(rng, ns=4, na=3):
    Ms, Na = rng.standard_normal((ns, ns)), rng.standard_normal((ns, na))
    R, c = rng.standard_normal((na, na)), rng.standard_normal(na)
    P, p = rng.standard_normal((ns, ns)), rng.standard_normal(ns)
    reward = lambda s, a: -a @ R @ a + c @ a + 0.1 * s @ s
    q_next = lambda s2: s2 @ P @ s2 + p @ s2
    return Ms, Na, R, c, P, p, reward, q_next


def test_policy_grad_matches_fd():
    rng = np.random.default_rng(4)
    Ms, Na, R, c, P, p, reward, q_next = quadratic_q_fixture(rng)
    gamma = 0.9
    s, a = rng.standard_normal(4), rng.standard_normal(3)
    Q = lambda a: reward(s, a) + gamma * q_next(Ms @ s + Na @ a)
    s2 = Ms @ s + Na @ a
    inp = A.PolicyEnhanceInput(-(R + R.T) @ a + c, gamma, (P + P.T) @ s2 + p, Na)
    ana = A.policy_enhance_grad(inp)
    num = gc.fd_gradient(Q, a)
    assert np.abs(ana - num).max() / np.abs(num).max() < 1e-6


def test_policy_grad_special_cases():
    rng = np.random.default_rng(5)
    dr, dq = rng.standard_normal(3), rng.standard_normal(3)
    assert np.array_equal(A.policy_enhance_grad(A.PolicyEnhanceInput(dr, 0.0, dq, np.eye(3))), dr)
    out = A.policy_enhance_grad(A.PolicyEnhanceInput(np.zeros(3), 0.7, dq, np.eye(3)))
    assert np.allclose(out, 0.7 * dq)
    # linear in each input
    J = rng.standard_normal((3, 3))
    g = lambda d, q: A.policy_enhance_grad(A.PolicyEnhanceInput(d, 0.5, q, J))
    assert np.allclose(g(2 * dr, dq) - g(dr, dq), g(dr, dq) - g(0 * dr, dq))
    assert np.allclose(g(dr, 2 * dq) - g(dr, dq), g(dr, dq) - g(dr, 0 * dq))
    with pytest.raises(ShapeMismatch):
        A.PolicyEnhanceInput(dr, 0.5, dq, np.eye(2))
    with pytest.raises(ValueError):
        A.PolicyEnhanceInput(dr, 1.5, dq, np.eye(3))


def test_relevance_weight():
    a = np.array([0.3, -1.0])
    assert A.relevance_weight(a, a) == 1.0
    assert np.isclose(A.relevance_weight(np.array([1.0, 0]), np.zeros(2)), np.exp(-1))
    rng = np.random.default_rng(6)
    for _ in range(20):
        a0, d = rng.standard_normal((2, 3))
        assert A.relevance_weight(a0 + 2 * d, a0) < A.relevance_weight(a0 + d, a0)
    with pytest.raises(ShapeMismatch):
        A.relevance_weight(np.zeros(2), np.zeros(3))


def test_history_csv(tmp_path):
    A.write_history_csv(tmp_path / "h.csv", {"sgd": [3.0, 2.0, 1.0], "random": [3.0]})
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "iteration,sgd,random"
    assert lines[2] == "1,2.0,"
