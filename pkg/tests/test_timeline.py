import json

import numpy as np
import pytest

from artidiff import gradcheck as gc
from artidiff import model as M
from artidiff import objectives as O
from artidiff import timeline as T
from artidiff.errors import DimensionMismatch, IncompleteTrajectory, MemoryBudgetExceeded, TapeMismatch
from artidiff.step import StepSettings

SLIDER = """
links:
  - name: cart
    parent: null
    joint: {type: prismatic, axis: [1, 0, 0]}
    mass: 2.0
    inertia: [0.1, 0.1, 0.1]
"""

FREE = """
links:
  - name: body
    parent: null
    joint: {type: floating_base}
    mass: 1.0
    inertia: [0.1, 0.1, 0.1]
"""


class FirstCoordinate(O.Term):
    """Phi = x_final[0], a linear objective for closed-form gradients."""

    def state(self, model, k, nt, x, x_prev):
        if k != nt:
            return 0.0, None, None
        g = np.zeros_like(x)
        g[0] = 1.0
        return float(x[0]), g, None


def test_zero_gravity_equilibrium():
    m = M.RobotModel(M.load_model(FREE).links, np.zeros(3))
    x0 = np.concatenate((m.neutral_q(), np.zeros(6)))
    traj = T.rollout(m, x0, None, StepSettings(), n_t=50)
    assert np.allclose(traj.states(), x0)


def test_free_fall_velocity():
    m = M.load_model(FREE)
    x0 = np.concatenate((m.neutral_q(), np.zeros(6)))
    traj = T.rollout(m, x0, None, StepSettings(dt=0.01, integrator="explicit"), n_t=100)
    assert np.isclose(traj.final_qd[5], -9.81, rtol=1e-9)
    # explicit Euler lags velocity by one step
    assert np.isclose(traj.final_q[2], -0.5 * 9.81 * 0.01**2 * 100 * 99, rtol=1e-9)


def test_drift_gradient_closed_form():
    m = M.load_model(SLIDER)
    n_t, dt = 40, 0.02
    obj = O.ObjectiveSpec([FirstCoordinate()])
    rep = T.value_and_grad(m, np.array([0.3, 0.5]), np.zeros((n_t, 1)), StepSettings(dt=dt), obj)
    assert np.isclose(rep.phi, 0.3 + 0.5 * n_t * dt)
    assert np.allclose(rep.dphi_dx0, [1.0, n_t * dt])


def pendulum(name="pendulum_3"):
    sc = M.read_scene(name)
    return sc, StepSettings.from_scene(sc, integrator="explicit"), O.make_objective(sc.model, sc.objective)


def test_checkpoint_equals_full_tape():
    for name in ("pendulum_3", "ball", "arm2"):
        sc = M.read_scene(name)
        st = StepSettings.from_scene(sc)
        obj = O.make_objective(sc.model, sc.objective)
        U = 0.1 * np.random.default_rng(0).standard_normal((60, sc.model.nu))
        a = T.value_and_grad(sc.model, sc.x0, U, st, obj, mode=T.CHECKPOINT)
        b = T.value_and_grad(sc.model, sc.x0, U, st, obj, mode=T.FULL_TAPE)
        assert a.phi == b.phi
        assert np.array_equal(a.dphi_du, b.dphi_du)
        assert np.array_equal(a.dphi_dx0, b.dphi_dx0)


def test_gradient_matches_fd():
    sc, st, obj = pendulum()
    U = 0.1 * np.random.default_rng(1).standard_normal((50, sc.model.nu))
    rep = T.value_and_grad(sc.model, sc.x0, U, st, obj)
    num = gc.fd_gradient(lambda v: T.loss(sc.model, sc.x0, v, st, obj), U)
    assert np.abs(rep.dphi_du - num).max() <= 1e-6 * np.abs(num).max()
    num0 = gc.fd_gradient(lambda v: T.loss(sc.model, v, U, st, obj), sc.x0)
    assert np.abs(rep.dphi_dx0 - num0).max() <= 1e-6 * np.abs(num0).max()


def test_memory_laws():
    sc, st, _ = pendulum()
    small = T.rollout(sc.model, sc.x0, None, st, n_t=50, mode=T.FULL_TAPE).memory
    big = T.rollout(sc.model, sc.x0, None, st, n_t=100, mode=T.FULL_TAPE).memory
    assert big.peak_aux_bytes == 2 * small.peak_aux_bytes
    c1 = T.rollout(sc.model, sc.x0, None, st, n_t=50).memory
    c2 = T.rollout(sc.model, sc.x0, None, st, n_t=100).memory
    assert c2.checkpoint_bytes == 2 * c1.checkpoint_bytes
    assert c2.peak_aux_bytes < big.peak_aux_bytes / 10


def test_predict_cost():
    p = T.predict_cost(1, 100, 2.0, 3.0, 10, 50)
    assert p.time_per_backward_step == 2.0 + 3.0
    assert p.peak_memory == 100 * 10 + 50
    p = T.predict_cost(9, 90, 1.0, 1.0, 8, 0)
    assert p.time_per_backward_step == 6.0 and p.peak_memory == 80
    with pytest.raises(ValueError):
        T.predict_cost(0, 10, 1, 1, 1, 1)


def test_gradient_linear_in_objective():
    sc, st, obj = pendulum()
    U = 0.1 * np.random.default_rng(2).standard_normal((30, sc.model.nu))
    a = T.value_and_grad(sc.model, sc.x0, U, st, obj)
    b = T.value_and_grad(sc.model, sc.x0, U, st, obj.scaled(-2.5))
    assert np.isclose(b.phi, -2.5 * a.phi)
    assert np.allclose(b.dphi_du, -2.5 * a.dphi_du, rtol=1e-12, atol=1e-15)


def test_incomplete_and_mismatched_tapes():
    sc, st, obj = pendulum()
    traj = T.rollout(sc.model, sc.x0, None, st, n_t=10, mode=T.FULL_TAPE)
    traj.tapes.pop()
    with pytest.raises(IncompleteTrajectory):
        T.backward(sc.model, traj, obj)
    traj = T.rollout(sc.model, sc.x0, None, st, n_t=10, mode=T.FULL_TAPE)
    other = M.read_scene("pendulum_2")
    traj.tapes[3] = T.rollout(other.model, other.x0, None, st, n_t=1, mode=T.FULL_TAPE).tapes[0]
    with pytest.raises(TapeMismatch):
        T.backward(sc.model, traj, obj)


def test_rollout_input_errors():
    sc, st, _ = pendulum()
    with pytest.raises(DimensionMismatch):
        T.rollout(sc.model, np.zeros(3), None, st, n_t=5)
    with pytest.raises(DimensionMismatch):
        T.rollout(sc.model, sc.x0, np.zeros((5, 2)), st)
    with pytest.raises(ValueError):
        T.rollout(sc.model, sc.x0, None, st, n_t=5, mode="tape")


def test_memory_budget():
    sc, st, _ = pendulum()
    with pytest.raises(MemoryBudgetExceeded) as info:
        T.rollout(sc.model, sc.x0, None, st, n_t=1000, mode=T.FULL_TAPE, memory_budget=10_000)
    assert info.value.requested > 10_000
    T.rollout(sc.model, sc.x0, None, st, n_t=1000, memory_budget=200_000)


def test_deterministic():
    sc = M.read_scene("ball")
    st = StepSettings.from_scene(sc)
    obj = O.make_objective(sc.model, sc.objective)
    a = T.value_and_grad(sc.model, sc.x0, None if sc.model.nu else np.zeros((sc.steps, 0)), st, obj)
    b = T.value_and_grad(sc.model, sc.x0, np.zeros((sc.steps, 0)), st, obj)
    assert a.to_json(timing=False) == b.to_json(timing=False)


def test_batch_rollout_keeps_order():
    sc, st, _ = pendulum()
    rng = np.random.default_rng(3)
    jobs = [(sc.x0, rng.standard_normal((20, sc.model.nu))) for _ in range(6)]
    out = T.batch_rollout(sc.model, jobs, st, max_workers=3)
    for (x0, U), traj in zip(jobs, out):
        ref = T.rollout(sc.model, x0, U, st)
        assert np.array_equal(ref.final_q, traj.final_q)


def test_exports_round_trip(tmp_path):
    sc, st, _ = pendulum()
    U = np.random.default_rng(4).standard_normal((25, sc.model.nu))
    traj = T.rollout(sc.model, sc.x0, U, st)
    traj.write_csv(tmp_path / "t.csv")
    traj.write_jsonl(tmp_path / "t.jsonl")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert len(lines) == 26
    assert lines[0].split(",")[0] == "step" and lines[0].endswith("contacts")
    assert np.array_equal(T.read_controls(tmp_path / "t.csv"), U)
    assert np.array_equal(T.read_controls(tmp_path / "t.jsonl"), U)
    last = json.loads((tmp_path / "t.jsonl").read_text().splitlines()[-1])
    assert last["step"] == 25 and np.allclose(last["q"], traj.final_q)
