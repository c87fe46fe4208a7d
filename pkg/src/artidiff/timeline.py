"""Rollouts with per-step checkpoints and the backward adjoint recursion.

The forward pass stores only ``(q, qd, u)`` per step and drops each step's
tape; the backward pass walks the steps in reverse, replays one step from its
checkpoint to rebuild the tape, and applies the step adjoint:

    R^{n_t} = dPhi/dx^{n_t}
    R^k     = dPhi/dx^k + (df/dx^k)^T R^{k+1}
    dPhi/du^k = dl/du^k + (df/du^k)^T R^{k+1}

``full_tape`` mode keeps every tape instead, which gives bit-identical
gradients at far higher memory cost.  Memory is measured by counting the
bytes of stored arrays, not by process RSS.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import step as step_
from .errors import (DimensionMismatch, IncompleteTrajectory, MemoryBudgetExceeded,
                     NonFiniteState, TapeMismatch)
from .model import SystemState, check_state

CHECKPOINT = "checkpoint"
FULL_TAPE = "full_tape"
MODES = (CHECKPOINT, FULL_TAPE)
DEFAULT_MEMORY_BUDGET = 4 * 2**30


@dataclass(frozen=True, eq=False)
class Checkpoint:
    q: np.ndarray
    qd: np.ndarray
    u: np.ndarray
    k: int

    @property
    def nbytes(self):
        return self.q.nbytes + self.qd.nbytes + self.u.nbytes


@dataclass
class MemoryStats:
    mode: str
    checkpoint_bytes: int = 0
    tape_bytes_total: int = 0
    max_tape_bytes: int = 0

    @property
    def peak_aux_bytes(self):
        """Peak auxiliary storage of the forward+backward pass.

        Checkpoint mode holds every checkpoint plus one live tape; full-tape mode
        holds every tape.
        """
        if self.mode == CHECKPOINT:
            return self.checkpoint_bytes + self.max_tape_bytes
        return self.tape_bytes_total

    def to_dict(self):
        return {"mode": self.mode, "checkpoint_bytes": self.checkpoint_bytes,
                "tape_bytes_total": self.tape_bytes_total, "max_tape_bytes": self.max_tape_bytes,
                "peak_aux_bytes": self.peak_aux_bytes}


@dataclass(eq=False)
class Trajectory:
    model: object
    settings: step_.StepSettings
    checkpoints: list
    final_q: np.ndarray
    final_qd: np.ndarray
    mode: str
    tapes: list | None
    memory: MemoryStats
    contact_counts: list
    forward_seconds: float
    n_t: int

    def state(self, k):
        if k == len(self.checkpoints):
            return self.final_q, self.final_qd
        c = self.checkpoints[k]
        return c.q, c.qd

    def states(self):
        """All flat states ``x^0..x^{n_t}`` as an ``(n_t+1, nx)`` array."""
        return np.array([np.concatenate(self.state(k)) for k in range(self.n_t + 1)])

    @property
    def controls(self):
        return np.array([c.u for c in self.checkpoints])

    def rows(self):
        """Export records, one per step ``k = 1..n_t``.

        Each row holds the state reached by step ``k``, the control ``u^{k-1}``
        applied during that step, and the number of contacts it resolved.
        The initial state is the scene's own and is not repeated.
        """
        for k in range(1, self.n_t + 1):
            q, qd = self.state(k)
            yield {"step": k, "q": q.tolist(), "qdot": qd.tolist(),
                   "u": self.checkpoints[k - 1].u.tolist(), "contacts": self.contact_counts[k - 1]}

    def write_csv(self, path):
        m = self.model
        header = (["step"] + [f"q{i}" for i in range(m.nq)] + [f"qdot{i}" for i in range(m.nv)]
                  + [f"u{i}" for i in range(m.nu)] + ["contacts"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in self.rows():
                w.writerow([r["step"]] + [repr(v) for v in r["q"] + r["qdot"] + r["u"]] + [r["contacts"]])

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.rows():
                fh.write(json.dumps(r) + "\n")


def read_controls(path):
    """Control array ``(n_t, n_u)`` from a trajectory export (CSV or JSON lines)."""
    with open(path) as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        return np.array([r["u"] for r in rows], dtype=float).reshape(len(rows), -1)
    reader = csv.reader(text.splitlines())
    header = next(reader)
    cols = [i for i, h in enumerate(header) if h.startswith("u") and h[1:].isdigit()]
    rows = [r for r in reader if r]
    return np.array([[float(r[i]) for i in cols] for r in rows], dtype=float).reshape(len(rows), len(cols))


def _initial_state(model, x0):
    if isinstance(x0, SystemState):
        q, qd = x0.q, x0.qdot
    elif isinstance(x0, tuple):
        q, qd = x0
    else:
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (model.nx,):
            raise DimensionMismatch(f"initial state needs {model.nx} entries")
        q, qd = x0[:model.nq], x0[model.nq:]
    s = check_state(model, np.array(q, dtype=float), np.array(qd, dtype=float), tol=1e-6)
    return s.q, s.qdot


def _controls(model, controls, n_t):
    if controls is None:
        if n_t is None:
            raise ValueError("give controls or n_t")
        return np.zeros((n_t, model.nu))
    u = np.asarray(controls, dtype=float)
    if u.ndim == 1 and model.nu == 0:
        u = u.reshape(-1, 0)
    if u.ndim != 2 or u.shape[1] != model.nu:
        raise DimensionMismatch(f"controls must be an (n_t, {model.nu}) array, got {u.shape}")
    if n_t is not None and u.shape[0] != n_t:
        raise DimensionMismatch(f"expected {n_t} control rows, got {u.shape[0]}")
    if u.shape[0] < 1:
        raise ValueError("n_t must be >= 1")
    if not np.all(np.isfinite(u)):
        raise NonFiniteState("non-finite control input", pass_name="input")
    return u


def rollout(model, x0, controls, settings, n_t=None, mode=CHECKPOINT,
            memory_budget=DEFAULT_MEMORY_BUDGET):
    """Simulate ``n_t`` steps from ``x0``.

    ``memory_budget`` bounds the counted auxiliary storage.  After the first
    step the full projected need is checked so an oversized request fails
    fast with MemoryBudgetExceeded.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    q, qd = _initial_state(model, x0)
    U = _controls(model, controls, n_t)
    n_t = U.shape[0]
    mem = MemoryStats(mode)
    checkpoints, tapes, counts = [], [] if mode == FULL_TAPE else None, []
    t0 = time.perf_counter()
    for k in range(n_t):
        u = U[k].copy()
        ck = Checkpoint(q, qd, u, k)
        q_new, qd_new, tape = step_.step_forward(model, q, qd, u, settings, step=k)
        nb = tape.nbytes()
        mem.checkpoint_bytes += ck.nbytes
        mem.max_tape_bytes = max(mem.max_tape_bytes, nb)
        mem.tape_bytes_total += nb
        if k == 0:
            per_step = nb if mode == FULL_TAPE else ck.nbytes
            projected = n_t * per_step + (nb if mode == CHECKPOINT else 0)
            if projected > memory_budget:
                raise MemoryBudgetExceeded(projected, memory_budget)
        if mem.peak_aux_bytes > memory_budget:
            raise MemoryBudgetExceeded(mem.peak_aux_bytes, memory_budget)
        checkpoints.append(ck)
        counts.append(tape.n_contacts)
        if tapes is not None:
            tapes.append(tape)
        # the tape of a checkpointed step is dropped here and rebuilt in backward
        q, qd = q_new, qd_new
    elapsed = time.perf_counter() - t0
    return Trajectory(model, settings, checkpoints, q, qd, mode, tapes, mem, counts, elapsed, n_t)


def batch_rollout(model, jobs, settings, mode=CHECKPOINT, max_workers=None):
    """Run independent ``(x0, controls)`` rollouts on a thread pool; results keep job order."""
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda job: rollout(model, job[0], job[1], settings, mode=mode), jobs))


@dataclass
class GradientReport:
    phi: float
    dphi_du: np.ndarray
    dphi_dx0: np.ndarray
    params: dict
    memory: dict
    timing: dict = field(default_factory=dict)

    def to_dict(self, timing=True):
        d = {"phi": self.phi, "dphi_du": self.dphi_du.tolist(), "dphi_dx0": self.dphi_dx0.tolist(),
             "params": {k: np.asarray(v).tolist() for k, v in sorted(self.params.items())},
             "memory": self.memory}
        if timing:
            d["timing"] = self.timing
        return d

    def to_json(self, timing=True):
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True)


def objective_value(model, traj, objective):
    """Phi of a finished trajectory (forward only)."""
    phi = 0.0
    nt = traj.n_t
    prev = None
    for k in range(nt + 1):
        x = np.concatenate(traj.state(k))
        phi += objective.state(model, k, nt, x, x if prev is None else prev)[0]
        if k < nt:
            phi += objective.control(k, nt, traj.checkpoints[k].u)[0]
        prev = x
    return phi


def backward(model, traj, objective):
    """Gradient of ``objective`` over ``traj`` by the reverse-time adjoint recursion."""
    nt = traj.n_t
    if len(traj.checkpoints) != nt or (traj.mode == FULL_TAPE and len(traj.tapes) != nt):
        raise IncompleteTrajectory("trajectory is missing steps")
    settings = traj.settings
    nq = model.nq
    x_final = np.concatenate(traj.state(nt))
    x_prev = np.concatenate(traj.state(nt - 1))
    phi, R, R_prev = objective.state(model, nt, nt, x_final, x_prev)
    dphi_du = np.zeros((nt, model.nu))
    params = step_.zero_params(model, settings.params)
    t_replay = t_adjoint = 0.0
    for k in range(nt - 1, -1, -1):
        ck = traj.checkpoints[k]
        t0 = time.perf_counter()
        if traj.mode == FULL_TAPE:
            tape = traj.tapes[k]
        else:
            _, _, tape = step_.step_forward(model, ck.q, ck.qd, ck.u, settings, step=k)
        t1 = time.perf_counter()
        if tape.q.shape != (nq,) or tape.u.shape != (model.nu,):
            raise TapeMismatch(f"tape of step {k} does not match the model")
        adj = step_.step_adjoint(model, tape, settings, R[:nq], R[nq:])
        t_adjoint += time.perf_counter() - t1
        t_replay += t1 - t0
        vu, gu = objective.control(k, nt, ck.u)
        phi += vu
        dphi_du[k] = adj.ubar + gu
        for name, val in adj.params.items():
            params[name] = params[name] + val
        x = np.concatenate((ck.q, ck.qd))
        xp = np.concatenate(traj.state(k - 1)) if k > 0 else x
        vs, gs, gp = objective.state(model, k, nt, x, xp)
        phi += vs
        R = np.concatenate((adj.qbar, adj.qdbar)) + gs + R_prev
        R_prev = gp
    timing = {"forward_s": traj.forward_seconds, "replay_s": t_replay, "adjoint_s": t_adjoint,
              "forward_ms_per_step": 1e3 * traj.forward_seconds / nt,
              "backward_ms_per_step": 1e3 * (t_replay + t_adjoint) / nt}
    return GradientReport(float(phi), dphi_du, R, params, traj.memory.to_dict(), timing)


def value_and_grad(model, x0, controls, settings, objective, mode=CHECKPOINT):
    traj = rollout(model, x0, controls, settings, mode=mode)
    return backward(model, traj, objective)


def loss(model, x0, controls, settings, objective):
    """Forward-only objective value of a rollout."""
    return objective_value(model, rollout(model, x0, controls, settings), objective)


class CostPrediction(NamedTuple):
    time_per_backward_step: float
    peak_memory: float


def predict_cost(k, n, t_fwd, t_bwd, m_ckpt, m_sim):
    """Cost model for checkpointing every ``k`` steps over ``n`` steps.

    Rebuilding a step replays on average ``(k+1)/2`` forward steps, so a
    backward step costs ``(k+1)/2 * t_fwd + t_bwd``; memory holds ``n/k``
    checkpoints plus one simulation's working set.
    """
    if k <= 0 or n <= 0:
        raise ValueError("k and n must be positive")
    return CostPrediction((k + 1) / 2 * t_fwd + t_bwd, n / k * m_ckpt + m_sim)
