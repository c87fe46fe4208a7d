"""Uses of the simulation gradients: motion control, parameter estimation, and
the first-order RL utilities (sample enhancement and policy enhancement).

All optimizers are plain SGD with a constant learning rate.  The gradient-free
baseline is uniform random search given the same number of simulator calls.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import step as step_
from . import timeline as tl
from .errors import DivergenceDetected, NonFiniteState, ShapeMismatch, ValidationError
from .objectives import ObjectiveSpec, StateTarget, Term, make_objective

ESTIMABLE = ("mu", "restitution", "mass", "damping", "gravity")
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 10


@dataclass(frozen=True)
class OptimizeConfig:
    """SGD settings.  ``threshold`` stops the run once Phi drops to or below it."""

    iterations: int = 100
    learning_rate: float = 0.1
    threshold: float = 0.0
    params: tuple = ("controls",)
    seed: int = 0
    mode: str = tl.CHECKPOINT

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ValueError("iterations must be positive")
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ValueError("learning rate must be a finite non-negative number")
        bad = set(self.params) - {"controls", *ESTIMABLE}
        if bad:
            raise ValueError(f"unknown optimization parameters {sorted(bad)}")

    @classmethod
    def from_scene(cls, scene, **overrides):
        kw = {k: v for k, v in scene.optimizer.items() if k in ("iterations", "learning_rate", "threshold")}
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


class OptimizeResult(NamedTuple):
    """Best iterate and the per-iteration objective values."""

    value: object
    history: list


def iterations_to(history, threshold):
    """First iteration index whose loss is at or below ``threshold``, or None."""
    for i, v in enumerate(history):
        if v <= threshold:
            return i
    return None


class _Divergence:
    def __init__(self, phi0):
        self.phi0 = phi0
        self.run = 0

    def update(self, it, phi):
        bound = DIVERGENCE_FACTOR * abs(self.phi0)
        self.run = self.run + 1 if (not np.isfinite(phi) or phi > bound) else 0
        if self.run >= DIVERGENCE_PATIENCE:
            raise DivergenceDetected(
                f"loss stayed above {DIVERGENCE_FACTOR:g}x its initial value "
                f"{self.phi0:.6g} for {DIVERGENCE_PATIENCE} iterations (iteration {it}, loss {phi:.6g})")


def _evaluate(it, model, x0, U, settings, obj, mode):
    """value_and_grad of one iterate; a blown-up rollout counts as divergence."""
    try:
        with np.errstate(all="ignore"):
            return tl.value_and_grad(model, x0, U, settings, obj, mode=mode)
    except NonFiniteState as exc:
        if it == 0:
            raise
        raise DivergenceDetected(f"rollout became non-finite at iteration {it}: {exc}") from exc


def _objective(model, scene, objective):
    return make_objective(model, scene.objective if objective is None else objective)


def optimize_controls(model, scene, objective, cfg, settings=None, init=None):
    """Gradient descent on the ``(n_t, n_u)`` control array, starting from zero torques.

    Returns the best controls seen and the loss of every evaluated iterate
    (``history[0]`` is the zero-control loss).
    """
    obj = _objective(model, scene, objective)
    settings = settings or step_.StepSettings.from_scene(scene)
    x0 = (scene.q0, scene.qdot0)
    U = np.zeros((scene.steps, model.nu)) if init is None else np.array(init, dtype=float)
    best, best_phi, history = U.copy(), np.inf, []
    guard = None
    for it in range(cfg.iterations + 1):
        rep = _evaluate(it, model, x0, U, settings, obj, cfg.mode)
        history.append(rep.phi)
        if rep.phi < best_phi:
            best, best_phi = U.copy(), rep.phi
        if guard is None:
            guard = _Divergence(rep.phi)
        guard.update(it, rep.phi)
        if rep.phi <= cfg.threshold or it == cfg.iterations:
            break
        U = U - cfg.learning_rate * rep.dphi_du
    return OptimizeResult(best, history)


def random_search(model, scene, objective, budget, seed=0, scale=None, settings=None, workers=None):
    """Uniform random search over controls with ``budget`` simulator calls.

    Candidates are drawn from the box ``[-scale, scale]`` per control entry
    (``scale`` defaults to each joint's effort limit, or 1 when unlimited).
    The zero-control start counts as the first call.  Returns the best
    controls and the best-so-far loss after every call.
    """
    if budget < 1:
        raise ValueError("budget must be positive")
    obj = _objective(model, scene, objective)
    settings = settings or step_.StepSettings.from_scene(scene)
    x0 = (scene.q0, scene.qdot0)
    if scale is None:
        lim = np.array([model.links[i].joint.effort_limit for i in range(model.n_links)
                        if model.links[i].joint.actuated for _ in range(model.links[i].joint.nv)])
        scale = np.where(np.isfinite(lim), lim, 1.0) if lim.size else np.zeros(0)
    rng = np.random.default_rng(seed)
    cands = [np.zeros((scene.steps, model.nu))]
    cands += [rng.uniform(-1.0, 1.0, (scene.steps, model.nu)) * scale for _ in range(budget - 1)]
    trajs = tl.batch_rollout(model, [(x0, U) for U in cands], settings, max_workers=workers)
    losses = [tl.objective_value(model, tr, obj) for tr in trajs]
    best = int(np.argmin(losses))
    return OptimizeResult(cands[best], list(np.minimum.accumulate(losses)))


def apply_parameters(model, settings, theta):
    """Model and step settings with the estimated parameters substituted."""
    kw = {k: np.asarray(theta[k], dtype=float) for k in ("mass", "damping", "gravity") if k in theta}
    if kw:
        model = model.with_params(**kw)
    contact = settings.contact
    if "mu" in theta or "restitution" in theta:
        mat = contact.material
        mat = dataclasses.replace(mat, mu=float(theta.get("mu", mat.mu)),
                                  restitution=float(theta.get("restitution", mat.restitution)))
        contact = dataclasses.replace(contact, material=mat)
    return model, dataclasses.replace(settings, contact=contact, params=frozenset(theta))


def current_parameters(model, settings, names):
    out = {}
    for name in names:
        if name == "mu":
            out[name] = float(settings.contact.material.mu)
        elif name == "restitution":
            out[name] = float(settings.contact.material.restitution)
        elif name == "mass":
            out[name] = np.array([l.mass for l in model.links])
        elif name == "damping":
            out[name] = np.array([l.joint.damping for l in model.links])
        elif name == "gravity":
            out[name] = np.array(model.gravity, dtype=float)
        else:
            raise ValidationError(f"parameter {name!r} cannot be estimated; choose from {ESTIMABLE}")
    return out


def _project(theta):
    """Keep parameters physical: mu >= 0, restitution in [0, 1], masses > 0."""
    out = dict(theta)
    if "mu" in out:
        out["mu"] = max(out["mu"], 0.0)
    if "restitution" in out:
        out["restitution"] = min(max(out["restitution"], 0.0), 1.0)
    if "mass" in out:
        out["mass"] = np.maximum(out["mass"], 1e-9)
    if "damping" in out:
        out["damping"] = np.maximum(out["damping"], 0.0)
    return out


def estimation_objective(scene, target, indices=None):
    """``(x[indices] - target)^2`` on the terminal state.

    ``indices`` defaults to those of the scene's own state_target term.
    """
    if indices is None:
        terms = [t for t in scene.objective.get("terms", []) if t.get("type") == "state_target"]
        if not terms:
            raise ValidationError("scene has no state_target term; pass indices explicitly")
        indices = terms[0]["indices"]
    return ObjectiveSpec([StateTarget(list(indices), np.atleast_1d(np.asarray(target, dtype=float)))])


def estimate_parameters(model, scene, target, mask, cfg, init=None, indices=None, controls=None):
    """Fit the parameters named in ``mask`` so the terminal state hits ``target``.

    ``init`` overrides the starting values (default: the scene's own).
    Returns the best parameter dict and the loss of every evaluated iterate.
    """
    mask = tuple(mask)
    if not mask:
        raise ValueError("parameter mask is empty")
    obj = estimation_objective(scene, target, indices)
    base = step_.StepSettings.from_scene(scene)
    theta = current_parameters(model, base, mask)
    theta.update({k: (float(v) if np.ndim(v) == 0 else np.array(v, dtype=float))
                  for k, v in (init or {}).items()})
    theta = _project(theta)
    U = np.zeros((scene.steps, model.nu)) if controls is None else controls
    best, best_phi, history = dict(theta), np.inf, []
    guard = None
    for it in range(cfg.iterations + 1):
        m, s = apply_parameters(model, base, theta)
        rep = _evaluate(it, m, (scene.q0, scene.qdot0), U, s, obj, cfg.mode)
        history.append(rep.phi)
        if rep.phi < best_phi:
            best, best_phi = dict(theta), rep.phi
        if guard is None:
            guard = _Divergence(rep.phi)
        guard.update(it, rep.phi)
        if rep.phi <= cfg.threshold or it == cfg.iterations:
            break
        theta = _project({k: theta[k] - cfg.learning_rate * (rep.params[k] if np.ndim(theta[k])
                                                             else float(rep.params[k]))
                          for k in theta})
    return OptimizeResult(best, history)


def write_history_csv(path, histories):
    """Write named loss histories as columns ``iteration, <name>...``; short columns are left blank."""
    names = list(histories)
    n = max(len(h) for h in histories.values())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration"] + names)
        for i in range(n):
            w.writerow([i] + [repr(float(histories[k][i])) if i < len(histories[k]) else ""
                              for k in names])


# ---------------------------------------------------------------------------
# RL utilities
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TransitionSample:
    s: np.ndarray
    a0: np.ndarray
    s0_next: np.ndarray
    r0: float
    ds_da: np.ndarray
    dr_da: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a0).reshape(-1)
        sn = np.asarray(self.s0_next).reshape(-1)
        if np.shape(self.ds_da) != (sn.size, a.size):
            raise ShapeMismatch(f"ds_da must be {sn.size}x{a.size}, got {np.shape(self.ds_da)}")
        if np.shape(self.dr_da) != (a.size,):
            raise ShapeMismatch(f"dr_da must have {a.size} entries, got {np.shape(self.dr_da)}")


@dataclass(frozen=True, eq=False)
class PolicyEnhanceInput:
    dr_da: np.ndarray
    gamma: float
    dQnext_ds: np.ndarray
    ds_da: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        na, ns = np.size(self.dr_da), np.size(self.dQnext_ds)
        if np.shape(self.ds_da) != (ns, na):
            raise ShapeMismatch(f"ds_da must be {ns}x{na}, got {np.shape(self.ds_da)}")


def enhance_samples(sample, perturbations):
    """Synthetic transitions ``(a0 + da, s0' + ds/da da, r0 + dr/da . da)`` per perturbation."""
    a0 = np.asarray(sample.a0, dtype=float)
    J = np.asarray(sample.ds_da, dtype=float)
    g = np.asarray(sample.dr_da, dtype=float)
    out = []
    for da in perturbations:
        da = np.asarray(da, dtype=float)
        if da.shape != a0.shape:
            raise ShapeMismatch(f"perturbation shape {da.shape} does not match action {a0.shape}")
        out.append((a0 + da, sample.s0_next + J @ da, float(sample.r0 + g @ da)))
    return out


def policy_enhance_grad(inp):
    """``dQ/da = dr/da + gamma * (dQ(s', mu(s'))/ds') ds'/da``."""
    return np.asarray(inp.dr_da, dtype=float) + inp.gamma * (np.asarray(inp.dQnext_ds) @ np.asarray(inp.ds_da))


def relevance_weight(a, a0):
    """``exp(-|a - a0|)``: how much a synthetic action near ``a0`` should count."""
    a, a0 = np.asarray(a, dtype=float), np.asarray(a0, dtype=float)
    if a.shape != a0.shape:
        raise ShapeMismatch(f"actions differ in shape: {a.shape} vs {a0.shape}")
    return float(np.exp(-np.linalg.norm(a - a0)))


class _TerminalSeed(Term):
    """``w . x`` on the terminal state; one backward pass gives one Jacobian row."""

    def __init__(self, w):
        self.w = w

    def state(self, model, k, nt, x, x_prev):
        if k != nt:
            return 0.0, None, None
        return float(self.w @ x), self.w.copy(), None


def sample_from_step(model, x, u, settings, objective=None, substeps=1):
    """A TransitionSample for one environment step with reward ``-Phi``.

    The action ``u`` is held for ``substeps`` simulator steps (a frame skip).
    ``Phi`` is the objective over that rollout (zero when omitted).  The
    Jacobians come from backward passes over the same rollout.
    """
    if substeps < 1:
        raise ValueError("substeps must be positive")
    q, qd = x[:model.nq], x[model.nq:]
    u = np.asarray(u, dtype=float)
    traj = tl.rollout(model, (q, qd), np.tile(u, (substeps, 1)), settings)
    s_next = np.concatenate(traj.state(substeps))
    ds_da = np.zeros((s_next.size, model.nu))
    for r in range(s_next.size):
        w = np.zeros(s_next.size)
        w[r] = 1.0
        ds_da[r] = tl.backward(model, traj, ObjectiveSpec([_TerminalSeed(w)])).dphi_du.sum(axis=0)
    if objective is None:
        r0, dr = 0.0, np.zeros(model.nu)
    else:
        rep = tl.backward(model, traj, objective)
        r0, dr = -rep.phi, -rep.dphi_du.sum(axis=0)
    return TransitionSample(np.asarray(x, dtype=float), u, s_next, r0, ds_da, dr)
