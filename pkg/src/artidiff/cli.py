"""Command-line entry point.

Exit codes: 0 ok, 2 input error, 3 numeric failure, 4 gradient-check failure,
5 optimizer divergence, 6 memory budget exceeded.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import applications as app
from . import gradcheck as gc
from . import timeline as tl
from .errors import (DimensionMismatch, DivergenceDetected, MemoryBudgetExceeded, NonFiniteProbe,
                     NonFiniteState, ParseError, SingularMatrix, ValidationError, ZeroDiagonal,
                     ZeroNormQuaternion)
from .model import read_scene
from .objectives import make_objective
from .step import StepSettings

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_CHECK = 4
EXIT_DIVERGED = 5
EXIT_MEMORY = 6


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) <= 0:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


def _positive_int(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _assignments(pairs):
    out = {}
    for p in pairs or []:
        name, sep, val = p.partition("=")
        if not sep:
            raise ValidationError(f"expected NAME=VALUE, got {p!r}")
        vals = [float(v) for v in val.split(",")]
        out[name] = vals[0] if len(vals) == 1 else np.array(vals)
    return out


def _settings(scene, args):
    kw = {}
    if getattr(args, "dt", None) is not None:
        kw["dt"] = args.dt
    if getattr(args, "integrator", None):
        kw["integrator"] = args.integrator
    return StepSettings.from_scene(scene, **kw)


def _steps(scene, args):
    return args.steps if getattr(args, "steps", None) else scene.steps


def _out_dir(args):
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    scene = read_scene(args.scene)
    settings = _settings(scene, args)
    n_t = _steps(scene, args)
    if args.controls:
        U = tl.read_controls(args.controls)
        if args.steps and U.shape[0] != n_t:
            raise DimensionMismatch(f"{args.controls} holds {U.shape[0]} control rows, expected {n_t}")
    else:
        U = np.zeros((n_t, scene.model.nu))
    traj = tl.rollout(scene.model, (scene.q0, scene.qdot0), U, settings, mode=args.mode,
                      memory_budget=args.memory_budget)
    out = Path(args.out or f"{scene.name}_trajectory.{'jsonl' if args.format == 'jsonl' else 'csv'}")
    if args.format == "jsonl":
        traj.write_jsonl(out)
    else:
        traj.write_csv(out)
    print(f"scene: {scene.name}")
    print(f"steps: {traj.n_t}")
    print(f"ms_per_step: {1e3 * traj.forward_seconds / traj.n_t:.4f}")
    print(f"contacts_total: {sum(traj.contact_counts)}")
    print(f"contacts_max_per_step: {max(traj.contact_counts)}")
    print(f"peak_aux_bytes: {traj.memory.peak_aux_bytes}")
    print(f"trajectory: {out}")
    return EXIT_OK


def grad_check_report(scene, trials, seed, coords, corrupt=None, rtol=1e-5, e2e_rtol=1e-4):
    """Run the dot tests and the rollout check; returns ``(ok, lines)``."""
    lines = [f"grad-check scene={scene.name} trials={trials} seed={seed}"]
    ops = gc.operator_registry()
    if corrupt is not None:
        if corrupt not in ops:
            raise ValidationError(f"unknown operator {corrupt!r}; known: {sorted(ops)}")
        ops[corrupt] = gc.corrupted(ops[corrupt])
    worst = None
    for i, name in enumerate(sorted(ops)):
        res = gc.adjoint_dot_test(ops[name], trials=trials, seed=seed + i, rtol=rtol)
        status = "ok" if res.passed else "FAIL"
        idx = "" if res.passed else f" failing_trial={res.failing_index}"
        lines.append(f"op {name:<26s} worst_rel_err={res.worst_rel_error:.3e} seed={res.seed} {status}{idx}")
        if worst is None or res.worst_rel_error > worst.worst_rel_error:
            worst = res
    e2e = gc.rollout_gradient_check(scene, coords=coords, seed=seed, cfg=gc.FdConfig(rtol=e2e_rtol))
    status = "ok" if e2e.passed else "FAIL"
    idx = "" if e2e.passed else f" failing_coordinate={e2e.failing_index}"
    lines.append(f"rollout {scene.name} coords={len(e2e.details['coordinates'])} steps={e2e.details['steps']} "
                 f"worst_rel_err={e2e.worst_rel_error:.3e} {status}{idx}")
    ops_ok = all("FAIL" not in ln for ln in lines[1:-1])
    ok = ops_ok and e2e.passed
    if not ops_ok:
        lines.append(f"worst operator: {worst.name} trial={worst.failing_index} seed={worst.seed} "
                     f"rel_err={worst.worst_rel_error:.3e}")
    lines.append("result: " + ("pass" if ok else "fail"))
    return ok, lines


def cmd_grad_check(args):
    scene = read_scene(args.scene)
    ok, lines = grad_check_report(scene, args.trials, args.seed, args.coords, args.corrupt_adjoint)
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK if ok else EXIT_CHECK


def profile_rows(scene, steps_list, intervals, memory_budget, settings, seed=0):
    """One row per (steps, mode) cell plus predict_cost columns per interval."""
    model = scene.model
    obj = make_objective(model, scene.objective)
    rng = np.random.default_rng(seed)
    rows = []
    for n_t in steps_list:
        U = 0.1 * rng.standard_normal((n_t, model.nu))
        measured = {}
        for mode in tl.MODES:
            row = {"steps": n_t, "mode": mode}
            try:
                traj = tl.rollout(model, (scene.q0, scene.qdot0), U, settings, mode=mode,
                                  memory_budget=memory_budget)
                rep = tl.backward(model, traj, obj)
            except MemoryBudgetExceeded as exc:
                row.update(status="memory_budget_exceeded", peak_aux_bytes=exc.requested)
                rows.append(row)
                continue
            t = rep.timing
            row.update(status="ok", peak_aux_bytes=traj.memory.peak_aux_bytes,
                       checkpoint_bytes=traj.memory.checkpoint_bytes,
                       forward_ms_per_step=t["forward_ms_per_step"],
                       backward_ms_per_step=t["backward_ms_per_step"])
            measured[mode] = (traj, t)
            rows.append(row)
        if tl.CHECKPOINT in measured:
            traj, t = measured[tl.CHECKPOINT]
            t_fwd = t["forward_s"] / n_t
            t_bwd = t["adjoint_s"] / n_t
            m_ckpt = traj.checkpoints[0].nbytes
            m_sim = traj.memory.max_tape_bytes
            for k in intervals:
                pred = tl.predict_cost(k, n_t, t_fwd, t_bwd, m_ckpt, m_sim)
                rows.append({"steps": n_t, "mode": f"predict_k{k}", "status": "model",
                             "peak_aux_bytes": int(np.ceil(pred.peak_memory)),
                             "backward_ms_per_step": 1e3 * pred.time_per_backward_step})
    return rows


PROFILE_COLUMNS = ("steps", "mode", "status", "peak_aux_bytes", "checkpoint_bytes",
                   "forward_ms_per_step", "backward_ms_per_step")


def cmd_profile(args):
    scene = read_scene(args.scene)
    rows = profile_rows(scene, args.steps, args.intervals, args.memory_budget, _settings(scene, args),
                        seed=args.seed)
    widths = (7, 14, 24, 16, 18, 21, 22)
    print("".join(f"{c:>{w}s}" for c, w in zip(PROFILE_COLUMNS, widths)))
    for r in rows:
        cells = []
        for c, w in zip(PROFILE_COLUMNS, widths):
            v = r.get(c, "")
            cells.append(f"{v:>{w}.4f}" if isinstance(v, float) else f"{str(v):>{w}s}")
        print("".join(cells))
    if args.out:
        import csv
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=PROFILE_COLUMNS)
            w.writeheader()
            for r in rows:
                w.writerow({c: r.get(c, "") for c in PROFILE_COLUMNS})
    return EXIT_OK


def cmd_optimize(args):
    scene = read_scene(args.scene)
    cfg = app.OptimizeConfig.from_scene(scene, iterations=args.iterations, learning_rate=args.lr,
                                        threshold=args.threshold, seed=args.seed)
    settings = _settings(scene, args)
    out = _out_dir(args)
    t0 = time.perf_counter()
    res = app.optimize_controls(scene.model, scene, None, cfg, settings=settings)
    elapsed = time.perf_counter() - t0
    hist = res.history
    histories = {"sgd": hist}
    thr = args.threshold if args.threshold else 0.05 * hist[0]
    print(f"scene: {scene.name}")
    print(f"initial_loss: {hist[0]:.6g}")
    print(f"best_loss: {min(hist):.6g}")
    print(f"reduction: {1 - min(hist) / hist[0] if hist[0] else 0.0:.4f}")
    it = app.iterations_to(hist, thr)
    print(f"iterations_to_threshold({thr:.4g}): {it if it is not None else 'not reached'}")
    print(f"seconds: {elapsed:.3f}")
    if args.baseline == "random-search":
        # each SGD iteration costs one rollout plus one replay in backward
        budget = 2 * len(hist)
        rs = app.random_search(scene.model, scene, None, budget, seed=args.seed, settings=settings)
        histories["random_search"] = rs.history
        print(f"random_search_budget: {budget}")
        print(f"random_search_best_loss: {rs.history[-1]:.6g}")
    app.write_history_csv(out / f"{scene.name}_loss_history.csv", histories)
    traj = tl.rollout(scene.model, (scene.q0, scene.qdot0), res.value, settings)
    traj.write_csv(out / f"{scene.name}_controls.csv")
    print(f"outputs: {out / f'{scene.name}_loss_history.csv'} {out / f'{scene.name}_controls.csv'}")
    return EXIT_OK


def cmd_estimate(args):
    scene = read_scene(args.scene)
    model = scene.model
    cfg = app.OptimizeConfig.from_scene(scene, iterations=args.iterations, learning_rate=args.lr,
                                        threshold=args.threshold, seed=args.seed,
                                        params=tuple(args.param))
    init = _assignments(args.init)
    unknown = set(init) - set(args.param)
    if unknown:
        raise ValidationError(f"--init names parameters not in --param: {sorted(unknown)}")
    if args.target is not None:
        target = np.array(args.target, dtype=float)
        truth = None
    else:
        # synthetic data: the scene's own parameters generate the observation
        obj = app.estimation_objective(scene, [0.0])
        idx = obj.terms[0].indices
        settings = StepSettings.from_scene(scene)
        traj = tl.rollout(model, (scene.q0, scene.qdot0), np.zeros((scene.steps, model.nu)), settings)
        target = np.concatenate(traj.state(traj.n_t))[idx]
        truth = app.current_parameters(model, settings, args.param)
    res = app.estimate_parameters(model, scene, target, args.param, cfg, init=init)
    out = _out_dir(args)
    app.write_history_csv(out / f"{scene.name}_estimate_history.csv", {"loss": res.history})
    est = {k: np.asarray(v).tolist() for k, v in res.value.items()}
    doc = {"scene": scene.name, "target": target.tolist(), "estimate": est,
           "iterations": len(res.history) - 1, "final_loss": min(res.history)}
    if truth is not None:
        doc["truth"] = {k: np.asarray(v).tolist() for k, v in truth.items()}
    (out / f"{scene.name}_estimate.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"scene: {scene.name}")
    for k, v in sorted(est.items()):
        print(f"estimate {k}: {v}")
        if truth is not None:
            print(f"truth {k}: {np.asarray(truth[k]).tolist()}")
    it = app.iterations_to(res.history, cfg.threshold) if cfg.threshold else None
    print(f"iterations: {len(res.history) - 1}")
    if cfg.threshold:
        print(f"iterations_to_threshold({cfg.threshold:g}): {it if it is not None else 'not reached'}")
    print(f"final_loss: {min(res.history):.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="artidiff", description="Differentiable articulated-body simulation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, steps=True):
        sp.add_argument("--scene", required=True, help="scene file path or bundled scene name")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--dt", type=_positive_float)
        sp.add_argument("--integrator", choices=("explicit", "symplectic"))
        if steps:
            sp.add_argument("--steps", type=_positive_int)

    s = sub.add_parser("simulate", help="roll out a scene and export the trajectory")
    common(s)
    s.add_argument("--mode", choices=tl.MODES, default=tl.CHECKPOINT)
    s.add_argument("--controls", help="trajectory export whose u columns are replayed")
    s.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    s.add_argument("--out", help="trajectory output path")
    s.add_argument("--memory-budget", type=_positive_int, default=tl.DEFAULT_MEMORY_BUDGET,
                   help="auxiliary storage budget in bytes")
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("grad-check", help="operator dot tests plus a rollout gradient check")
    common(g, steps=False)
    g.add_argument("--trials", type=_positive_int, default=100)
    g.add_argument("--coords", type=_positive_int, default=20)
    g.add_argument("--out", help="also write the report to this file")
    g.add_argument("--corrupt-adjoint", metavar="OP", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_grad_check)

    pr = sub.add_parser("profile", help="memory and time per step for both storage modes")
    common(pr, steps=False)
    pr.add_argument("--steps", type=_int_list, default=[100, 1000])
    pr.add_argument("--intervals", type=_int_list, default=[1, 10, 100])
    pr.add_argument("--memory-budget", type=_positive_int, default=tl.DEFAULT_MEMORY_BUDGET)
    pr.add_argument("--out", help="CSV output path")
    pr.set_defaults(func=cmd_profile)

    o = sub.add_parser("optimize", help="optimize controls by gradient descent")
    common(o, steps=False)
    o.add_argument("--iterations", type=_positive_int)
    o.add_argument("--lr", type=float)
    o.add_argument("--threshold", type=float)
    o.add_argument("--baseline", choices=("none", "random-search"), default="none")
    o.add_argument("--out-dir", default=".")
    o.set_defaults(func=cmd_optimize)

    e = sub.add_parser("estimate", help="estimate physical parameters from a terminal observation")
    common(e, steps=False)
    e.add_argument("--param", action="append", choices=app.ESTIMABLE, required=True)
    e.add_argument("--init", action="append", metavar="NAME=VALUE", help="starting value, e.g. mu=0.02")
    e.add_argument("--target", type=float, nargs="+",
                   help="observed terminal values; default simulates the scene's own parameters")
    e.add_argument("--iterations", type=_positive_int)
    e.add_argument("--lr", type=float)
    e.add_argument("--threshold", type=float)
    e.add_argument("--out-dir", default=".")
    e.set_defaults(func=cmd_estimate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ParseError, ValidationError, DimensionMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NonFiniteState, NonFiniteProbe, SingularMatrix, ZeroDiagonal, ZeroNormQuaternion) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DivergenceDetected as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except MemoryBudgetExceeded as exc:
        print(f"memory budget exceeded: {exc}", file=sys.stderr)
        return EXIT_MEMORY


if __name__ == "__main__":
    sys.exit(main())
