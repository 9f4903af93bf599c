"""Command-line experiment runner.

Subcommands ``simulate``, ``tune``, ``check-grad`` and ``compare-baseline``
read an experiment config and write CSV / JSON artifacts to ``--out``.

Exit codes: 0 success, 2 config error, 3 infeasible rollout, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from bpmpc import config as cfgmod
from bpmpc.closed_loop import rollout, trajectory_csv
from bpmpc.errors import (
    ConfigError,
    InfeasibleProblem,
    MaxIterReached,
    NoConvergence,
    ParameterBoundExceeded,
    SingularMassMatrix,
    SingularU,
)
from bpmpc.tuner import evaluate, log_csv, tune

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("bpmpc")


def _floats(a):
    return [float(v) for v in np.asarray(a, dtype=float).reshape(-1)]


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_json(path: Path, obj):
    _write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_params(path) -> np.ndarray:
    """Load a parameter vector from JSON: a list, or an object with ``p`` or ``p_star``."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("--params", f"cannot read parameters: {exc}") from None
    if isinstance(data, dict):
        data = data.get("p_star", data.get("p"))
    if not isinstance(data, list):
        raise ConfigError("--params", "expected a list or an object with key 'p'")
    return np.asarray(data, dtype=float)


def _setup(args):
    cfg = cfgmod.load(args.config)
    if getattr(args, "max_iters", None) is not None:
        cfg = cfg.replace("tuner", max_iters=args.max_iters)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace("experiment", seed=args.seed)
    problem = cfgmod.build_problem(cfg)
    p = cfgmod.initial_params(cfg, problem)
    if getattr(args, "params", None):
        p = read_params(args.params)
        if p.shape != (problem.n_p,):
            raise ConfigError("--params", f"expected {problem.n_p} parameters, got {p.size}")
    out = Path(args.out if args.out is not None else cfg.experiment.output)
    return cfg, problem, p, out


def _summary(ev, problem):
    traj = ev.trajectory
    return {
        "cost": ev.cost,
        "penalty": ev.penalty,
        "violation_sum": ev.violation_sum,
        "violation_max": ev.violation_max,
        "eps_max": float(traj.slacks.max(initial=0.0)),
        "final_state": _floats(traj.states[-1]),
        "qp_iterations_total": int(traj.qp_iterations.sum()),
        "qp_iterations_max": int(traj.qp_iterations.max()),
        "T": problem.T,
    }


def cmd_simulate(args) -> int:
    cfg, problem, p, out = _setup(args)
    noise = cfgmod.noise_sequence(cfg)
    tu = cfg.tuner
    ev = evaluate(problem, p, tu.penalty_linear, tu.penalty_quadratic, with_gradient=False, noise=noise)
    _write(out / "trajectory.csv", trajectory_csv(ev.trajectory, cfg.model.dt))
    summary = _summary(ev, problem)
    summary["p"] = _floats(p)
    summary["seed"] = cfg.experiment.seed
    _write_json(out / "summary.json", summary)
    print(f"cost {ev.cost:.6g}  violation {ev.violation_sum:.3g}  -> {out}")
    return EXIT_OK


def _tune_and_write(cfg, problem, p0, out: Path, penalties: bool, prefix: str = ""):
    tcfg = cfgmod.build_tune_config(cfg, penalties=penalties)
    every = max(1, tcfg.max_iters // 20)

    def progress(rec):
        if rec.k % every == 0 or rec.k == 1:
            log.info("k=%d cost=%.6g penalty=%.4g |J|=%.3e", rec.k, rec.cost, rec.penalty, rec.grad_norm)

    result = tune(problem, p0, tcfg, callback=progress)
    _write(out / f"{prefix}tune_log.csv", log_csv(result))
    _write(out / f"{prefix}trajectory.csv", trajectory_csv(result.final.trajectory, cfg.model.dt))
    record = {
        "p0": _floats(p0),
        "p_star": _floats(result.p_star),
        "stop_reason": result.stop_reason,
        "iterations": len(result.log),
        "initial_cost": result.log[0].cost if result.log else result.final.cost,
        "final": _summary(result.final, problem),
    }
    _write_json(out / f"{prefix}p_star.json", record)
    return result, record


def cmd_tune(args) -> int:
    cfg, problem, p, out = _setup(args)
    result, record = _tune_and_write(cfg, problem, p, out, penalties=True)
    print(f"{record['iterations']} iterations ({result.stop_reason}): cost "
          f"{record['initial_cost']:.6g} -> {result.final.cost:.6g}  -> {out}")
    return EXIT_OK


def gradient_check(problem, p, fd_step: float, c3_linear=0.0, c3_quad=0.0) -> dict:
    """Backprop gradient against central differences, flagging active-set changes."""
    ev = evaluate(problem, p, c3_linear, c3_quad, with_gradient=True)
    nominal = ev.trajectory.active_sets
    n = p.size
    fd = np.zeros(n)
    flagged = np.zeros(n, dtype=bool)
    for j in range(n):
        h = fd_step * max(1.0, abs(p[j]))
        e = np.zeros(n)
        e[j] = h
        plus = evaluate(problem, p + e, c3_linear, c3_quad, with_gradient=False)
        minus = evaluate(problem, p - e, c3_linear, c3_quad, with_gradient=False)
        fd[j] = (plus.objective - minus.objective) / (2 * h)
        flagged[j] = any(
            set(a) != set(b) or set(a) != set(c)
            for a, b, c in zip(plus.trajectory.active_sets, minus.trajectory.active_sets, nominal)
        )
    keep = ~flagged
    denom = np.linalg.norm(fd[keep])
    diff = np.linalg.norm(ev.gradient[keep] - fd[keep])
    rel = float(diff / denom) if denom > 0 else float(diff)
    # entries far below the gradient's scale are compared against that scale, not against roundoff
    scale = np.maximum(np.abs(fd), 1e-6 * np.abs(fd).max(initial=0.0))
    per = np.abs(ev.gradient - fd) / np.where(scale > 0, scale, 1.0)
    return {
        "objective": ev.objective,
        "backprop": _floats(ev.gradient),
        "finite_difference": _floats(fd),
        "relative_error": _floats(per),
        "flagged": [int(j) for j in np.flatnonzero(flagged)],
        "relative_error_unflagged": rel,
        "fd_step": fd_step,
    }


def cmd_check_grad(args) -> int:
    cfg, problem, p, out = _setup(args)
    tu = cfg.tuner
    report = gradient_check(problem, p, args.fd_step, tu.penalty_linear, tu.penalty_quadratic)
    _write_json(out / "grad_check.json", report)
    print(f"relative error (unflagged) {report['relative_error_unflagged']:.3e}, "
          f"flagged {report['flagged']}  -> {out}")
    return EXIT_OK


def compare_baseline(cfg, problem, p0, out: Path) -> dict:
    """Riccati baseline against tuning with and without the closed-loop slack penalty."""
    tu = cfg.tuner
    base = evaluate(problem, p0, tu.penalty_linear, tu.penalty_quadratic, with_gradient=False)
    _write(out / "dare_trajectory.csv", trajectory_csv(base.trajectory, cfg.model.dt))
    with_pen, _ = _tune_and_write(cfg, problem, p0, out, penalties=True, prefix="penalty_")
    without, _ = _tune_and_write(cfg, problem, p0, out, penalties=False, prefix="no_penalty_")

    def row(ev):
        return {"cost": ev.cost, "violation": ev.violation_sum, "violation_max": ev.violation_max}

    table = {
        "DARE": row(base),
        "BP-MPC (penalty)": row(with_pen.final),
        "BP-MPC (no penalty)": row(without.final),
        "iterations": tu.max_iters,
    }
    _write_json(out / "comparison.json", table)
    return table


def cmd_compare_baseline(args) -> int:
    cfg, problem, p, out = _setup(args)
    table = compare_baseline(cfg, problem, p, out)
    for name in ("DARE", "BP-MPC (penalty)", "BP-MPC (no penalty)"):
        r = table[name]
        print(f"{name:22s} cost {r['cost']:12.4f}  violation {r['violation']:10.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bpmpc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log tuner progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, params=True):
        sp.add_argument("--config", required=True,
                        help="INI or JSON config path, or a bundled name such as swingup_a")
        sp.add_argument("--out", default=None, help="output directory (default: experiment.output)")
        sp.add_argument("--seed", type=int, default=None, help="override experiment.seed")
        if params:
            sp.add_argument("--params", default=None, help="JSON parameter vector (default: Riccati init)")

    sp = sub.add_parser("simulate", help="one closed-loop rollout at fixed parameters")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("tune", help="projected-gradient tuning")
    common(sp)
    sp.add_argument("--max-iters", type=int, default=None, help="override tuner.max_iters")
    sp.set_defaults(func=cmd_tune)

    sp = sub.add_parser("check-grad", help="backprop gradient against finite differences")
    common(sp)
    sp.add_argument("--fd-step", type=float, default=1e-6, help="relative central-difference step")
    sp.set_defaults(func=cmd_check_grad)

    sp = sub.add_parser("compare-baseline", help="Riccati baseline vs tuned, with and without penalty")
    common(sp)
    sp.add_argument("--max-iters", type=int, default=None, help="override tuner.max_iters")
    sp.set_defaults(func=cmd_compare_baseline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleProblem as exc:
        it = getattr(exc, "iteration", None)
        where = f" (tuner iteration {it})" if it is not None else ""
        print(f"infeasible: {exc}{where}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SingularU, NoConvergence, MaxIterReached, SingularMassMatrix, ParameterBoundExceeded) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
