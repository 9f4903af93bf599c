"""Projected-gradient tuning of MPC parameters for closed-loop performance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from bpmpc.closed_loop import (
    ClosedLoopProblem,
    closed_loop_cost,
    rollout,
    rollout_with_jacobians,
    state_violation,
    total_gradient,
)
from bpmpc.errors import EmptyPolytope, InfeasibleAt, ParameterBoundExceeded
from bpmpc.qp import QpInstance, SolveStatus, solve_qp


def step_size(k: int, rho: float, eta: float) -> float:
    """``rho log(k+1) / (k+1)^eta`` for iteration index ``k >= 1``."""
    if k < 1:
        raise ValueError("iteration index starts at 1")
    return rho * math.log(k + 1) / (k + 1) ** eta


# --------------------------------------------------------------------------
# Parameter sets
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        lo, hi = np.broadcast_arrays(lo, hi)
        if np.any(lo > hi):
            raise EmptyPolytope("box has lower > upper")
        object.__setattr__(self, "lower", lo.copy())
        object.__setattr__(self, "upper", hi.copy())

    def contains(self, p, tol=0.0) -> bool:
        return bool(np.all(p >= self.lower - tol) and np.all(p <= self.upper + tol))


@dataclass(frozen=True, eq=False)
class Polytope:
    """``{p : A p <= b}``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise ValueError("A and b row counts differ")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    def contains(self, p, tol=0.0) -> bool:
        return bool(np.all(self.A @ p <= self.b + tol))


def project_params(p, polytope=None) -> np.ndarray:
    """Euclidean projection of ``p`` onto ``polytope`` (``None`` means no constraint).

    Boxes are clipped, a single half-space uses the closed form, anything else
    is solved as a small QP. Points already inside are returned unchanged.
    """
    p = np.array(p, dtype=float).reshape(-1)
    if polytope is None:
        return p
    if isinstance(polytope, Box):
        return np.minimum(np.maximum(p, polytope.lower), polytope.upper)
    A, b = polytope.A, polytope.b
    if polytope.contains(p):
        return p
    if A.shape[0] == 1:
        a = A[0]
        nrm2 = a @ a
        if nrm2 == 0.0:
            raise EmptyPolytope("half-space 0'p <= b with b < 0 is empty")
        return p - (a @ p - b[0]) / nrm2 * a
    qp = QpInstance(Q=np.eye(p.size), q=-p, G=A, g=b)
    sol = solve_qp(qp, tol=1e-12)
    if sol.status is SolveStatus.INFEASIBLE:
        raise EmptyPolytope("parameter polytope is empty")
    return sol.y


# --------------------------------------------------------------------------
# Objective
# --------------------------------------------------------------------------

def penalty_objective(slacks, base_cost: float, c3_linear: float, c3_quad: float) -> float:
    """``base_cost + c3_linear sum(eps) + c3_quad sum(eps^2)`` over all slacks (eps >= 0)."""
    eps = np.asarray(slacks, dtype=float)
    return float(base_cost + c3_linear * np.abs(eps).sum() + c3_quad * np.sum(eps * eps))


def penalty_gradient(slacks, c3_linear: float, c3_quad: float) -> np.ndarray:
    eps = np.asarray(slacks, dtype=float)
    return c3_linear * np.sign(eps) + 2.0 * c3_quad * eps


@dataclass
class Evaluation:
    """Closed-loop objective at one parameter value."""

    cost: float
    penalty: float
    violation_sum: float
    violation_max: float
    gradient: np.ndarray = None
    trajectory: object = None
    stack: object = None

    @property
    def objective(self) -> float:
        return self.cost + self.penalty


def evaluate(problem: ClosedLoopProblem, p, c3_linear=0.0, c3_quad=0.0, with_gradient=True, noise=None) -> Evaluation:
    """Roll out at ``p`` and return cost, slack penalty, violation, and gradient."""
    if with_gradient:
        traj, stack = rollout_with_jacobians(problem, p)
    else:
        traj, stack = rollout(problem, p, noise=noise), None
    cost, cgrad = closed_loop_cost(traj, problem.Qx, problem.input_weight)
    base = penalty_objective(traj.slacks, 0.0, c3_linear, c3_quad)
    _, vsum, vmax = state_violation(traj, problem.Hx, problem.hx)
    grad = None
    if with_gradient:
        blocks = dict(cgrad)
        if traj.slacks.shape[1] and (c3_linear or c3_quad):
            blocks["eps"] = penalty_gradient(traj.slacks, c3_linear, c3_quad)
        grad = total_gradient(blocks, stack)
    return Evaluation(cost, base, vsum, vmax, grad, traj, stack)


# --------------------------------------------------------------------------
# Outer loop
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TuneConfig:
    rho: float = 5e-4
    eta: float = 0.51
    max_iters: int = 500
    grad_tol: float = 0.0
    param_tol: float = 0.0
    projection: object = None
    penalty_c3_linear: float = 0.0
    penalty_quadratic: float = 0.0
    param_cap: float = 1e6
    mode: str = "hard"

    def __post_init__(self):
        if self.mode not in ("hard", "soft"):
            raise ValueError("mode must be 'hard' or 'soft'")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not (0.5 < self.eta <= 1.0):
            raise ValueError("eta must lie in (0.5, 1] for a square-summable, non-summable schedule")
        if int(self.max_iters) < 0:
            raise ValueError("max_iters must be nonnegative")


@dataclass
class IterationRecord:
    k: int
    alpha: float
    cost: float
    penalty: float
    violation_sum: float
    violation_max: float
    grad_norm: float
    p: np.ndarray

    @property
    def objective(self) -> float:
        return self.cost + self.penalty


@dataclass
class TuneResult:
    p_star: np.ndarray
    log: list
    stop_reason: str
    final: Evaluation = None
    extra: dict = field(default_factory=dict)


LOG_COLUMNS = ("k", "alpha", "cost", "penalty", "objective", "violation_sum", "violation_max", "grad_norm")


def tune(problem: ClosedLoopProblem, p0, config: TuneConfig, callback=None) -> TuneResult:
    """Run ``p <- Proj[p - alpha_k J]`` with ``J`` the closed-loop gradient.

    Stops after ``max_iters`` iterations, when ``|J| <= grad_tol``, or when
    ``|p_new - p| < param_tol``. In hard mode an infeasible MPC problem raises
    :class:`InfeasibleAt` with ``iteration`` and ``partial`` attributes.
    """
    p = project_params(p0, config.projection)
    log = []
    stop = "max_iters"
    c3l, c3q = config.penalty_c3_linear, config.penalty_quadratic
    for k in range(1, int(config.max_iters) + 1):
        try:
            ev = evaluate(problem, p, c3l, c3q, with_gradient=True)
        except InfeasibleAt as exc:
            exc.iteration = k
            exc.partial = TuneResult(p, log, "infeasible")
            raise
        alpha = step_size(k, config.rho, config.eta)
        gnorm = float(np.linalg.norm(ev.gradient))
        rec = IterationRecord(k, alpha, ev.cost, ev.penalty, ev.violation_sum, ev.violation_max, gnorm, p.copy())
        log.append(rec)
        if callback is not None:
            callback(rec)
        if gnorm <= config.grad_tol:
            stop = "grad_tol"
            break
        p_new = project_params(p - alpha * ev.gradient, config.projection)
        if np.linalg.norm(p_new) > config.param_cap:
            raise ParameterBoundExceeded(
                f"|p| = {np.linalg.norm(p_new):.3e} exceeds the cap {config.param_cap:.1e} at iteration {k}"
            )
        step = float(np.linalg.norm(p_new - p))
        p = p_new
        if step < config.param_tol:
            stop = "param_tol"
            break
    final = evaluate(problem, p, c3l, c3q, with_gradient=False)
    return TuneResult(p_star=p, log=log, stop_reason=stop, final=final)


def log_csv(result: TuneResult) -> str:
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n_p = result.p_star.size
    w.writerow(list(LOG_COLUMNS) + [f"p_{i}" for i in range(n_p)])
    for r in result.log:
        vals = [r.alpha, r.cost, r.penalty, r.objective, r.violation_sum, r.violation_max, r.grad_norm]
        w.writerow([r.k] + [repr(float(v)) for v in vals] + [repr(float(v)) for v in r.p])
    return buf.getvalue()
