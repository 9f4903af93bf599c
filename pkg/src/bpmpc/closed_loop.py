"""Closed-loop simulation under the MPC policy and trajectory Jacobians.

At each step t the MPC is solved at the measured state, its first input is
applied to the plant, and (optionally) the Jacobians of everything with respect
to the tunable parameters are propagated forward in time::

    J_y[t]    = Jmpc_x J_x[t] + Jmpc_yprev J_y[t-1] + Jmpc_p
    J_x[t+1]  = f_x J_x[t] + f_u J_u[t]

where ``J_u[t]`` and ``J_eps[t]`` are row blocks of ``J_y[t]``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from bpmpc.dynamics import LINEARIZATION_MODES, DynamicsModel, linearize_along
from bpmpc.errors import DimensionMismatch, InfeasibleAt, InfeasibleProblem
from bpmpc.mpc import LinearModel, MpcDefinition, solve_mpc

LINEARIZATION_CHOICES = ("fixed",) + LINEARIZATION_MODES


@dataclass(frozen=True, eq=False)
class ClosedLoopProblem:
    """Everything needed to simulate and differentiate one closed loop.

    ``linearization`` is ``"fixed"`` (use ``fixed_model`` at every step, by
    default the plant linearized at the origin), ``"shifted"`` or
    ``"current-state-first"`` (relinearize along the previous MPC solution).

    The initial linearization trajectory ``y_init`` defaults to the initial
    state held over the horizon with zero inputs. With
    ``tune_initial_guess=True`` it becomes part of the parameter vector, which
    is then ``(p_mpc, y_init)``.
    """

    defn: MpcDefinition
    plant: DynamicsModel
    x0: np.ndarray
    T: int
    Qx: np.ndarray = None
    input_weight: float = 0.0
    linearization: str = "fixed"
    fixed_model: LinearModel = None
    y_init: np.ndarray = None
    tune_initial_guess: bool = False
    gamma: float = 1.0
    beta: float = 0.0
    qp_tol: float = 1e-9
    Hx: np.ndarray = None
    hx: np.ndarray = None

    def __post_init__(self):
        d = self.defn
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape[0] != d.n_x:
            raise DimensionMismatch(f"x0 must have length {d.n_x}")
        object.__setattr__(self, "x0", x0)
        if int(self.T) < 0:
            raise DimensionMismatch("T must be nonnegative")
        object.__setattr__(self, "T", int(self.T))
        if self.linearization not in LINEARIZATION_CHOICES:
            raise ValueError(f"unknown linearization {self.linearization!r}")
        Qx = d.Qx if self.Qx is None else np.atleast_2d(np.asarray(self.Qx, dtype=float))
        object.__setattr__(self, "Qx", Qx)
        if self.linearization == "fixed" and self.fixed_model is None:
            A, B = self.plant.jacobians(np.zeros(d.n_x), np.zeros(d.n_u))
            c = self.plant.step(np.zeros(d.n_x), np.zeros(d.n_u))
            object.__setattr__(self, "fixed_model", LinearModel.constant(A, B, d.N, c))
        if self.y_init is None:
            y0 = d.encode(np.repeat(x0[None], d.N + 1, 0), np.zeros((d.N, d.n_u)))
        else:
            y0 = np.asarray(self.y_init, dtype=float).reshape(-1)
            d.decode(y0)
        object.__setattr__(self, "y_init", y0)
        Hx = d.Hx if self.Hx is None else np.asarray(self.Hx, dtype=float).reshape(-1, d.n_x)
        hx = d.hx if self.hx is None else np.asarray(self.hx, dtype=float).reshape(-1)
        object.__setattr__(self, "Hx", Hx)
        object.__setattr__(self, "hx", hx)

    @property
    def n_p(self) -> int:
        return self.defn.n_p + (self.defn.n_y if self.tune_initial_guess else 0)

    def split_params(self, p):
        p = np.asarray(p, dtype=float).reshape(-1)
        if p.shape[0] != self.n_p:
            raise DimensionMismatch(f"expected {self.n_p} parameters, got {p.shape[0]}")
        k = self.defn.n_p
        y_init = p[k:] if self.tune_initial_guess else self.y_init
        return p[:k], y_init

    def with_(self, **changes) -> "ClosedLoopProblem":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass
class Trajectory:
    states: np.ndarray          # (T+2, n_x)
    inputs: np.ndarray          # (T+1, n_u)
    slacks: np.ndarray          # (T+1, n_slack)
    solutions: np.ndarray       # (T+1, n_y), MPC primal at each step
    qp_iterations: np.ndarray   # (T+1,)
    active_sets: list = field(default_factory=list)
    cond_U: np.ndarray = None
    warnings: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.inputs.shape[0] - 1

    @property
    def eps_max(self) -> np.ndarray:
        if self.slacks.shape[1] == 0:
            return np.zeros(self.slacks.shape[0])
        return self.slacks.max(axis=1)


@dataclass
class JacobianStack:
    """Per-step Jacobians with respect to the tunable parameters (last axis)."""

    Jx: np.ndarray    # (T+2, n_x, n_p)
    Ju: np.ndarray    # (T+1, n_u, n_p)
    Jy: np.ndarray    # (T+1, n_y, n_p)
    Jeps: np.ndarray  # (T+1, n_slack, n_p)
    Jz: np.ndarray    # (T+1, n_z, n_p)

    @property
    def Jy_prev(self):
        """``J_{y_{t-1}}`` for t = 0..T (index 0 is the initial-guess Jacobian)."""
        return self.Jy[:-1]


def _initial_guess_jacobian(problem: ClosedLoopProblem):
    d = problem.defn
    J = np.zeros((d.n_y, problem.n_p))
    if problem.tune_initial_guess:
        J[:, d.n_p:] = np.eye(d.n_y)
    return J


def _simulate(problem: ClosedLoopProblem, p, with_jacobians: bool, noise=None):
    d = problem.defn
    T, nx, nu = problem.T, d.n_x, d.n_u
    p_mpc, y_prev = problem.split_params(p)
    n_p = problem.n_p
    states = np.zeros((T + 2, nx))
    states[0] = problem.x0
    inputs = np.zeros((T + 1, nu))
    slacks = np.zeros((T + 1, d.n_slack))
    sols = np.zeros((T + 1, d.n_y))
    iters = np.zeros(T + 1, dtype=int)
    conds = np.full(T + 1, np.nan)
    active = []
    notes = []
    if noise is not None:
        noise = np.asarray(noise, dtype=float).reshape(T + 1, nx)

    if with_jacobians:
        n_z = None
        Jx = np.zeros((T + 2, nx, n_p))
        Ju = np.zeros((T + 1, nu, n_p))
        Jy = np.zeros((T + 1, d.n_y, n_p))
        Jeps = np.zeros((T + 1, d.n_slack, n_p))
        Jz_list = []
        Jy_prev = _initial_guess_jacobian(problem)
        # direct dependence of the MPC on p: select the p_mpc block
        Jp_direct = np.zeros((d.n_p, n_p))
        Jp_direct[:, : d.n_p] = np.eye(d.n_p)

    z_prev = None
    for t in range(T + 1):
        x_bar = states[t]
        if problem.linearization == "fixed":
            model = problem.fixed_model
        else:
            model = linearize_along(
                problem.plant, y_prev, x_bar, d, mode=problem.linearization, with_derivatives=with_jacobians
            )
        try:
            step = solve_mpc(
                d, x_bar, model, y_prev, p_mpc, with_jacobians,
                z0=z_prev, tol=problem.qp_tol, gamma=problem.gamma, beta=problem.beta,
            )
        except InfeasibleProblem as exc:
            raise InfeasibleAt(t) from exc
        inputs[t] = step.u0
        slacks[t] = step.eps
        sols[t] = step.y
        iters[t] = step.solve.iterations
        active.append(step.solve.working_set)
        fx = fu = None
        if with_jacobians:
            x_next, fx, fu = problem.plant.step_and_jacobians(x_bar, step.u0)
        else:
            x_next = problem.plant.step(x_bar, step.u0)
        states[t + 1] = x_next if noise is None else x_next + noise[t]
        if with_jacobians:
            sens = step.sensitivity
            conds[t] = sens.cond_U
            notes.extend(f"t={t}: {w}" for w in sens.warnings)
            Jy_t = step.J_y.x_bar @ Jx[t] + step.J_y.y_prev @ Jy_prev + step.J_y.p @ Jp_direct
            Jy[t] = Jy_t
            Ju[t] = Jy_t[d.u_index(0)]
            Jeps[t] = Jy_t[d.eps_offset:]
            # dual Jacobian, same chain rule on the columns of Jz
            Jz_full = sens.Jz
            a, b = nx, nx + d.n_y
            Jz_list.append(Jz_full[:, :a] @ Jx[t] + Jz_full[:, a:b] @ Jy_prev + Jz_full[:, b:] @ Jp_direct)
            Jx[t + 1] = fx @ Jx[t] + fu @ Ju[t]
            Jy_prev = Jy_t
        y_prev = step.y
        z_prev = step.z

    traj = Trajectory(
        states=states, inputs=inputs, slacks=slacks, solutions=sols,
        qp_iterations=iters, active_sets=active, cond_U=conds, warnings=notes,
    )
    if not with_jacobians:
        return traj, None
    return traj, JacobianStack(Jx=Jx, Ju=Ju, Jy=Jy, Jeps=Jeps, Jz=np.stack(Jz_list))


def rollout(problem: ClosedLoopProblem, p, noise=None) -> Trajectory:
    """Simulate T+1 control steps. ``noise`` is an optional (T+1, n_x) additive state disturbance."""
    return _simulate(problem, p, with_jacobians=False, noise=noise)[0]


def rollout_with_jacobians(problem: ClosedLoopProblem, p):
    """Simulate and propagate Jacobians. Returns ``(Trajectory, JacobianStack)``."""
    return _simulate(problem, p, with_jacobians=True)


def closed_loop_cost(traj: Trajectory, Qx, input_weight: float = 0.0):
    """Quadratic closed-loop cost over t = 0..T and its gradient.

    Returns ``(cost, grad)`` where ``grad`` is a dict with ``"x"`` of shape
    ``(T+2, n_x)`` (last row zero, the final state is not penalized) and
    ``"u"`` of shape ``(T+1, n_u)``.
    """
    Qx = np.atleast_2d(np.asarray(Qx, dtype=float))
    xs = traj.states[:-1]
    us = traj.inputs
    cost = float(np.einsum("ti,ij,tj->", xs, Qx, xs) + input_weight * np.sum(us * us))
    gx = np.zeros_like(traj.states)
    gx[:-1] = xs @ (Qx + Qx.T)
    gu = 2.0 * input_weight * us
    return cost, {"x": gx, "u": gu}


def total_gradient(cost_jacobians: dict, stack: JacobianStack) -> np.ndarray:
    """Chain rule over all supplied blocks.

    ``cost_jacobians`` may contain ``"x"`` (T+2, n_x), ``"u"`` (T+1, n_u),
    ``"y"`` (T+1, n_y), ``"eps"`` (T+1, n_slack), ``"z"`` (T+1, n_z) gradients
    of the objective with respect to those trajectory entries, and ``"p"``
    (n_p,) for a direct dependence on p. Missing blocks count as zero.
    """
    n_p = stack.Jx.shape[-1]
    grad = np.zeros(n_p)
    pairs = {"x": stack.Jx, "u": stack.Ju, "y": stack.Jy, "eps": stack.Jeps, "z": stack.Jz}
    for key, value in cost_jacobians.items():
        if key == "p":
            value = np.asarray(value, dtype=float).reshape(-1)
            if value.shape != (n_p,):
                raise DimensionMismatch(f"direct gradient has length {value.shape[0]}, expected {n_p}")
            grad += value
            continue
        if key not in pairs:
            raise DimensionMismatch(f"unknown cost block {key!r}")
        J = pairs[key]
        value = np.asarray(value, dtype=float)
        if value.shape != J.shape[:2]:
            raise DimensionMismatch(f"block {key!r} has shape {value.shape}, expected {J.shape[:2]}")
        grad += np.einsum("ti,tip->p", value, J)
    return grad


def state_violation(traj: Trajectory, Hx, hx):
    """Per-step total positive violation of ``Hx x_t <= hx`` for t = 0..T.

    Returns ``(per_step, total, worst)``: the per-step sums, their sum, and the
    largest single-row violation.
    """
    Hx = np.asarray(Hx, dtype=float)
    if Hx.size == 0:
        z = np.zeros(traj.T + 1)
        return z, 0.0, 0.0
    v = np.maximum(traj.states[:-1] @ Hx.T - hx, 0.0)
    return v.sum(axis=1), float(v.sum()), float(v.max())


def trajectory_csv(traj: Trajectory, dt: float = None) -> str:
    """CSV text with one row per time step t = 0..T+1 (the last row has no input)."""
    nx, nu = traj.states.shape[1], traj.inputs.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["t", "time [s]"] + [f"xbar_{i + 1}" for i in range(nx)] + [f"ubar_{i + 1}" for i in range(nu)]
    header += ["eps_max", "qp_iterations"]
    w.writerow(header)
    eps_max = traj.eps_max
    fmt = lambda v: repr(float(v))
    for t in range(traj.states.shape[0]):
        time = "" if dt is None else fmt(t * dt)
        row = [t, time] + [fmt(v) for v in traj.states[t]]
        if t <= traj.T:
            row += [fmt(v) for v in traj.inputs[t]] + [fmt(eps_max[t]), int(traj.qp_iterations[t])]
        else:
            row += [""] * nu + ["", ""]
        w.writerow(row)
    return buf.getvalue()
