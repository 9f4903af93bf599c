"""Linear MPC problems assembled as standard-form QPs with parameter Jacobians.

Decision vector layout::

    y = (x_0, ..., x_N, u_0, ..., u_{N-1}, eps)

where ``eps`` is empty in hard mode. In soft mode ``eps = (eps_0, ..., eps_{N-1},
eps_N)``: one nonnegative slack per state-constraint row and stage, plus a
terminal block for the terminal rows.

Every parameter Jacobian uses the column order ``(x_bar, y_prev, p)``:
``n_x`` columns for the measured state, ``n_y`` columns for the previous MPC
solution (which only matters when the prediction model is relinearized along
it) and ``n_p`` columns for the tunable parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Protocol

import numpy as np

from bpmpc.errors import (
    BadParameterization,
    DecodeError,
    DimensionMismatch,
    InfeasibleProblem,
    MaxIterReached,
    NoConvergence,
)
from bpmpc.qp import DEFAULT_TOL, QpInstance, SolveOutput, SolveStatus, solve_qp
from bpmpc.sensitivity import ParamJacobians, ParamTensor, SensitivityResult, qp_sensitivity


# --------------------------------------------------------------------------
# Parameterizations of the terminal and input cost
# --------------------------------------------------------------------------

class Parameterization(Protocol):
    n_p: int

    def evaluate(self, p) -> tuple:
        """Return ``(P, Ru, dP, dRu)`` with ``dP[:, :, j] = dP/dp_j``."""


@dataclass(frozen=True)
class CholeskyParameterization:
    """``Ru = (p_0^2 + ru_floor) I`` and ``P = L L' + ridge I``.

    L is lower triangular with its entries filled row by row from
    ``p_1, p_2, ...``, so ``n_p = 1 + n_x (n_x + 1) / 2``.
    """

    n_x: int
    n_u: int
    ru_floor: float = 1e-6
    ridge: float = 1e-8

    @property
    def n_p(self) -> int:
        return 1 + self.n_x * (self.n_x + 1) // 2

    @cached_property
    def _tril(self):
        return np.tril_indices(self.n_x)

    def factor(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        L = np.zeros((self.n_x, self.n_x))
        L[self._tril] = p[1:]
        return L

    def evaluate(self, p):
        p = np.asarray(p, dtype=float).reshape(-1)
        if p.shape[0] != self.n_p:
            raise DimensionMismatch(f"expected {self.n_p} parameters, got {p.shape[0]}")
        n, m = self.n_x, self.n_u
        L = self.factor(p)
        P = L @ L.T + self.ridge * np.eye(n)
        Ru = (p[0] ** 2 + self.ru_floor) * np.eye(m)
        dP = np.zeros((n, n, self.n_p))
        dRu = np.zeros((m, m, self.n_p))
        dRu[:, :, 0] = 2.0 * p[0] * np.eye(m)
        rows, cols = self._tril
        for j, (r, c) in enumerate(zip(rows, cols), start=1):
            # dL = e_r e_c'  =>  dP = e_r (L e_c)' + (L e_c) e_r'
            col = L[:, c]
            dP[r, :, j] += col
            dP[:, r, j] += col
        return P, Ru, dP, dRu

    def params_for(self, P, ru: float = None) -> np.ndarray:
        """Parameter vector that reproduces terminal cost ``P`` and input weight ``ru``."""
        P = np.asarray(P, dtype=float)
        try:
            L = np.linalg.cholesky(P - self.ridge * np.eye(self.n_x))
        except np.linalg.LinAlgError as exc:
            raise BadParameterization("P - ridge*I is not positive definite") from exc
        p0 = 0.0 if ru is None else np.sqrt(max(ru - self.ru_floor, 0.0))
        return np.concatenate([[p0], L[self._tril]])


@dataclass(frozen=True, eq=False)
class FixedParameterization:
    """Constant ``P`` and ``Ru``; no tunable parameters."""

    P: np.ndarray
    Ru: np.ndarray

    n_p = 0

    def evaluate(self, p):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        Ru = np.atleast_2d(np.asarray(self.Ru, dtype=float))
        return P, Ru, np.zeros(P.shape + (0,)), np.zeros(Ru.shape + (0,))


def cholesky_parameterization(p):
    """The 11-parameter map for a 4-state, 1-input plant: ``(P, Ru, dP, dRu)``."""
    return CholeskyParameterization(4, 1).evaluate(p)


# --------------------------------------------------------------------------
# Problem definition and prediction model
# --------------------------------------------------------------------------

def _box(lo, hi):
    """Polytope rows ``[I; -I] v <= [hi; -lo]`` for a box, dropping infinite sides."""
    lo = np.asarray(lo, dtype=float).reshape(-1)
    hi = np.asarray(hi, dtype=float).reshape(-1)
    n = lo.size
    H = np.vstack([np.eye(n), -np.eye(n)])
    h = np.concatenate([hi, -lo])
    keep = np.isfinite(h)
    return H[keep], h[keep]


box_polytope = _box


@dataclass(frozen=True, eq=False)
class LinearModel:
    """Per-stage affine prediction model ``x_{k+1} = A_k x_k + B_k u_k + c_k``.

    When the model comes from linearizing a plant along a trajectory it also
    carries the derivatives of ``(A_k, B_k, c_k)`` with respect to the
    linearization point ``(x*_k, u*_k)``: ``dA[k, :, :, l]`` is the derivative
    along the l-th entry of ``(x*_k, u*_k)``, and ``point_cols[k, l]`` is the
    column of the parameter Jacobian (in the ``(x_bar, y_prev)`` blocks) that
    entry corresponds to.
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    point_cols: np.ndarray = None
    dA: np.ndarray = None
    dB: np.ndarray = None
    dc: np.ndarray = None

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        c = np.asarray(self.c, dtype=float)
        if A.ndim != 3 or B.ndim != 3 or c.ndim != 2:
            raise DimensionMismatch("A, B, c must be stacked per stage")
        N, n, _ = A.shape
        if A.shape != (N, n, n) or B.shape[:2] != (N, n) or c.shape != (N, n):
            raise DimensionMismatch("inconsistent per-stage model dimensions")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", c)

    @classmethod
    def constant(cls, A, B, N: int, c=None) -> "LinearModel":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
        c = np.zeros(A.shape[0]) if c is None else np.asarray(c, dtype=float)
        return cls(np.repeat(A[None], N, 0), np.repeat(B[None], N, 0), np.repeat(c[None], N, 0))

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def has_derivatives(self) -> bool:
        return self.point_cols is not None


@dataclass(frozen=True, eq=False)
class MpcDefinition:
    """Static data of the MPC problem.

    ``Hx, hx`` bound every predicted state ``x_0..x_{N-1}``, ``Hu, hu`` every
    input, ``HxN, hxN`` the terminal state (defaults to ``Hx, hx`` when state
    bounds exist). In soft mode the state rows are relaxed by nonnegative
    slacks with penalty ``c1 |eps|^2 + c2 1'eps``.
    """

    N: int
    n_x: int
    n_u: int
    Qx: np.ndarray
    parameterization: object
    Hx: np.ndarray = None
    hx: np.ndarray = None
    Hu: np.ndarray = None
    hu: np.ndarray = None
    HxN: np.ndarray = None
    hxN: np.ndarray = None
    soft: bool = False
    c1: float = 0.0
    c2: float = 0.0

    def __post_init__(self):
        if int(self.N) < 1:
            raise DimensionMismatch("N must be at least 1")
        nx, nu = int(self.n_x), int(self.n_u)
        Qx = np.atleast_2d(np.asarray(self.Qx, dtype=float))
        if Qx.shape != (nx, nx):
            raise DimensionMismatch(f"Qx must be {nx}x{nx}")

        def rows(H, h, n, name):
            if H is None:
                return np.zeros((0, n)), np.zeros(0)
            H = np.asarray(H, dtype=float).reshape(-1, n)
            h = np.asarray(h, dtype=float).reshape(-1)
            if H.shape[0] != h.shape[0]:
                raise DimensionMismatch(f"{name}: row counts differ")
            return H, h

        Hx, hx = rows(self.Hx, self.hx, nx, "Hx")
        Hu, hu = rows(self.Hu, self.hu, nu, "Hu")
        if self.HxN is None:
            HxN, hxN = Hx, hx
        else:
            HxN, hxN = rows(self.HxN, self.hxN, nx, "HxN")
        for name, val in (("Qx", Qx), ("Hx", Hx), ("hx", hx), ("Hu", Hu), ("hu", hu), ("HxN", HxN), ("hxN", hxN)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "n_x", nx)
        object.__setattr__(self, "n_u", nu)
        if self.soft and (self.c1 <= 0 or self.c2 < 0):
            raise DimensionMismatch("soft mode needs c1 > 0 and c2 >= 0")

    # layout -----------------------------------------------------------------
    @property
    def n_p(self) -> int:
        return int(self.parameterization.n_p)

    @property
    def n_slack(self) -> int:
        if not self.soft:
            return 0
        return self.N * self.Hx.shape[0] + self.HxN.shape[0]

    @property
    def n_y(self) -> int:
        return (self.N + 1) * self.n_x + self.N * self.n_u + self.n_slack

    @property
    def n_pbar(self) -> int:
        return self.n_x + self.n_y + self.n_p

    @property
    def u_offset(self) -> int:
        return (self.N + 1) * self.n_x

    @property
    def eps_offset(self) -> int:
        return self.u_offset + self.N * self.n_u

    def x_index(self, k: int) -> slice:
        return slice(k * self.n_x, (k + 1) * self.n_x)

    def u_index(self, k: int) -> slice:
        o = self.u_offset + k * self.n_u
        return slice(o, o + self.n_u)

    def decode(self, y):
        """Split a primal vector into ``(states (N+1, n_x), inputs (N, n_u), eps)``."""
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.shape[0] != self.n_y:
            raise DecodeError(f"expected a primal vector of length {self.n_y}, got {y.shape[0]}")
        xs = y[: self.u_offset].reshape(self.N + 1, self.n_x)
        us = y[self.u_offset: self.eps_offset].reshape(self.N, self.n_u)
        return xs, us, y[self.eps_offset:]

    def encode(self, xs, us, eps=None):
        eps = np.zeros(self.n_slack) if eps is None else np.asarray(eps, dtype=float).reshape(-1)
        return np.concatenate([np.asarray(xs, float).reshape(-1), np.asarray(us, float).reshape(-1), eps])

    # static pieces ------------------------------------------------------------
    @cached_property
    def _inequalities(self):
        N, nx, nu = self.N, self.n_x, self.n_u
        nhx, nhu, nhN = self.Hx.shape[0], self.Hu.shape[0], self.HxN.shape[0]
        blocks, rhs = [], []
        n_y = self.n_y
        eo = self.eps_offset
        for k in range(N):
            if nhx:
                G = np.zeros((nhx, n_y))
                G[:, self.x_index(k)] = self.Hx
                if self.soft:
                    G[:, eo + k * nhx: eo + (k + 1) * nhx] = -np.eye(nhx)
                blocks.append(G)
                rhs.append(self.hx)
            if nhu:
                G = np.zeros((nhu, n_y))
                G[:, self.u_index(k)] = self.Hu
                blocks.append(G)
                rhs.append(self.hu)
        if nhN:
            G = np.zeros((nhN, n_y))
            G[:, self.x_index(N)] = self.HxN
            if self.soft:
                G[:, eo + N * nhx:] = -np.eye(nhN)
            blocks.append(G)
            rhs.append(self.hxN)
        if self.soft and self.n_slack:
            G = np.zeros((self.n_slack, n_y))
            G[:, eo:] = -np.eye(self.n_slack)
            blocks.append(G)
            rhs.append(np.zeros(self.n_slack))
        if not blocks:
            return np.zeros((0, n_y)), np.zeros(0)
        return np.vstack(blocks), np.concatenate(rhs)

    @cached_property
    def _template(self):
        return _build_template(self)

    @cached_property
    def _state_rows(self):
        """Indices of inequality rows that constrain states (for multiplier bounds)."""
        G, _ = self._inequalities
        return np.flatnonzero(np.abs(G[:, : self.u_offset]).sum(axis=1) > 0)


class JacBlocks(NamedTuple):
    """A Jacobian split by the column blocks ``(x_bar, y_prev, p)``."""

    x_bar: np.ndarray
    y_prev: np.ndarray
    p: np.ndarray

    @classmethod
    def split(cls, J, defn: MpcDefinition) -> "JacBlocks":
        a, b = defn.n_x, defn.n_x + defn.n_y
        return cls(J[:, :a], J[:, a:b], J[:, b:])


@dataclass
class MpcStep:
    u0: np.ndarray
    y: np.ndarray
    z: np.ndarray
    eps: np.ndarray
    solve: SolveOutput
    qp: QpInstance
    J_u0: JacBlocks = None
    J_y: JacBlocks = None
    J_eps: JacBlocks = None
    sensitivity: SensitivityResult = field(default=None, repr=False)


# --------------------------------------------------------------------------
# Assembly and solve
# --------------------------------------------------------------------------

def _check_spd(M, name):
    try:
        np.linalg.cholesky(0.5 * (M + M.T))
    except np.linalg.LinAlgError as exc:
        raise BadParameterization(f"{name} is not positive definite") from exc


def build_qp(defn: MpcDefinition, x_bar, model: LinearModel, y_prev=None, p=None):
    """Assemble the MPC problem as ``(QpInstance, ParamJacobians)``."""
    N, nx, nu, n_y = defn.N, defn.n_x, defn.n_u, defn.n_y
    x_bar = np.asarray(x_bar, dtype=float).reshape(-1)
    if x_bar.shape[0] != nx:
        raise DimensionMismatch(f"x_bar must have length {nx}")
    if model.N != N or model.A.shape[1] != nx or model.B.shape[2] != nu:
        raise DimensionMismatch("prediction model does not match the MPC definition")
    if y_prev is not None:
        defn.decode(y_prev)  # length check
    p = np.zeros(defn.n_p) if p is None else np.asarray(p, dtype=float).reshape(-1)
    P, Ru, dP, dRu = defn.parameterization.evaluate(p)
    _check_spd(P, "terminal cost P(p)")
    _check_spd(Ru, "input cost Ru(p)")
    tpl = defn._template
    n_pbar = defn.n_pbar
    op = nx + n_y

    # cost: static blocks plus 2P on x_N and 2Ru on every u_k
    Q = tpl.Q_base.copy()
    sN = defn.x_index(N)
    Q[sN, sN] = P + P.T
    Q[tpl.ru_rows, tpl.ru_cols] = np.tile((Ru + Ru.T).reshape(-1), N)
    q = tpl.q_base

    rows, cols, pars, vals = [], [], [], []
    if defn.n_p:
        r, c, j = np.nonzero(dP)
        rows.append(r + sN.start)
        cols.append(c + sN.start)
        pars.append(j + op)
        vals.append(2.0 * dP[r, c, j])
        r, c, j = np.nonzero(dRu)
        if r.size:
            offs = defn.u_offset + nu * np.arange(N)
            rows.append((r[None, :] + offs[:, None]).ravel())
            cols.append((c[None, :] + offs[:, None]).ravel())
            pars.append(np.tile(j + op, N))
            vals.append(np.tile(2.0 * dRu[r, c, j], N))
    dQ = _tensor((n_y, n_y, n_pbar), rows, cols, pars, vals)

    # equalities: x_0 = x_bar, x_{k+1} - A_k x_k - B_k u_k = c_k
    F = tpl.F_base.copy()
    F[tpl.a_rows, tpl.a_cols] = -model.A.reshape(-1)
    F[tpl.b_rows, tpl.b_cols] = -model.B.reshape(-1)
    phi = np.concatenate([x_bar, model.c.reshape(-1)])
    dphi = tpl.dphi_base.copy()

    rows, cols, pars, vals = [], [], [], []
    if model.has_derivatives:
        pc = model.point_cols
        # -dA_k in the x_k columns, -dB_k in the u_k columns
        k, i, c, l = np.nonzero(model.dA)
        rows.append((k + 1) * nx + i)
        cols.append(k * nx + c)
        pars.append(pc[k, l])
        vals.append(-model.dA[k, i, c, l])
        k, i, c, l = np.nonzero(model.dB)
        rows.append((k + 1) * nx + i)
        cols.append(defn.u_offset + k * nu + c)
        pars.append(pc[k, l])
        vals.append(-model.dB[k, i, c, l])
        k, i, l = np.nonzero(model.dc)
        np.add.at(dphi, ((k + 1) * nx + i, pc[k, l]), model.dc[k, i, l])
    dF = _tensor((F.shape[0], n_y, n_pbar), rows, cols, pars, vals)

    G, g = defn._inequalities
    qp = QpInstance(Q=Q, q=q, F=F, phi=phi, G=G, g=g)
    pjac = ParamJacobians(
        n_p=n_pbar,
        dQ=dQ,
        dq=tpl.zeros_q,
        dF=dF,
        dphi=dphi,
        dG=ParamTensor.zeros((G.shape[0], n_y, n_pbar)),
        dg=tpl.zeros_g,
    )
    return qp, pjac


class _Template(NamedTuple):
    Q_base: np.ndarray
    q_base: np.ndarray
    ru_rows: np.ndarray
    ru_cols: np.ndarray
    F_base: np.ndarray
    a_rows: np.ndarray
    a_cols: np.ndarray
    b_rows: np.ndarray
    b_cols: np.ndarray
    dphi_base: np.ndarray
    zeros_q: np.ndarray
    zeros_g: np.ndarray


def _build_template(defn: MpcDefinition) -> _Template:
    N, nx, nu, n_y = defn.N, defn.n_x, defn.n_u, defn.n_y
    Q = np.zeros((n_y, n_y))
    for k in range(N):
        sx = defn.x_index(k)
        Q[sx, sx] = defn.Qx + defn.Qx.T
    q = np.zeros(n_y)
    if defn.soft:
        e = defn.eps_offset
        Q[e:, e:] = 2.0 * defn.c1 * np.eye(defn.n_slack)
        q[e:] = defn.c2
    ii, jj = np.meshgrid(np.arange(nu), np.arange(nu), indexing="ij")
    offs = defn.u_offset + nu * np.arange(N)
    ru_rows = (offs[:, None, None] + ii[None]).ravel()
    ru_cols = (offs[:, None, None] + jj[None]).ravel()

    n_eq = (N + 1) * nx
    F = np.zeros((n_eq, n_y))
    F[:nx, :nx] = np.eye(nx)
    for k in range(N):
        F[(k + 1) * nx: (k + 2) * nx, defn.x_index(k + 1)] = np.eye(nx)
    k, i, j = np.meshgrid(np.arange(N), np.arange(nx), np.arange(nx), indexing="ij")
    a_rows, a_cols = ((k + 1) * nx + i).ravel(), (k * nx + j).ravel()
    k, i, j = np.meshgrid(np.arange(N), np.arange(nx), np.arange(nu), indexing="ij")
    b_rows, b_cols = ((k + 1) * nx + i).ravel(), (defn.u_offset + k * nu + j).ravel()
    dphi = np.zeros((n_eq, defn.n_pbar))
    dphi[np.arange(nx), np.arange(nx)] = 1.0
    n_in = defn._inequalities[0].shape[0]
    for arr in (Q, q, F):
        arr.flags.writeable = False
    zq = np.zeros((n_y, defn.n_pbar))
    zg = np.zeros((n_in, defn.n_pbar))
    zq.flags.writeable = False
    zg.flags.writeable = False
    return _Template(Q, q, ru_rows, ru_cols, F, a_rows, a_cols, b_rows, b_cols, dphi, zq, zg)


def _tensor(shape, rows, cols, pars, vals):
    if not rows:
        return ParamTensor.zeros(shape)
    return ParamTensor(shape, np.concatenate(rows), np.concatenate(cols), np.concatenate(pars), np.concatenate(vals))


def solve_mpc(
    defn: MpcDefinition,
    x_bar,
    model: LinearModel,
    y_prev=None,
    p=None,
    with_jacobians: bool = False,
    *,
    z0=None,
    tol: float = DEFAULT_TOL,
    gamma: float = 1.0,
    beta: float = 0.0,
    class_tol: float = 1e-7,
    method: str = "active_set",
) -> MpcStep:
    """Build, solve, and optionally differentiate one MPC problem."""
    qp, pjac = build_qp(defn, x_bar, model, y_prev, p)
    sol = solve_qp(qp, tol=tol, method=method, z0=z0)
    if sol.status is SolveStatus.INFEASIBLE:
        raise InfeasibleProblem("MPC problem is infeasible")
    if sol.status is SolveStatus.MAX_ITER:
        raise MaxIterReached(f"QP solver hit its iteration limit ({sol.iterations})")
    _, us, eps = defn.decode(sol.y)
    step = MpcStep(u0=us[0].copy(), y=sol.y, z=sol.z, eps=eps.copy(), solve=sol, qp=qp)
    if with_jacobians:
        sens = qp_sensitivity(qp, sol, pjac, gamma=gamma, beta=beta, class_tol=class_tol)
        Jy = sens.Jy
        step.sensitivity = sens
        step.J_y = JacBlocks.split(Jy, defn)
        step.J_u0 = JacBlocks.split(Jy[defn.u_index(0)], defn)
        step.J_eps = JacBlocks.split(Jy[defn.eps_offset:], defn)
    return step


def state_multipliers(defn: MpcDefinition, sol: SolveOutput) -> np.ndarray:
    """Multipliers of the inequality rows that involve predicted states."""
    return sol.lam[defn._state_rows]


def dare_terminal_cost(A, B, Qx, Ru, tol: float = 1e-12, max_iter: int = 200000) -> np.ndarray:
    """Solve the discrete algebraic Riccati equation by fixed-point iteration.

    Iterates ``P <- Q + A'PA - A'PB (R + B'PB)^{-1} B'PA`` from ``P = Q`` until
    ``|P_new - P|_inf <= tol * max(1, |P|_inf)``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Qx = np.atleast_2d(np.asarray(Qx, dtype=float))
    Ru = np.atleast_2d(np.asarray(Ru, dtype=float))
    P = Qx.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        K = np.linalg.solve(Ru + BtP @ B, BtP @ A)
        P_new = Qx + A.T @ P @ A - A.T @ P @ B @ K
        P_new = 0.5 * (P_new + P_new.T)
        if not np.all(np.isfinite(P_new)):
            raise NoConvergence("Riccati iteration diverged")
        if np.abs(P_new - P).max() <= tol * max(1.0, np.abs(P_new).max()):
            return P_new
        P = P_new
    raise NoConvergence(f"Riccati iteration did not converge in {max_iter} iterations")


def dare_residual(P, A, B, Qx, Ru) -> float:
    A = np.atleast_2d(A)
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    BtP = B.T @ P
    rhs = Qx + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(Ru + BtP @ B, BtP @ A)
    return float(np.abs(rhs - P).max())
