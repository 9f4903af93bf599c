"""Strongly convex QPs in standard form, their Lagrange dual, and dual solvers.

A :class:`QpInstance` encodes::

    minimize    1/2 y'Qy + q'y
    subject to  F y  = phi
                G y <= g

The dual variable is stacked as ``z = (lam, mu)`` with ``lam >= 0`` for the
inequality rows and ``mu`` free for the equality rows.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from bpmpc.errors import DimensionMismatch, InfeasibleProblem, NotPositiveDefinite

DEFAULT_TOL = 1e-9
DEFAULT_ACTIVE_TOL = 1e-7
DIVERGENCE_NORM = 1e10


class SolveStatus(enum.Enum):
    SOLVED = "Solved"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"


def _as_matrix(a, n_cols, name):
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return np.zeros((0, n_cols))
    if a.ndim != 2 or a.shape[1] != n_cols:
        raise DimensionMismatch(f"{name} must have {n_cols} columns, got shape {a.shape}")
    return a


def _as_vector(a, n, name):
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.shape[0] != n:
        raise DimensionMismatch(f"{name} must have length {n}, got {a.shape[0]}")
    return a


@dataclass(frozen=True, eq=False)
class QpInstance:
    """Primal QP data. Arrays are copied and frozen on construction."""

    Q: np.ndarray
    q: np.ndarray
    F: np.ndarray = None
    phi: np.ndarray = None
    G: np.ndarray = None
    g: np.ndarray = None

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float, ndmin=2)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise DimensionMismatch(f"Q must be square, got shape {Q.shape}")
        n = Q.shape[0]
        if not np.allclose(Q, Q.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(Q).max())):
            raise NotPositiveDefinite("Q is not symmetric")
        F = _as_matrix(np.zeros((0, n)) if self.F is None else self.F, n, "F")
        G = _as_matrix(np.zeros((0, n)) if self.G is None else self.G, n, "G")
        phi = _as_vector(np.zeros(0) if self.phi is None else self.phi, F.shape[0], "phi")
        g = _as_vector(np.zeros(0) if self.g is None else self.g, G.shape[0], "g")
        q = _as_vector(self.q, n, "q")
        for name, value in (("Q", Q), ("q", q), ("F", F), ("phi", phi), ("G", G), ("g", g)):
            value = np.array(value, dtype=float)
            if not np.isfinite(value).all():
                raise ValueError(f"{name} contains non-finite entries")
            value.flags.writeable = False
            object.__setattr__(self, name, value)

    @property
    def n_y(self) -> int:
        return self.Q.shape[0]

    @property
    def n_eq(self) -> int:
        return self.F.shape[0]

    @property
    def n_in(self) -> int:
        return self.G.shape[0]

    @cached_property
    def cholesky(self) -> np.ndarray:
        """Lower-triangular L with Q = L L'. Raises NotPositiveDefinite."""
        try:
            return np.linalg.cholesky(self.Q)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite("Cholesky factorization of Q failed") from exc

    def solve_Q(self, rhs):
        """Return Q^{-1} rhs using the cached factorization."""
        return cho_solve((self.cholesky, True), rhs, check_finite=False)

    @property
    def M(self) -> np.ndarray:
        """All constraint rows stacked in dual order, ``[G; F]``."""
        return np.vstack([self.G, self.F])

    @property
    def b(self) -> np.ndarray:
        return np.concatenate([self.g, self.phi])

    def objective(self, y) -> float:
        return 0.5 * y @ self.Q @ y + self.q @ y

    def to_dict(self) -> dict:
        return {
            "n_y": self.n_y,
            "n_eq": self.n_eq,
            "n_in": self.n_in,
            **{k: getattr(self, k).tolist() for k in ("Q", "q", "F", "phi", "G", "g")},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QpInstance":
        n = int(data["n_y"])
        mats = {k: np.asarray(data[k], dtype=float) for k in ("Q", "q", "F", "phi", "G", "g")}
        mats["F"] = mats["F"].reshape(int(data["n_eq"]), n)
        mats["G"] = mats["G"].reshape(int(data["n_in"]), n)
        return cls(**mats)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True, eq=False)
class DualQp:
    """``min 1/2 z'Hz + h'z`` subject to the first ``n_in`` entries of z being >= 0."""

    H: np.ndarray
    h: np.ndarray
    n_in: int
    n_eq: int

    @property
    def n_z(self) -> int:
        return self.n_in + self.n_eq

    def project(self, z):
        z = np.array(z, dtype=float)
        z[: self.n_in] = np.maximum(z[: self.n_in], 0.0)
        return z

    def gradient(self, z):
        return self.H @ z + self.h

    def objective(self, z) -> float:
        return 0.5 * z @ self.H @ z + self.h @ z


class KktResidual(NamedTuple):
    stationarity: float
    feasibility: float
    complementarity: float

    def max(self) -> float:
        return max(self)


@dataclass
class SolveOutput:
    y: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    kkt: KktResidual
    iterations: int
    status: SolveStatus
    # active inequality rows at termination (active-set method only)
    working_set: tuple = field(default=())

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.lam, self.mu])

    @property
    def solved(self) -> bool:
        return self.status is SolveStatus.SOLVED


class LicqReport(NamedTuple):
    active_rows: np.ndarray
    rank: int
    licq_holds: bool


def assemble_dual(qp: QpInstance) -> DualQp:
    """Build the Lagrange dual of ``qp`` (constant term dropped).

    With M = [G; F] and b = (g, phi) the dual data are H = M Q^{-1} M' and
    h = M Q^{-1} q + b. Q^{-1} is applied through triangular solves with the
    Cholesky factor, never formed.
    """
    L = qp.cholesky
    X = solve_triangular(L, qp.M.T, lower=True, check_finite=False)
    c = solve_triangular(L, qp.q, lower=True, check_finite=False)
    H = X.T @ X
    H = 0.5 * (H + H.T)
    h = X.T @ c + qp.b
    return DualQp(H=H, h=h, n_in=qp.n_in, n_eq=qp.n_eq)


def recover_primal(qp: QpInstance, z) -> np.ndarray:
    """Primal optimizer from a dual optimizer: y = -Q^{-1}(F'mu + G'lam + q)."""
    z = _as_vector(z, qp.n_in + qp.n_eq, "z")
    return -qp.solve_Q(qp.M.T @ z + qp.q)


def kkt_residual(qp: QpInstance, y, lam, mu) -> KktResidual:
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    stat = qp.Q @ y + qp.q + qp.F.T @ mu + qp.G.T @ lam
    slack = qp.G @ y - qp.g
    feas = 0.0
    if qp.n_eq:
        feas = np.abs(qp.F @ y - qp.phi).max()
    if qp.n_in:
        feas = max(feas, np.maximum(slack, 0.0).max())
    comp = np.abs(lam * slack).max() if qp.n_in else 0.0
    return KktResidual(float(np.abs(stat).max()) if qp.n_y else 0.0, float(feas), float(comp))


def check_licq(qp: QpInstance, y, active_tol: float = DEFAULT_ACTIVE_TOL) -> LicqReport:
    """Rank test on the active inequality rows stacked atop all equality rows."""
    y = _as_vector(y, qp.n_y, "y")
    active = np.flatnonzero(qp.G @ y - qp.g >= -active_tol)
    stacked = np.vstack([qp.G[active], qp.F])
    if stacked.shape[0] == 0:
        return LicqReport(active, 0, True)
    rank = int(np.linalg.matrix_rank(stacked))
    return LicqReport(active, rank, rank == stacked.shape[0])


def fixed_point_residual(dual: DualQp, z, gamma: float = 1.0) -> float:
    """Infinity norm of P_C[z - gamma (Hz + h)] - z."""
    step = dual.project(z - gamma * dual.gradient(z))
    return float(np.abs(step - z).max()) if dual.n_z else 0.0


def _power_iteration(H, iters=100, seed=0):
    if H.shape[0] == 0:
        return 0.0
    v = np.random.default_rng(seed).standard_normal(H.shape[0])
    est = 0.0
    for _ in range(iters):
        w = H @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        if abs(nrm - est) <= 1e-10 * nrm:
            est = nrm
            break
        est = nrm
    return est


def _diverging_ray(dual: DualQp, d) -> bool:
    # the dual decreases along d and its minimizer on the ray lies past DIVERGENCE_NORM
    slope = dual.h @ d
    curv = d @ dual.H @ d
    return slope < 0.0 and -slope > DIVERGENCE_NORM * max(curv, 0.0)


def solve_dual(dual: DualQp, tol: float = DEFAULT_TOL, max_iter: int = 100000, z0=None):
    """Accelerated projected gradient with adaptive restart on the dual QP.

    Returns ``(z, status, iterations)``. The step is 1/L with L a power-iteration
    estimate of ||H||_2 (inflated by 1% as a safety margin). Termination uses the
    fixed-point residual at that step; a dual iterate whose norm exceeds 1e10 is
    reported as Infeasible, since an unbounded dual means an infeasible primal.
    Once ``|z| > 1e6`` the direction of z is also checked every 100 iterations:
    if the dual keeps decreasing along it past norm 1e10 the primal is declared
    infeasible early.
    """
    n = dual.n_z
    z = np.zeros(n) if z0 is None else dual.project(_as_vector(z0, n, "z0"))
    if n == 0:
        return z, SolveStatus.SOLVED, 0
    lip = 1.01 * _power_iteration(dual.H)
    if lip == 0.0:
        # H = 0: the dual is linear; it is bounded only if h vanishes off the cone
        grad = dual.h
        if np.all(grad[: dual.n_in] >= -tol) and np.all(np.abs(grad[dual.n_in:]) <= tol):
            return z, SolveStatus.SOLVED, 0
        return z, SolveStatus.INFEASIBLE, 0
    step = 1.0 / lip
    z_prev = z.copy()
    v = z.copy()
    theta = 1.0
    for k in range(1, max_iter + 1):
        grad = dual.gradient(v)
        z_new = dual.project(v - step * grad)
        if np.abs(z_new - v).max() <= tol and fixed_point_residual(dual, z_new, step) <= tol:
            return z_new, SolveStatus.SOLVED, k
        nz = np.linalg.norm(z_new)
        if nz > DIVERGENCE_NORM:
            return z_new, SolveStatus.INFEASIBLE, k
        if k % 100 == 0 and nz > 1e6 and _diverging_ray(dual, z_new / nz):
            return z_new, SolveStatus.INFEASIBLE, k
        # gradient-based restart
        if grad @ (z_new - z) > 0.0:
            theta = 1.0
            v = z_new.copy()
        else:
            theta_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta * theta))
            v = z_new + ((theta - 1.0) / theta_next) * (z_new - z)
            theta = theta_next
        z_prev, z = z, z_new
    return z, SolveStatus.MAX_ITER, max_iter


# --------------------------------------------------------------------------
# Dual active-set method (Goldfarb-Idnani) in Cholesky-transformed coordinates
# --------------------------------------------------------------------------

class _ActiveSetState:
    """Least-distance form: min 1/2|w|^2 + c'w, E w = phi, A w <= g, y = L^{-T} w."""

    def __init__(self, qp: QpInstance):
        L = qp.cholesky
        self.c = solve_triangular(L, qp.q, lower=True, check_finite=False)
        self.E = solve_triangular(L, qp.F.T, lower=True, check_finite=False).T
        self.A = solve_triangular(L, qp.G.T, lower=True, check_finite=False).T
        self.phi = qp.phi
        self.g = qp.g
        self.n_eq = qp.n_eq
        self.n_in = qp.n_in
        scale = np.linalg.norm(self.A, axis=1) if self.n_in else np.zeros(0)
        self.row_norm = np.where(scale > 0, scale, 1.0)

    def normals(self, working):
        return np.vstack([self.E, self.A[working]]) if working else self.E

    def subspace_min(self, working):
        """Minimize over {E w = phi, A_W w = g_W}. Drops dependent working rows.

        Returns ``(w, u_eq, u_in, working)``.
        """
        working = list(working)
        while True:
            N = self.normals(working)
            b = np.concatenate([self.phi, self.g[working]])
            if N.shape[0] == 0:
                return -self.c.copy(), np.zeros(0), np.zeros(0), working
            Q1, R = np.linalg.qr(N.T)
            diag = np.abs(np.diag(R))
            tiny = diag <= 1e-11 * max(1.0, diag.max(initial=0.0))
            if tiny.any():
                first = int(np.flatnonzero(tiny)[0])
                if first < self.n_eq:
                    raise InfeasibleProblem("equality constraint rows are linearly dependent")
                del working[first - self.n_eq]
                continue
            rhs = b + N @ self.c
            u = -solve_triangular(R, solve_triangular(R, rhs, trans="T", check_finite=False), check_finite=False)
            w = -self.c - N.T @ u
            return w, u[: self.n_eq], u[self.n_eq:], working


def _solve_active_set(qp: QpInstance, tol: float, max_iter: int, z0=None):
    st = _ActiveSetState(qp)
    n_eq = st.n_eq
    working = []
    if z0 is not None and st.n_in:
        working = [int(i) for i in np.flatnonzero(np.asarray(z0)[: st.n_in] > 0)]
    w, u_eq, u_in, working = st.subspace_min(working)
    # warm start: prune rows with negative multipliers until dual feasible
    while working and u_in.min() < 0.0:
        del working[int(np.argmin(u_in))]
        w, u_eq, u_in, working = st.subspace_min(working)

    iterations = 0
    status = SolveStatus.MAX_ITER
    while iterations < max_iter:
        if st.n_in == 0:
            status = SolveStatus.SOLVED
            break
        viol = (st.A @ w - st.g) / st.row_norm
        if working:
            viol[working] = -np.inf
        p = int(np.argmax(viol))
        if viol[p] * st.row_norm[p] <= tol:
            status = SolveStatus.SOLVED
            break
        n_plus = st.A[p]
        u_p = 0.0
        added = False
        while iterations < max_iter:
            iterations += 1
            N = st.normals(working)
            if N.shape[0]:
                Q1, R = np.linalg.qr(N.T)
                proj = Q1.T @ n_plus
                zdir = n_plus - Q1 @ proj
                r = solve_triangular(R, proj, check_finite=False)
            else:
                zdir = n_plus.copy()
                r = np.zeros(0)
            r_in = r[n_eq:]
            t1, block = np.inf, None
            if r_in.size:
                pos = np.flatnonzero(r_in > 1e-12 * max(1.0, np.abs(r_in).max()))
                if pos.size:
                    ratios = u_in[pos] / r_in[pos]
                    j = int(np.argmin(ratios))
                    t1, block = max(float(ratios[j]), 0.0), int(pos[j])
            zz = zdir @ zdir
            if zz > (1e-10 * np.linalg.norm(n_plus)) ** 2:
                t2 = (n_plus @ w - st.g[p]) / zz
            else:
                zdir = np.zeros_like(zdir)
                t2 = np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                status = SolveStatus.INFEASIBLE
                break
            t = min(t1, t2)
            w = w - t * zdir
            u_eq = u_eq - t * r[:n_eq]
            u_in = u_in - t * r_in
            u_p += t
            if t2 <= t1:
                working.append(p)
                u_in = np.append(u_in, u_p)
                added = True
                break
            del working[block]
            u_in = np.delete(u_in, block)
        if status is SolveStatus.INFEASIBLE or not added:
            break

    lam = np.zeros(st.n_in)
    if working:
        lam[working] = np.maximum(u_in, 0.0)
    return np.concatenate([lam, u_eq]), status, iterations, tuple(sorted(working))


def _polish(qp: QpInstance, y, z, working, rounds: int = 2):
    """Pull the recovered primal onto the working rows and correct z to match.

    Each round solves (N Q^{-1} N') d = N y - b for the working rows N and
    applies y -= Q^{-1} N' d, z_N += d. The correction is small, so the rows end
    up satisfied to rounding level even when the multipliers are large.
    """
    rows = np.concatenate([np.asarray(sorted(working), dtype=int), qp.n_in + np.arange(qp.n_eq)])
    if rows.size == 0:
        return y, z
    M = qp.M[rows]
    X = solve_triangular(qp.cholesky, M.T, lower=True, check_finite=False)
    R = np.linalg.qr(X, mode="r")
    if np.abs(np.diag(R)).min() <= 1e-11 * np.abs(np.diag(R)).max():
        return y, z
    y, z = y.copy(), z.copy()
    for _ in range(rounds):
        slack = M @ y - qp.b[rows]
        delta = solve_triangular(R, solve_triangular(R, slack, trans="T", check_finite=False), check_finite=False)
        z[rows] += delta
        y -= qp.solve_Q(M.T @ delta)
    z[: qp.n_in] = np.maximum(z[: qp.n_in], 0.0)
    return y, z


def solve_qp(
    qp: QpInstance,
    tol: float = DEFAULT_TOL,
    max_iter: int | None = None,
    method: str = "active_set",
    z0=None,
) -> SolveOutput:
    """Solve ``qp`` through its dual and recover the primal optimizer.

    ``method="active_set"`` (default) runs a Goldfarb-Idnani dual active-set
    method; ``method="apg"`` runs accelerated projected gradient on the explicit
    dual. Either way the primal is recovered from z with :func:`recover_primal`.
    """
    if method == "active_set":
        max_iter = max_iter or 20 * (qp.n_in + qp.n_eq) + 100
        z, status, iters, working = _solve_active_set(qp, tol, max_iter, z0)
    elif method == "apg":
        dual = assemble_dual(qp)
        z, status, iters = solve_dual(dual, tol=tol, max_iter=max_iter or 100000, z0=z0)
        working = ()
    else:
        raise ValueError(f"unknown QP method {method!r}")
    y = recover_primal(qp, z)
    if status is SolveStatus.SOLVED and method == "active_set":
        y, z = _polish(qp, y, z, working)
    lam, mu = z[: qp.n_in], z[qp.n_in:]
    return SolveOutput(
        y=y,
        lam=lam,
        mu=mu,
        kkt=kkt_residual(qp, y, lam, mu),
        iterations=iters,
        status=status,
        working_set=working,
    )
