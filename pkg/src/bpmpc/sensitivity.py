"""Conservative-Jacobian sensitivities of QP solutions with respect to parameters.

The dual optimizer z is a zero of the fixed-point residual
``P_C[z - gamma (Hz + h)] - z``. Differentiating that identity gives
``U Jz + V = 0`` with

    U = J_PC (I - gamma H) - I,      V = -gamma J_PC (A z + B),

where ``A z + B`` is the parameter derivative of the dual gradient ``Hz + h`` at
fixed z. The primal Jacobian then follows from ``y = -Q^{-1}(M'z + q)``.

Column order of every parameter Jacobian is the caller's; the MPC layer uses
(current state, previous solution, tunable parameters).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.linalg.lapack import dgecon

from bpmpc.errors import DimensionMismatch, SingularU
from bpmpc.qp import DEFAULT_ACTIVE_TOL, DualQp, assemble_dual, QpInstance, SolveOutput, recover_primal

COND_WARN = 1e12


class IllConditionedU(RuntimeWarning):
    """Emitted when the condition estimate of U exceeds ``COND_WARN``."""


class ParamTensor:
    """Sparse (COO) 3-tensor of shape ``(m, n, n_p)``; slice ``[:, :, j]`` is dX/dp_j.

    Duplicate entries are summed, as in scipy's COO format.
    """

    __slots__ = ("shape", "rows", "cols", "params", "vals")

    def __init__(self, shape, rows=(), cols=(), params=(), vals=()):
        self.shape = tuple(int(s) for s in shape)
        self.rows = np.asarray(rows, dtype=np.intp).reshape(-1)
        self.cols = np.asarray(cols, dtype=np.intp).reshape(-1)
        self.params = np.asarray(params, dtype=np.intp).reshape(-1)
        self.vals = np.asarray(vals, dtype=float).reshape(-1)
        if not (self.rows.size == self.cols.size == self.params.size == self.vals.size):
            raise DimensionMismatch("COO index and value arrays differ in length")

    @classmethod
    def zeros(cls, shape):
        return cls(shape)

    @classmethod
    def from_dense(cls, arr, tol=0.0):
        arr = np.asarray(arr, dtype=float)
        if arr.ndim != 3:
            raise DimensionMismatch(f"expected a 3-array, got shape {arr.shape}")
        idx = np.nonzero(np.abs(arr) > tol)
        return cls(arr.shape, idx[0], idx[1], idx[2], arr[idx])

    @property
    def n_p(self) -> int:
        return self.shape[2]

    def todense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        np.add.at(out, (self.rows, self.cols, self.params), self.vals)
        return out

    def slice(self, j: int) -> np.ndarray:
        out = np.zeros(self.shape[:2])
        sel = self.params == j
        np.add.at(out, (self.rows[sel], self.cols[sel]), self.vals[sel])
        return out

    def contract(self, v) -> np.ndarray:
        """Matrix whose column j is ``X_j v`` (shape ``m x n_p``)."""
        m, _, n_p = self.shape
        w = self.vals * np.asarray(v, dtype=float)[self.cols]
        return np.bincount(self.rows * n_p + self.params, weights=w, minlength=m * n_p).reshape(m, n_p)

    def contract_left(self, v) -> np.ndarray:
        """Matrix whose column j is ``X_j' v`` (shape ``n x n_p``)."""
        _, n, n_p = self.shape
        w = self.vals * np.asarray(v, dtype=float)[self.rows]
        return np.bincount(self.cols * n_p + self.params, weights=w, minlength=n * n_p).reshape(n, n_p)

    def __repr__(self):
        return f"ParamTensor(shape={self.shape}, nnz={self.vals.size})"


def _as_tensor(x, shape, name):
    if x is None:
        return ParamTensor.zeros(shape)
    if not isinstance(x, ParamTensor):
        x = ParamTensor.from_dense(x)
    if x.shape != tuple(shape):
        raise DimensionMismatch(f"{name} has shape {x.shape}, expected {tuple(shape)}")
    return x


def _as_jac(x, shape, name):
    if x is None:
        return np.zeros(shape)
    x = np.asarray(x, dtype=float)
    if x.shape != tuple(shape):
        raise DimensionMismatch(f"{name} has shape {x.shape}, expected {tuple(shape)}")
    return x


@dataclass(eq=False)
class ParamJacobians:
    """Derivatives of the QP data with respect to a parameter vector of length ``n_p``.

    Dense 3-arrays are accepted for ``dQ``, ``dF``, ``dG`` and converted to
    :class:`ParamTensor`. Missing fields are zero.
    """

    n_p: int
    dQ: ParamTensor = None
    dq: np.ndarray = None
    dF: ParamTensor = None
    dphi: np.ndarray = None
    dG: ParamTensor = None
    dg: np.ndarray = None

    def bind(self, qp: QpInstance) -> "ParamJacobians":
        """Validate shapes against ``qp`` and fill in zero blocks. Returns self."""
        n, ne, ni, npar = qp.n_y, qp.n_eq, qp.n_in, self.n_p
        self.dQ = _as_tensor(self.dQ, (n, n, npar), "dQ")
        self.dF = _as_tensor(self.dF, (ne, n, npar), "dF")
        self.dG = _as_tensor(self.dG, (ni, n, npar), "dG")
        self.dq = _as_jac(self.dq, (n, npar), "dq")
        self.dphi = _as_jac(self.dphi, (ne, npar), "dphi")
        self.dg = _as_jac(self.dg, (ni, npar), "dg")
        return self

    def check_symmetric(self, tol=1e-12) -> bool:
        d = self.dQ.todense()
        return bool(np.allclose(d, d.transpose(1, 0, 2), atol=tol))


class ConstraintClasses(NamedTuple):
    inactive: np.ndarray
    weakly_active: np.ndarray
    strongly_active: np.ndarray

    @property
    def n_in(self) -> int:
        return self.inactive.size + self.weakly_active.size + self.strongly_active.size


@dataclass
class SensitivityResult:
    Jz: np.ndarray
    Jy: np.ndarray
    cond_U: float
    classes: ConstraintClasses
    warnings: list = field(default_factory=list)


def classify_constraints(qp: QpInstance, solve_output: SolveOutput, class_tol: float = DEFAULT_ACTIVE_TOL):
    """Split inequality rows into inactive, weakly active and strongly active."""
    lam = np.asarray(solve_output.lam, dtype=float)
    slack = qp.g - qp.G @ solve_output.y
    strong = lam > class_tol
    inactive = ~strong & (slack > class_tol)
    weak = ~strong & ~inactive
    return ConstraintClasses(np.flatnonzero(inactive), np.flatnonzero(weak), np.flatnonzero(strong))


def projector_jacobian(classes: ConstraintClasses, n_eq: int = 0, beta: float = 0.0) -> np.ndarray:
    """Diagonal element of the Jacobian of the projection onto {lam >= 0} x R^n_eq.

    Strongly active rows get 1, inactive rows 0, weakly active rows ``beta``
    (any value in [0, 1] is admissible), equality rows 1.
    """
    d = np.zeros(classes.n_in + n_eq)
    d[classes.strongly_active] = 1.0
    d[classes.weakly_active] = beta
    d[classes.n_in:] = 1.0
    return np.diag(d)


def fixed_point_jacobians(dual: DualQp, z, dH, dh, J_PC, gamma: float = 1.0):
    """Return ``(U, V)`` for the fixed-point residual at z.

    ``dH`` is an ``n_z x n_z x n_p`` array (``dH[:, :, j] = dH/dp_j``) and ``dh``
    an ``n_z x n_p`` matrix.
    """
    z = np.asarray(z, dtype=float)
    dH = np.asarray(dH, dtype=float)
    dh = np.asarray(dh, dtype=float)
    n = dual.n_z
    if dH.ndim != 3 or dH.shape[:2] != (n, n) or dh.shape != (n, dH.shape[2]) or z.shape != (n,):
        raise DimensionMismatch("dH, dh and z do not match the dual dimensions")
    action = np.einsum("ikj,k->ij", dH, z) + dh
    return _uv_from_action(dual.H, action, J_PC, gamma)


def _uv_from_action(H, action, J_PC, gamma):
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    J_PC = np.asarray(J_PC, dtype=float)
    n = H.shape[0]
    if J_PC.shape != (n, n) or action.shape[0] != n:
        raise DimensionMismatch("projector Jacobian does not match the dual dimension")
    # J(I - gamma H) - I written without the cancelling identity terms
    U = -gamma * (J_PC @ H) - (np.eye(n) - J_PC)
    V = -gamma * (J_PC @ action)
    return U, V


def dual_sensitivity(U, V):
    """Solve ``U Jz = -V`` by LU with partial pivoting.

    Rows are equilibrated first (this leaves Jz unchanged). Returns
    ``(Jz, cond_U)`` where ``cond_U`` is the 1-norm condition estimate of the
    equilibrated U. Raises :class:`SingularU` on numerical rank deficiency.
    """
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    n = U.shape[0]
    if U.shape != (n, n) or V.shape[0] != n:
        raise DimensionMismatch(f"U {U.shape} and V {V.shape} are incompatible")
    if n == 0:
        return np.zeros((0, V.shape[1])), 1.0
    scale = np.abs(U).max(axis=1)
    if np.any(scale == 0.0):
        raise SingularU("U has a zero row")
    Us = U / scale[:, None]
    Vs = V / scale[:, None]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lu, piv = lu_factor(Us, check_finite=True)
    anorm = np.abs(Us).sum(axis=0).max()
    rcond, info = dgecon(lu, anorm, norm="1")
    if info != 0 or not np.isfinite(rcond) or rcond <= n * np.finfo(float).eps:
        raise SingularU(f"U is numerically singular (rcond={rcond:.3e})")
    Jz = -lu_solve((lu, piv), Vs)
    return Jz, float(1.0 / rcond)


def _solution_derivative_fixed_z(qp: QpInstance, pjac: ParamJacobians, y, z):
    """Columns ``W_j`` = d/dp_j of ``-Q^{-1}(M'z + q)`` holding z fixed."""
    lam, mu = z[: qp.n_in], z[qp.n_in:]
    rhs = pjac.dQ.contract(y) + pjac.dG.contract_left(lam) + pjac.dF.contract_left(mu) + pjac.dq
    return -qp.solve_Q(rhs)


def dual_gradient_action(qp: QpInstance, pjac: ParamJacobians, z, y=None):
    """Derivative of the dual gradient ``Hz + h`` with respect to p at fixed z.

    Uses ``Hz + h = b - M y(z)`` so that column j equals
    ``db_j - dM_j y - M W_j`` with ``W_j`` from the fixed-z primal map. Never
    builds the ``n_z x n_z x n_p`` tensor dH.
    """
    pjac.bind(qp)
    z = np.asarray(z, dtype=float)
    if y is None:
        y = recover_primal(qp, z)
    W = _solution_derivative_fixed_z(qp, pjac, y, z)
    dM_y = np.vstack([pjac.dG.contract(y), pjac.dF.contract(y)])
    db = np.vstack([pjac.dg, pjac.dphi])
    return db - dM_y - qp.M @ W, W


def synthesize_dual_jacobians(qp: QpInstance, pjac: ParamJacobians):
    """Dense ``(dH, dh)`` by the product rule on H = M Q^{-1} M', h = M Q^{-1} q + b.

    Memory is quadratic in the number of constraints times n_p; intended for
    small problems and for cross-checking :func:`dual_gradient_action`.
    """
    pjac.bind(qp)
    n_p = pjac.n_p
    M = qp.M
    Qi_Mt = qp.solve_Q(M.T)
    Qi_q = qp.solve_Q(qp.q)
    dQ = pjac.dQ.todense()
    dM = np.concatenate([pjac.dG.todense(), pjac.dF.todense()], axis=0)
    db = np.vstack([pjac.dg, pjac.dphi])
    nz = M.shape[0]
    dH = np.zeros((nz, nz, n_p))
    dh = np.zeros((nz, n_p))
    for j in range(n_p):
        dMj = dM[:, :, j]
        # d(Q^{-1}) = -Q^{-1} dQ Q^{-1}
        term = dMj @ Qi_Mt
        dH[:, :, j] = term + term.T - Qi_Mt.T @ dQ[:, :, j] @ Qi_Mt
        dh[:, j] = (
            dMj @ Qi_q
            - Qi_Mt.T @ (dQ[:, :, j] @ Qi_q)
            + Qi_Mt.T @ pjac.dq[:, j]
            + db[:, j]
        )
    return dH, dh


def primal_sensitivity(qp: QpInstance, z, Jz, pjac: ParamJacobians, W=None):
    """``Jy = W - Q^{-1} M' Jz`` with W the fixed-z derivative of the primal map."""
    pjac.bind(qp)
    z = np.asarray(z, dtype=float)
    if W is None:
        W = _solution_derivative_fixed_z(qp, pjac, recover_primal(qp, z), z)
    return W - qp.solve_Q(qp.M.T @ Jz)


def qp_sensitivity(
    qp: QpInstance,
    solve_output: SolveOutput,
    pjac: ParamJacobians,
    gamma: float = 1.0,
    beta: float = 0.0,
    class_tol: float = DEFAULT_ACTIVE_TOL,
) -> SensitivityResult:
    """Full pipeline: classify, build U and V, solve for Jz, map to Jy."""
    pjac.bind(qp)
    z = solve_output.z
    classes = classify_constraints(qp, solve_output, class_tol)
    jpc = projector_jacobian(classes, qp.n_eq, beta)
    action, W = dual_gradient_action(qp, pjac, z, solve_output.y)
    U, V = _uv_from_action(assemble_dual(qp).H, action, jpc, gamma)
    Jz, cond = dual_sensitivity(U, V)
    notes = []
    if cond > COND_WARN:
        msg = f"cond(U) = {cond:.3e} exceeds {COND_WARN:.0e}"
        notes.append(msg)
        warnings.warn(msg, IllConditionedU, stacklevel=2)
    Jy = W - qp.solve_Q(qp.M.T @ Jz)
    return SensitivityResult(Jz=Jz, Jy=Jy, cond_U=cond, classes=classes, warnings=notes)

