"""Plant models: discrete steps, Jacobians, and linearization along trajectories."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from bpmpc.errors import DecodeError, DimensionMismatch, SingularMassMatrix
from bpmpc.mpc import LinearModel, MpcDefinition


class DynamicsModel:
    """Discrete-time plant ``x+ = f(x, u)``.

    Subclasses implement :meth:`step` and :meth:`jacobians`. Second
    derivatives default to central differences of the analytic Jacobians.
    """

    n_x: int
    n_u: int

    def step(self, x, u) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, x, u):
        """Return ``(df/dx, df/du)``."""
        raise NotImplementedError

    def step_and_jacobians(self, x, u):
        fx, fu = self.jacobians(x, u)
        return self.step(x, u), fx, fu

    def jacobian_derivatives(self, x, u, h: float = 1e-5):
        """Derivatives of ``(df/dx, df/du)`` along each entry of ``(x, u)``.

        Returns arrays of shape ``(..., n_x, n_x, n_x + n_u)`` and
        ``(..., n_x, n_u, n_x + n_u)`` from central differences of
        :meth:`jacobians`; leading dimensions of ``x`` are batch dimensions.
        """
        x = np.asarray(x, dtype=float)
        nx, nu = self.n_x, self.n_u
        batch = x.shape[:-1]
        u = np.asarray(u, dtype=float).reshape(batch + (nu,))
        nd = nx + nu
        point = np.concatenate([x, u], axis=-1).reshape(-1, 1, nd)
        # all 2 * nd stencil points of every batch entry in one evaluation
        offsets = np.zeros((2 * nd, nd))
        offsets[0::2] = h * np.eye(nd)
        offsets[1::2] = -h * np.eye(nd)
        stencil = (point + offsets).reshape(-1, nd)
        fx, fu = self.jacobians(stencil[:, :nx], stencil[:, nx:])
        fx = fx.reshape(-1, nd, 2, nx, nx)
        fu = fu.reshape(-1, nd, 2, nx, nu)
        dfx = (fx[:, :, 0] - fx[:, :, 1]) / (2.0 * h)
        dfu = (fu[:, :, 0] - fu[:, :, 1]) / (2.0 * h)
        dfx = np.moveaxis(dfx, 1, -1).reshape(batch + (nx, nx, nd))
        dfu = np.moveaxis(dfu, 1, -1).reshape(batch + (nx, nu, nd))
        return dfx, dfu


@dataclass(frozen=True, eq=False)
class LinearPlant(DynamicsModel):
    """``x+ = A x + B u + c``."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(A.shape[0], -1)
        c = np.zeros(A.shape[0]) if self.c is None else np.asarray(self.c, dtype=float).reshape(-1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", c)

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    def step(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float).reshape(x.shape[:-1] + (self.n_u,))
        return x @ self.A.T + u @ self.B.T + self.c

    def jacobians(self, x, u):
        batch = np.asarray(x).shape[:-1]
        return (np.broadcast_to(self.A, batch + self.A.shape).copy(),
                np.broadcast_to(self.B, batch + self.B.shape).copy())

    def jacobian_derivatives(self, x, u, h: float = 1e-5):
        nx, nu = self.n_x, self.n_u
        batch = np.asarray(x).shape[:-1]
        return np.zeros(batch + (nx, nx, nx + nu)), np.zeros(batch + (nx, nu, nx + nu))


# --------------------------------------------------------------------------
# Cart-pendulum
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CartPendulumParams:
    m: float = 1.0
    J: float = 1.0
    mu: float = 0.1
    g: float = 9.81
    dt: float = 0.015

    def __post_init__(self):
        for name in ("m", "J", "mu", "g", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"cart-pendulum parameter {name} must be positive")


def _mass_det(phi, p: CartPendulumParams):
    det = p.m * p.J - p.mu ** 2 * np.cos(phi) ** 2
    if np.any(det <= 0):
        raise SingularMassMatrix("m J - mu^2 cos(phi)^2 is not positive")
    return det


def cartpole_ode(x, u, params: CartPendulumParams = CartPendulumParams()):
    """State derivative of the cart-pendulum; state is (pos, vel, angle, ang_vel).

    Broadcasts over leading batch dimensions of ``x`` (``u`` has one fewer
    dimension, or a trailing singleton).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.ndim == x.ndim:
        u = u[..., 0]
    m, J, mu, g = params.m, params.J, params.mu, params.g
    vel, phi, om = x[..., 1], x[..., 2], x[..., 3]
    s, c = np.sin(phi), np.cos(phi)
    det = _mass_det(phi, params)
    drive = u + mu * om ** 2 * s
    acc = (m * mu * g * s - mu * c * drive) / det
    ang_acc = (J * drive - mu ** 2 * g * s * c) / det
    return np.stack([vel, acc, om, ang_acc], axis=-1)


def cartpole_ode_jacobians(x, u, params: CartPendulumParams = CartPendulumParams()):
    """Analytic ``(d xdot/dx, d xdot/du)`` of :func:`cartpole_ode` (batched)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.ndim == x.ndim:
        u = u[..., 0]
    m, J, mu, g = params.m, params.J, params.mu, params.g
    phi, om = x[..., 2], x[..., 3]
    s, c = np.sin(phi), np.cos(phi)
    det = _mass_det(phi, params)
    drive = u + mu * om ** 2 * s
    num_a = m * mu * g * s - mu * c * drive
    num_b = J * drive - mu ** 2 * g * s * c
    # derivatives with respect to phi
    d_drive = mu * om ** 2 * c
    d_det = 2.0 * mu ** 2 * c * s
    d_num_a = m * mu * g * c + mu * s * drive - mu * c * d_drive
    d_num_b = J * d_drive - mu ** 2 * g * (c * c - s * s)
    dacc_dphi = (d_num_a * det - num_a * d_det) / det ** 2
    dang_dphi = (d_num_b * det - num_b * d_det) / det ** 2
    # derivatives with respect to ang_vel (through drive)
    dd_om = 2.0 * mu * om * s
    dacc_dom = -mu * c * dd_om / det
    dang_dom = J * dd_om / det

    batch = x.shape[:-1]
    fx = np.zeros(batch + (4, 4))
    fx[..., 0, 1] = 1.0
    fx[..., 1, 2] = dacc_dphi
    fx[..., 1, 3] = dacc_dom
    fx[..., 2, 3] = 1.0
    fx[..., 3, 2] = dang_dphi
    fx[..., 3, 3] = dang_dom
    fu = np.zeros(batch + (4, 1))
    fu[..., 1, 0] = -mu * c / det
    fu[..., 3, 0] = J / det
    return fx, fu


def rk4_step(ode: Callable, x, u, dt: float):
    """Classical RK4 with the input held constant over the step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = ode(x, u)
    k2 = ode(x + 0.5 * dt * k1, u)
    k3 = ode(x + 0.5 * dt * k2, u)
    k4 = ode(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step_with_jacobians(ode: Callable, ode_jac: Callable, x, u, dt: float):
    """RK4 step and its exact Jacobians by forward accumulation through the stages.

    Batched over leading dimensions of ``x``. Returns ``(x+, dx+/dx, dx+/du)``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n = x.shape[-1]
    eye = np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n))

    def stage(xs, dxs_dx, dxs_du):
        k = ode(xs, u)
        ax, au = ode_jac(xs, u)
        return k, ax @ dxs_dx, ax @ dxs_du + au

    k1 = ode(x, u)
    k1x, k1u = ode_jac(x, u)
    k2, k2x, k2u = stage(x + 0.5 * dt * k1, eye + 0.5 * dt * k1x, 0.5 * dt * k1u)
    k3, k3x, k3u = stage(x + 0.5 * dt * k2, eye + 0.5 * dt * k2x, 0.5 * dt * k2u)
    k4, k4x, k4u = stage(x + dt * k3, eye + dt * k3x, dt * k3u)
    w = dt / 6.0
    x_next = x + w * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    fx = eye + w * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    fu = w * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
    return x_next, fx, fu


@dataclass(frozen=True, eq=False)
class Rk4Model(DynamicsModel):
    """Zero-order-hold RK4 discretization of ``xdot = ode(x, u)``."""

    ode: Callable
    ode_jacobians: Callable
    dt: float
    n_x: int
    n_u: int

    def step(self, x, u):
        return rk4_step(self.ode, x, u, self.dt)

    def jacobians(self, x, u):
        _, fx, fu = rk4_step_with_jacobians(self.ode, self.ode_jacobians, x, u, self.dt)
        return fx, fu

    def step_and_jacobians(self, x, u):
        return rk4_step_with_jacobians(self.ode, self.ode_jacobians, x, u, self.dt)


class CartPendulum(Rk4Model):
    """RK4-discretized cart-pendulum with sampling time ``params.dt``."""

    def __init__(self, params: CartPendulumParams = CartPendulumParams()):
        object.__setattr__(self, "params", params)
        super().__init__(
            ode=lambda x, u: cartpole_ode(x, u, params),
            ode_jacobians=lambda x, u: cartpole_ode_jacobians(x, u, params),
            dt=params.dt,
            n_x=4,
            n_u=1,
        )

    def __repr__(self):
        return f"CartPendulum({self.params})"


def model_jacobians_fd(model: DynamicsModel, x, u, h: float = 1e-6):
    """Central-difference ``(df/dx, df/du)`` of ``model.step``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float).reshape(-1)
    nx, nu = x.size, u.size
    fx = np.zeros((nx, nx))
    fu = np.zeros((nx, nu))
    for i in range(nx):
        e = np.zeros(nx)
        e[i] = h
        fx[:, i] = (model.step(x + e, u) - model.step(x - e, u)) / (2.0 * h)
    for i in range(nu):
        e = np.zeros(nu)
        e[i] = h
        fu[:, i] = (model.step(x, u + e) - model.step(x, u - e)) / (2.0 * h)
    return fx, fu


# --------------------------------------------------------------------------
# Linearization along the previous MPC solution
# --------------------------------------------------------------------------

LINEARIZATION_MODES = ("shifted", "current-state-first")


def linearize_along(
    model: DynamicsModel,
    y_prev,
    x_bar,
    defn: MpcDefinition,
    mode: str = "shifted",
    with_derivatives: bool = True,
    fd_step: float = 1e-5,
) -> LinearModel:
    """Affine prediction model from the previous MPC solution.

    Stage k is linearized at ``(x_{k+1}, u_{k+1})`` of ``y_prev``, with the last
    input repeated for k = N-1. In ``"current-state-first"`` mode the measured
    state replaces ``x_1`` of ``y_prev`` for stage 0.

    With ``with_derivatives`` the result also carries the derivatives of
    ``(A_k, B_k, c_k)`` with respect to the linearization point, mapped to
    columns of the ``(x_bar, y_prev)`` parameter blocks.
    """
    if mode not in LINEARIZATION_MODES:
        raise ValueError(f"unknown linearization mode {mode!r}")
    N, nx, nu = defn.N, defn.n_x, defn.n_u
    if model.n_x != nx or model.n_u != nu:
        raise DimensionMismatch("plant and MPC dimensions differ")
    y_prev = np.asarray(y_prev, dtype=float).reshape(-1)
    if y_prev.shape[0] != defn.n_y:
        raise DecodeError(f"expected y_prev of length {defn.n_y}, got {y_prev.shape[0]}")
    xs, us, _ = defn.decode(y_prev)
    x_bar = np.asarray(x_bar, dtype=float).reshape(-1)

    k = np.arange(N)
    u_idx = np.minimum(k + 1, N - 1)
    x_pts = xs[k + 1].copy()
    u_pts = us[u_idx].copy()
    # parameter-Jacobian columns of each linearization coordinate
    y_off = nx
    x_cols = y_off + (k[:, None] + 1) * nx + np.arange(nx)[None, :]
    u_cols = y_off + defn.u_offset + u_idx[:, None] * nu + np.arange(nu)[None, :]
    if mode == "current-state-first":
        x_pts[0] = x_bar
        x_cols[0] = np.arange(nx)

    f, A, B = model.step_and_jacobians(x_pts, u_pts)
    A = np.asarray(A)
    B = np.asarray(B)
    c = f - np.einsum("kij,kj->ki", A, x_pts) - np.einsum("kij,kj->ki", B, u_pts)
    if not with_derivatives:
        return LinearModel(A, B, c)

    dA, dB = model.jacobian_derivatives(x_pts, u_pts, fd_step)
    # c = f - A x* - B u*  =>  dc = -dA x* - dB u*  (first-order terms cancel)
    dc = -np.einsum("kijl,kj->kil", dA, x_pts) - np.einsum("kijl,kj->kil", dB, u_pts)
    point_cols = np.concatenate([x_cols, u_cols], axis=1)
    return LinearModel(A, B, c, point_cols=point_cols, dA=dA, dB=dB, dc=dc)
