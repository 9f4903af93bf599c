import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bpmpc.dynamics import (
    CartPendulum,
    CartPendulumParams,
    LinearPlant,
    Rk4Model,
    cartpole_ode,
    cartpole_ode_jacobians,
    linearize_along,
    model_jacobians_fd,
    rk4_step,
)
from bpmpc.errors import DecodeError, SingularMassMatrix
from bpmpc.mpc import CholeskyParameterization, MpcDefinition
from oracles import cartpole_reference, central_difference, double_integrator


def cart_definition(N=5):
    return MpcDefinition(N=N, n_x=4, n_u=1, Qx=np.eye(4), parameterization=CholeskyParameterization(4, 1))


def test_ode_equilibria():
    np.testing.assert_array_equal(cartpole_ode(np.zeros(4), 0.0), np.zeros(4))
    assert cartpole_ode(np.array([0, 0, np.pi, 0]), 0.0)[3] == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(x=st.lists(st.floats(-3, 3), min_size=4, max_size=4), u=st.floats(-5, 5))
def test_ode_matches_second_transcription(x, u):
    params = CartPendulumParams(m=1.3, J=0.7, mu=0.2, g=9.81)
    np.testing.assert_allclose(cartpole_ode(np.array(x), u, params),
                               cartpole_reference(x, u, 1.3, 0.7, 0.2, 9.81), rtol=1e-13, atol=1e-13)


def test_ode_batches():
    rng = np.random.default_rng(0)
    X, U = rng.standard_normal((7, 4)), rng.standard_normal((7, 1))
    batched = cartpole_ode(X, U)
    for i in range(7):
        np.testing.assert_allclose(batched[i], cartpole_ode(X[i], U[i]), rtol=1e-15)


def test_singular_mass_matrix():
    with pytest.raises(SingularMassMatrix):
        cartpole_ode(np.zeros(4), 0.0, CartPendulumParams(m=1.0, J=1.0, mu=1.0))
    with pytest.raises(ValueError):
        CartPendulumParams(dt=0.0)


def test_rk4_examples():
    x = np.array([1.0, -2.0])
    np.testing.assert_array_equal(rk4_step(lambda x, u: np.zeros_like(x), x, 0.0, 0.1), x)
    np.testing.assert_allclose(rk4_step(lambda x, u: np.full_like(x, u), x, 3.0, 0.1), x + 0.3, rtol=0, atol=1e-15)
    out = rk4_step(lambda x, u: x, np.array([1.0]), 0.0, 0.1)
    assert abs(out[0] - np.exp(0.1)) <= 1e-7
    with pytest.raises(ValueError):
        rk4_step(lambda x, u: x, np.array([1.0]), 0.0, 0.0)


def test_upright_equilibrium_preserved():
    assert np.abs(CartPendulum().step(np.zeros(4), np.zeros(1))).max() <= 1e-14


@settings(max_examples=40, deadline=None)
@given(x=st.lists(st.floats(-2, 2), min_size=4, max_size=4), u=st.floats(-4, 4))
def test_cartpole_jacobians_contract(x, u):
    plant = CartPendulum()
    x, u = np.array(x), np.array([u])
    fx, fu = plant.jacobians(x, u)
    fx_fd, fu_fd = model_jacobians_fd(plant, x, u, 1e-6)
    scale = max(1.0, np.abs(fx_fd).max())
    np.testing.assert_allclose(fx, fx_fd, rtol=1e-5, atol=1e-5 * scale)
    np.testing.assert_allclose(fu, fu_fd, rtol=1e-5, atol=1e-5 * scale)


def test_ode_jacobians_match_fd():
    rng = np.random.default_rng(1)
    for _ in range(10):
        x, u = rng.standard_normal(4), rng.standard_normal(1)
        ax, au = cartpole_ode_jacobians(x, u)
        np.testing.assert_allclose(ax, central_difference(lambda v: cartpole_ode(v, u), x), atol=1e-8)
        np.testing.assert_allclose(au, central_difference(lambda v: cartpole_ode(x, v), u), atol=1e-8)


def test_linear_plant_contract():
    A, B = double_integrator()
    plant = LinearPlant(A, B)
    fx, fu = model_jacobians_fd(plant, np.ones(4), np.ones(2))
    np.testing.assert_allclose(fx, A, atol=1e-9)
    np.testing.assert_allclose(fu, B, atol=1e-9)
    # the first state does not depend on the second input channel
    assert np.all(fu[0:2, 1] == 0.0)


def test_jacobian_derivatives_match_fd_of_jacobians():
    plant = CartPendulum()
    x, u = np.array([0.1, -0.2, 0.5, 0.3]), np.array([0.7])
    dA, dB = plant.jacobian_derivatives(x, u)
    xu = np.concatenate([x, u])
    ref_A = central_difference(lambda v: plant.jacobians(v[:4], v[4:])[0].ravel(), xu, h=1e-4).reshape(4, 4, 5)
    ref_B = central_difference(lambda v: plant.jacobians(v[:4], v[4:])[1].ravel(), xu, h=1e-4).reshape(4, 1, 5)
    np.testing.assert_allclose(dA, ref_A, atol=1e-7)
    np.testing.assert_allclose(dB, ref_B, atol=1e-7)


def test_linearize_linear_plant():
    A, B = double_integrator()
    defn = MpcDefinition(N=3, n_x=4, n_u=2, Qx=np.eye(4), parameterization=CholeskyParameterization(4, 2))
    y = np.random.default_rng(2).standard_normal(defn.n_y)
    for mode in ("shifted", "current-state-first"):
        lm = linearize_along(LinearPlant(A, B), y, np.ones(4), defn, mode)
        np.testing.assert_array_equal(lm.A, np.broadcast_to(A, (3, 4, 4)))
        np.testing.assert_array_equal(lm.B, np.broadcast_to(B, (3, 4, 2)))
        np.testing.assert_allclose(lm.c, 0.0, atol=1e-15)


def test_linearize_at_rest_gives_origin_model():
    plant = CartPendulum()
    defn = cart_definition()
    lm = linearize_along(plant, np.zeros(defn.n_y), np.zeros(4), defn)
    A0, B0 = plant.jacobians(np.zeros(4), np.zeros(1))
    for k in range(defn.N):
        np.testing.assert_array_equal(lm.A[k], A0)
        np.testing.assert_array_equal(lm.B[k], B0)
    assert np.abs(lm.c).max() <= 1e-15


@pytest.mark.parametrize("mode", ["shifted", "current-state-first"])
def test_linearization_affine_consistency(mode):
    plant = CartPendulum()
    defn = cart_definition()
    rng = np.random.default_rng(3)
    y = rng.standard_normal(defn.n_y)
    x_bar = rng.standard_normal(4)
    lm = linearize_along(plant, y, x_bar, defn, mode, with_derivatives=False)
    xs, us, _ = defn.decode(y)
    for k in range(defn.N):
        xk = x_bar if (mode == "current-state-first" and k == 0) else xs[k + 1]
        uk = us[min(k + 1, defn.N - 1)]
        np.testing.assert_allclose(lm.A[k] @ xk + lm.B[k] @ uk + lm.c[k], plant.step(xk, uk), atol=1e-14)


def test_linearization_derivatives_match_fd():
    plant = CartPendulum()
    defn = cart_definition(N=3)
    rng = np.random.default_rng(4)
    y = 0.5 * rng.standard_normal(defn.n_y)
    x_bar = 0.5 * rng.standard_normal(4)
    lm = linearize_along(plant, y, x_bar, defn, "current-state-first")
    pbar = np.concatenate([x_bar, y])

    def coeffs(v):
        m = linearize_along(plant, v[defn.n_x:], v[:defn.n_x], defn, "current-state-first", with_derivatives=False)
        return np.concatenate([m.A.ravel(), m.B.ravel(), m.c.ravel()])

    fd = central_difference(coeffs, pbar, h=1e-5)
    dense = np.zeros_like(fd)
    nA, nB = lm.A.size, lm.B.size
    for k in range(defn.N):
        for l, col in enumerate(lm.point_cols[k]):
            dense[k * 16:(k + 1) * 16, col] += lm.dA[k, :, :, l].ravel()
            dense[nA + k * 4:nA + (k + 1) * 4, col] += lm.dB[k, :, :, l].ravel()
            dense[nA + nB + k * 4:nA + nB + (k + 1) * 4, col] += lm.dc[k, :, l]
    np.testing.assert_allclose(dense, fd, atol=1e-6)


def test_decode_error_on_length_mismatch():
    defn = cart_definition()
    with pytest.raises(DecodeError):
        linearize_along(CartPendulum(), np.zeros(defn.n_y - 1), np.zeros(4), defn)
    with pytest.raises(ValueError):
        linearize_along(CartPendulum(), np.zeros(defn.n_y), np.zeros(4), defn, mode="nope")


def test_custom_model_registration():
    # any ODE plugs into the RK4 wrapper and inherits the jacobian contract
    model = Rk4Model(ode=lambda x, u: -x + np.asarray(u),
                     ode_jacobians=lambda x, u: (np.broadcast_to(-np.eye(2), np.shape(x)[:-1] + (2, 2)).copy(),
                                                 np.broadcast_to(np.eye(2), np.shape(x)[:-1] + (2, 2)).copy()),
                     dt=0.1, n_x=2, n_u=2)
    x, u = np.array([1.0, -1.0]), np.array([0.5, 0.2])
    fx, fu = model.jacobians(x, u)
    fx_fd, fu_fd = model_jacobians_fd(model, x, u)
    np.testing.assert_allclose(fx, fx_fd, atol=1e-9)
    np.testing.assert_allclose(fu, fu_fd, atol=1e-9)
