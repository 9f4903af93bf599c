import numpy as np
import pytest

from bpmpc.closed_loop import (
    ClosedLoopProblem,
    JacobianStack,
    closed_loop_cost,
    rollout,
    rollout_with_jacobians,
    state_violation,
    total_gradient,
    trajectory_csv,
)
from bpmpc.dynamics import CartPendulum, CartPendulumParams, LinearPlant
from bpmpc.errors import DimensionMismatch, InfeasibleAt
from bpmpc.mpc import (
    CholeskyParameterization,
    FixedParameterization,
    MpcDefinition,
    box_polytope,
    dare_terminal_cost,
    solve_mpc,
)
from bpmpc.tuner import evaluate
from oracles import central_difference, double_integrator, double_integrator_problem, fd_closed_loop_gradient


def test_zero_horizon_gives_two_states():
    problem, p = double_integrator_problem(T=0)
    traj = rollout(problem, p)
    assert traj.states.shape == (2, 4) and traj.inputs.shape == (1, 2)


def test_rest_stays_at_rest():
    problem, p = double_integrator_problem(x0=(0.0, 0.0, 0.0, 0.0))
    traj = rollout(problem, p)
    assert np.all(traj.states == 0.0) and np.all(traj.inputs == 0.0)


def test_jacobian_of_initial_state_is_zero_and_empty_parameterization():
    A, B = double_integrator()
    defn = MpcDefinition(N=3, n_x=4, n_u=2, Qx=np.eye(4), parameterization=FixedParameterization(np.eye(4), np.eye(2)))
    problem = ClosedLoopProblem(defn, LinearPlant(A, B), np.ones(4), T=5)
    traj, stack = rollout_with_jacobians(problem, np.zeros(0))
    assert stack.Jx.shape == (7, 4, 0)
    problem, p = double_integrator_problem()
    _, stack = rollout_with_jacobians(problem, p)
    assert np.all(stack.Jx[0] == 0.0)


def test_one_step_composition():
    problem, p = double_integrator_problem(T=1)
    _, stack = rollout_with_jacobians(problem, p)
    step = solve_mpc(problem.defn, problem.x0, problem.fixed_model, None, p, with_jacobians=True)
    np.testing.assert_allclose(stack.Ju[0], step.J_u0.p, atol=1e-14)
    np.testing.assert_allclose(stack.Jx[1], problem.plant.B @ step.J_u0.p, atol=1e-14)


def test_recompute_invariant():
    problem, p = double_integrator_problem()
    traj = rollout(problem, p)
    for t in range(traj.T + 1):
        np.testing.assert_array_equal(traj.states[t + 1], problem.plant.step(traj.states[t], traj.inputs[t]))


def test_noise_enters_the_state_update():
    problem, p = double_integrator_problem(T=5)
    noise = np.random.default_rng(0).normal(scale=1e-3, size=(6, 4))
    traj = rollout(problem, p, noise=noise)
    for t in range(6):
        np.testing.assert_allclose(traj.states[t + 1], problem.plant.step(traj.states[t], traj.inputs[t]) + noise[t],
                                   rtol=0, atol=1e-15)


def test_gradient_matches_fd_over_seeds():
    used, excluded = 0, 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        problem, p = double_integrator_problem(x0=rng.uniform(-0.8, 0.8, 4))
        ev = evaluate(problem, p)
        fd, flagged = fd_closed_loop_gradient(problem, p)
        if flagged.any():
            excluded += 1
            continue
        used += 1
        assert np.linalg.norm(ev.gradient - fd) <= 1e-4 * np.linalg.norm(fd)
    assert used >= 10, f"only {used} usable seeds ({excluded} excluded)"


@pytest.mark.parametrize("mode", ["shifted", "current-state-first"])
def test_relinearized_gradient_matches_fd(mode):
    plant = CartPendulum(CartPendulumParams(dt=0.05))
    Hu, hu = box_polytope([-2.0], [2.0])
    par = CholeskyParameterization(4, 1)
    Qx = np.diag([10.0, 1, 10, 1])
    defn = MpcDefinition(N=4, n_x=4, n_u=1, Qx=Qx, parameterization=par, Hu=Hu, hu=hu)
    A, B = plant.jacobians(np.zeros(4), np.zeros(1))
    p = par.params_for(dare_terminal_cost(A, B, Qx, 0.1 * np.eye(1)), 0.1)
    problem = ClosedLoopProblem(defn, plant, [0.1, 0.0, 0.2, 0.0], T=8, input_weight=0.01, linearization=mode)
    ev = evaluate(problem, p)
    fd, flagged = fd_closed_loop_gradient(problem, p)
    assert not flagged.any()
    assert np.linalg.norm(ev.gradient - fd) <= 1e-5 * np.linalg.norm(fd)


def test_tuned_initial_guess_gradient_matches_fd():
    plant = CartPendulum(CartPendulumParams(dt=0.05))
    par = CholeskyParameterization(4, 1)
    defn = MpcDefinition(N=3, n_x=4, n_u=1, Qx=np.eye(4), parameterization=par)
    A, B = plant.jacobians(np.zeros(4), np.zeros(1))
    p_mpc = par.params_for(dare_terminal_cost(A, B, np.eye(4), np.eye(1)), 1.0)
    problem = ClosedLoopProblem(defn, plant, [0.1, 0.0, 0.3, 0.0], T=4, linearization="shifted",
                                tune_initial_guess=True)
    p = np.concatenate([p_mpc, 0.05 * np.random.default_rng(1).standard_normal(defn.n_y)])
    ev = evaluate(problem, p)
    fd, flagged = fd_closed_loop_gradient(problem, p)
    assert not flagged.any()
    np.testing.assert_allclose(ev.gradient, fd, atol=1e-6 * np.linalg.norm(fd))


def soft_problem(T=15, v_max=0.4, soft=True):
    A, B = double_integrator()
    Hx, hx = box_polytope([-np.inf, -v_max, -np.inf, -v_max], [np.inf, v_max, np.inf, v_max])
    Hu, hu = box_polytope([-0.5] * 2, [0.5] * 2)
    par = CholeskyParameterization(4, 2)
    defn = MpcDefinition(N=5, n_x=4, n_u=2, Qx=np.eye(4), parameterization=par, Hx=Hx, hx=hx, Hu=Hu, hu=hu,
                         soft=soft, c1=2.0, c2=2.0)
    problem = ClosedLoopProblem(defn, LinearPlant(A, B), [1.0, 0.5, -1.0, 0.2], T=T, input_weight=0.1)
    p = par.params_for(dare_terminal_cost(A, B, np.eye(4), 0.1 * np.eye(2)), 0.1)
    return problem, p


def test_penalized_gradient_matches_fd():
    problem, p = soft_problem()
    ev = evaluate(problem, p, 60.0, 40.0)
    assert ev.trajectory.slacks.max() > 0
    fd, flagged = fd_closed_loop_gradient(problem, p, 60.0, 40.0)
    assert not flagged.any()
    assert np.linalg.norm(ev.gradient - fd) <= 1e-3 * np.linalg.norm(fd)


def test_hard_soft_consistency():
    problem, p = soft_problem(v_max=0.6)
    soft = rollout(problem, p)
    assert soft.slacks.max() <= 1e-9
    problem, p = soft_problem(v_max=0.6, soft=False)
    hard = rollout(problem, p)
    np.testing.assert_allclose(hard.states, soft.states, atol=1e-6)


def test_hard_mode_reports_infeasible_step():
    A, B = double_integrator()
    Hx, hx = box_polytope([-0.1] * 4, [0.1] * 4)
    Hu, hu = box_polytope([-0.01] * 2, [0.01] * 2)
    defn = MpcDefinition(N=3, n_x=4, n_u=2, Qx=np.eye(4), parameterization=FixedParameterization(np.eye(4), np.eye(2)),
                         Hx=Hx, hx=hx, Hu=Hu, hu=hu)
    with pytest.raises(InfeasibleAt) as info:
        rollout(ClosedLoopProblem(defn, LinearPlant(A, B), [1.0, 0, 0, 0], T=3), np.zeros(0))
    assert info.value.t == 0


def test_determinism():
    problem, p = soft_problem()
    a, sa = rollout_with_jacobians(problem, p)
    b, sb = rollout_with_jacobians(problem, p)
    assert np.array_equal(a.states, b.states) and np.array_equal(sa.Jx, sb.Jx) and np.array_equal(sa.Jz, sb.Jz)
    assert trajectory_csv(a, 0.1) == trajectory_csv(b, 0.1)


def test_cost_examples():
    problem, p = double_integrator_problem(T=0)
    traj = rollout(problem, p)
    traj.states[:] = 0.0
    traj.inputs[:] = 0.0
    assert closed_loop_cost(traj, np.eye(4), 1.0)[0] == 0.0
    traj.states[0] = [1.0, 0.0, 0.0, 0.0]
    assert closed_loop_cost(traj, np.diag([100.0, 1, 100, 1]))[0] == 100.0


def test_cost_gradient_matches_fd():
    problem, p = double_integrator_problem(T=6)
    traj = rollout(problem, p)
    Qx = np.diag([3.0, 1.0, 2.0, 0.5])
    _, grad = closed_loop_cost(traj, Qx, 0.3)
    flat = np.concatenate([traj.states.ravel(), traj.inputs.ravel()])
    ns = traj.states.size

    def f(v):
        traj.states[:] = v[:ns].reshape(traj.states.shape)
        traj.inputs[:] = v[ns:].reshape(traj.inputs.shape)
        return closed_loop_cost(traj, Qx, 0.3)[0]

    fd = central_difference(f, flat.copy(), h=1e-5)[0]
    np.testing.assert_allclose(np.concatenate([grad["x"].ravel(), grad["u"].ravel()]), fd, rtol=1e-7, atol=1e-7)


def test_total_gradient_blocks():
    rng = np.random.default_rng(3)
    T, n_p = 1, 3
    stack = JacobianStack(Jx=rng.standard_normal((T + 2, 2, n_p)), Ju=rng.standard_normal((T + 1, 1, n_p)),
                          Jy=np.zeros((T + 1, 4, n_p)), Jeps=np.zeros((T + 1, 0, n_p)), Jz=np.zeros((T + 1, 0, n_p)))
    gx = np.zeros((T + 2, 2))
    gx[1] = [1.0, -2.0]
    np.testing.assert_allclose(total_gradient({"x": gx}, stack), gx[1] @ stack.Jx[1])
    np.testing.assert_array_equal(total_gradient({"p": [1.0, 2.0, 3.0]}, stack), [1.0, 2.0, 3.0])
    with pytest.raises(DimensionMismatch):
        total_gradient({"x": np.zeros((T + 1, 2))}, stack)
    with pytest.raises(DimensionMismatch):
        total_gradient({"p": np.zeros(2)}, stack)


def test_violation_and_csv():
    problem, p = soft_problem(T=3)
    traj = rollout(problem, p)
    per, total, worst = state_violation(traj, problem.Hx, problem.hx)
    ref = np.maximum(np.abs(traj.states[:-1, [1, 3]]) - 0.4, 0.0)
    assert total == pytest.approx(ref.sum()) and worst == pytest.approx(ref.max(initial=0.0))
    assert per.shape == (4,)
    lines = trajectory_csv(traj, 0.1).splitlines()
    assert lines[0] == "t,time [s],xbar_1,xbar_2,xbar_3,xbar_4,ubar_1,ubar_2,eps_max,qp_iterations"
    assert len(lines) == 1 + traj.states.shape[0]
