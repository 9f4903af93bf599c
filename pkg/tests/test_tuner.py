import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bpmpc.closed_loop import ClosedLoopProblem
from bpmpc.dynamics import LinearPlant
from bpmpc.errors import EmptyPolytope, InfeasibleAt, ParameterBoundExceeded
from bpmpc.mpc import FixedParameterization, LinearModel, MpcDefinition, box_polytope
from bpmpc.tuner import (
    LOG_COLUMNS,
    Box,
    Polytope,
    TuneConfig,
    log_csv,
    penalty_objective,
    project_params,
    step_size,
    tune,
)
from oracles import double_integrator_problem


def test_step_size_examples():
    assert step_size(1, 5e-4, 0.51) == pytest.approx(5e-4 * math.log(2) / 2 ** 0.51, rel=1e-15)
    assert step_size(1, 5e-4, 0.51) == pytest.approx(2.434e-4, abs=5e-8)
    assert all(step_size(k, 0.0, 0.7) == 0.0 for k in (1, 10, 1000))
    with pytest.raises(ValueError):
        step_size(0, 1.0, 0.7)


def test_schedule_validated_at_construction():
    for eta in (0.5, 0.3, 1.01):
        with pytest.raises(ValueError):
            TuneConfig(eta=eta)
    with pytest.raises(ValueError):
        TuneConfig(rho=0.0)
    TuneConfig(eta=1.0)


def test_projection_examples():
    box = Box(-np.ones(4), np.ones(4))
    np.testing.assert_array_equal(project_params([2.0, -3.0, 0.0, 0.5], box), [1.0, -1.0, 0.0, 0.5])
    inside = np.array([0.1, -0.2, 0.3, 0.0])
    np.testing.assert_array_equal(project_params(inside, box), inside)
    a, b = np.array([1.0, 2.0, -1.0]), 1.0
    p = np.array([3.0, 1.0, 0.0])
    np.testing.assert_allclose(project_params(p, Polytope([a], [b])), p - (a @ p - b) / (a @ a) * a, rtol=1e-15)
    np.testing.assert_array_equal(project_params(p), p)


def test_general_polytope_projection_matches_kkt():
    # projection of (2, 2) onto {x <= 1, y <= 1, x + y <= 1.5} is (0.75, 0.75)
    poly = Polytope([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], [1.0, 1.0, 1.5])
    np.testing.assert_allclose(project_params([2.0, 2.0], poly), [0.75, 0.75], atol=1e-12)
    # only the x <= 1 row is active here
    np.testing.assert_allclose(project_params([3.0, -5.0], poly), [1.0, -5.0], atol=1e-12)


def test_empty_polytope():
    with pytest.raises(EmptyPolytope):
        project_params([0.0, 0.0], Polytope([[1.0, 0.0], [-1.0, 0.0]], [-1.0, -1.0]))
    with pytest.raises(EmptyPolytope):
        Box([1.0], [0.0])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), kind=st.sampled_from(["box", "halfspace", "polytope"]))
def test_projection_idempotent_and_feasible(seed, kind):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    if kind == "box":
        lo = rng.uniform(-2, 0, n)
        poly = Box(lo, lo + rng.uniform(0, 2, n))
    else:
        m = 1 if kind == "halfspace" else int(rng.integers(2, 6))
        poly = Polytope(rng.standard_normal((m, n)), rng.uniform(0.1, 1.0, m))
    p = 3 * rng.standard_normal(n)
    once = project_params(p, poly)
    assert poly.contains(once, tol=1e-10)
    np.testing.assert_allclose(project_params(once, poly), once, rtol=0, atol=0 if kind == "box" else 1e-12)


def test_penalty_objective_examples():
    assert penalty_objective(np.zeros((3, 2)), 7.0, 60.0, 40.0) == 7.0
    assert penalty_objective([[0.5]], 7.0, 60.0, 40.0) == pytest.approx(47.0)


class RatioParameterization:
    """Scalar ``P = p / (1 - p)`` and ``Ru = 1``, so the first MPC input is ``-p x``."""

    n_p = 1

    def evaluate(self, p):
        s = float(p[0])
        return (np.array([[s / (1 - s)]]), np.eye(1), np.array([[[1.0 / (1 - s) ** 2]]]), np.zeros((1, 1, 1)))


def toy_problem():
    # model x+ = x + u inside the MPC, plant x+ = x + 2u, one closed-loop step:
    # C(p) = x0^2 + x0^2 (1 - 2p)^2 with minimizer p = 1/2
    defn = MpcDefinition(N=1, n_x=1, n_u=1, Qx=[[1.0]], parameterization=RatioParameterization())
    return ClosedLoopProblem(defn, LinearPlant([[1.0]], [[2.0]]), [1.0], T=1,
                             linearization="fixed", fixed_model=LinearModel.constant([[1.0]], [[1.0]], 1))


def test_convex_toy_converges_to_minimizer():
    config = TuneConfig(rho=0.1, eta=0.6, max_iters=10000, param_tol=1e-9, projection=Box([0.05], [0.95]))
    result = tune(toy_problem(), [0.2], config)
    assert abs(result.p_star[0] - 0.5) <= 1e-3
    assert len(result.log) <= config.max_iters
    assert result.final.cost == pytest.approx(1.0, abs=1e-5)


def test_zero_gradient_stops_immediately():
    A, B = np.eye(2), np.eye(2)
    defn = MpcDefinition(N=2, n_x=2, n_u=2, Qx=np.eye(2), parameterization=FixedParameterization(np.eye(2), np.eye(2)))
    problem = ClosedLoopProblem(defn, LinearPlant(A, B), [1.0, -1.0], T=3)
    result = tune(problem, np.zeros(0), TuneConfig(max_iters=50))
    assert result.stop_reason == "grad_tol" and len(result.log) == 1 and result.p_star.size == 0


def test_logged_iterates_are_feasible():
    problem, p0 = double_integrator_problem(T=10)
    box = Box(p0 - 0.05, p0 + 0.05)
    result = tune(problem, p0, TuneConfig(rho=5.0, eta=0.6, max_iters=8, projection=box))
    assert len(result.log) == 8
    for rec in result.log:
        assert box.contains(rec.p, tol=1e-10)
    # the large step drives some coordinate onto the boundary
    assert np.any(np.isclose(result.p_star, box.lower) | np.isclose(result.p_star, box.upper))
    lines = log_csv(result).splitlines()
    assert lines[0].split(",")[: len(LOG_COLUMNS)] == list(LOG_COLUMNS) and len(lines) == 9


def test_parameter_cap_aborts():
    problem, p0 = double_integrator_problem(T=10)
    with pytest.raises(ParameterBoundExceeded):
        tune(problem, p0, TuneConfig(rho=1e7, eta=0.6, max_iters=5, param_cap=10.0))


def test_infeasible_rollout_records_iteration():
    A, B = np.eye(1), np.eye(1)
    Hx, hx = box_polytope([-0.1], [0.1])
    Hu, hu = box_polytope([-0.01], [0.01])
    defn = MpcDefinition(N=2, n_x=1, n_u=1, Qx=[[1.0]], parameterization=RatioParameterization(), Hx=Hx, hx=hx,
                         Hu=Hu, hu=hu)
    problem = ClosedLoopProblem(defn, LinearPlant(A, B), [1.0], T=2)
    with pytest.raises(InfeasibleAt) as info:
        tune(problem, [0.3], TuneConfig(max_iters=3))
    assert info.value.iteration == 1 and info.value.partial.log == []
