"""Closed-loop MPC tuning by differentiating through QP solutions."""

from bpmpc.closed_loop import (
    ClosedLoopProblem,
    JacobianStack,
    Trajectory,
    closed_loop_cost,
    rollout,
    rollout_with_jacobians,
    state_violation,
    total_gradient,
    trajectory_csv,
)
from bpmpc.dynamics import CartPendulum, CartPendulumParams, LinearPlant, linearize_along
from bpmpc.errors import *  # noqa: F401,F403
from bpmpc.mpc import (
    CholeskyParameterization,
    FixedParameterization,
    LinearModel,
    MpcDefinition,
    box_polytope,
    build_qp,
    dare_terminal_cost,
    solve_mpc,
)
from bpmpc.qp import QpInstance, assemble_dual, kkt_residual, recover_primal, solve_qp
from bpmpc.sensitivity import ParamJacobians, qp_sensitivity
from bpmpc.tuner import Box, Polytope, TuneConfig, TuneResult, project_params, step_size, tune

__version__ = "0.1.0"
