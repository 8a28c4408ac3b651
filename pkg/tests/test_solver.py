import dataclasses

import numpy as np
import pytest

from mechmpc.solver import (INFEASIBLE, OPTIMAL, NumericalFailure, OcpProblem, StageBounds,
                            TrueCost, ZeroCost, kkt_residuals, solve_ocp, solve_phase1)
from mechmpc.sysmodel import AgentCost, PolytopeSet, SystemModel, Trajectory, quadratic_cost


def scalar(T=1, x0=1.0):
    return SystemModel(A=[[1.0]], B=[[1.0]], partition=[(1, 1)], horizon=T, x0=[x0])


QUAD = quadratic_cost([[1.0]], [[1.0]])


def test_scalar_example():
    sol = solve_ocp(OcpProblem(scalar(), [TrueCost(QUAD)]))
    assert sol.status == OPTIMAL
    assert sol.inputs[0, 0] == pytest.approx(-0.5, abs=1e-9)
    assert sol.states[1, 0] == pytest.approx(0.5, abs=1e-9)
    assert sol.objective_value == pytest.approx(1.5, abs=1e-9)
    assert sol.dyn_multipliers[0][0, 0] == pytest.approx(1.0, abs=1e-9)


def test_origin_is_optimal():
    m = SystemModel(A=[[1.0, 0.2], [0.1, 0.9]], B=np.eye(2), partition=[(1, 1), (1, 1)],
                    horizon=4, x0=[0.0, 0.0])
    sets = [(PolytopeSet.box([-1.0], [1.0]), PolytopeSet.box([-2.0], [2.0]))] * 2
    sol = solve_ocp(OcpProblem(m, [TrueCost(QUAD)] * 2, sets=sets))
    assert sol.status == OPTIMAL
    assert np.max(np.abs(sol.states)) < 1e-8 and np.max(np.abs(sol.inputs)) < 1e-8
    assert abs(sol.objective_value) < 1e-12


def test_pinned_input():
    b = StageBounds.unbounded(1, 1, 1)
    b.input_lower[:] = b.input_upper[:] = 0.3
    sol = solve_ocp(OcpProblem(scalar(), [TrueCost(QUAD)], extra_bounds=[b]))
    assert sol.inputs[0, 0] == pytest.approx(0.3, abs=1e-12)
    assert sol.states[1, 0] == pytest.approx(1.3, abs=1e-12)
    # stationarity 2u + nu = pi_upper - pi_lower with nu = 2 x1 = 2.6
    assert sol.ineq_multipliers[0]["input_lower"][0, 0] == pytest.approx(3.2, abs=1e-8)


def test_kkt_at_solution_and_perturbation():
    prob = OcpProblem(scalar(), [TrueCost(QUAD)])
    sol = solve_ocp(prob)
    rep = kkt_residuals(prob, sol)
    assert rep.max_residual <= 1e-8
    # input equation 2u0 + nu0 = -1 + 1
    assert rep.stationarity_u[0][0, 0] == pytest.approx(0.0, abs=1e-9)
    X = np.array(sol.trajectories[0].states)
    X[1, 0] += 0.1
    moved = dataclasses.replace(sol, trajectories=[Trajectory(X, sol.trajectories[0].inputs, 0)])
    rep2 = kkt_residuals(prob, moved)
    growth = abs(rep2.stationarity_x[0][1, 0]) - abs(rep.stationarity_x[0][1, 0])
    assert growth == pytest.approx(0.2, rel=0.2)


def test_hvac_kkt_and_nonnegative_multipliers(scenario):
    prob = OcpProblem(scenario.model, [TrueCost(c) for c in scenario.costs], sets=scenario.sets)
    sol = solve_ocp(prob, tol=1e-10)
    assert sol.status == OPTIMAL
    assert kkt_residuals(prob, sol).max_residual <= 1e-8
    for d in sol.ineq_multipliers:
        for arr in d.values():
            assert np.all(np.asarray(arr) >= 0)


def test_phase1_origin():
    m = scalar(T=3, x0=0.0)
    prob = OcpProblem(m, [ZeroCost()], sets=[(PolytopeSet.box([-1.0], [1.0]),
                                              PolytopeSet.box([-1.0], [1.0]))])
    ph = solve_phase1(prob)
    assert ph.feasible and ph.margin > 0


def test_phase1_disjoint_bounds():
    b = StageBounds.unbounded(1, 1, 1)
    b.state_lower[1] = 2.0
    b.state_upper[1] = 3.0
    prob = OcpProblem(scalar(x0=0.0), [TrueCost(QUAD)],
                      sets=[(PolytopeSet.box([-1.0], [1.0]), None)], extra_bounds=[b])
    ph = solve_phase1(prob)
    assert not ph.feasible and ph.violation >= 1.0 - 1e-9
    sol = solve_ocp(prob)
    assert sol.status == INFEASIBLE


def test_phase1_hvac(scenario):
    prob = OcpProblem(scenario.model, [TrueCost(c) for c in scenario.costs], sets=scenario.sets)
    assert solve_phase1(prob).feasible


def test_infeasible_initial_state():
    prob = OcpProblem(scalar(x0=5.0), [TrueCost(QUAD)],
                      sets=[(PolytopeSet.box([-1.0], [1.0]), None)])
    assert solve_ocp(prob).status == INFEASIBLE


def test_non_finite_objective_raises():
    bad = AgentCost(stage=lambda x, u: float("nan"),
                    stage_grad=lambda x, u: (np.array([np.nan]), np.array([np.nan])),
                    terminal=lambda x: 0.0, terminal_grad=lambda x: np.zeros(1))
    with pytest.raises(NumericalFailure):
        solve_ocp(OcpProblem(scalar(), [TrueCost(bad)]))


def test_deterministic(scenario):
    prob = OcpProblem(scenario.model, [TrueCost(c) for c in scenario.costs], sets=scenario.sets)
    a, b = solve_ocp(prob), solve_ocp(prob)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.nu(), b.nu())


def test_unique_from_different_starts(scenario):
    prob = OcpProblem(scenario.model, [TrueCost(c) for c in scenario.costs], sets=scenario.sets)
    base = solve_ocp(prob, tol=1e-10)
    U = np.full((scenario.horizon, 4), 3.0)
    X = np.zeros((scenario.horizon + 1, 4))
    X[0] = scenario.model.x0
    for k in range(scenario.horizon):
        X[k + 1] = scenario.model.A @ X[k] + scenario.model.B @ U[k]
    other = solve_ocp(prob, tol=1e-10, start=(X, U))
    assert np.max(np.abs(base.states - other.states)) < 1e-6
    assert np.max(np.abs(base.inputs - other.inputs)) < 1e-6


def test_fixed_coupling_decouples():
    m = SystemModel(A=[[1.0, 0.5], [0.0, 1.0]], B=np.eye(2), partition=[(1, 1), (1, 1)],
                    horizon=2, x0=[1.0, 1.0])
    c = np.array([[0.25], [0.25]])
    prob = OcpProblem(m, [TrueCost(QUAD)] * 2, fixed_coupling=[c, None])
    assert prob.effective_A()[0, 1] == 0.0
    sol = solve_ocp(prob)
    X, U = sol.states, sol.inputs
    assert X[1, 0] == pytest.approx(X[0, 0] + U[0, 0] + 0.25, abs=1e-12)
