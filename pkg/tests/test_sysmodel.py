import json

import numpy as np
import pytest

from mechmpc.hvac import HvacParams, build_hvac, PRINTED
from mechmpc.sysmodel import (ModelError, PolytopeSet, SystemModel, Trajectory, build_system,
                              check_cost, check_feasible, coupling_input, quadratic_cost,
                              simulate, split_trajectories, step_dynamics)


def two_scalar(a12=0.3, horizon=3):
    return SystemModel(A=[[1.0, a12], [0.0, 1.0]], B=np.eye(2), partition=[(1, 1), (1, 1)],
                       horizon=horizon, x0=[0.0, 0.0])


def test_identity_has_no_neighbours():
    m = build_system({"A": np.eye(2).tolist(), "B": np.eye(2).tolist(),
                      "partition": [[1, 1], [1, 1]], "horizon": 2, "x0": [0, 0]})
    assert m.neighbors == (frozenset(), frozenset())


def test_hvac_neighbourhoods():
    m = build_hvac(HvacParams())
    assert [sorted(s) for s in m.neighbors] == [[1, 2], [0, 3], [0, 3], [1, 2]]


def test_partition_must_sum():
    with pytest.raises(ModelError):
        build_system({"A": np.eye(2).tolist(), "B": [[1.0], [1.0]],
                      "partition": [[1, 1], [2, 1]], "horizon": 2, "x0": [0, 0]})


def test_off_block_input_rejected():
    with pytest.raises(ModelError):
        SystemModel(A=np.eye(2), B=[[1.0, 0.5], [0.0, 1.0]], partition=[(1, 1), (1, 1)],
                    horizon=1, x0=[0, 0])


def test_declared_neighbours_must_match():
    cfg = {"A": [[1, 0.3], [0, 1]], "B": np.eye(2).tolist(), "partition": [[1, 1], [1, 1]],
           "horizon": 2, "x0": [0, 0], "neighbors": [[], []]}
    with pytest.raises(ModelError):
        build_system(cfg)
    cfg["neighbors"] = [[1], []]
    assert build_system(cfg).neighbors[0] == frozenset({1})


def test_step_dynamics_examples():
    m = SystemModel(A=np.eye(2), B=np.eye(2), partition=[(1, 1), (1, 1)], horizon=1, x0=[0, 0])
    np.testing.assert_array_equal(step_dynamics(m, [1, 0], [0, 0], 0), [1, 0])
    np.testing.assert_array_equal(step_dynamics(m, [0, 0], [1, 2], 0), [1, 2])
    s = SystemModel(A=[[2.0]], B=[[1.0]], partition=[(1, 1)], horizon=1, x0=[0], disturbance=[[-1.0]])
    assert step_dynamics(s, [3.0], [1.0], 0)[0] == 6.0
    with pytest.raises(ModelError):
        step_dynamics(s, [3.0, 1.0], [1.0], 0)


def test_coupling_input_examples():
    m = two_scalar()
    assert coupling_input(m, 1, np.array([5.0, 2.0]), 0)[0] == 0.0
    assert coupling_input(m, 0, np.array([0.0, 2.0]), 0)[0] == pytest.approx(0.6)


def test_coupling_input_hvac_signs():
    p = HvacParams()
    T = np.array([20.0, 21.0, 22.0, 23.0])
    stable = build_hvac(p)
    assert coupling_input(stable, 0, T, 0)[0] == pytest.approx(p.beta * 21 + p.gamma * 22)
    printed = build_hvac(HvacParams(sign_convention=PRINTED))
    assert coupling_input(printed, 0, T, 0)[0] == pytest.approx(-p.beta * 21 - p.gamma * 22)


def test_block_decomposition_identity(rng):
    m = build_hvac(HvacParams(), horizon=3, t_out=[10.0, 11.0, 12.0])
    x, u = rng.normal(20, 2, 4), rng.normal(0, 1, 4)
    full = step_dynamics(m, x, u, 1)
    for i in range(4):
        s = m.state_slice(i)
        local = m.block(i, i) @ x[s] + m.input_block(i) @ u[m.input_slice(i)] + m.dist(1)[s]
        np.testing.assert_allclose(local + coupling_input(m, i, x, 1), full[s], rtol=0, atol=1e-13)


def _digits17(obj):
    if isinstance(obj, list):
        return [_digits17(v) for v in obj]
    if isinstance(obj, float):
        return float(format(obj, ".17g"))
    return obj


def test_config_round_trip_17_digits(rng):
    m = SystemModel(A=rng.normal(size=(3, 3)), B=np.diag(rng.normal(size=3)),
                    partition=[(1, 1), (2, 2)], horizon=4, x0=rng.normal(size=3),
                    disturbance=rng.normal(size=(4, 3)))
    doc = {k: _digits17(v) for k, v in m.to_config().items()}
    m2 = build_system(json.loads(json.dumps(doc)))
    for name in ("A", "B", "x0", "disturbance"):
        assert np.array_equal(getattr(m, name), getattr(m2, name))
    assert m2.neighbors == m.neighbors


def test_arrays_are_read_only():
    m = two_scalar()
    with pytest.raises(ValueError):
        m.A[0, 0] = 5.0


def test_polytope_must_contain_origin():
    with pytest.raises(ModelError):
        PolytopeSet(G=np.array([[1.0]]), g=np.array([-1.0]))
    box = PolytopeSet.box([-1.0], [2.0])
    assert box.contains(np.array([1.5])) and not box.contains(np.array([2.5]))


def test_check_feasible_examples():
    m = two_scalar()
    sets = [(PolytopeSet.box([-1.0], [1.0]), None), (None, None)]
    zero = [Trajectory(np.zeros((4, 1)), np.zeros((3, 1)), i) for i in range(2)]
    assert check_feasible(m, sets, zero) == []

    m1 = m.replace(x0=np.array([1.0, 0.0]))
    rep = check_feasible(m1, sets, zero)
    assert [v.kind for v in rep] == ["initial"]

    # state 1 reaches 1.1 at stage 2, everything else consistent
    U = np.zeros((3, 2))
    U[1, 0] = 1.1
    U[2, 0] = -1.1
    X = simulate(m, U)
    rep = check_feasible(m, sets, split_trajectories(m, X, U), tol=1e-6)
    assert len(rep) == 1
    assert rep[0].kind == "state" and rep[0].stage == 2
    assert rep[0].magnitude == pytest.approx(0.1)


def test_trajectory_dims_checked():
    m = two_scalar()
    with pytest.raises(ModelError):
        Trajectory(np.zeros((3, 1)), np.zeros((3, 1)), 0).check_dims(m)


def test_quadratic_cost_checks_clean():
    c = quadratic_cost(np.eye(2), np.eye(1))
    assert check_cost(c, 2, 1) == []
