import numpy as np
import pytest

from mechmpc.hvac import (PRINTED, HvacParams, build_hvac, hvac_cost, hvac_matrix, hvac_surrogate)
from mechmpc.solver import OcpProblem, TrueCost, solve_phase1
from mechmpc.sysmodel import ModelError


def test_decoupled_integrators():
    p = HvacParams(alpha=0.0, beta=0.0, gamma=0.0, eta=0.0, nu_heat=0.0)
    m = build_hvac(p)
    assert np.array_equal(m.A, np.eye(4))
    assert all(len(nb) == 0 for nb in m.neighbors)


def test_printed_diagonal():
    A = hvac_matrix(HvacParams(sign_convention=PRINTED))
    assert A[0, 0] == pytest.approx(1.25)
    assert A[1, 3] == pytest.approx(0.1) and A[3, 1] == pytest.approx(-0.1)


def test_stable_row():
    A = hvac_matrix(HvacParams())
    np.testing.assert_allclose(A[0], [0.75, 0.1, 0.1, 0.0])
    np.testing.assert_allclose(A.sum(axis=1) + 0.05, 1.0)
    m = build_hvac(HvacParams(), horizon=2, t_out=[10.0, 12.0])
    np.testing.assert_allclose(m.disturbance[:, 0], [0.5, 0.6])
    printed = build_hvac(HvacParams(sign_convention=PRINTED), horizon=2, t_out=[10.0, 12.0])
    np.testing.assert_allclose(printed.disturbance[:, 0], [-0.5, -0.6])


def test_stable_spectral_radius():
    A = hvac_matrix(HvacParams())
    assert np.max(np.abs(np.linalg.eigvals(A))) < 1.0


def test_unstable_rejected():
    with pytest.raises(ModelError):
        build_hvac(HvacParams(alpha=0.5, beta=0.3, gamma=0.3))


def test_lambda_strictly_inside():
    with pytest.raises(ModelError):
        build_hvac(HvacParams(lam=(0.5, 1.0, 0.5, 0.5)))


def test_permutation_equivariance():
    p = HvacParams(beta=0.05, gamma=0.12, eta=0.08, nu_heat=0.11)
    q = HvacParams(beta=0.12, gamma=0.05, eta=0.11, nu_heat=0.08)
    P = np.eye(4)[[0, 2, 1, 3]]
    np.testing.assert_allclose(hvac_matrix(q), P @ hvac_matrix(p) @ P.T, atol=0)


def test_cost_at_target():
    c = hvac_cost(21.0, 0.6, 0.3)
    assert c.stage(np.array([21.0]), np.array([0.0])) == pytest.approx(0.2)
    gx, gu = c.stage_grad(np.array([21.0]), np.array([0.0]))
    assert gx[0] == 0.0 and gu[0] == 0.0


def test_input_gradient_value():
    c = hvac_cost(0.0, 0.5, 1.0)
    assert c.stage_grad(np.array([0.0]), np.array([1.0]))[1][0] == pytest.approx(0.5 * np.e, rel=1e-12)
    assert 0.5 * np.e == pytest.approx(1.3591, abs=1e-4)


def test_cost_gradients_finite_difference(rng):
    c = hvac_cost(21.0, 0.7, 0.3)
    h = 1e-6
    for _ in range(100):
        x = rng.uniform(10, 30, 1)
        u = rng.uniform(-5, 5, 1)
        gx, gu = c.stage_grad(x, u)
        fx = (c.stage(x + h, u) - c.stage(x - h, u)) / (2 * h)
        fu = (c.stage(x, u + h) - c.stage(x, u - h)) / (2 * h)
        assert gx[0] == pytest.approx(fx, rel=1e-5, abs=1e-7)
        assert gu[0] == pytest.approx(fu, rel=1e-5, abs=1e-7)
        ft = (c.terminal(x + h) - c.terminal(x - h)) / (2 * h)
        assert c.terminal_grad(x)[0] == pytest.approx(ft, rel=1e-5, abs=1e-7)


def test_cost_curvature_positive(rng):
    for lam, gam in ((0.5, 0.3), (0.8, 1.0)):
        c = hvac_cost(21.0, lam, gam)
        for u in rng.uniform(-5, 5, 50):
            H = c.stage_hessian(np.array([20.0]), np.array([u]))
            assert H[0, 0] == lam
            expected = (1 - lam) * gam ** 2 * np.exp((gam * u) ** 2) * (1 + 2 * gam ** 2 * u ** 2)
            assert H[1, 1] == pytest.approx(expected, rel=1e-12) and H[1, 1] > 0


def test_surrogate_examples():
    fam = hvac_surrogate(20.0)
    assert fam.match_state(22.0, 1.0) == pytest.approx(1.05)
    s = 23.0
    assert fam.state_fn(s, s / 20.0) == 0.0
    assert not fam.input_weight_ok(np.array([0.0]))[0]
    with pytest.raises(ModelError):
        hvac_surrogate(0.0)


def test_default_scenario_shape(scenario):
    assert scenario.horizon == 15 and scenario.sim_length == 100
    assert scenario.average_family.reference == pytest.approx(21.5)
    prob = OcpProblem(scenario.model, [TrueCost(c) for c in scenario.costs], sets=scenario.sets)
    assert solve_phase1(prob).feasible
    for t in (0, 37, 99):
        assert scenario.stage_model(t, scenario.model.x0).horizon == 15
