import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import linear_doc
from mechmpc.mechanism import FeeBreakdown, Message
from mechmpc.scenario import build_scenario
from mechmpc.solver import OcpProblem, TrueCost, kkt_residuals, solve_ocp

SCN = build_scenario(linear_doc(system={"A": [[0.9, 0.1], [0.1, 0.8]], "B": [[1.0, 0.0], [0.0, 1.0]],
                                        "partition": [[1, 1], [1, 1]], "horizon": 4,
                                        "x0": [1.0, -0.5]}))
T = SCN.horizon

floats = st.floats(-5.0, 5.0, allow_nan=False)
weights = st.floats(0.2, 5.0, allow_nan=False)


def _message(draw_v, draw_w, lam, x):
    return Message(np.array(draw_v).reshape(T + 1, 1), np.array(draw_w).reshape(T, 1),
                   np.array(lam).reshape(T, 1), Message.initial(1, 1, T).bounds,
                   np.array(x).reshape(T + 1, 1))


messages = st.builds(_message, st.lists(weights, min_size=T + 1, max_size=T + 1),
                     st.lists(weights, min_size=T, max_size=T),
                     st.lists(floats, min_size=T, max_size=T),
                     st.lists(floats, min_size=T + 1, max_size=T + 1))


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(other=messages, own=messages, alt=messages)
def test_feedback_to_an_agent_ignores_its_own_message(other, own, alt):
    p = SCN.principal()
    a, b = [own, other], [alt, other]
    assert np.array_equal(p.references(a)[0], p.references(b)[0])
    assert np.array_equal(p.lambda_aggregate(a, 0), p.lambda_aggregate(b, 0))
    assert np.array_equal(p.exclusion_trajectory(a, 0), p.exclusion_trajectory(b, 0))


@settings(max_examples=25, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(0, 1e6), st.floats(0, 1e6))
def test_fee_total_is_exact_sum(e, x, lam):
    f = FeeBreakdown.of(e, x, lam)
    assert f.total == e + x + lam


@settings(max_examples=25, deadline=None)
@given(messages)
def test_message_dict_round_trip(m):
    back = Message.from_dict(m.to_dict())
    assert m.distance(back) == 0.0


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.lists(st.floats(-3.0, 3.0), min_size=2, max_size=2))
def test_centralized_solution_satisfies_kkt(x0):
    model = SCN.model.replace(x0=np.array(x0))
    prob = OcpProblem(model, [TrueCost(c) for c in SCN.costs], sets=SCN.sets)
    sol = solve_ocp(prob, tol=1e-10)
    assert sol.optimal
    assert kkt_residuals(prob, sol).max_residual < 1e-7
    assert np.all(np.abs(sol.inputs) <= 1.0 + 1e-9)
