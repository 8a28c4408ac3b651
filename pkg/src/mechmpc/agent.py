"""Agent-side logic: the local problem under principal feedback and message construction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .mechanism import Message, MessageError, SurrogateFamily
from .solver import (DEFAULT_MAX_ITER, DEFAULT_TOL, INFEASIBLE, OcpProblem, OcpSolution,
                     StageBounds, TrueCost, local_problem_model, solve_ocp)
from .sysmodel import AgentCost, PolytopeSet, SystemModel


class LocalInfeasible(RuntimeError):
    def __init__(self, msg, violation=np.nan):
        super().__init__(msg)
        self.violation = violation


@dataclass(eq=False)
class Agent:
    """What agent ``index`` knows: its own dynamics, sets and private cost.

    The feedback fields hold the principal's last coupling reference
    ``(T, n_i)``, aggregated sensitivity ``(T, n_i)`` and exclusion
    trajectory ``(T+1, n_i)``; they start at zero.  ``disturbance`` is the
    agent's slice of the public disturbance forecast.
    """

    index: int
    cost: AgentCost
    A_ii: np.ndarray
    B_i: np.ndarray
    horizon: int
    state_set: Optional[PolytopeSet] = None
    input_set: Optional[PolytopeSet] = None
    disturbance: Optional[np.ndarray] = None
    last_reference: Optional[np.ndarray] = None
    last_Lambda: Optional[np.ndarray] = None
    last_exclusion: Optional[np.ndarray] = None
    current_message: Optional[Message] = None
    state_weight_rule: Optional[Callable] = None
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        self.A_ii = np.atleast_2d(np.asarray(self.A_ii, dtype=float))
        self.B_i = np.atleast_2d(np.asarray(self.B_i, dtype=float))
        T, n_i = self.horizon, self.n_i
        if self.disturbance is None:
            self.disturbance = np.zeros((T, n_i))
        if self.last_reference is None:
            self.last_reference = np.zeros((T, n_i))
        if self.last_Lambda is None:
            self.last_Lambda = np.zeros((T, n_i))
        if self.last_exclusion is None:
            self.last_exclusion = np.zeros((T + 1, n_i))

    @classmethod
    def from_model(cls, model: SystemModel, i: int, cost: AgentCost, sets=None, **kw) -> "Agent":
        Xs, Us = (None, None) if sets is None else sets[i]
        sx = model.state_slice(i)
        return cls(index=i, cost=cost, A_ii=model.block(i, i), B_i=model.input_block(i),
                   horizon=model.horizon, state_set=Xs, input_set=Us,
                   disturbance=model.disturbance_or_zero()[:, sx], **kw)

    @property
    def n_i(self) -> int:
        return self.A_ii.shape[0]

    @property
    def m_i(self) -> int:
        return self.B_i.shape[1]

    def receive(self, reference, Lam, exclusion) -> None:
        self.last_reference = np.array(reference, dtype=float)
        self.last_Lambda = np.array(Lam, dtype=float)
        self.last_exclusion = np.array(exclusion, dtype=float)

    def local_problem(self, x0_i) -> OcpProblem:
        affine = self.disturbance + self.last_reference
        mdl = local_problem_model(self.A_ii, self.B_i, self.horizon, x0_i, affine)
        T = self.horizon
        offset = -float(np.sum(self.last_Lambda * self.last_exclusion[:T]))
        return OcpProblem(mdl, [TrueCost(self.cost)], sets=[(self.state_set, self.input_set)],
                          linear_state_terms=[self.last_Lambda], objective_offset=offset)

    def solve_local(self, x0_i) -> OcpSolution:
        """Minimize the private cost plus the equilibrium fee under the fixed reference.

        The constant ``-Lambda' x_hat`` part of the fee shifts the reported
        objective value only.
        """
        sol = solve_ocp(self.local_problem(x0_i), tol=self.tol, max_iter=self.max_iter)
        if sol.status == INFEASIBLE:
            raise LocalInfeasible(f"agent {self.index}: local problem infeasible "
                                  f"(violation {sol.phase1.violation:.3g})", sol.phase1.violation)
        return sol

    def true_gradients(self, states, inputs):
        """State gradients ``(T+1, n_i)``, input gradients and input curvatures ``(T, m_i)``."""
        states = np.asarray(states, dtype=float)
        inputs = np.asarray(inputs, dtype=float)
        T = self.horizon
        gx = np.zeros_like(states)
        gu = np.zeros_like(inputs)
        cu = np.zeros_like(inputs)
        n_i = self.n_i
        for k in range(T):
            a, b = self.cost.stage_grad(states[k], inputs[k])
            gx[k], gu[k] = a, b
            cu[k] = np.diag(self.cost.stage_hessian(states[k], inputs[k]))[n_i:]
        gx[T] = self.cost.terminal_grad(states[T])
        return gx, gu, cu

    def _gradient_matching(self, states, inputs, family: SurrogateFamily):
        gx, gu, cu = self.true_gradients(states, inputs)
        if self.state_weight_rule is not None:
            v = np.asarray(self.state_weight_rule(np.asarray(states, dtype=float)), dtype=float)
        else:
            v = family.match_state(states, gx)
        try:
            w = family.match_input(inputs, gu, cu)
        except MessageError as exc:
            raise MessageError(f"agent {self.index}: {exc}") from None
        return np.asarray(v, dtype=float), np.asarray(w, dtype=float)

    def build_message_gradient_matching(self, local_solution: OcpSolution,
                                        family: SurrogateFamily) -> Message:
        """Surrogate weights whose derivatives match the true marginal costs at the local plan."""
        if not local_solution.optimal:
            raise MessageError(f"agent {self.index}: local solution status {local_solution.status}")
        tr = local_solution.trajectories[0]
        v, w = self._gradient_matching(tr.states, tr.inputs, family)
        msg = Message(v, w, np.array(local_solution.dyn_multipliers[0]),
                      StageBounds.unbounded(self.n_i, self.m_i, self.horizon), np.array(tr.states))
        self.current_message = msg
        return msg

    def truthful_equilibrium_message(self, states, inputs, nu, family: SurrogateFamily) -> Message:
        """The equilibrium report for a known efficient trajectory and its multipliers."""
        v, w = self._gradient_matching(states, inputs, family)
        return Message(v, w, np.array(nu, dtype=float),
                       StageBounds.unbounded(self.n_i, self.m_i, self.horizon),
                       np.array(states, dtype=float))

    def local_violation(self, states, inputs, x0_i) -> float:
        states = np.asarray(states, dtype=float).reshape(self.horizon + 1, self.n_i)
        inputs = np.asarray(inputs, dtype=float).reshape(self.horizon, self.m_i)
        worst = float(np.max(np.abs(states[0] - np.asarray(x0_i, dtype=float))))
        affine = self.disturbance + self.last_reference
        for k in range(self.horizon):
            pred = self.A_ii @ states[k] + self.B_i @ inputs[k] + affine[k]
            worst = max(worst, float(np.max(np.abs(states[k + 1] - pred))))
            if self.input_set is not None:
                worst = max(worst, float(np.max(self.input_set.violation(inputs[k]), initial=0.0)))
        if self.state_set is not None:
            for k in range(self.horizon + 1):
                worst = max(worst, float(np.max(self.state_set.violation(states[k]), initial=0.0)))
        return worst

    def build_message_pinned(self, states, inputs, x0_i, tol: float = 1e-9) -> Message:
        """A message whose bounds pin every state and input to the target."""
        viol = self.local_violation(states, inputs, x0_i)
        if viol > tol:
            raise MessageError(f"agent {self.index}: pinned target is locally infeasible "
                               f"(violation {viol:.3g})")
        states = np.asarray(states, dtype=float).reshape(self.horizon + 1, self.n_i)
        inputs = np.asarray(inputs, dtype=float).reshape(self.horizon, self.m_i)
        return Message(np.ones_like(states), np.ones_like(inputs), np.zeros((self.horizon, self.n_i)),
                       StageBounds.pinned(states, inputs), states.copy())

    def simulate_local(self, inputs, x0_i) -> np.ndarray:
        inputs = np.asarray(inputs, dtype=float).reshape(self.horizon, self.m_i)
        X = np.zeros((self.horizon + 1, self.n_i))
        X[0] = x0_i
        affine = self.disturbance + self.last_reference
        for k in range(self.horizon):
            X[k + 1] = self.A_ii @ X[k] + self.B_i @ inputs[k] + affine[k]
        return X


def make_agents(model: SystemModel, costs, sets=None, **kw) -> list:
    return [Agent.from_model(model, i, costs[i], sets, **kw) for i in range(model.num_agents)]
