"""Round orchestration: learning by replay, Nash checks by sampled deviations, receding horizon runs."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .agent import LocalInfeasible
from .mechanism import Message, MessageError, Principal
from .solver import INFEASIBLE, OcpProblem, TrueCost, solve_ocp

log = logging.getLogger(__name__)

CONTROLLERS = ("P", "M", "A")


# --------------------------------------------------------------------------
# learning

@dataclass(eq=False)
class RoundRecord:
    round: int
    messages: list
    status: str
    states: Optional[np.ndarray]
    inputs: Optional[np.ndarray]
    fees: list
    references: list
    true_costs: list
    change: float
    infeasible: bool = False

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "status": self.status,
            "infeasible": self.infeasible,
            "change": self.change,
            "states": None if self.states is None else self.states.tolist(),
            "inputs": None if self.inputs is None else self.inputs.tolist(),
            "fees": [None if f is None else {"externality": f.externality, "x_mismatch": f.x_mismatch,
                                             "lambda_mismatch": f.lambda_mismatch, "total": f.total}
                     for f in self.fees],
            "references": [np.asarray(c).tolist() for c in self.references],
            "true_costs": self.true_costs,
            "messages": [m.to_dict() for m in self.messages],
        }


def bootstrap_messages(model, scenario=None) -> list:
    """Messages before any principal feedback.

    ``unit`` (default): unit weights, zero sensitivities and the initial
    state held as reference.  ``local`` (``mechanism.bootstrap``): each
    agent solves its local problem with zero reference, price and
    exclusion trajectory and reports the gradient-matched message; agents
    whose solve fails fall back to the unit message.
    """
    out = []
    for i, (n_i, m_i) in enumerate(model.partition):
        x_i = model.x0[model.state_slice(i)]
        out.append(Message.initial(n_i, m_i, model.horizon, np.tile(x_i, (model.horizon + 1, 1))))
    if scenario is None or scenario.mech("bootstrap", "unit") == "unit":
        return out
    for i, a in enumerate(scenario.agents(model)):
        try:
            out[i] = a.build_message_gradient_matching(
                a.solve_local(model.x0[model.state_slice(i)]), scenario.family)
        except (LocalInfeasible, MessageError) as exc:
            log.warning("agent %d starts from unit weights: %s", i, exc)
    return out


def agent_update(agents, outcome, messages, family, x0, jobs: int = 1) -> list:
    """Every agent absorbs the round's feedback and rebuilds its message.

    An agent whose local problem fails keeps its previous message.
    """
    offs = np.cumsum([0] + [a.n_i for a in agents])
    x0 = np.asarray(x0, dtype=float)

    def one(i):
        a = agents[i]
        a.receive(outcome.references[i], outcome.lambdas[i], outcome.exclusions[i])
        try:
            sol = a.solve_local(x0[offs[i]:offs[i + 1]])
            return a.build_message_gradient_matching(sol, family)
        except (LocalInfeasible, MessageError) as exc:
            log.warning("agent %d keeps its previous message: %s", i, exc)
            return messages[i].copy()
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            return list(ex.map(one, range(len(agents))))
    return [one(i) for i in range(len(agents))]


def true_costs(costs, model, solution) -> list:
    if solution.states is None or solution.status == INFEASIBLE:
        return [None] * len(costs)
    return [float(costs[i].total(tr.states, tr.inputs)) for i, tr in enumerate(solution.trajectories)]


def run_learning(scenario, rounds: Optional[int] = None, tol: Optional[float] = None,
                 initial: Optional[list] = None, jobs: int = 1) -> list:
    """Replay the game at a fixed initial condition until messages stop moving."""
    lcfg = scenario.config.get("learning", {})
    rounds = int(lcfg.get("rounds", 50) if rounds is None else rounds)
    tol = float(lcfg.get("tol", 1e-6) if tol is None else tol)
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    model = scenario.model
    principal = scenario.principal(jobs=jobs)
    agents = scenario.agents()
    msgs = [m.copy() for m in initial] if initial is not None else bootstrap_messages(model, scenario)
    records = []
    for r in range(rounds):
        out = principal.run_round(msgs)
        new = agent_update(agents, out, msgs, scenario.family, model.x0, jobs)
        change = max(a.distance(b) for a, b in zip(new, msgs))
        sol = out.solution
        records.append(RoundRecord(
            round=r + 1, messages=msgs, status=sol.status,
            states=None if sol.states is None else np.array(sol.states),
            inputs=None if sol.inputs is None else np.array(sol.inputs),
            fees=list(out.fees), references=out.references,
            true_costs=true_costs(scenario.costs, model, sol), change=change,
            infeasible=out.infeasible))
        msgs = new
        if change < tol:
            break
    return records


def solve_true(scenario, model=None, tol=None):
    """The centralized problem with true costs."""
    model = model or scenario.model
    prob = OcpProblem(model, [TrueCost(c) for c in scenario.costs], sets=scenario.sets)
    return solve_ocp(prob, tol=tol or scenario.mech("tol", 1e-10),
                     max_iter=scenario.mech("max_iter", 100))


def truthful_profile(scenario, model=None):
    """Equilibrium messages built from the centralized solution (oracle access)."""
    model = model or scenario.model
    sol = solve_true(scenario, model)
    if not sol.optimal:
        raise RuntimeError(f"centralized problem status {sol.status}")
    agents = scenario.agents(model)
    return [a.truthful_equilibrium_message(tr.states, tr.inputs, sol.dyn_multipliers[i],
                                           scenario.family)
            for i, (a, tr) in enumerate(zip(agents, sol.trajectories))], sol


# --------------------------------------------------------------------------
# Nash verification

DEVIATION_KINDS = ("weights", "reports", "weights+reports", "input-pin")


@dataclass
class AgentDeviationReport:
    agent: int
    base_cost: float
    max_decrease: float
    best_kind: Optional[str]
    samples: int
    incomparable: int


@dataclass
class NashReport:
    agents: list
    tol: float

    @property
    def max_decrease(self) -> float:
        return max(a.max_decrease for a in self.agents)

    @property
    def passed(self) -> bool:
        return self.max_decrease <= self.tol

    def to_dict(self) -> dict:
        return {"passed": self.passed, "tol": self.tol, "max_decrease": self.max_decrease,
                "agents": [a.__dict__ for a in self.agents]}


def agent_total_cost(principal: Principal, costs, messages, i: int, x_hat, Lam):
    """``V_i(z_i(m)) + p_i(m)``, or ``None`` when the surrogate problem is infeasible.

    ``x_hat`` and ``Lam`` depend on the other agents' messages only, so a
    caller varying ``messages[i]`` may pass them in precomputed.
    """
    sol = principal.outcome(messages)
    if sol.status == INFEASIBLE:
        return None
    tr = sol.trajectories[i]
    fee = principal.fee(messages, sol, i, x_hat, Lam)
    return float(costs[i].total(tr.states, tr.inputs)) + fee.total


def deviation(kind: str, msg: Message, rng, sigma: float, x_noise: float, lambda_noise: float,
              input_set=None, nominal_inputs=None) -> Message:
    m = msg.copy()
    if kind in ("weights", "weights+reports"):
        m.v = m.v * np.exp(sigma * rng.standard_normal(m.v.shape))
        m.w = m.w * np.exp(sigma * rng.standard_normal(m.w.shape))
    if kind in ("reports", "weights+reports"):
        m.x_ref = m.x_ref + x_noise * rng.standard_normal(m.x_ref.shape)
        m.lambda_rep = m.lambda_rep + lambda_noise * rng.standard_normal(m.lambda_rep.shape)
    if kind == "input-pin":
        u = np.asarray(nominal_inputs, dtype=float)
        u = u + sigma * np.maximum(1.0, np.abs(u)) * rng.standard_normal(u.shape)
        if input_set is not None and input_set.is_box:
            u = np.clip(u, input_set.lower, input_set.upper)
        m.bounds.input_lower = u.copy()
        m.bounds.input_upper = u.copy()
    return m


def verify_nash(scenario, messages, samples: Optional[int] = None, seed: Optional[int] = None,
                tol: Optional[float] = None, jobs: int = 1) -> NashReport:
    """Sampled unilateral deviations; the profile passes if none lowers cost plus fee by more than ``tol``."""
    vcfg = scenario.config.get("verify", {})
    samples = int(vcfg.get("samples", 100) if samples is None else samples)
    tol = float(vcfg.get("tol", 1e-5) if tol is None else tol)
    seed = scenario.seed if seed is None else int(seed)
    if samples < 1:
        raise ValueError("samples must be >= 1")
    sigma = float(vcfg.get("sigma", 0.1))
    x_noise = float(vcfg.get("x_noise", 0.1))
    l_noise = float(vcfg.get("lambda_noise", 0.1))
    principal = scenario.principal()
    base_sol = principal.outcome(messages)
    if base_sol.status == INFEASIBLE:
        raise ValueError("the profile under test gives an infeasible surrogate problem")
    reports = []
    for i in range(scenario.model.num_agents):
        x_hat = principal.exclusion_trajectory(messages, i)
        Lam = principal.lambda_aggregate(messages, i)
        base = agent_total_cost(principal, scenario.costs, messages, i, x_hat, Lam)
        rng = np.random.default_rng([seed, i])
        devs = []
        for s in range(samples):
            kind = DEVIATION_KINDS[s % len(DEVIATION_KINDS)]
            devs.append((kind, deviation(kind, messages[i], rng, sigma, x_noise, l_noise,
                                         scenario.sets[i][1], base_sol.trajectories[i].inputs)))

        def cost(item):
            prof = list(messages)
            prof[i] = item[1]
            return agent_total_cost(principal, scenario.costs, prof, i, x_hat, Lam)
        if jobs > 1:
            with ThreadPoolExecutor(jobs) as ex:
                vals = list(ex.map(cost, devs))
        else:
            vals = [cost(d) for d in devs]
        best, best_kind, skipped = 0.0, None, 0
        for (kind, _), val in zip(devs, vals):
            if val is None:
                skipped += 1
                continue
            if base - val > best:
                best, best_kind = base - val, kind
        reports.append(AgentDeviationReport(i, base, best, best_kind, samples, skipped))
    return NashReport(reports, tol)


# --------------------------------------------------------------------------
# receding horizon

@dataclass(eq=False)
class MpcLog:
    """Closed-loop record; row ``t`` of ``stage_costs`` is ``l_i(x_t, u_t)`` per agent."""

    controller: str
    states: np.ndarray
    inputs: np.ndarray
    stage_costs: np.ndarray
    disturbance: np.ndarray
    plan_costs: np.ndarray
    statuses: list
    messages: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.inputs.shape[0]

    @property
    def aggregate_cost(self) -> np.ndarray:
        return self.stage_costs.sum(axis=1)

    def cumulative(self, start: int = 0, stop: Optional[int] = None) -> float:
        return float(np.sum(self.aggregate_cost[start:stop]))

    def dynamics_residual(self, A, B) -> float:
        pred = self.states[:-1] @ A.T + self.inputs @ B.T + self.disturbance
        return float(np.max(np.abs(self.states[1:] - pred))) if self.length else 0.0

    def records(self):
        for t in range(self.length):
            rec = {"stage": t, "controller": self.controller, "state": self.states[t].tolist(),
                   "input": self.inputs[t].tolist(), "next_state": self.states[t + 1].tolist(),
                   "stage_costs": self.stage_costs[t].tolist(),
                   "disturbance": self.disturbance[t].tolist(),
                   "plan_cost": float(self.plan_costs[t]), "status": self.statuses[t]}
            if self.messages:
                rec["messages"] = [m.to_dict() for m in self.messages[t]]
            yield rec


def _stage_costs(costs, model, x, u) -> np.ndarray:
    out = np.zeros(model.num_agents)
    for i, c in enumerate(costs):
        out[i] = c.stage(x[model.state_slice(i)], u[model.input_slice(i)])
    return out


def _plan_cost(costs, model, solution) -> float:
    vals = true_costs(costs, model, solution)
    return float("nan") if vals[0] is None else float(sum(vals))


def run_mpc(scenario, controller: str, sim_length: Optional[int] = None, jobs: int = 1,
            keep_messages: bool = True) -> MpcLog:
    """Closed loop over ``sim_length`` stages with the chosen controller.

    ``P`` solves the true centralized problem.  ``M`` runs one mechanism
    round per stage on the messages carried over from the previous stage.
    ``A`` solves the surrogate problem with unit weights and the averaged
    reference, without updates.
    """
    if controller not in CONTROLLERS:
        raise ValueError(f"controller must be one of {CONTROLLERS}, got {controller!r}")
    L = scenario.sim_length if sim_length is None else int(sim_length)
    if L > scenario.sim_length:
        raise ValueError(f"sim_length {L} exceeds the generated disturbance ({scenario.sim_length})")
    mdl0 = scenario.model
    n, m, I = mdl0.n, mdl0.m, mdl0.num_agents
    X = np.zeros((L + 1, n))
    U = np.zeros((L, m))
    C = np.zeros((L, I))
    D = np.array(scenario.disturbance[:L])
    plan = np.zeros(L)
    statuses, msg_log = [], []
    X[0] = mdl0.x0
    msgs = None
    unit = None
    for t in range(L):
        model = scenario.stage_model(t, X[t])
        if controller == "P":
            sol = solve_true(scenario, model)
            if sol.status == INFEASIBLE:
                raise RuntimeError(f"stage {t}: centralized problem infeasible")
            u = sol.inputs[0]
            plan[t] = sol.objective_value
            statuses.append(sol.status)
        elif controller == "A":
            principal = scenario.principal(model, family=scenario.average_family)
            if unit is None:
                unit = bootstrap_messages(model)
            sol = principal.outcome(unit)
            if sol.status == INFEASIBLE:
                u = principal.fallback_inputs(sol)[0]
            else:
                u = sol.inputs[0]
            plan[t] = _plan_cost(scenario.costs, model, sol)
            statuses.append(sol.status)
        else:
            principal = scenario.principal(model, jobs=jobs)
            if msgs is None:
                msgs = bootstrap_messages(model, scenario)
            out = principal.run_round(msgs)
            u = out.applied_inputs[0]
            plan[t] = _plan_cost(scenario.costs, model, out.solution)
            statuses.append(out.solution.status)
            if keep_messages:
                msg_log.append([mm.copy() for mm in msgs])
            agents = scenario.agents(model)
            new = agent_update(agents, out, msgs, scenario.family, X[t], jobs)
        U[t] = u
        C[t] = _stage_costs(scenario.costs, mdl0, X[t], u)
        X[t + 1] = mdl0.A @ X[t] + mdl0.B @ u + D[t]
        if controller == "M":
            msgs = [mm.shifted(X[t + 1][mdl0.state_slice(i)]) for i, mm in enumerate(new)]
    return MpcLog(controller, X, U, C, D, plan, statuses, msg_log)


# --------------------------------------------------------------------------
# reports

def _labels(logs) -> list:
    seen, out = {}, []
    for lg in logs:
        k = seen.get(lg.controller, 0)
        seen[lg.controller] = k + 1
        out.append(lg.controller if k == 0 else f"{lg.controller}{k + 1}")
    return out


def compare_report(logs, start: int = 10) -> dict:
    """Tables behind the closed-loop comparison, as ``(header, rows)`` pairs.

    ``costs``: stage, aggregated true stage cost per log, then the
    difference of each later log from the first.  ``traces``: stage and the
    temperature of every room under every log.  ``combined``: stage, the cost
    columns and the trace columns.  ``summary``: cumulative cost from
    ``start`` on and the relative gap to the first log.
    """
    if not logs:
        raise ValueError("no logs to compare")
    L = logs[0].length
    n = logs[0].states.shape[1]
    for lg in logs:
        if lg.length != L or lg.states.shape[1] != n:
            raise ValueError("logs differ in length or state dimension")
    labels = _labels(logs)
    stages = list(range(L))
    cost_cols = [f"cost_{lb}" for lb in labels]
    diff_cols = [f"diff_{lb}_{labels[0]}" for lb in labels[1:]]
    agg = [lg.aggregate_cost for lg in logs]
    cost_rows = [[t] + [a[t] for a in agg] + [a[t] - agg[0][t] for a in agg[1:]] for t in stages]
    trace_cols = [f"x{r + 1}_{lb}" for lb in labels for r in range(n)]
    trace_rows = [[t] + [lg.states[t, r] for lg in logs for r in range(n)] for t in stages]
    combined = [[t] + [a[t] for a in agg] + tr[1:] for t, tr in zip(stages, trace_rows)]
    ref = logs[0].cumulative(start)
    summary_rows = []
    for lb, lg in zip(labels, logs):
        cum = lg.cumulative(start)
        gap = (cum - ref) / abs(ref) if ref != 0 else float("nan")
        summary_rows.append([lb, cum, gap])
    return {
        "costs": (["stage"] + cost_cols + diff_cols, cost_rows),
        "traces": (["stage"] + trace_cols, trace_rows),
        "combined": (["stage"] + cost_cols + trace_cols, combined),
        "summary": (["controller", f"cumulative_cost_from_{start}", f"gap_vs_{labels[0]}"],
                    summary_rows),
    }
