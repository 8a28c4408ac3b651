"""The principal: messages, surrogate problem, references, exclusion and fees."""

from __future__ import annotations

import logging
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .solver import (DEFAULT_MAX_ITER, DEFAULT_TOL, INFEASIBLE, NumericalFailure,
                     OcpProblem, OcpSolution, StageBounds, SurrogateCost, ZeroCost,
                     local_problem_model, solve_ocp)
from .sysmodel import PolytopeSet, SystemModel

log = logging.getLogger(__name__)


class MessageError(ValueError):
    pass


class ExclusionInfeasible(RuntimeError):
    pass


# --------------------------------------------------------------------------
# surrogate families

@dataclass(frozen=True, eq=False)
class SurrogateFamily:
    """Announced parametric functions standing in for the agents' costs.

    All callables are elementwise and vectorized over numpy arrays:
    ``state_fn(s, theta)``, its derivative ``state_grad`` and second
    derivative ``state_curv`` in ``s`` (likewise for inputs).
    ``match_state(s, g)`` returns the parameter whose derivative at ``s``
    equals ``g``; ``match_input(s, g, curvature)`` does the same for
    inputs, using ``curvature`` (the true second derivative) where the
    ratio ``g / s`` is undefined.
    """

    state_fn: Callable
    state_grad: Callable
    state_curv: Callable
    input_fn: Callable
    input_grad: Callable
    input_curv: Callable
    match_state: Callable
    match_input: Callable
    input_weight_ok: Callable = lambda w: np.ones(np.shape(w), dtype=bool)
    name: str = ""
    reference: float = np.nan


def reference_quadratic_family(reference: float, name: str = "reference-quadratic") -> SurrogateFamily:
    """``f_x(s; v) = (s - v r)^2 / 2`` and ``f_u(s; w) = (w s)^2 / 2``.

    With ``r == 0`` the family is usable for solving but ``match_state`` is
    undefined.
    """
    r = float(reference)

    def match_state(s, g):
        if r == 0.0:
            raise MessageError("state weight matching needs a nonzero reference")
        return (np.asarray(s, dtype=float) - np.asarray(g, dtype=float)) / r

    def match_input(s, g, curvature=None):
        s = np.asarray(s, dtype=float)
        g = np.asarray(g, dtype=float)
        small = np.abs(s) < 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(small, np.nan, g / np.where(small, 1.0, s))
        if np.any(small):
            if curvature is None:
                raise MessageError("input weight at s = 0 needs the cost curvature")
            ratio = np.where(small, np.asarray(curvature, dtype=float), ratio)
        bad = ~(ratio > 0)
        if np.any(bad):
            idx = tuple(int(a[0]) for a in np.nonzero(bad))
            raise MessageError(f"no positive input weight matches the gradient at coordinate {idx}")
        return np.sqrt(ratio)

    return SurrogateFamily(
        state_fn=lambda s, v: 0.5 * (s - v * r) ** 2,
        state_grad=lambda s, v: s - v * r,
        state_curv=lambda s, v: np.ones(np.broadcast(s, v).shape),
        input_fn=lambda s, w: 0.5 * (w * s) ** 2,
        input_grad=lambda s, w: w * w * s,
        input_curv=lambda s, w: np.broadcast_to(w * w, np.broadcast(s, w).shape).copy(),
        match_state=match_state,
        match_input=match_input,
        input_weight_ok=lambda w: np.asarray(w) != 0,
        name=name,
        reference=r,
    )


# --------------------------------------------------------------------------
# messages and fees

@dataclass(eq=False)
class Message:
    """One agent's report: surrogate weights, sensitivities, bounds, reference.

    ``v`` is ``(T+1, n_i)``, ``w`` is ``(T, m_i)``, ``lambda_rep`` is
    ``(T, n_i)``, ``x_ref`` is ``(T+1, n_i)`` and ``bounds`` is a
    :class:`StageBounds` whose infinite entries mean unbounded.
    """

    v: np.ndarray
    w: np.ndarray
    lambda_rep: np.ndarray
    bounds: StageBounds
    x_ref: np.ndarray

    @classmethod
    def initial(cls, n_i: int, m_i: int, T: int, x_ref=None) -> "Message":
        """Unit weights, zero sensitivities, unbounded reports."""
        x_ref = np.zeros((T + 1, n_i)) if x_ref is None else np.array(x_ref, dtype=float)
        return cls(np.ones((T + 1, n_i)), np.ones((T, m_i)), np.zeros((T, n_i)),
                   StageBounds.unbounded(n_i, m_i, T), x_ref)

    def validate(self, n_i: int, m_i: int, T: int) -> None:
        shapes = {"v": (T + 1, n_i), "w": (T, m_i), "lambda_rep": (T, n_i), "x_ref": (T + 1, n_i)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name))
            if arr.shape != shape:
                raise MessageError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise MessageError(f"{name} contains non-finite entries")
        b = self.bounds
        for name, shape in (("state_lower", (T + 1, n_i)), ("state_upper", (T + 1, n_i)),
                            ("input_lower", (T, m_i)), ("input_upper", (T, m_i))):
            arr = np.asarray(getattr(b, name))
            if arr.shape != shape:
                raise MessageError(f"bounds.{name} has shape {arr.shape}, expected {shape}")
            if np.any(np.isnan(arr)):
                raise MessageError(f"bounds.{name} contains NaN")
        if np.any(b.state_lower > b.state_upper) or np.any(b.input_lower > b.input_upper):
            raise MessageError("reported bounds have lower > upper")

    def copy(self) -> "Message":
        b = self.bounds
        return Message(np.array(self.v), np.array(self.w), np.array(self.lambda_rep),
                       StageBounds(np.array(b.state_lower), np.array(b.state_upper),
                                   np.array(b.input_lower), np.array(b.input_upper)),
                       np.array(self.x_ref))

    def shifted(self, x_now=None) -> "Message":
        """Advance the message one stage: drop the first entry, repeat the last.

        ``x_now`` (the agent's measured state) replaces the first reference
        entry after the shift.
        """
        def sh(a):
            a = np.asarray(a, dtype=float)
            return np.concatenate([a[1:], a[-1:]], axis=0)
        b = self.bounds
        out = Message(sh(self.v), sh(self.w), sh(self.lambda_rep),
                      StageBounds(sh(b.state_lower), sh(b.state_upper),
                                  sh(b.input_lower), sh(b.input_upper)),
                      sh(self.x_ref))
        if x_now is not None:
            out.x_ref[0] = x_now
        return out

    def distance(self, other: "Message") -> float:
        """Infinity-norm change over the finite message components."""
        parts = [self.v - other.v, self.w - other.w, self.lambda_rep - other.lambda_rep,
                 self.x_ref - other.x_ref]
        for a, b in ((self.bounds.state_lower, other.bounds.state_lower),
                     (self.bounds.state_upper, other.bounds.state_upper),
                     (self.bounds.input_lower, other.bounds.input_lower),
                     (self.bounds.input_upper, other.bounds.input_upper)):
            same = (a == b)
            if not np.all(same):
                diff = np.where(same, 0.0, np.abs(np.nan_to_num(a - b, nan=np.inf)))
                parts.append(diff)
        return max(float(np.max(np.abs(p))) if p.size else 0.0 for p in parts)

    def to_dict(self) -> dict:
        def bl(a):
            return [[None if not np.isfinite(x) else float(x) for x in row] for row in np.asarray(a)]
        b = self.bounds
        return {"v": self.v.tolist(), "w": self.w.tolist(), "lambda": self.lambda_rep.tolist(),
                "bounds": {"state_lower": bl(b.state_lower), "state_upper": bl(b.state_upper),
                           "input_lower": bl(b.input_lower), "input_upper": bl(b.input_upper)},
                "x_ref": self.x_ref.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Message":
        def ub(a, sign):
            return np.array([[sign * np.inf if x is None else x for x in row] for row in a], dtype=float)
        b = d["bounds"]
        v = np.array(d["v"], dtype=float)
        w = np.array(d["w"], dtype=float)
        return cls(v, w, np.array(d["lambda"], dtype=float).reshape(w.shape[0], v.shape[1]),
                   StageBounds(ub(b["state_lower"], -1), ub(b["state_upper"], 1),
                               ub(b["input_lower"], -1), ub(b["input_upper"], 1)),
                   np.array(d["x_ref"], dtype=float))


@dataclass(frozen=True)
class FeeBreakdown:
    externality: float
    x_mismatch: float
    lambda_mismatch: float
    total: float

    @classmethod
    def of(cls, externality, x_mismatch, lambda_mismatch) -> "FeeBreakdown":
        e, x, l = float(externality), float(x_mismatch), float(lambda_mismatch)
        return cls(e, x, l, e + x + l)


@dataclass(eq=False)
class RoundOutcome:
    """Everything the principal computes in one round."""

    solution: OcpSolution
    references: list
    lambdas: list
    exclusions: list
    fees: list
    applied_inputs: np.ndarray
    infeasible: bool = False
    exclusion_failed: list = field(default_factory=list)


# --------------------------------------------------------------------------
# principal

class Principal:
    """Operates the platform for a fixed model, constraint sets and surrogate family.

    Parameters
    ----------
    model : SystemModel
    sets : list of (PolytopeSet or None, PolytopeSet or None)
    family : SurrogateFamily
    exclusion : {"full", "local"}
        ``full`` re-solves the surrogate problem with agent i's objective
        and reported bounds removed; ``local`` solves agent i's subproblem
        alone with neighbour states fixed to their reports.
    jobs : int
        Thread count for the per-agent exclusion solves.
    cache : int
        Number of surrogate-problem outcomes remembered, keyed on the
        weights and bounds of every message (the only fields the problem
        reads).  ``0`` always re-solves.
    """

    def __init__(self, model: SystemModel, sets, family: SurrogateFamily, tol: float = DEFAULT_TOL,
                 max_iter: int = DEFAULT_MAX_ITER, exclusion: str = "full",
                 exclusion_tol: float = 1e-12, jobs: int = 1, cache: int = 16):
        if exclusion not in ("full", "local"):
            raise ValueError(f"unknown exclusion mode {exclusion!r}")
        self.model = model
        self.sets = list(sets) if sets is not None else [(None, None)] * model.num_agents
        self.family = family
        self.tol = tol
        self.max_iter = max_iter
        self.exclusion = exclusion
        self.exclusion_tol = exclusion_tol
        self.jobs = max(1, int(jobs))
        self.cache = max(0, int(cache))
        self._memo = OrderedDict()
        self._lock = threading.Lock()

    def with_model(self, model: SystemModel) -> "Principal":
        return Principal(model, self.sets, self.family, self.tol, self.max_iter,
                         self.exclusion, self.exclusion_tol, self.jobs, self.cache)

    def validate(self, messages) -> None:
        mdl = self.model
        if len(messages) != mdl.num_agents:
            raise MessageError(f"expected {mdl.num_agents} messages, got {len(messages)}")
        for i, msg in enumerate(messages):
            n_i, m_i = mdl.partition[i]
            try:
                msg.validate(n_i, m_i, mdl.horizon)
            except MessageError as exc:
                raise MessageError(f"agent {i}: {exc}") from None
            if not np.all(self.family.input_weight_ok(msg.w)):
                raise MessageError(f"agent {i}: input weights make the surrogate degenerate")

    def _map(self, fn, items):
        if self.jobs > 1:
            with ThreadPoolExecutor(self.jobs) as ex:
                return list(ex.map(fn, items))
        return [fn(x) for x in items]

    def surrogate_problem(self, messages, exclude: Optional[int] = None) -> OcpProblem:
        terms, bounds = [], []
        for i, msg in enumerate(messages):
            if i == exclude:
                terms.append(ZeroCost())
                bounds.append(None)
            else:
                terms.append(SurrogateCost(self.family, msg.v, msg.w))
                bounds.append(None if msg.bounds.is_unbounded() else msg.bounds)
        return OcpProblem(self.model, terms, sets=self.sets, extra_bounds=bounds)

    def outcome(self, messages) -> OcpSolution:
        """Solve the surrogate problem; only ``v``, ``w`` and the bounds are read.

        The returned solution may be shared with earlier calls and must not
        be modified.
        """
        self.validate(messages)
        if not self.cache:
            return solve_ocp(self.surrogate_problem(messages), tol=self.tol, max_iter=self.max_iter)
        key = tuple(np.ascontiguousarray(a, dtype=float).tobytes() for m in messages
                    for a in (m.v, m.w, m.bounds.state_lower, m.bounds.state_upper,
                              m.bounds.input_lower, m.bounds.input_upper))
        with self._lock:
            hit = self._memo.get(key)
            if hit is not None:
                self._memo.move_to_end(key)
                return hit
        sol = solve_ocp(self.surrogate_problem(messages), tol=self.tol, max_iter=self.max_iter)
        _freeze(sol)
        with self._lock:
            self._memo[key] = sol
            while len(self._memo) > self.cache:
                self._memo.popitem(last=False)
        return sol

    def references(self, messages) -> list:
        """``c_i[k] = sum_{j in N_i} A_ij x_ref_j[k]`` for ``k < T``."""
        mdl = self.model
        out = []
        for i in range(mdl.num_agents):
            c = np.zeros((mdl.horizon, mdl.partition[i][0]))
            for j in sorted(mdl.neighbors[i]):
                c += np.asarray(messages[j].x_ref, dtype=float)[:mdl.horizon] @ mdl.block(i, j).T
            out.append(c)
        return out

    def lambda_aggregate(self, messages, i: int) -> np.ndarray:
        """``Lambda_{-i,k} = sum_{j : i in N_j} A_ji' lambda_j[k]``."""
        mdl = self.model
        out = np.zeros((mdl.horizon, mdl.partition[i][0]))
        for j in mdl.upstream(i):
            out += np.asarray(messages[j].lambda_rep, dtype=float) @ mdl.block(j, i)
        return out

    def exclusion_trajectory(self, messages, i: int) -> np.ndarray:
        """Agent ``i``'s state trajectory with its objective and bounds removed."""
        mdl = self.model
        if self.exclusion == "full":
            prob = self.surrogate_problem(messages, exclude=i)
            sol = solve_ocp(prob, tol=self.exclusion_tol, max_iter=self.max_iter)
            if sol.status == INFEASIBLE:
                raise ExclusionInfeasible(f"exclusion problem for agent {i} is infeasible")
            return np.array(sol.trajectories[i].states)
        c = self.references(messages)[i]
        sx = mdl.state_slice(i)
        local = local_problem_model(mdl.block(i, i), mdl.input_block(i), mdl.horizon,
                                    mdl.x0[sx], mdl.disturbance_or_zero()[:, sx] + c)
        sol = solve_ocp(OcpProblem(local, [ZeroCost()], sets=[self.sets[i]]),
                        tol=self.exclusion_tol, max_iter=self.max_iter)
        if sol.status == INFEASIBLE:
            raise ExclusionInfeasible(f"local exclusion problem for agent {i} is infeasible")
        return np.array(sol.trajectories[0].states)

    def fee(self, messages, solution: OcpSolution, i: int, x_hat, Lam) -> FeeBreakdown:
        T = self.model.horizon
        x = np.asarray(solution.trajectories[i].states, dtype=float)
        lam_star = np.asarray(solution.dyn_multipliers[i], dtype=float)
        msg = messages[i]
        ext = float(np.sum(np.asarray(Lam)[:T] * (x[:T] - np.asarray(x_hat)[:T])))
        dx = np.asarray(msg.x_ref, dtype=float) - x
        dl = np.asarray(msg.lambda_rep, dtype=float) - lam_star
        return FeeBreakdown.of(ext, float(np.sum(dx * dx)), float(np.sum(dl * dl)))

    def fallback_inputs(self, solution: OcpSolution) -> np.ndarray:
        """Phase-1 inputs retracted into each ``U_i`` (used when OCP-S is infeasible)."""
        mdl = self.model
        U = np.zeros((mdl.horizon, mdl.m)) if solution.inputs is None else np.array(solution.inputs)
        for i, (_, Us) in enumerate(self.sets):
            if Us is None:
                continue
            su = mdl.input_slice(i)
            for k in range(mdl.horizon):
                U[k, su] = project_into(Us, U[k, su])
        return U

    def exclusions(self, messages) -> tuple:
        """All agents' exclusion trajectories; failures fall back to zeros and are flagged."""
        mdl = self.model

        def one(i):
            try:
                return self.exclusion_trajectory(messages, i), False
            except (ExclusionInfeasible, NumericalFailure) as exc:
                log.warning("agent %d: %s; using zero exclusion trajectory", i, exc)
                return np.zeros((mdl.horizon + 1, mdl.partition[i][0])), True
        res = self._map(one, range(mdl.num_agents))
        return [r[0] for r in res], [i for i, r in enumerate(res) if r[1]]

    def run_round(self, messages) -> RoundOutcome:
        sol = self.outcome(messages)
        refs = self.references(messages)
        lams = [self.lambda_aggregate(messages, i) for i in range(self.model.num_agents)]
        xhats, failed = self.exclusions(messages)
        if sol.status == INFEASIBLE:
            log.warning("surrogate problem infeasible; applying phase-1 fallback input")
            return RoundOutcome(sol, refs, lams, xhats, [None] * len(messages),
                                self.fallback_inputs(sol), True, failed)
        fees = [self.fee(messages, sol, i, xhats[i], lams[i]) for i in range(len(messages))]
        return RoundOutcome(sol, refs, lams, xhats, fees, np.array(sol.inputs), False, failed)


def _freeze(sol: OcpSolution) -> None:
    for a in [sol.states, sol.inputs, *sol.dyn_multipliers]:
        if isinstance(a, np.ndarray):
            a.flags.writeable = False


def project_into(S: PolytopeSet, s) -> np.ndarray:
    """Clip into a box, or retract radially toward the origin for a general polytope."""
    s = np.asarray(s, dtype=float)
    if S.is_box:
        return np.clip(s, S.lower, S.upper)
    if S.contains(s):
        return s
    Gs = S.G @ s
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(Gs > S.g, S.g / Gs, 1.0)
    return float(np.min(t)) * s
