"""Convex optimal control over partitioned linear dynamics.

One engine serves the centralized true-cost problem, the surrogate problem
solved by the principal and the agent-local problems: they differ only in
the per-agent objective terms, the extra per-stage bounds and whether an
agent's neighbour coupling is replaced by a fixed sequence.

The method is a primal-dual interior point iteration with slack variables
for the inequality rows and explicit dynamics equalities.  Multipliers use
the Lagrangian

    L = f(x, u) + sum_k nu_k' (A x_k + B u_k + d_k - x_{k+1}) + beta' (G s - g)

so state stationarity reads ``dl/dx + A'nu_k - nu_{k-1} + G'beta = 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .sysmodel import AgentCost, SystemModel, split_trajectories

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
FALLBACK_CENTERING = 0.1
ZERO_OBJECTIVE_EPS = 1e-8
_DUAL_REG = 1e-11


class NumericalFailure(RuntimeError):
    """Non-finite objective or gradient encountered while solving."""


# --------------------------------------------------------------------------
# objective terms

class CostTerm:
    """Per-agent objective over a ``(T+1, n_i)`` state and ``(T, m_i)`` input sequence.

    ``evaluate`` returns ``(value, gX, gU, hess)`` where ``hess`` is either
    ``("diag", dX, dU)`` or ``("full", Hxx, Hxu, Huu)``.  Stage-0 state
    entries are computed but ignored by the solver (the initial state is
    fixed).
    """

    def evaluate(self, X, U, hessian=True):
        raise NotImplementedError


class TrueCost(CostTerm):
    """An agent's private :class:`AgentCost` summed over the horizon."""

    def __init__(self, cost: AgentCost):
        self.cost = cost

    def evaluate(self, X, U, hessian=True):
        T = U.shape[0]
        n_i, m_i = X.shape[1], U.shape[1]
        gX = np.zeros_like(X)
        gU = np.zeros_like(U)
        val = 0.0
        for k in range(T):
            val += float(self.cost.stage(X[k], U[k]))
            gx, gu = self.cost.stage_grad(X[k], U[k])
            gX[k] = gx
            gU[k] = gu
        val += float(self.cost.terminal(X[T]))
        gX[T] = self.cost.terminal_grad(X[T])
        if not hessian:
            return val, gX, gU, None
        Hxx = np.zeros((T + 1, n_i, n_i))
        Hxu = np.zeros((T, n_i, m_i))
        Huu = np.zeros((T, m_i, m_i))
        for k in range(T):
            H = self.cost.stage_hessian(X[k], U[k])
            Hxx[k] = H[:n_i, :n_i]
            Hxu[k] = H[:n_i, n_i:]
            Huu[k] = H[n_i:, n_i:]
        Hxx[T] = self.cost.terminal_hessian(X[T])
        return val, gX, gU, ("full", Hxx, Hxu, Huu)


class SurrogateCost(CostTerm):
    """Separable surrogate ``sum f_x(x; v) + sum f_u(u; w)`` built from a family."""

    def __init__(self, family, v, w):
        self.family = family
        self.v = np.asarray(v, dtype=float)
        self.w = np.asarray(w, dtype=float)

    def evaluate(self, X, U, hessian=True):
        f = self.family
        val = float(np.sum(f.state_fn(X, self.v)) + np.sum(f.input_fn(U, self.w)))
        gX = f.state_grad(X, self.v)
        gU = f.input_grad(U, self.w)
        if not hessian:
            return val, gX, gU, None
        return val, gX, gU, ("diag", f.state_curv(X, self.v), f.input_curv(U, self.w))


class ZeroCost(CostTerm):
    """The zero objective, regularized by ``eps (|x|^2 + |u|^2)`` for uniqueness."""

    def __init__(self, eps: float = ZERO_OBJECTIVE_EPS):
        self.eps = eps

    def evaluate(self, X, U, hessian=True):
        e = self.eps
        val = e * float(np.sum(X * X) + np.sum(U * U))
        hess = ("diag", np.full_like(X, 2 * e), np.full_like(U, 2 * e)) if hessian else None
        return val, 2 * e * X, 2 * e * U, hess


# --------------------------------------------------------------------------
# problem / solution types

@dataclass(eq=False)
class StageBounds:
    """Per-stage box bounds for one agent; ``+-inf`` marks an unbounded entry.

    States cover stages ``0..T`` and inputs ``0..T-1``.  Entries with
    ``lower == upper`` are handled as equality pins.
    """

    state_lower: np.ndarray
    state_upper: np.ndarray
    input_lower: np.ndarray
    input_upper: np.ndarray

    @classmethod
    def unbounded(cls, n_i: int, m_i: int, T: int) -> "StageBounds":
        return cls(np.full((T + 1, n_i), -np.inf), np.full((T + 1, n_i), np.inf),
                   np.full((T, m_i), -np.inf), np.full((T, m_i), np.inf))

    @classmethod
    def pinned(cls, states, inputs) -> "StageBounds":
        states = np.asarray(states, dtype=float)
        inputs = np.asarray(inputs, dtype=float)
        return cls(states.copy(), states.copy(), inputs.copy(), inputs.copy())

    def is_unbounded(self) -> bool:
        return not any(np.any(np.isfinite(a)) for a in
                       (self.state_lower, self.state_upper, self.input_lower, self.input_upper))


@dataclass(eq=False)
class OcpProblem:
    """A convex optimal control problem over ``model``.

    ``objective`` holds exactly one :class:`CostTerm` per agent.  ``sets``
    holds ``(X_i, U_i)`` pairs (``None`` for unconstrained).  Optional
    per-agent lists: ``extra_bounds`` (:class:`StageBounds`),
    ``linear_state_terms`` (``(T, n_i)`` vectors ``q_k`` adding
    ``q_k' x_k`` for ``k < T``) and ``fixed_coupling`` (``(T, n_i)``
    sequences replacing the neighbour terms in agent i's dynamics).
    """

    model: SystemModel
    objective: list
    sets: Optional[list] = None
    extra_bounds: Optional[list] = None
    linear_state_terms: Optional[list] = None
    fixed_coupling: Optional[list] = None
    objective_offset: float = 0.0

    def __post_init__(self):
        I = self.model.num_agents
        if len(self.objective) != I:
            raise ValueError(f"need one objective term per agent ({I}), got {len(self.objective)}")
        if self.sets is None:
            self.sets = [(None, None)] * I
        for name in ("extra_bounds", "linear_state_terms", "fixed_coupling"):
            val = getattr(self, name)
            if val is None:
                setattr(self, name, [None] * I)
            elif len(val) != I:
                raise ValueError(f"{name} must have one entry per agent")

    def effective_A(self) -> np.ndarray:
        """``A`` with the off-diagonal blocks of fixed-coupling agents removed."""
        A = np.array(self.model.A)
        for i, c in enumerate(self.fixed_coupling):
            if c is None:
                continue
            si = self.model.state_slice(i)
            keep = A[si, si].copy()
            A[si, :] = 0.0
            A[si, si] = keep
        return A

    def effective_disturbance(self) -> np.ndarray:
        d = self.model.disturbance_or_zero()
        for i, c in enumerate(self.fixed_coupling):
            if c is not None:
                d[:, self.model.state_slice(i)] += np.asarray(c, dtype=float)
        return d


@dataclass(eq=False)
class OcpSolution:
    """Primal trajectories and multipliers of a solved :class:`OcpProblem`.

    ``ineq_multipliers[i]`` maps ``state``/``input`` (polytope rows, shape
    ``(T+1, r_x)``/``(T, r_u)``) and ``state_lower``/``state_upper``/
    ``input_lower``/``input_upper`` (extra bounds) to nonnegative arrays.
    """

    trajectories: list
    dyn_multipliers: list
    ineq_multipliers: list
    objective_value: float
    status: str
    iterations: int = 0
    states: Optional[np.ndarray] = None
    inputs: Optional[np.ndarray] = None
    residual: float = np.nan
    phase1: Optional["Phase1Result"] = None

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    def nu(self) -> np.ndarray:
        """Dynamics multipliers stacked into a global ``(T, n)`` array."""
        return np.concatenate(self.dyn_multipliers, axis=1)


@dataclass(eq=False)
class Phase1Result:
    feasible: bool
    trajectories: Optional[list]
    margin: float
    violation: float
    states: Optional[np.ndarray] = None
    inputs: Optional[np.ndarray] = None


# --------------------------------------------------------------------------
# assembly

class _Assembly:
    """Stage-ordered matrices of an :class:`OcpProblem`.

    Decision vector ``z = (x_1..x_T, u_0..u_{T-1})``; ``x_0`` is fixed.
    """

    def __init__(self, prob: OcpProblem):
        self.prob = prob
        mdl = prob.model
        T, n, m = mdl.horizon, mdl.n, mdl.m
        self.T, self.n, self.m = T, n, m
        self.nz = T * (n + m)
        self.x_index = np.full((T + 1, n), -1, dtype=int)
        self.x_index[1:] = np.arange(T * n).reshape(T, n)
        self.u_index = T * n + np.arange(T * m).reshape(T, m)

        A = prob.effective_A()
        d = prob.effective_disturbance()
        E = np.zeros((T * n, self.nz))
        e = np.zeros(T * n)
        I_n = np.eye(n)
        for k in range(T):
            rows = slice(k * n, (k + 1) * n)
            if k == 0:
                e[rows] = -d[0] - A @ mdl.x0
            else:
                E[rows, self.x_index[k]] = A
                e[rows] = -d[k]
            E[rows, self.x_index[k + 1]] = -I_n
            E[rows, self.u_index[k]] = mdl.B
        self.A_eff = A
        self.E_dyn, self.e_dyn = E, e

        pin_idx, pin_val, pin_tag = [], [], []
        C_rows, c_rhs, c_tag = [], [], []
        const_viol = []

        def add_row(coefs: dict, rhs, tag):
            row = np.zeros(self.nz)
            for j, a in coefs.items():
                row[j] += a
            C_rows.append(row)
            c_rhs.append(rhs)
            c_tag.append(tag)

        for i in range(mdl.num_agents):
            sx, su = mdl.state_slice(i), mdl.input_slice(i)
            Xs, Us = prob.sets[i]
            if Xs is not None:
                x0i = mdl.x0[sx]
                for r, val in enumerate(Xs.G @ x0i - Xs.g):
                    if val > 0:
                        const_viol.append((("state", i, 0, r), float(val)))
                for k in range(1, T + 1):
                    cols = self.x_index[k, sx]
                    for r in range(Xs.G.shape[0]):
                        add_row(dict(zip(cols, Xs.G[r])), Xs.g[r], ("state", i, k, r))
            if Us is not None:
                for k in range(T):
                    cols = self.u_index[k, su]
                    for r in range(Us.G.shape[0]):
                        add_row(dict(zip(cols, Us.G[r])), Us.g[r], ("input", i, k, r))
            bnd = prob.extra_bounds[i]
            if bnd is None:
                continue
            for kind, lo_arr, hi_arr, index in (
                    ("state", bnd.state_lower, bnd.state_upper, self.x_index[:, sx]),
                    ("input", bnd.input_lower, bnd.input_upper, self.u_index[:, su])):
                lo_arr = np.asarray(lo_arr, dtype=float)
                hi_arr = np.asarray(hi_arr, dtype=float)
                for k in range(lo_arr.shape[0]):
                    for c in range(lo_arr.shape[1]):
                        lo, hi = lo_arr[k, c], hi_arr[k, c]
                        if lo > hi:
                            const_viol.append(((kind + "_lower", i, k, c), float(lo - hi)))
                            continue
                        j = index[k, c]
                        if j < 0:  # stage-0 state: a constant
                            x = mdl.x0[sx][c]
                            viol = max(lo - x, x - hi, 0.0)
                            if viol > 0:
                                const_viol.append(((kind + "_bound", i, k, c), float(viol)))
                            continue
                        if np.isfinite(lo) and lo == hi:
                            pin_idx.append(j)
                            pin_val.append(lo)
                            pin_tag.append((kind, i, k, c))
                            continue
                        if np.isfinite(hi):
                            add_row({j: 1.0}, hi, (kind + "_upper", i, k, c))
                        if np.isfinite(lo):
                            add_row({j: -1.0}, -lo, (kind + "_lower", i, k, c))

        P = np.zeros((len(pin_idx), self.nz))
        P[np.arange(len(pin_idx)), pin_idx] = 1.0
        self.P, self.p_val, self.pin_tag = P, np.array(pin_val, dtype=float), pin_tag
        self.C = np.array(C_rows).reshape(-1, self.nz)
        self.c = np.array(c_rhs, dtype=float)
        self.c_tag = c_tag
        self.const_viol = const_viol
        self.E = np.vstack([E, P])
        self.e = np.concatenate([e, self.p_val])

        self.lin = np.zeros(self.nz)
        self.lin_const = 0.0
        for i, q in enumerate(prob.linear_state_terms):
            if q is None:
                continue
            q = np.asarray(q, dtype=float)
            sx = mdl.state_slice(i)
            self.lin_const += float(q[0] @ mdl.x0[sx])
            for k in range(1, T):
                self.lin[self.x_index[k, sx]] += q[k]

    def unpack(self, z):
        mdl = self.prob.model
        X = np.empty((self.T + 1, self.n))
        X[0] = mdl.x0
        X[1:] = z[:self.T * self.n].reshape(self.T, self.n)
        U = z[self.T * self.n:].reshape(self.T, self.m)
        return X, U

    def pack(self, X, U):
        return np.concatenate([np.asarray(X)[1:].reshape(-1), np.asarray(U).reshape(-1)])

    def objective(self, z, hessian=True):
        prob, mdl = self.prob, self.prob.model
        X, U = self.unpack(z)
        val = prob.objective_offset + self.lin_const + float(self.lin @ z)
        g = self.lin.copy()
        H = np.zeros((self.nz, self.nz)) if hessian else None
        for i, term in enumerate(prob.objective):
            sx, su = mdl.state_slice(i), mdl.input_slice(i)
            v, gX, gU, hs = term.evaluate(X[:, sx], U[:, su], hessian)
            val += v
            xi = self.x_index[1:, sx]
            ui = self.u_index[:, su]
            g[xi] += gX[1:]
            g[ui] += gU
            if not hessian:
                continue
            if hs[0] == "diag":
                H[xi, xi] += hs[1][1:]
                H[ui, ui] += hs[2]
            else:
                _, Hxx, Hxu, Huu = hs
                for k in range(self.T + 1):
                    if k >= 1:
                        H[np.ix_(xi[k - 1], xi[k - 1])] += Hxx[k]
                    if k < self.T:
                        H[np.ix_(ui[k], ui[k])] += Huu[k]
                        if k >= 1:
                            H[np.ix_(xi[k - 1], ui[k])] += Hxu[k]
                            H[np.ix_(ui[k], xi[k - 1])] += Hxu[k].T
        return val, g, H

    def initial_point(self):
        """Forward simulation under zero (or pinned) inputs."""
        mdl = self.prob.model
        z = np.zeros(self.nz)
        if len(self.p_val):
            z[np.asarray([np.argmax(r) for r in self.P])] = self.p_val
        U = z[self.T * self.n:].reshape(self.T, self.m)
        X = np.empty((self.T + 1, self.n))
        X[0] = mdl.x0
        d = self.prob.effective_disturbance()
        for k in range(self.T):
            X[k + 1] = self.A_eff @ X[k] + mdl.B @ U[k] + d[k]
        return self.pack(X, U)

    def multipliers(self, y_dyn, y_pin, lam):
        mdl = self.prob.model
        T = self.T
        nu = y_dyn.reshape(T, self.n)
        dyn = [nu[:, mdl.state_slice(i)].copy() for i in range(mdl.num_agents)]
        ineq = []
        for i in range(mdl.num_agents):
            n_i, m_i = mdl.partition[i]
            Xs, Us = self.prob.sets[i]
            ineq.append({
                "state": np.zeros((T + 1, 0 if Xs is None else Xs.G.shape[0])),
                "input": np.zeros((T, 0 if Us is None else Us.G.shape[0])),
                "state_lower": np.zeros((T + 1, n_i)), "state_upper": np.zeros((T + 1, n_i)),
                "input_lower": np.zeros((T, m_i)), "input_upper": np.zeros((T, m_i)),
            })
        for val, (kind, i, k, r) in zip(lam, self.c_tag):
            ineq[i][kind][k, r] = val
        for val, (kind, i, k, c) in zip(y_pin, self.pin_tag):
            if val >= 0:
                ineq[i][kind + "_upper"][k, c] = val
            else:
                ineq[i][kind + "_lower"][k, c] = -val
        return dyn, ineq


# --------------------------------------------------------------------------
# interior point

def solve_ocp(problem: OcpProblem, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
              start=None, trace: Optional[logging.Logger] = None, polish: bool = True) -> OcpSolution:
    """Solve ``problem`` to KKT residual ``tol`` (infinity norm).

    ``start`` optionally gives initial ``(X, U)`` arrays.  With ``polish``
    the converged point is refined by Newton steps on the active set with
    the barrier removed, kept only if it stays feasible with nonnegative
    multipliers; this resolves weakly curved directions (such as the
    regularized zero objective) far below the residual tolerance.  Returns status
    ``optimal``, ``infeasible`` (certified by :func:`solve_phase1`) or
    ``max_iter``.  Raises :class:`NumericalFailure` on non-finite values
    for a problem that phase 1 shows feasible.
    """
    asm = _Assembly(problem)
    if asm.const_viol and max(v for _, v in asm.const_viol) > tol:
        return _infeasible(asm, solve_phase1(problem, asm))

    nz, p, q = asm.nz, asm.C.shape[0], asm.E.shape[0]
    n_dyn = asm.E_dyn.shape[0]
    z = asm.initial_point() if start is None else asm.pack(*start)
    y = np.zeros(q)
    if p:
        s = np.maximum(asm.c - asm.C @ z, 1.0)
        lam = np.ones(p)
    else:
        s = lam = np.zeros(0)
    C, E, c, e = asm.C, asm.E, asm.c, asm.e

    def residuals(z, y, s, lam, g):
        rd = g + E.T @ y + C.T @ lam
        return rd, E @ z - e, C @ z + s - c

    K = np.zeros((nz + q, nz + q))
    K[:nz, nz:] = E.T
    K[nz:, :nz] = E

    status = MAX_ITER
    it = 0
    res_inf = np.inf
    try:
        f, g, H = asm.objective(z)
        _check_finite(f, g)
        for it in range(max_iter + 1):
            rd, re, ri = residuals(z, y, s, lam, g)
            comp = lam * s
            mu = float(comp.mean()) if p else 0.0
            res_inf = max(_inf(rd), _inf(re), _inf(ri), _inf(comp))
            if trace is not None:
                trace.debug("it=%d mu=%.3e rd=%.3e re=%.3e ri=%.3e", it, mu, _inf(rd), _inf(re), _inf(ri))
            if res_inf <= tol:
                status = OPTIMAL
                break
            if it == max_iter:
                break
            K[:nz, :nz] = H + (C.T * (lam / s)) @ C if p else H
            kkt = _kkt_factor(K, nz)

            def direction(rc):
                rhs = np.concatenate([-rd - C.T @ ((lam * ri - rc) / s) if p else -rd, -re])
                sol = kkt(rhs)
                dz_, dy_ = sol[:nz], sol[nz:]
                if not p:
                    return dz_, dy_, np.zeros(0), np.zeros(0)
                ds_ = -ri - C @ dz_
                return dz_, dy_, ds_, (-rc - lam * ds_) / s

            def search(step, target, halvings):
                dz, dy, ds, dlam = step
                alpha = min(1.0, _max_step(s, ds), _max_step(lam, dlam)) if p else 1.0

                def merit(z_, y_, s_, lam_, g_):
                    a, b, c_ = residuals(z_, y_, s_, lam_, g_)
                    return np.sqrt(a @ a + b @ b + c_ @ c_ + np.sum((lam_ * s_ - target) ** 2))

                phi0 = merit(z, y, s, lam, g)
                for _ in range(halvings):
                    pt = (z + alpha * dz, y + alpha * dy, s + alpha * ds, lam + alpha * dlam)
                    ft, gt, _ = asm.objective(pt[0], hessian=False)
                    if np.isfinite(ft) and np.all(np.isfinite(gt)) and \
                            merit(*pt, gt) <= (1 - 1e-4 * alpha) * phi0:
                        return True, pt
                    alpha *= 0.5
                return False, pt

            ok = False
            if p and mu > 0:
                # predictor-corrector: the affine step sets the centring and a
                # second-order correction, both on the same factorization
                _, _, ds_a, dl_a = direction(comp)
                a_aff = min(_max_step(s, ds_a, 1.0), _max_step(lam, dl_a, 1.0))
                mu_aff = float(np.mean((s + a_aff * ds_a) * (lam + a_aff * dl_a)))
                target = min(1.0, (mu_aff / mu) ** 3) * mu
                ok, pt = search(direction(comp + ds_a * dl_a - target), target, 12)
            if not ok:
                # the corrected step need not descend the merit; the plain
                # Newton step toward a fixed fraction of mu does
                target = FALLBACK_CENTERING * mu
                ok, pt = search(direction(comp - target if p else np.zeros(0)), target, 40)
            zt, yt, st, lt = pt
            z, y, s, lam = zt, yt, st, lt
            f, g, H = asm.objective(z)
            _check_finite(f, g)
    except (NumericalFailure, np.linalg.LinAlgError, sla.LinAlgError) as exc:
        ph = solve_phase1(problem, asm)
        if not ph.feasible:
            return _infeasible(asm, ph)
        raise NumericalFailure(str(exc)) from exc

    if status == OPTIMAL and polish:
        z, y, s, lam, f, res_inf = _polish(asm, z, y, s, lam, f, g, H, tol, res_inf)

    if status != OPTIMAL:
        ph = solve_phase1(problem, asm)
        if not ph.feasible:
            return _infeasible(asm, ph)
        log.warning("interior point stopped after %d iterations (residual %.3e)", it, res_inf)

    X, U = asm.unpack(z)
    dyn, ineq = asm.multipliers(y[:n_dyn], y[n_dyn:], lam)
    return OcpSolution(
        trajectories=split_trajectories(problem.model, X, U),
        dyn_multipliers=dyn, ineq_multipliers=ineq, objective_value=float(f),
        status=status, iterations=it, states=X, inputs=U, residual=float(res_inf))


def _polish(asm, z, y, s, lam, f, g, H, tol, res_inf, steps=3):
    C, c, E, e = asm.C, asm.c, asm.E, asm.e
    nz, q = asm.nz, E.shape[0]
    active = lam > s
    Ca, ca = C[active], c[active]
    na = Ca.shape[0]
    zn, gn, Hn = z, g, H
    try:
        for _ in range(steps):
            K = np.block([[Hn, E.T, Ca.T], [E, np.zeros((q, q + na))],
                          [Ca, np.zeros((na, q + na))]])
            rhs = np.concatenate([-gn, e - E @ zn, ca - Ca @ zn])
            sol = _kkt_solve(K, rhs, nz)
            zn = zn + sol[:nz]
            yn, la = sol[nz:nz + q], sol[nz + q:]
            fn, gn, Hn = asm.objective(zn)
            _check_finite(fn, gn)
    except (NumericalFailure, np.linalg.LinAlgError, sla.LinAlgError):
        return z, y, s, lam, f, res_inf
    sn = c - C @ zn
    if np.any(sn[~active] < -tol) or np.any(la < -tol):
        return z, y, s, lam, f, res_inf
    lamn = np.zeros_like(lam)
    lamn[active] = np.maximum(la, 0.0)
    sn = np.maximum(sn, 0.0)
    sn[active] = 0.0
    rd = gn + E.T @ yn + C.T @ lamn
    new_inf = max(_inf(rd), _inf(E @ zn - e), _inf(np.maximum(C @ zn - c, 0.0)))
    if new_inf > max(tol, res_inf):
        return z, y, s, lam, f, res_inf
    return zn, yn, sn, lamn, fn, new_inf


def _kkt_factor(K, nz):
    """Factor the KKT matrix once; the returned solver refines against the exact system.

    A small dual regularization keeps the factorization nonsingular when
    equality pins duplicate dynamics rows.
    """
    Kr = K.copy()
    Kr.flat[nz * (K.shape[0] + 1)::K.shape[0] + 1] -= _DUAL_REG
    lu = sla.lu_factor(Kr, overwrite_a=True, check_finite=True)

    def solve(rhs):
        sol = sla.lu_solve(lu, rhs, check_finite=False)
        floor = 1e-15 * (1.0 + _inf(rhs))
        for _ in range(3):
            r = rhs - K @ sol
            if _inf(r) <= floor:
                break
            sol = sol + sla.lu_solve(lu, r, check_finite=False)
        return sol
    return solve


def _kkt_solve(K, rhs, nz):
    return _kkt_factor(K, nz)(rhs)


def _max_step(v, dv, frac=0.995):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, frac * np.min(-v[neg] / dv[neg])))


def _inf(a):
    return float(np.max(np.abs(a))) if a.size else 0.0


def _check_finite(f, g):
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericalFailure("non-finite objective or gradient")


def _infeasible(asm: _Assembly, ph: Phase1Result) -> OcpSolution:
    mdl = asm.prob.model
    T = mdl.horizon
    dyn = [np.zeros((T, a)) for a, _ in mdl.partition]
    ineq = asm.multipliers(np.zeros(asm.E_dyn.shape[0]), np.zeros(len(asm.p_val)), np.zeros(asm.C.shape[0]))[1]
    return OcpSolution(trajectories=ph.trajectories, dyn_multipliers=dyn, ineq_multipliers=ineq,
                       objective_value=np.nan, status=INFEASIBLE, states=ph.states,
                       inputs=ph.inputs, phase1=ph)


# --------------------------------------------------------------------------
# phase 1

def solve_phase1(problem: OcpProblem, _asm: Optional[_Assembly] = None, max_margin: float = 1.0) -> Phase1Result:
    """Find a strictly feasible point or certify infeasibility.

    First maximizes the smallest inequality slack ``tau`` (capped at
    ``max_margin``) subject to dynamics and pins.  If ``tau <= 0`` or the
    equalities are inconsistent, minimizes the total violation of the
    inequality rows and pins with dynamics kept exact; a positive optimum
    is the infeasibility certificate.
    """
    asm = _asm or _Assembly(problem)
    const = sum(v for _, v in asm.const_viol)
    nz, p = asm.nz, asm.C.shape[0]
    n_pin = len(asm.p_val)

    res = linprog(
        c=np.concatenate([np.zeros(nz), [-1.0]]),
        A_ub=np.hstack([asm.C, np.ones((p, 1))]) if p else None,
        b_ub=asm.c if p else None,
        A_eq=np.hstack([asm.E, np.zeros((asm.E.shape[0], 1))]),
        b_eq=asm.e,
        bounds=[(None, None)] * nz + [(None, max_margin)],
        method="highs")
    if res.status == 0 and const == 0.0:
        tau = float(res.x[-1]) if p else max_margin
        if tau > 0:
            return _phase1_point(asm, res.x[:nz], True, tau, 0.0)

    # minimal total violation
    n_t = p + 2 * n_pin
    A_ub = np.hstack([asm.C, -np.eye(p), np.zeros((p, 2 * n_pin))]) if p else None
    A_eq = np.vstack([
        np.hstack([asm.E_dyn, np.zeros((asm.E_dyn.shape[0], n_t))]),
        np.hstack([asm.P, np.zeros((n_pin, p)), -np.eye(n_pin), np.eye(n_pin)]),
    ])
    b_eq = np.concatenate([asm.e_dyn, asm.p_val])
    res2 = linprog(
        c=np.concatenate([np.zeros(nz), np.ones(n_t)]),
        A_ub=A_ub, b_ub=asm.c if p else None, A_eq=A_eq, b_eq=b_eq,
        bounds=[(None, None)] * nz + [(0, None)] * n_t, method="highs")
    if res2.status != 0:
        return Phase1Result(False, None, -np.inf, np.inf)
    viol = float(res2.fun) + const
    feasible = viol <= 1e-9
    margin = float(res.x[-1]) if (res.status == 0 and p) else 0.0
    return _phase1_point(asm, res2.x[:nz], feasible, margin if feasible else -viol, viol)


def _phase1_point(asm, z, feasible, margin, viol):
    X, U = asm.unpack(z)
    return Phase1Result(feasible, split_trajectories(asm.prob.model, X, U), margin, viol, X, U)


# --------------------------------------------------------------------------
# KKT diagnostics

@dataclass(eq=False)
class KKTReport:
    """Residuals of the optimality system at a candidate solution.

    ``stationarity_x[i]`` has shape ``(T+1, n_i)`` (row 0 is zero since
    ``x_0`` is fixed); ``stationarity_u[i]`` has shape ``(T, m_i)``.
    """

    stationarity_x: list
    stationarity_u: list
    dynamics: np.ndarray
    initial: np.ndarray
    infeasibility: list = field(default_factory=list)
    complementarity: list = field(default_factory=list)

    @property
    def max_stationarity(self) -> float:
        return max([_inf(a) for a in self.stationarity_x + self.stationarity_u] + [0.0])

    @property
    def max_feasibility(self) -> float:
        return max([_inf(self.dynamics), _inf(self.initial)] + [_inf(a) for a in self.infeasibility])

    @property
    def max_complementarity(self) -> float:
        return max([_inf(a) for a in self.complementarity] + [0.0])

    @property
    def max_residual(self) -> float:
        return max(self.max_stationarity, self.max_feasibility, self.max_complementarity)


def kkt_residuals(problem: OcpProblem, solution: OcpSolution) -> KKTReport:
    """Evaluate the stationarity, feasibility and complementarity conditions.

    Works directly from the model matrices and the reported multipliers,
    independently of the solver's internal assembly.
    """
    mdl = problem.model
    T = mdl.horizon
    X = np.concatenate([tr.states for tr in solution.trajectories], axis=1)
    U = np.concatenate([tr.inputs for tr in solution.trajectories], axis=1)
    nu = np.concatenate(solution.dyn_multipliers, axis=1)
    A = problem.effective_A()
    d = problem.effective_disturbance()

    dyn = np.array([X[k + 1] - (A @ X[k] + mdl.B @ U[k] + d[k]) for k in range(T)])
    init = X[0] - mdl.x0
    stat_x, stat_u, infeas, comp = [], [], [], []
    ATnu = nu @ A          # row k: A' nu_k
    BTnu = nu @ mdl.B
    for i, term in enumerate(problem.objective):
        sx, su = mdl.state_slice(i), mdl.input_slice(i)
        _, gX, gU, _ = term.evaluate(X[:, sx], U[:, su], hessian=False)
        mult = solution.ineq_multipliers[i]
        sxr = np.array(gX, dtype=float)
        q = problem.linear_state_terms[i]
        if q is not None:
            sxr[:T] += np.asarray(q, dtype=float)
        sxr[:T] += ATnu[:, sx]
        sxr[1:] -= nu[:, sx]
        sur = np.array(gU, dtype=float) + BTnu[:, su]
        Xs, Us = problem.sets[i]
        if Xs is not None:
            sxr += mult["state"] @ Xs.G
            slack = Xs.g[None, :] - X[:, sx] @ Xs.G.T
            infeas.append(np.maximum(-slack[1:], 0.0))
            comp.append(mult["state"][1:] * slack[1:])
        if Us is not None:
            sur += mult["input"] @ Us.G
            slack = Us.g[None, :] - U[:, su] @ Us.G.T
            infeas.append(np.maximum(-slack, 0.0))
            comp.append(mult["input"] * slack)
        sxr += mult["state_upper"] - mult["state_lower"]
        sur += mult["input_upper"] - mult["input_lower"]
        bnd = problem.extra_bounds[i]
        if bnd is not None:
            for vals, lo, hi, ml, mu_ in ((X[:, sx], bnd.state_lower, bnd.state_upper,
                                           mult["state_lower"], mult["state_upper"]),
                                          (U[:, su], bnd.input_lower, bnd.input_upper,
                                           mult["input_lower"], mult["input_upper"])):
                lo = np.asarray(lo, dtype=float)
                hi = np.asarray(hi, dtype=float)
                up_slack = np.where(np.isfinite(hi), hi - vals, np.inf)
                lo_slack = np.where(np.isfinite(lo), vals - lo, np.inf)
                infeas.append(np.maximum(-np.minimum(up_slack, lo_slack), 0.0))
                comp.append(np.where(np.isfinite(up_slack), mu_ * up_slack, 0.0))
                comp.append(np.where(np.isfinite(lo_slack), ml * lo_slack, 0.0))
        sxr[0] = 0.0
        stat_x.append(sxr)
        stat_u.append(sur)
    return KKTReport(stat_x, stat_u, dyn, init, infeas, comp)


def local_problem_model(A_ii, B_i, horizon: int, x0_i, affine) -> SystemModel:
    """Single-agent model ``x+ = A_ii x + B_i u + affine_k``."""
    A_ii = np.atleast_2d(np.asarray(A_ii, dtype=float))
    B_i = np.atleast_2d(np.asarray(B_i, dtype=float))
    return SystemModel(A=A_ii, B=B_i, partition=[(A_ii.shape[0], B_i.shape[1])],
                       horizon=horizon, x0=np.atleast_1d(np.asarray(x0_i, dtype=float)),
                       disturbance=np.asarray(affine, dtype=float).reshape(horizon, -1))
