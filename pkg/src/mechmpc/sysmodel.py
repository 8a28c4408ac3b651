"""Partitioned linear systems, constraint sets and private agent costs.

The global state ``x`` and input ``u`` are split into consecutive agent
blocks according to ``partition = [(n_1, m_1), ..., (n_I, m_I)]``.  Agent
``i`` evolves as

    x_i[k+1] = A_ii x_i[k] + B_i u_i[k] + sum_{j in N_i} A_ij x_j[k] + d_i[k]

where the neighbour sets ``N_i`` are read off the sparsity of ``A``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np


class ModelError(ValueError):
    """Raised for inconsistent model or scenario data."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Partitioned linear (affine) dynamics over a finite horizon.

    Attributes
    ----------
    A : (n, n) array
    B : (n, m) array, block diagonal with respect to ``partition``
    partition : tuple of (n_i, m_i)
    horizon : int
        Number of stages ``T``.
    x0 : (n,) array
    disturbance : (T, n) array or None
        Known affine term ``d_k``; ``None`` means zero.
    """

    A: np.ndarray
    B: np.ndarray
    partition: tuple
    horizon: int
    x0: np.ndarray
    disturbance: Optional[np.ndarray] = None
    neighbors: tuple = field(init=False)

    def __post_init__(self):
        A = _frozen(self.A)
        B = _frozen(self.B)
        part = tuple((int(a), int(b)) for a, b in self.partition)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ModelError(f"A must be square, got shape {A.shape}")
        n = A.shape[0]
        if B.ndim != 2 or B.shape[0] != n:
            raise ModelError(f"B must have {n} rows, got shape {B.shape}")
        m = B.shape[1]
        if not part or any(a <= 0 or b < 0 for a, b in part):
            raise ModelError(f"invalid partition {part}")
        if sum(a for a, _ in part) != n:
            raise ModelError(f"partition state sizes sum to {sum(a for a, _ in part)}, expected n={n}")
        if sum(b for _, b in part) != m:
            raise ModelError(f"partition input sizes sum to {sum(b for _, b in part)}, expected m={m}")
        T = int(self.horizon)
        if T <= 0:
            raise ModelError(f"horizon must be positive, got {self.horizon}")
        x0 = _frozen(self.x0).reshape(-1)
        if x0.shape != (n,):
            raise ModelError(f"x0 must have length {n}, got {x0.shape}")
        d = self.disturbance
        if d is not None:
            d = _frozen(d)
            if d.shape != (T, n):
                raise ModelError(f"disturbance must have shape {(T, n)}, got {d.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "partition", part)
        object.__setattr__(self, "horizon", T)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "disturbance", d)

        xs = np.concatenate([[0], np.cumsum([a for a, _ in part])]).astype(int)
        us = np.concatenate([[0], np.cumsum([b for _, b in part])]).astype(int)
        object.__setattr__(self, "_xslices",
                           tuple(slice(int(xs[i]), int(xs[i + 1])) for i in range(len(part))))
        object.__setattr__(self, "_uslices",
                           tuple(slice(int(us[i]), int(us[i + 1])) for i in range(len(part))))
        for i in range(len(part)):
            for j in range(len(part)):
                if i != j and np.any(B[xs[i]:xs[i + 1], us[j]:us[j + 1]] != 0):
                    raise ModelError(f"B has a nonzero off-diagonal block ({i}, {j})")
        nbrs = []
        for i in range(len(part)):
            nbrs.append(frozenset(
                j for j in range(len(part))
                if j != i and np.any(A[xs[i]:xs[i + 1], xs[j]:xs[j + 1]] != 0)))
        object.__setattr__(self, "neighbors", tuple(nbrs))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def num_agents(self) -> int:
        return len(self.partition)

    def state_slice(self, i: int) -> slice:
        return self._xslices[i]

    def input_slice(self, i: int) -> slice:
        return self._uslices[i]

    def block(self, i: int, j: int) -> np.ndarray:
        """Coupling block ``A_ij`` (effect of agent j's state on agent i)."""
        return self.A[self.state_slice(i), self.state_slice(j)]

    def input_block(self, i: int) -> np.ndarray:
        return self.B[self.state_slice(i), self.input_slice(i)]

    def dist(self, k: int) -> np.ndarray:
        if self.disturbance is None:
            return np.zeros(self.n)
        return self.disturbance[k]

    def disturbance_or_zero(self) -> np.ndarray:
        if self.disturbance is None:
            return np.zeros((self.horizon, self.n))
        return np.array(self.disturbance)

    def upstream(self, i: int) -> list:
        """Agents ``j`` whose dynamics see agent ``i`` (``i in N_j``)."""
        return [j for j in range(self.num_agents) if i in self.neighbors[j]]

    def replace(self, **changes) -> "SystemModel":
        changes.pop("neighbors", None)
        return replace(self, **changes)

    def to_config(self) -> dict:
        cfg = {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "partition": [list(p) for p in self.partition],
            "horizon": self.horizon,
            "x0": self.x0.tolist(),
        }
        if self.disturbance is not None:
            cfg["disturbance"] = self.disturbance.tolist()
        return cfg


def build_system(config: dict) -> SystemModel:
    """Build and validate a :class:`SystemModel` from a scenario ``system`` block.

    ``disturbance`` may be omitted, an inline ``T x n`` array, or a generator
    spec ``{"generator": name, "seed": s, ...}`` (see :func:`generate_disturbance`).
    A declared ``neighbors`` list must agree with the sparsity of ``A``.
    """
    try:
        A = np.array(config["A"], dtype=float)
        B = np.array(config["B"], dtype=float)
        partition = [tuple(p) for p in config["partition"]]
        horizon = int(config["horizon"])
        x0 = np.array(config["x0"], dtype=float)
    except KeyError as exc:
        raise ModelError(f"system config is missing field {exc.args[0]!r}") from None
    if A.ndim == 1 and A.size == 1:
        A = A.reshape(1, 1)
    if B.ndim == 1:
        B = B.reshape(A.shape[0], -1)
    dist = config.get("disturbance")
    if isinstance(dist, dict):
        dist = generate_disturbance(dist, horizon, A.shape[0])
    elif dist is not None:
        dist = np.array(dist, dtype=float)
    model = SystemModel(A=A, B=B, partition=partition, horizon=horizon, x0=x0, disturbance=dist)
    declared = config.get("neighbors")
    if declared is not None:
        declared = tuple(frozenset(int(j) for j in nb) for nb in declared)
        if declared != model.neighbors:
            raise ModelError(
                f"declared neighbours {[sorted(s) for s in declared]} disagree with the "
                f"sparsity of A {[sorted(s) for s in model.neighbors]}")
    return model


def generate_disturbance(spec: dict, length: int, n: int) -> np.ndarray:
    """Named disturbance generators, seeded and deterministic.

    ``sinusoid``: ``scale * (mean + amplitude sin(2 pi k / period) + noise)``
    broadcast to every state; ``gaussian``: i.i.d. ``N(0, std^2)`` per entry;
    ``zero``.
    """
    kind = spec.get("generator", "zero")
    rng = np.random.default_rng(spec.get("seed", 0))
    if kind == "zero":
        return np.zeros((length, n))
    if kind == "gaussian":
        return float(spec.get("std", 1.0)) * rng.standard_normal((length, n))
    if kind == "sinusoid":
        series = sinusoid_series(length, spec.get("mean", 0.0), spec.get("amplitude", 1.0),
                                 spec.get("period", 24), spec.get("noise_std", 0.0), rng)
        return float(spec.get("scale", 1.0)) * np.repeat(series[:, None], n, axis=1)
    raise ModelError(f"unknown disturbance generator {kind!r}")


def sinusoid_series(length, mean, amplitude, period, noise_std, rng) -> np.ndarray:
    k = np.arange(length)
    base = mean + amplitude * np.sin(2.0 * np.pi * k / period)
    return base + noise_std * rng.standard_normal(length)


def step_dynamics(model: SystemModel, x, u, k: int) -> np.ndarray:
    """One step ``A x + B u + d_k``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.shape != (model.n,) or u.shape != (model.m,):
        raise ModelError(f"expected x of length {model.n} and u of length {model.m}, "
                         f"got {x.shape} and {u.shape}")
    if not 0 <= k < model.horizon:
        raise ModelError(f"stage {k} outside [0, {model.horizon})")
    return model.A @ x + model.B @ u + model.dist(k)


def coupling_input(model: SystemModel, i: int, states, k: int) -> np.ndarray:
    """Neighbour contribution ``sum_{j in N_i} A_ij x_j[k]`` for agent ``i``.

    ``states`` is either a full ``(T+1, n)`` state sequence or a single
    ``n``-vector (in which case ``k`` is ignored).
    """
    states = np.asarray(states, dtype=float)
    xk = states if states.ndim == 1 else states[k]
    if xk.shape != (model.n,):
        raise ModelError(f"state vector must have length {model.n}")
    out = np.zeros(model.partition[i][0])
    for j in sorted(model.neighbors[i]):
        out += model.block(i, j) @ xk[model.state_slice(j)]
    return out


# --------------------------------------------------------------------------
# constraint sets

@dataclass(frozen=True, eq=False)
class PolytopeSet:
    """The set ``{s : G s <= g}``; must contain the origin.

    Box sets keep their ``lower``/``upper`` vectors alongside the compiled
    rows (infinite bounds produce no row).
    """

    G: np.ndarray
    g: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        G = _frozen(self.G)
        g = _frozen(self.g).reshape(-1)
        if G.ndim != 2 or G.shape[0] != g.shape[0]:
            raise ModelError(f"G {G.shape} and g {g.shape} are inconsistent")
        if np.any(g < 0):
            raise ModelError("polytope must contain the origin (g >= 0)")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "g", g)
        if self.lower is not None:
            object.__setattr__(self, "lower", _frozen(self.lower))
            object.__setattr__(self, "upper", _frozen(self.upper))

    @classmethod
    def box(cls, lower, upper) -> "PolytopeSet":
        lower = np.asarray(lower, dtype=float).reshape(-1)
        upper = np.asarray(upper, dtype=float).reshape(-1)
        if lower.shape != upper.shape or np.any(lower > upper):
            raise ModelError("box bounds must satisfy lower <= upper")
        d = lower.size
        rows, rhs = [], []
        for c in range(d):
            if np.isfinite(upper[c]):
                rows.append(np.eye(d)[c])
                rhs.append(upper[c])
            if np.isfinite(lower[c]):
                rows.append(-np.eye(d)[c])
                rhs.append(-lower[c])
        G = np.array(rows).reshape(-1, d)
        return cls(G=G, g=np.array(rhs, dtype=float), lower=lower, upper=upper)

    @property
    def dim(self) -> int:
        return self.G.shape[1]

    @property
    def is_box(self) -> bool:
        return self.lower is not None

    def violation(self, s) -> np.ndarray:
        """Row-wise violation ``max(G s - g, 0)``."""
        return np.maximum(self.G @ np.asarray(s, dtype=float) - self.g, 0.0)

    def contains(self, s, tol: float = 0.0) -> bool:
        return bool(np.all(self.violation(s) <= tol))

    def to_config(self) -> dict:
        if self.is_box:
            return {"lower": _inf_list(self.lower), "upper": _inf_list(self.upper)}
        return {"G": self.G.tolist(), "g": self.g.tolist()}


def _inf_list(a):
    return [None if not np.isfinite(x) else float(x) for x in a]


def polytope_from_config(cfg, dim: int) -> Optional[PolytopeSet]:
    if cfg is None:
        return None
    if "lower" in cfg or "upper" in cfg:
        lo = [-np.inf if x is None else x for x in cfg.get("lower", [None] * dim)]
        hi = [np.inf if x is None else x for x in cfg.get("upper", [None] * dim)]
        return PolytopeSet.box(lo, hi)
    return PolytopeSet(G=np.array(cfg["G"], dtype=float).reshape(-1, dim), g=cfg["g"])


# --------------------------------------------------------------------------
# private costs

@dataclass(frozen=True, eq=False)
class AgentCost:
    """Private stage and terminal cost of one agent with analytic gradients.

    ``stage_grad`` returns ``(dl/dx, dl/du)``.  Hessians are optional; the
    solver falls back to central differences of the gradient when absent.
    """

    stage: Callable
    stage_grad: Callable
    terminal: Callable
    terminal_grad: Callable
    stage_hess: Optional[Callable] = None
    terminal_hess: Optional[Callable] = None
    descriptor: str = ""

    def total(self, states, inputs) -> float:
        """``g(x_T) + sum_k l(x_k, u_k)`` over a trajectory."""
        states = np.asarray(states, dtype=float)
        inputs = np.asarray(inputs, dtype=float)
        val = sum(float(self.stage(states[k], inputs[k])) for k in range(inputs.shape[0]))
        return val + float(self.terminal(states[-1]))

    def stage_hessian(self, x, u) -> np.ndarray:
        if self.stage_hess is not None:
            return np.asarray(self.stage_hess(x, u), dtype=float)
        nx = len(x)
        z = np.concatenate([x, u])

        def grad(zz):
            gx, gu = self.stage_grad(zz[:nx], zz[nx:])
            return np.concatenate([np.atleast_1d(gx), np.atleast_1d(gu)])
        return _fd_jacobian(grad, z)

    def terminal_hessian(self, x) -> np.ndarray:
        if self.terminal_hess is not None:
            return np.asarray(self.terminal_hess(x), dtype=float)
        return _fd_jacobian(lambda s: np.atleast_1d(self.terminal_grad(s)), np.asarray(x, float))


def _fd_jacobian(fun, z, rel=1e-6):
    z = np.asarray(z, dtype=float)
    J = np.empty((z.size, z.size))
    for c in range(z.size):
        h = rel * max(1.0, abs(z[c]))
        zp, zm = z.copy(), z.copy()
        zp[c] += h
        zm[c] -= h
        J[:, c] = (fun(zp) - fun(zm)) / (2 * h)
    return 0.5 * (J + J.T)


def quadratic_cost(Q, R, P=None, S=None, descriptor="quadratic") -> AgentCost:
    """``l = x'Qx + u'Ru + 2x'Su``, ``g = x'Px`` (no 1/2 factor)."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q if P is None else np.atleast_2d(np.asarray(P, dtype=float))
    S = np.zeros((Q.shape[0], R.shape[0])) if S is None else np.atleast_2d(np.asarray(S, float))
    H = 2.0 * np.block([[Q, S], [S.T, R]])

    def stage(x, u):
        return float(x @ Q @ x + u @ R @ u + 2.0 * x @ S @ u)

    def stage_grad(x, u):
        return 2.0 * (Q @ x + S @ u), 2.0 * (R @ u + S.T @ x)

    return AgentCost(
        stage=stage,
        stage_grad=stage_grad,
        terminal=lambda x: float(x @ P @ x),
        terminal_grad=lambda x: 2.0 * P @ x,
        stage_hess=lambda x, u: H,
        terminal_hess=lambda x: 2.0 * P,
        descriptor=descriptor,
    )


def check_cost(cost: AgentCost, n_i: int, m_i: int, samples: int = 50, seed: int = 0,
               scale: float = 1.0, center=None, rtol: float = 1e-5) -> list:
    """Statistical convexity and gradient checks; returns a list of problems found.

    Midpoint convexity is tested on random pairs and the analytic gradients
    against central differences.  Strict convexity cannot be decided for an
    opaque function, so an empty list is evidence, not proof.
    """
    rng = np.random.default_rng(seed)
    cx = np.zeros(n_i + m_i) if center is None else np.asarray(center, float)
    problems = []

    def stage_z(z):
        return float(cost.stage(z[:n_i], z[n_i:]))

    for _ in range(samples):
        a = cx + scale * rng.standard_normal(n_i + m_i)
        b = cx + scale * rng.standard_normal(n_i + m_i)
        mid = stage_z(0.5 * (a + b))
        if mid > 0.5 * (stage_z(a) + stage_z(b)) + 1e-12:
            problems.append(("stage not midpoint convex", a, b))
        ta, tb = a[:n_i], b[:n_i]
        if float(cost.terminal(0.5 * (ta + tb))) > 0.5 * (float(cost.terminal(ta)) + float(cost.terminal(tb))) + 1e-12:
            problems.append(("terminal not midpoint convex", ta, tb))
        gx, gu = cost.stage_grad(a[:n_i], a[n_i:])
        g = np.concatenate([np.atleast_1d(gx), np.atleast_1d(gu)])
        fd = np.empty_like(g)
        for c in range(g.size):
            h = 1e-6 * max(1.0, abs(a[c]))
            zp, zm = a.copy(), a.copy()
            zp[c] += h
            zm[c] -= h
            fd[c] = (stage_z(zp) - stage_z(zm)) / (2 * h)
        if np.max(np.abs(fd - g)) > rtol * max(1.0, np.max(np.abs(g))):
            problems.append(("stage gradient mismatch", a, np.max(np.abs(fd - g))))
    return problems


# --------------------------------------------------------------------------
# trajectories and feasibility

@dataclass(frozen=True, eq=False)
class Trajectory:
    """State ``(T+1, n_i)`` and input ``(T, m_i)`` sequences of one agent."""

    states: np.ndarray
    inputs: np.ndarray
    agent: int = 0

    def __post_init__(self):
        for name in ("states", "inputs"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim == 1:
                arr = arr.reshape(-1, 1)
            object.__setattr__(self, name, _frozen(arr))
        if self.states.shape[0] != self.inputs.shape[0] + 1:
            raise ModelError("a trajectory needs one more state than inputs")

    def check_dims(self, model: SystemModel) -> None:
        n_i, m_i = model.partition[self.agent]
        T = model.horizon
        if self.states.shape != (T + 1, n_i) or self.inputs.shape != (T, m_i):
            raise ModelError(
                f"agent {self.agent} trajectory has shapes {self.states.shape}/{self.inputs.shape}, "
                f"expected {(T + 1, n_i)}/{(T, m_i)}")


def stack_trajectories(model: SystemModel, trajs: Sequence[Trajectory]):
    """Assemble per-agent trajectories into global ``(T+1, n)`` and ``(T, m)`` arrays."""
    X = np.zeros((model.horizon + 1, model.n))
    U = np.zeros((model.horizon, model.m))
    for tr in trajs:
        tr.check_dims(model)
        X[:, model.state_slice(tr.agent)] = tr.states
        U[:, model.input_slice(tr.agent)] = tr.inputs
    return X, U


def split_trajectories(model: SystemModel, X, U) -> list:
    return [Trajectory(X[:, model.state_slice(i)], U[:, model.input_slice(i)], agent=i)
            for i in range(model.num_agents)]


def simulate(model: SystemModel, U, x0=None) -> np.ndarray:
    """Roll the dynamics forward from ``x0`` (default ``model.x0``) under inputs ``U``."""
    U = np.asarray(U, dtype=float)
    X = np.zeros((U.shape[0] + 1, model.n))
    X[0] = model.x0 if x0 is None else x0
    for k in range(U.shape[0]):
        X[k + 1] = model.A @ X[k] + model.B @ U[k] + model.dist(k)
    return X


@dataclass(frozen=True)
class Violation:
    kind: str      # initial | dynamics | state | input
    agent: int
    stage: int
    row: int
    magnitude: float


def check_feasible(model: SystemModel, sets, trajs: Sequence[Trajectory], tol: float = 1e-8) -> list:
    """List every constraint violated by more than ``tol``; empty means feasible.

    ``sets`` holds one ``(X_i, U_i)`` pair per agent; ``None`` entries are
    unconstrained.
    """
    X, U = stack_trajectories(model, trajs)
    out = []
    for i in range(model.num_agents):
        sx = model.state_slice(i)
        for r, val in enumerate(np.abs(X[0, sx] - model.x0[sx])):
            if val > tol:
                out.append(Violation("initial", i, 0, r, float(val)))
    for k in range(model.horizon):
        res = X[k + 1] - step_dynamics(model, X[k], U[k], k)
        for i in range(model.num_agents):
            for r, val in enumerate(np.abs(res[model.state_slice(i)])):
                if val > tol:
                    out.append(Violation("dynamics", i, k, r, float(val)))
    for i, (Xs, Us) in enumerate(sets):
        if Xs is not None:
            for k in range(model.horizon + 1):
                for r, val in enumerate(Xs.violation(X[k, model.state_slice(i)])):
                    if val > tol:
                        out.append(Violation("state", i, k, r, float(val)))
        if Us is not None:
            for k in range(model.horizon):
                for r, val in enumerate(Us.violation(U[k, model.input_slice(i)])):
                    if val > tol:
                        out.append(Violation("input", i, k, r, float(val)))
    return out
