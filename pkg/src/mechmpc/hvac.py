"""Four-room building: thermal dynamics, comfort/energy costs and the broadcast surrogate."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .mechanism import SurrogateFamily, reference_quadratic_family
from .sysmodel import AgentCost, ModelError, PolytopeSet, SystemModel, sinusoid_series

STABLE = "stable"
PRINTED = "printed"

# room layout: 1-2 via beta, 1-3 via gamma, 2-4 via eta, 3-4 via nu (0-based below)
EDGES = (("beta", 0, 1), ("gamma", 0, 2), ("eta", 1, 3), ("nu_heat", 2, 3))


@dataclass
class HvacParams:
    alpha: float = 0.05
    beta: float = 0.1
    gamma: float = 0.1
    eta: float = 0.1
    nu_heat: float = 0.1
    mu: float = 0.2
    u_min: float = -5.0
    u_max: float = 5.0
    T_d: tuple = (20.0, 21.0, 22.0, 23.0)
    lam: tuple = (0.5, 0.6, 0.7, 0.8)
    gamma_i: tuple = (0.3, 0.3, 0.3, 0.3)
    T_r: float = 21.5
    sign_convention: str = STABLE
    t_out: dict = field(default_factory=lambda: {
        "mean": 10.0, "amplitude": 5.0, "period": 48.0, "noise_std": 0.5})

    def __post_init__(self):
        self.T_d = tuple(float(x) for x in self.T_d)
        self.lam = tuple(float(x) for x in self.lam)
        self.gamma_i = tuple(float(x) for x in self.gamma_i)
        self.t_out = dict(self.t_out)

    def validate(self) -> None:
        for name in ("T_d", "lam", "gamma_i"):
            if len(getattr(self, name)) != 4:
                raise ModelError(f"hvac.{name} needs one entry per room (4)")
        for i, l in enumerate(self.lam):
            if not 0.0 < l < 1.0:
                raise ModelError(f"hvac.lam[{i}] = {l} must lie strictly inside (0, 1)")
        for i, g in enumerate(self.gamma_i):
            if not g > 0.0:
                raise ModelError(f"hvac.gamma_i[{i}] = {g} must be positive")
        if not self.u_min <= 0.0 <= self.u_max:
            raise ModelError("hvac input bounds must contain 0")
        if self.sign_convention not in (STABLE, PRINTED):
            raise ModelError(f"unknown sign convention {self.sign_convention!r}")

    def to_config(self) -> dict:
        d = asdict(self)
        for name in ("T_d", "lam", "gamma_i"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_config(cls, cfg: dict) -> "HvacParams":
        known = {f.name for f in fields(cls)}
        extra = set(cfg) - known
        if extra:
            raise ModelError(f"unknown hvac parameters: {sorted(extra)}")
        base = cls()
        t_out = dict(base.t_out)
        t_out.update(cfg.get("t_out", {}))
        merged = {**asdict(base), **cfg, "t_out": t_out}
        return cls(**merged)


def hvac_matrix(p: HvacParams) -> np.ndarray:
    """The 4x4 room-coupling matrix under the selected sign convention."""
    A = np.zeros((4, 4))
    if p.sign_convention == STABLE:
        for name, a, b in EDGES:
            c = getattr(p, name)
            A[a, b] = A[b, a] = c
        A[np.diag_indices(4)] = 1.0 - p.alpha - A.sum(axis=1)
        return A
    b_, g_, e_, n_ = p.beta, p.gamma, p.eta, p.nu_heat
    rho = [1 + p.alpha + b_ + g_, 1 + p.alpha + b_ + e_, 1 + p.alpha + g_ + n_,
           1 + p.alpha + e_ + n_]
    # literal signs, including the asymmetric eta entries
    return np.array([[rho[0], -b_, -g_, 0.0],
                     [-b_, rho[1], 0.0, e_],
                     [-g_, 0.0, rho[2], -n_],
                     [0.0, -e_, -n_, rho[3]]])


def disturbance_weight(p: HvacParams) -> float:
    """Multiplier on the outside temperature in ``d_k``."""
    return p.alpha if p.sign_convention == STABLE else -p.alpha


def outside_temperature(p: HvacParams, length: int, seed: int = 42) -> np.ndarray:
    """Daily sinusoid plus seeded Gaussian noise."""
    spec = p.t_out
    rng = np.random.default_rng(seed)
    return sinusoid_series(length, spec.get("mean", 10.0), spec.get("amplitude", 5.0),
                           spec.get("period", 48.0), spec.get("noise_std", 0.5), rng)


def build_hvac(p: HvacParams, horizon: int = 15, x0=None, t_out=None) -> SystemModel:
    """Room temperatures with one heating/cooling input per room.

    ``t_out`` is the outside temperature over the horizon; ``None`` gives a
    model without disturbance.
    """
    p.validate()
    A = hvac_matrix(p)
    if p.sign_convention == STABLE:
        diag = np.diag(A)
        # A = I (no losses at all) is allowed: marginally stable, nothing grows
        if np.any(diag <= 0.0) or np.any(diag > 1.0):
            raise ModelError(f"room self-retention {diag.tolist()} must lie in (0, 1]")
        rad = float(np.max(np.abs(np.linalg.eigvals(A))))
        if rad > 1.0 + 1e-12:
            raise ModelError(f"thermal matrix is unstable (spectral radius {rad:.4g})")
    x0 = np.full(4, 18.0) if x0 is None else np.asarray(x0, dtype=float)
    dist = None
    if t_out is not None:
        t_out = np.asarray(t_out, dtype=float)[:horizon]
        dist = disturbance_weight(p) * np.repeat(t_out[:, None], 4, axis=1)
    return SystemModel(A=A, B=p.mu * np.eye(4), partition=[(1, 1)] * 4, horizon=horizon,
                       x0=x0, disturbance=dist)


def hvac_cost(T_d: float, lam: float, gamma: float) -> AgentCost:
    """``lam/2 (T - T_d)^2 + (1 - lam)/2 exp((gamma u)^2)``; terminal ``lam/2 (T - T_d)^2``."""
    T_d, lam, gamma = float(T_d), float(lam), float(gamma)
    g2 = gamma * gamma

    def stage(x, u):
        return float(0.5 * lam * (x[0] - T_d) ** 2 + 0.5 * (1 - lam) * np.exp(g2 * u[0] ** 2))

    def stage_grad(x, u):
        return (np.array([lam * (x[0] - T_d)]),
                np.array([(1 - lam) * g2 * u[0] * np.exp(g2 * u[0] ** 2)]))

    def stage_hess(x, u):
        e = np.exp(g2 * u[0] ** 2)
        return np.array([[lam, 0.0], [0.0, (1 - lam) * g2 * e * (1 + 2 * g2 * u[0] ** 2)]])

    return AgentCost(
        stage=stage,
        stage_grad=stage_grad,
        terminal=lambda x: float(0.5 * lam * (x[0] - T_d) ** 2),
        terminal_grad=lambda x: np.array([lam * (x[0] - T_d)]),
        stage_hess=stage_hess,
        terminal_hess=lambda x: np.array([[lam]]),
        descriptor=f"hvac(T_d={T_d}, lam={lam}, gamma={gamma})",
    )


def hvac_costs(p: HvacParams) -> list:
    return [hvac_cost(p.T_d[i], p.lam[i], p.gamma_i[i]) for i in range(4)]


def hvac_surrogate(T_r: float) -> SurrogateFamily:
    if T_r == 0:
        raise ModelError("the surrogate reference temperature must be nonzero")
    return reference_quadratic_family(T_r, name=f"hvac-surrogate(T_r={T_r})")


def hvac_sets(p: HvacParams) -> list:
    return [(None, PolytopeSet.box([p.u_min], [p.u_max])) for _ in range(4)]


def unweighted_target_state_weight(T_d: float, lam: float, T_r: float):
    """State weights ``((1 - lam) T + T_d) / T_r`` (drops ``lam`` on ``T_d``)."""
    def rule(states):
        return ((1.0 - lam) * np.asarray(states, dtype=float) + T_d) / T_r
    return rule
