"""Scenario documents: defaults, dotted overrides, validation and assembly."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .agent import Agent
from .hvac import (HvacParams, build_hvac, disturbance_weight, hvac_costs, hvac_sets,
                   hvac_surrogate, outside_temperature, unweighted_target_state_weight)
from .mechanism import Principal, SurrogateFamily, reference_quadratic_family
from .sysmodel import (ModelError, SystemModel, build_system, generate_disturbance,
                       polytope_from_config, quadratic_cost)


class ConfigError(ValueError):
    pass


GAME_TOL = 1e-10


def default_config() -> dict:
    """The shipped four-room scenario as a plain document."""
    return {
        "kind": "hvac",
        "hvac": HvacParams().to_config(),
        "horizon": 15,
        "sim_length": 100,
        "x0": [18.0, 18.0, 18.0, 18.0],
        "seed": 42,
        "game_disturbance": False,
        "mechanism": {"exclusion": "full", "tol": GAME_TOL, "exclusion_tol": 1e-12,
                      "max_iter": 100, "state_weight_rule": "matched", "bootstrap": "unit"},
        "learning": {"rounds": 50, "tol": 1e-6},
        "verify": {"samples": 100, "sigma": 0.1, "x_noise": 0.1, "lambda_noise": 0.1,
                   "tol": 1e-5},
        "mpc": {"forecast": "perfect"},
    }


def set_dotted(doc: dict, key: str, value) -> None:
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def parse_override(text: str):
    """``KEY=VALUE`` with VALUE parsed as JSON when possible, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not KEY=VALUE")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(doc: dict, overrides) -> dict:
    out = copy.deepcopy(doc)
    for item in overrides or ():
        key, value = parse_override(item) if isinstance(item, str) else item
        set_dotted(out, key, value)
    return out


def merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: Optional[str] = None, overrides=None, seed: Optional[int] = None) -> dict:
    """Read a scenario file (merged over the defaults for the hvac kind) and apply overrides."""
    doc = default_config()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"scenario file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{p}: top level must be an object")
        if user.get("kind", "hvac") != "hvac":
            base = {k: v for k, v in doc.items() if k not in ("hvac", "x0")}
            doc = merge(base, user)
        else:
            doc = merge(doc, user)
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = int(seed)
    return doc


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(doc: dict) -> str:
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


@dataclass(eq=False)
class Scenario:
    """A runnable game: model, private costs, sets, announced family and run settings.

    ``model`` is the single-stage game with horizon ``N``.  ``disturbance``
    is the realized per-stage affine term over ``sim_length + N`` stages
    used by the receding-horizon runs.
    """

    config: dict
    model: SystemModel
    costs: list
    sets: list
    family: SurrogateFamily
    average_family: SurrogateFamily
    disturbance: np.ndarray
    sim_length: int
    seed: int
    state_weight_rules: Optional[list] = None
    t_out: Optional[np.ndarray] = None
    settings: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.model.horizon

    @property
    def hash(self) -> str:
        return config_hash(self.config)

    def mech(self, key, default=None):
        return self.config.get("mechanism", {}).get(key, default)

    def principal(self, model: Optional[SystemModel] = None, family=None, jobs: int = 1) -> Principal:
        return Principal(model or self.model, self.sets, family or self.family,
                         tol=self.mech("tol", GAME_TOL), max_iter=self.mech("max_iter", 100),
                         exclusion=self.mech("exclusion", "full"),
                         exclusion_tol=self.mech("exclusion_tol", 1e-12), jobs=jobs)

    def agents(self, model: Optional[SystemModel] = None) -> list:
        model = model or self.model
        out = []
        for i in range(model.num_agents):
            rule = self.state_weight_rules[i] if self.state_weight_rules else None
            out.append(Agent.from_model(model, i, self.costs[i], self.sets, state_weight_rule=rule,
                                        tol=self.mech("tol", GAME_TOL),
                                        max_iter=self.mech("max_iter", 100)))
        return out

    def forecast(self, t: int) -> np.ndarray:
        """Disturbance prediction over ``N`` stages made at stage ``t``."""
        N = self.horizon
        mode = self.config.get("mpc", {}).get("forecast", "perfect")
        if mode == "perfect":
            return np.array(self.disturbance[t:t + N])
        return np.repeat(self.disturbance[t:t + 1], N, axis=0)

    def stage_model(self, t: int, x) -> SystemModel:
        return self.model.replace(x0=np.asarray(x, dtype=float), disturbance=self.forecast(t))

    def with_model(self, model: SystemModel) -> "Scenario":
        out = copy.copy(self)
        out.model = model
        return out


def _positive_int(doc, key, minimum=1):
    try:
        v = int(doc[key])
    except (KeyError, TypeError, ValueError):
        raise ConfigError(f"{key} must be an integer") from None
    if v < minimum or v != doc[key]:
        raise ConfigError(f"{key} must be an integer >= {minimum}, got {doc[key]!r}")
    return v


def _check_common(doc: dict) -> None:
    lr = doc.get("learning", {})
    if int(lr.get("rounds", 1)) < 1:
        raise ConfigError(f"learning.rounds must be >= 1, got {lr.get('rounds')}")
    vf = doc.get("verify", {})
    if int(vf.get("samples", 1)) < 1:
        raise ConfigError(f"verify.samples must be >= 1, got {vf.get('samples')}")
    mech = doc.get("mechanism", {})
    if mech.get("exclusion", "full") not in ("full", "local"):
        raise ConfigError("mechanism.exclusion must be 'full' or 'local'")
    if mech.get("state_weight_rule", "matched") not in ("matched", "unweighted_target"):
        raise ConfigError("mechanism.state_weight_rule must be 'matched' or 'unweighted_target'")
    if mech.get("bootstrap", "unit") not in ("unit", "local"):
        raise ConfigError("mechanism.bootstrap must be 'unit' or 'local'")
    if doc.get("mpc", {}).get("forecast", "perfect") not in ("perfect", "persistence"):
        raise ConfigError("mpc.forecast must be 'perfect' or 'persistence'")


def build_scenario(doc: dict) -> Scenario:
    """Assemble a :class:`Scenario`; every validation problem surfaces as :class:`ConfigError`."""
    try:
        _check_common(doc)
        kind = doc.get("kind", "hvac")
        if kind == "hvac":
            return _build_hvac(doc)
        if kind == "linear":
            return _build_linear(doc)
        raise ConfigError(f"unknown scenario kind {kind!r}")
    except ModelError as exc:
        raise ConfigError(str(exc)) from None
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid scenario: {exc}") from None


def _build_hvac(doc: dict) -> Scenario:
    p = HvacParams.from_config(doc.get("hvac", {}))
    N = _positive_int(doc, "horizon")
    L = _positive_int(doc, "sim_length")
    seed = int(doc.get("seed", 42))
    x0 = np.asarray(doc.get("x0", [18.0] * 4), dtype=float)
    if x0.shape != (4,):
        raise ConfigError("x0 needs one temperature per room (4)")
    t_out = outside_temperature(p, L + N, seed)
    model = build_hvac(p, N, x0, t_out if doc.get("game_disturbance", False) else None)
    dist = disturbance_weight(p) * np.repeat(t_out[:, None], 4, axis=1)
    rules = None
    if doc.get("mechanism", {}).get("state_weight_rule", "matched") == "unweighted_target":
        rules = [unweighted_target_state_weight(p.T_d[i], p.lam[i], p.T_r) for i in range(4)]
    return Scenario(config=doc, model=model, costs=hvac_costs(p), sets=hvac_sets(p),
                    family=hvac_surrogate(p.T_r),
                    average_family=hvac_surrogate(float(np.mean(p.T_d))),
                    disturbance=dist, sim_length=L, seed=seed, state_weight_rules=rules,
                    t_out=t_out)


def _build_linear(doc: dict) -> Scenario:
    """Generic partitioned system with quadratic costs and a reference-quadratic surrogate.

    ``system`` follows :func:`build_system`; ``costs`` lists ``{"Q", "R", "P"}``
    per agent; ``sets`` lists ``{"state": ..., "input": ...}`` per agent.
    """
    sys_cfg = dict(doc["system"])
    N = int(sys_cfg.get("horizon", doc.get("horizon", 15)))
    sys_cfg["horizon"] = N
    L = _positive_int(doc, "sim_length") if "sim_length" in doc else 50
    seed = int(doc.get("seed", 42))
    dist_cfg = sys_cfg.pop("disturbance", None)
    model = build_system(sys_cfg)
    n = model.n
    if isinstance(dist_cfg, dict):
        dist = generate_disturbance({"seed": seed, **dist_cfg}, L + N, n)
    elif dist_cfg is not None:
        arr = np.array(dist_cfg, dtype=float).reshape(-1, n)
        dist = np.zeros((L + N, n))
        dist[:min(len(arr), L + N)] = arr[:L + N]
    else:
        dist = np.zeros((L + N, n))
    if doc.get("game_disturbance", True):
        model = model.replace(disturbance=dist[:N])
    costs_cfg = doc["costs"]
    if len(costs_cfg) != model.num_agents:
        raise ConfigError(f"costs lists {len(costs_cfg)} agents, system has {model.num_agents}")
    costs = [quadratic_cost(c["Q"], c["R"], c.get("P")) for c in costs_cfg]
    sets_cfg = doc.get("sets") or [{}] * model.num_agents
    sets = []
    for i, s in enumerate(sets_cfg):
        n_i, m_i = model.partition[i]
        sets.append((polytope_from_config(s.get("state"), n_i), polytope_from_config(s.get("input"), m_i)))
    # costs are minimized at the origin, so the averaged target is 0 unless set
    ref = float(doc.get("surrogate", {}).get("reference", 1.0))
    avg = float(doc.get("surrogate", {}).get("average_reference", 0.0))
    return Scenario(config=doc, model=model, costs=costs, sets=sets,
                    family=reference_quadratic_family(ref),
                    average_family=reference_quadratic_family(avg),
                    disturbance=dist, sim_length=L, seed=seed)


def default_scenario() -> Scenario:
    return build_scenario(default_config())


def load_scenario(path=None, overrides=None, seed=None) -> Scenario:
    return build_scenario(load_config(path, overrides, seed))


def save_config(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
