"""Model instances: Krusell-Smith savings economy, capacity competition, quality ladder."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .core import AggregateChain, Branches, InvalidArgument, ModelError, ModelSpec, StateGrid


def _check_keys(cls, data: dict) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise InvalidArgument(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return data


def symmetric_chain(n: int, persistence: float) -> np.ndarray:
    if n == 1:
        return np.ones((1, 1))
    off = (1.0 - persistence) / (n - 1)
    P = np.full((n, n), off)
    np.fill_diagonal(P, persistence)
    return P


# --------------------------------------------------------------------------
# Krusell-Smith
# --------------------------------------------------------------------------


@dataclass
class KSParams:
    beta: float = 0.99
    alpha: float = 0.36
    delta: float = 0.025
    z_values: tuple[float, ...] = (0.99, 1.01)
    # aggregate and employment dynamics in the usual duration / spell form
    dur_mean_bad: float = 8.0
    dur_mean_good: float = 8.0
    spell_mean_bad: float = 2.5
    spell_mean_good: float = 1.5
    urate_bad: float = 0.10
    urate_good: float = 0.04
    rel_prob_bg: float = 0.75
    rel_prob_gb: float = 1.25
    # labour efficiency when (unemployed, employed)
    productivity: tuple[float, float] = (0.15, 1.0)
    borrowing_limit: float = 0.0
    wealth_max: float = 250.0
    n_wealth: int = 100
    wealth_curvature: float = 2.0
    n_actions: int = 400
    # mass allowed on states whose optimal savings is the top of the grid
    top_mass_tol: float = 1e-6
    z_transition: list | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "KSParams":
        data = dict(_check_keys(cls, data))
        for key in ("z_values", "productivity"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    def validate(self) -> None:
        if not 0 < self.beta < 1:
            raise InvalidArgument(f"beta must lie in (0, 1), got {self.beta}")
        if not 0 < self.alpha < 1:
            raise InvalidArgument(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 < self.delta < 1:
            raise InvalidArgument(f"delta must lie in (0, 1), got {self.delta}")
        if any(z <= 0 for z in self.z_values):
            raise InvalidArgument("productivity shocks must be positive")
        if self.borrowing_limit < 0:
            raise InvalidArgument("borrowing limit must be nonnegative")
        if self.wealth_max <= -self.borrowing_limit:
            raise InvalidArgument("wealth_max must exceed the borrowing limit")
        if self.n_wealth < 2 or self.n_actions < 2:
            raise InvalidArgument("wealth and action grids need at least 2 points")
        if self.top_mass_tol < 0:
            raise InvalidArgument("top_mass_tol must be nonnegative")
        if len(self.productivity) != 2 or min(self.productivity) < 0:
            raise InvalidArgument("productivity must be two nonnegative numbers")
        if self.z_transition is None and len(self.z_values) != 2:
            raise InvalidArgument("the duration calibration needs exactly two shock values")


def ks_prices(K: float, z: float, params: KSParams) -> tuple[float, float]:
    """Gross return and wage with Cobb-Douglas output and labour normalised to one."""
    if not K > 0:
        raise InvalidArgument(f"aggregate capital must be positive, got {K}")
    a = params.alpha
    R = z * a * K ** (a - 1.0) - params.delta + 1.0
    w = z * (1.0 - a) * K**a
    return R, w


def ks_transitions(p: KSParams) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate matrix and employment law ``emp[z, z', e, e']`` (0 = unemployed)."""
    if p.z_transition is not None:
        agg = np.asarray(p.z_transition, dtype=float)
    else:
        pbg = 1.0 / p.dur_mean_bad
        pgb = 1.0 / p.dur_mean_good
        agg = np.array([[1.0 - pbg, pbg], [pgb, 1.0 - pgb]])
    nz = agg.shape[0]
    if nz != 2:
        emp = np.zeros((nz, nz, 2, 2))
        u = p.urate_bad
        emp[...] = np.array([[1 - 1 / p.spell_mean_bad, 1 / p.spell_mean_bad], [0, 0]])
        emp[..., 1, 0] = u / (1 - u) / p.spell_mean_bad
        emp[..., 1, 1] = 1 - emp[..., 1, 0]
        return agg, emp
    pbb, pbg = agg[0]
    pgb, pgg = agg[1]
    # joint law over (z, e) in the order BU, BE, GU, GE
    J = np.zeros((4, 4))
    J[0, 1] = pbb / p.spell_mean_bad
    J[0, 0] = pbb * (1 - 1 / p.spell_mean_bad)
    J[1, 0] = p.urate_bad / (1 - p.urate_bad) * J[0, 1]
    J[1, 1] = pbb - J[1, 0]
    J[2, 3] = pgg / p.spell_mean_good
    J[2, 2] = pgg * (1 - 1 / p.spell_mean_good)
    J[3, 2] = p.urate_good / (1 - p.urate_good) * J[2, 3]
    J[3, 3] = pgg - J[3, 2]
    J[0, 2] = p.rel_prob_bg * J[2, 2] / pgg * pbg
    J[0, 3] = pbg - J[0, 2]
    J[1, 2] = (pbg * p.urate_good - p.urate_bad * J[0, 2]) / (1 - p.urate_bad)
    J[1, 3] = pbg - J[1, 2]
    J[2, 0] = p.rel_prob_gb * J[0, 0] / pbb * pgb
    J[2, 1] = pgb - J[2, 0]
    J[3, 0] = (pgb * p.urate_bad - p.urate_good * J[2, 0]) / (1 - p.urate_good)
    J[3, 1] = pgb - J[3, 0]
    if np.any(J < -1e-12):
        raise InvalidArgument("employment calibration implies negative transition probabilities")
    J = np.clip(J, 0.0, None)
    emp = J.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3) / agg[:, :, None, None]
    return agg, emp


def power_grid(lo: float, hi: float, n: int, curvature: float) -> np.ndarray:
    return lo + (hi - lo) * np.linspace(0.0, 1.0, n) ** curvature


def linear_split(grid: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bracketing index and upper weight that preserve the mean of each value."""
    lo = np.clip(np.searchsorted(grid, values, side="right") - 1, 0, len(grid) - 2)
    w_hi = (values - grid[lo]) / (grid[lo + 1] - grid[lo])
    return lo, np.clip(w_hi, 0.0, 1.0)


def build_ks(params: KSParams | None = None) -> ModelSpec:
    p = params or KSParams()
    p.validate()
    agg, emp = ks_transitions(p)
    nz = agg.shape[0]
    z_values = np.asarray(p.z_values, dtype=float)
    if len(z_values) != nz:
        raise InvalidArgument("z_values and z_transition disagree in size")
    wealth = power_grid(-p.borrowing_limit, p.wealth_max, p.n_wealth, p.wealth_curvature)
    prod = np.asarray(p.productivity, dtype=float)
    nw = len(wealth)
    points = np.column_stack([np.repeat(wealth, 2), np.tile(prod, nw)])
    grid = StateGrid(points, ("wealth", "productivity"))
    x_wealth = points[:, 0]
    x_emp = np.tile([0, 1], nw)
    actions = power_grid(-p.borrowing_limit, p.wealth_max, p.n_actions, p.wealth_curvature)
    lo, w_hi = linear_split(wealth, actions)
    chain = AggregateChain(z_values, agg, tuple("bad good".split()) if nz == 2 else ())
    n, na = len(points), len(actions)

    def capital(s: np.ndarray) -> float:
        return float(s @ x_wealth)

    def cash_on_hand(z: int, s: np.ndarray) -> np.ndarray:
        K = capital(s)
        if not K > 0:
            raise ModelError(f"aggregate capital {K} is not positive")
        R, w = ks_prices(K, z_values[z], p)
        return R * x_wealth + w * points[:, 1]

    def feasible(z: int, s: np.ndarray) -> np.ndarray:
        return actions[None, :] < cash_on_hand(z, s)[:, None]

    def payoff(z: int, s: np.ndarray) -> np.ndarray:
        c = cash_on_hand(z, s)[:, None] - actions[None, :]
        return np.log(np.where(c > 0, c, np.nan))

    def kernel(z: int, zn: int, s: np.ndarray) -> Branches:
        targets = np.empty((n, na, 4), dtype=int)
        probs = np.empty((n, na, 4))
        for e_next in (0, 1):
            pe = emp[z, zn, x_emp, e_next][:, None]
            targets[:, :, 2 * e_next] = (lo * 2 + e_next)[None, :]
            targets[:, :, 2 * e_next + 1] = ((lo + 1) * 2 + e_next)[None, :]
            probs[:, :, 2 * e_next] = pe * (1.0 - w_hi)[None, :]
            probs[:, :, 2 * e_next + 1] = pe * w_hi[None, :]
        return Branches(targets, probs)

    def check_policy(policy: np.ndarray, s: np.ndarray, z: int) -> None:
        at_top = (policy == na - 1) & (s > 0)
        if s[at_top].sum() > p.top_mass_tol:
            raise ModelError(
                f"optimal savings hit the top of the wealth grid ({p.wealth_max}) with mass "
                f"{s[at_top].sum():.2e}; raise wealth_max"
            )

    return ModelSpec(
        name="ks",
        grid=grid,
        chain=chain,
        actions=actions,
        discount=p.beta,
        payoff=payoff,
        feasible=feasible,
        kernel=kernel,
        aggregate_stat=capital,
        params=p,
        check_policy=check_policy,
    )


# --------------------------------------------------------------------------
# investment models
# --------------------------------------------------------------------------

CAPACITY_MAPS = {
    "identity": lambda x: x,
    "sqrt": np.sqrt,
    "log1p": np.log1p,
}


def investment_probabilities(a, delta: float) -> tuple:
    """(down, stay, up) for an interior level at investment ``a``."""
    a = np.asarray(a, dtype=float)
    down = delta / (1.0 + a)
    up = (1.0 - delta) * a / (1.0 + a)
    stay = (1.0 - delta + delta * a) / (1.0 + a)
    return down, stay, up


def investment_branches(levels: int, actions: np.ndarray, delta: float) -> Branches:
    """Ladder dynamics on ``0..levels``; moves off the ladder stay put."""
    n = levels + 1
    down, stay, up = investment_probabilities(actions, delta)
    x = np.arange(n)
    targets = np.empty((n, len(actions), 3), dtype=int)
    targets[:, :, 0] = np.maximum(x - 1, 0)[:, None]
    targets[:, :, 1] = x[:, None]
    targets[:, :, 2] = np.minimum(x + 1, levels)[:, None]
    probs = np.empty((n, len(actions), 3))
    probs[:, :, 0] = down[None, :]
    probs[:, :, 1] = stay[None, :]
    probs[:, :, 2] = up[None, :]
    # boundary redirection, written out so each row keeps exactly three entries
    probs[0, :, 1] += probs[0, :, 0]
    probs[0, :, 0] = 0.0
    probs[-1, :, 1] += probs[-1, :, 2]
    probs[-1, :, 2] = 0.0
    return Branches(targets, probs)


@dataclass
class CapacityParams:
    beta: float = 0.925
    levels: int = 9
    a_max: float = 1.0
    cost: float = 4.0
    delta: float = 0.7
    e: float = 75.0
    f: float = 10.0
    market_size: float = 0.125
    z_values: tuple[float, ...] = (1.0, 2.0)
    persistence: float = 0.8
    z_transition: list | None = None
    capacity_map: str = "identity"
    n_actions: int = 21

    @classmethod
    def from_dict(cls, data: dict) -> "CapacityParams":
        data = dict(_check_keys(cls, data))
        if "z_values" in data:
            data["z_values"] = tuple(data["z_values"])
        return cls(**data)

    def inverse_demand(self, Q):
        return self.e / self.f - np.asarray(Q) / (self.market_size * self.f)

    def validate(self) -> None:
        if not 0 < self.beta < 1:
            raise InvalidArgument(f"beta must lie in (0, 1), got {self.beta}")
        if self.levels < 1:
            raise InvalidArgument("need at least two capacity levels (levels >= 1)")
        if not self.a_max > 0:
            raise InvalidArgument("a_max must be positive")
        if not self.cost > 0:
            raise InvalidArgument("investment cost must be positive")
        if not 0 < self.delta < 1:
            raise InvalidArgument(f"delta must lie in (0, 1), got {self.delta}")
        if self.market_size <= 0 or self.f <= 0:
            raise InvalidArgument("market size and f must be positive")
        if self.capacity_map not in CAPACITY_MAPS:
            raise InvalidArgument(f"unknown capacity map {self.capacity_map!r}")
        if self.n_actions < 2:
            raise InvalidArgument("need at least 2 investment levels")
        qmap = CAPACITY_MAPS[self.capacity_map]
        q_top = float(qmap(np.float64(self.levels)))
        if self.inverse_demand(q_top) < 0:
            raise InvalidArgument(
                f"inverse demand is negative at the largest reachable output {q_top}"
            )


def _chain(z_values, persistence, z_transition) -> AggregateChain:
    z_values = np.asarray(z_values, dtype=float)
    if z_transition is None:
        P = symmetric_chain(len(z_values), persistence)
    else:
        P = np.asarray(z_transition, dtype=float)
    return AggregateChain(z_values, P)


def build_capacity(params: CapacityParams | None = None) -> ModelSpec:
    p = params or CapacityParams()
    p.validate()
    chain = _chain(p.z_values, p.persistence, p.z_transition)
    levels = np.arange(p.levels + 1, dtype=float)
    qbar = np.asarray(CAPACITY_MAPS[p.capacity_map](levels), dtype=float)
    actions = np.linspace(0.0, p.a_max, p.n_actions)
    branches = investment_branches(p.levels, actions, p.delta)

    def mean_capacity(s: np.ndarray) -> float:
        return float(s @ qbar)

    def payoff(z: int, s: np.ndarray) -> np.ndarray:
        price = p.inverse_demand(mean_capacity(s))
        u = chain.states[z] * price * qbar
        return u[:, None] - p.cost * actions[None, :]

    def feasible(z: int, s: np.ndarray) -> np.ndarray:
        return np.ones((len(levels), len(actions)), dtype=bool)

    return ModelSpec(
        name="capacity",
        grid=StateGrid(levels, ("level",)),
        chain=chain,
        actions=actions,
        discount=p.beta,
        payoff=payoff,
        feasible=feasible,
        kernel=lambda z, zn, s: branches,
        aggregate_stat=mean_capacity,
        params=p,
    )


@dataclass
class QualityParams:
    beta: float = 0.925
    levels: int = 9
    a_max: float = 1.0
    cost: float = 4.0
    delta: float = 0.7
    theta: float = 0.5
    scale: float = 10.0
    z_values: tuple[float, ...] = (1.0, 2.0)
    persistence: float = 0.8
    z_transition: list | None = None
    n_actions: int = 21

    @classmethod
    def from_dict(cls, data: dict) -> "QualityParams":
        data = dict(_check_keys(cls, data))
        if "z_values" in data:
            data["z_values"] = tuple(data["z_values"])
        return cls(**data)

    def validate(self) -> None:
        if not 0 < self.beta < 1:
            raise InvalidArgument(f"beta must lie in (0, 1), got {self.beta}")
        if self.levels < 1:
            raise InvalidArgument("need at least two quality levels (levels >= 1)")
        if not self.theta < 1:
            raise InvalidArgument(f"quality elasticity theta must be below 1, got {self.theta}")
        if not self.scale > 0:
            raise InvalidArgument("profit scale must be positive")
        if not self.a_max > 0 or not self.cost > 0:
            raise InvalidArgument("a_max and cost must be positive")
        if not 0 < self.delta < 1:
            raise InvalidArgument(f"delta must lie in (0, 1), got {self.delta}")
        if self.n_actions < 2:
            raise InvalidArgument("need at least 2 investment levels")


def build_quality(params: QualityParams | None = None) -> ModelSpec:
    p = params or QualityParams()
    p.validate()
    chain = _chain(p.z_values, p.persistence, p.z_transition)
    levels = np.arange(p.levels + 1, dtype=float)
    weight = (levels + 1.0) ** p.theta
    actions = np.linspace(0.0, p.a_max, p.n_actions)
    branches = investment_branches(p.levels, actions, p.delta)

    def attraction(s: np.ndarray) -> float:
        return float(s @ weight)

    def payoff(z: int, s: np.ndarray) -> np.ndarray:
        u = chain.states[z] * p.scale * weight / attraction(s)
        return u[:, None] - p.cost * actions[None, :]

    def feasible(z: int, s: np.ndarray) -> np.ndarray:
        return np.ones((len(levels), len(actions)), dtype=bool)

    return ModelSpec(
        name="quality",
        grid=StateGrid(levels, ("level",)),
        chain=chain,
        actions=actions,
        discount=p.beta,
        payoff=payoff,
        feasible=feasible,
        kernel=lambda z, zn, s: branches,
        aggregate_stat=attraction,
        params=p,
    )


BUILDERS = {
    "ks": (KSParams, build_ks),
    "capacity": (CapacityParams, build_capacity),
    "quality": (QualityParams, build_quality),
}


def build_model(kind: str, params: dict | None = None) -> ModelSpec:
    if kind not in BUILDERS:
        raise InvalidArgument(f"unknown model {kind!r}; expected one of {sorted(BUILDERS)}")
    cls, builder = BUILDERS[kind]
    return builder(cls.from_dict(params or {}))
