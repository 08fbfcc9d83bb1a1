"""Model abstraction, population histograms and foresight trees.

A model lives on a finite grid of individual states.  Population states are
plain ``numpy`` histograms over that grid, policies are integer arrays of
action indices (one per grid point), and the aggregate shock is referred to by
its index in the :class:`AggregateChain`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

MASS_TOL = 1e-10
ROW_TOL = 1e-12

# Kernels with at most this many dense entries are kept as dense matrices.
DENSE_LIMIT = 2_000_000


class InvalidArgument(ValueError):
    pass


class ContractViolation(RuntimeError):
    pass


class ModelError(ValueError):
    """Raised when a model cannot be built or evaluated at the given inputs."""


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


# --------------------------------------------------------------------------
# grids, chains, populations
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StateGrid:
    points: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise InvalidArgument("grid points must be a 1-d or 2-d array")
        if pts.shape[0] < 2:
            raise InvalidArgument("a state grid needs at least 2 points")
        if len(np.unique(pts, axis=0)) != pts.shape[0]:
            raise InvalidArgument("grid points must be distinct")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if not self.labels:
            labels = tuple(f"x{i}" for i in range(pts.shape[1]))
            object.__setattr__(self, "labels", labels)

    @property
    def cardinality(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True, eq=False)
class AggregateChain:
    states: np.ndarray
    transition: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float).reshape(-1)
        P = np.asarray(self.transition, dtype=float)
        k = states.shape[0]
        if k < 1:
            raise InvalidArgument("aggregate chain needs at least one state")
        if P.shape != (k, k):
            raise InvalidArgument(f"transition matrix must be {k}x{k}, got {P.shape}")
        if np.any(P < 0) or np.any(P > 1):
            raise InvalidArgument("transition probabilities must lie in [0, 1]")
        if np.any(np.abs(P.sum(axis=1) - 1.0) > ROW_TOL):
            raise InvalidArgument("transition matrix rows must sum to 1")
        states.setflags(write=False)
        P = P.copy()
        P.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "transition", P)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"z{i}" for i in range(k)))

    @property
    def size(self) -> int:
        return self.states.shape[0]

    def check_state(self, z) -> int:
        if isinstance(z, (bool, np.bool_)) or not isinstance(z, (int, np.integer)):
            raise InvalidArgument(f"aggregate state must be an integer index, got {z!r}")
        if not 0 <= z < self.size:
            raise InvalidArgument(f"unknown aggregate state {z}; chain has {self.size} states")
        return int(z)


def validate_population(s, n: int | None = None) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.ndim != 1:
        raise InvalidArgument("population state must be a 1-d histogram")
    if n is not None and s.shape[0] != n:
        raise InvalidArgument(f"population has {s.shape[0]} entries, grid has {n}")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise InvalidArgument("population mass must be finite and nonnegative")
    if abs(s.sum() - 1.0) > MASS_TOL:
        raise InvalidArgument(f"population mass sums to {s.sum()!r}, not 1")
    return s


def uniform_population(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def point_mass(n: int, i: int) -> np.ndarray:
    s = np.zeros(n)
    s[i] = 1.0
    return s


# --------------------------------------------------------------------------
# model specification
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Branches:
    """Sparse transition law: from ``(x, a)`` go to ``targets[x, a, b]`` w.p. ``probs[x, a, b]``."""

    targets: np.ndarray
    probs: np.ndarray

    def matrix(self, n: int):
        nx, na, nb = self.targets.shape
        rows = np.repeat(np.arange(nx * na), nb)
        m = sp.csr_matrix(
            (self.probs.reshape(-1), (rows, self.targets.reshape(-1))), shape=(nx * na, n)
        )
        m.sum_duplicates()
        if nx * na * n <= DENSE_LIMIT:
            return m.toarray()
        return m


PayoffFn = Callable[[int, np.ndarray], np.ndarray]
FeasibleFn = Callable[[int, np.ndarray], np.ndarray]
KernelFn = Callable[[int, int, np.ndarray], Branches]


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """One economy: grid, shocks, actions, payoff, law of motion, discount.

    ``payoff(z, s)`` and ``feasible(z, s)`` return ``(n_states, n_actions)``
    arrays.  ``kernel(z, z_next, s)`` returns the individual transition law
    with the idiosyncratic shock integrated out; it receives both the current
    and the next aggregate state so joint shock processes can be expressed.
    """

    name: str
    grid: StateGrid
    chain: AggregateChain
    actions: np.ndarray
    discount: float
    payoff: PayoffFn
    feasible: FeasibleFn
    kernel: KernelFn
    aggregate_stat: Callable[[np.ndarray], float]
    kernel_uses_population: bool = False
    params: object = None
    check_policy: Callable[[np.ndarray, np.ndarray, int], None] | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise InvalidArgument(f"discount factor must lie in (0, 1), got {self.discount}")
        acts = np.asarray(self.actions, dtype=float)
        if acts.shape[0] < 1:
            raise InvalidArgument("action set is empty")
        acts.setflags(write=False)
        object.__setattr__(self, "actions", acts)

    @property
    def n_states(self) -> int:
        return self.grid.cardinality

    @property
    def n_actions(self) -> int:
        return self.actions.shape[0]

    def feasible_mask(self, z: int, s: np.ndarray) -> np.ndarray:
        mask = np.asarray(self.feasible(z, s), dtype=bool)
        if not mask.any(axis=1).all():
            bad = np.flatnonzero(~mask.any(axis=1))[:5]
            raise ModelError(f"{self.name}: empty feasible action set at states {bad.tolist()}")
        return mask

    def rewards(self, z: int, s: np.ndarray) -> np.ndarray:
        """Payoff table with ``-inf`` at infeasible actions."""
        mask = self.feasible_mask(z, s)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.asarray(self.payoff(z, s), dtype=float)
        r = np.where(mask, r, -np.inf)
        if not np.all(np.isfinite(r[mask])):
            raise ModelError(f"{self.name}: payoff is not finite on a feasible action")
        return r

    def branches(self, z: int, z_next: int, s: np.ndarray) -> Branches:
        if not self.kernel_uses_population:
            key = ("branches", z, z_next)
            hit = self._cache.get(key)
            if hit is None:
                hit = self.kernel(z, z_next, s)
                self._cache[key] = hit
            return hit
        return self.kernel(z, z_next, s)

    def kernel_matrix(self, z: int, z_next: int, s: np.ndarray):
        """Transition matrix with rows ``x * n_actions + a`` and columns ``x'``."""
        if not self.kernel_uses_population:
            key = ("matrix", z, z_next)
            hit = self._cache.get(key)
            if hit is None:
                hit = self.branches(z, z_next, s).matrix(self.n_states)
                self._cache[key] = hit
            return hit
        return self.branches(z, z_next, s).matrix(self.n_states)

    def kernel_row(self, x: int, z: int, z_next: int, a: int, s: np.ndarray) -> np.ndarray:
        """Distribution over next grid points for one ``(x, a)`` pair."""
        br = self.branches(z, z_next, s)
        out = np.zeros(self.n_states)
        np.add.at(out, br.targets[x, a], br.probs[x, a])
        return out


def push_forward(
    s: np.ndarray, z: int, z_next: int, policy: np.ndarray, spec: ModelSpec, check: bool = True
) -> np.ndarray:
    """Population one period ahead when every agent at ``x`` plays ``policy[x]``."""
    n, na = spec.n_states, spec.n_actions
    policy = np.asarray(policy)
    if check:
        if policy.shape != (n,):
            raise ContractViolation(f"policy must have one action per grid point, got {policy.shape}")
        live = s > 0
        if np.any(policy[live] < 0) or np.any(policy[live] >= na):
            raise ContractViolation("policy action index out of range")
        mask = spec.feasible_mask(z, s)
        ok = mask[np.arange(n), np.clip(policy, 0, na - 1)]
        if not np.all(ok[live]):
            bad = np.flatnonzero(live & ~ok)[:5]
            raise ContractViolation(f"infeasible action in policy at states {bad.tolist()}")
    br = spec.branches(z, z_next, s)
    idx = np.arange(n)
    tg = br.targets[idx, policy]
    pr = br.probs[idx, policy] * s[:, None]
    out = np.bincount(tg.reshape(-1), weights=pr.reshape(-1), minlength=n)
    return out


# --------------------------------------------------------------------------
# foresight trees
# --------------------------------------------------------------------------


def tree_size(n_z: int, depth: int) -> int:
    return 1 + sum(n_z**j for j in range(1, depth + 1))


def _last_node(tree: "ForesightTree", leaf: int) -> np.ndarray:
    return tree.populations[leaf].copy()


def _average_path(tree: "ForesightTree", leaf: int) -> np.ndarray:
    return tree.populations[tree.path(leaf)].mean(axis=0)


CONTINUATION_RULES: dict[str, Callable[["ForesightTree", int], np.ndarray]] = {
    "last-node": _last_node,
    "average-path": _average_path,
}


def check_rule(rule: str) -> str:
    if rule not in CONTINUATION_RULES:
        raise InvalidArgument(
            f"unknown continuation rule {rule!r}; expected one of {sorted(CONTINUATION_RULES)}"
        )
    return rule


class ForesightTree:
    """All shock histories of length <= depth starting at ``root_state``.

    Nodes are enumerated breadth first with children in chain order, so the
    node index of a history relative to the root does not depend on the root
    itself.  ``populations`` has one row per node; ``continuations`` one row
    per depth-``depth`` leaf (in the order of :attr:`leaves`).
    """

    def __init__(self, root_state: int, depth: int, n_z: int):
        self.root_state = root_state
        self.depth = depth
        self.n_z = n_z
        histories: list[tuple[int, ...]] = [(root_state,)]
        parent = [-1]
        level = [0]
        frontier = [0]
        for k in range(1, depth + 1):
            nxt = []
            for p in frontier:
                for z in range(n_z):
                    histories.append(histories[p] + (z,))
                    parent.append(p)
                    level.append(k)
                    nxt.append(len(histories) - 1)
            frontier = nxt
        self.histories = histories
        self.parent = np.array(parent)
        self.level = np.array(level)
        self.index = {h: i for i, h in enumerate(histories)}
        m = len(histories)
        self.children = -np.ones((m, n_z), dtype=int)
        for i in range(1, m):
            self.children[parent[i], histories[i][-1]] = i
        self.leaves = np.flatnonzero(self.level == depth)
        self.populations: np.ndarray | None = None
        self.continuations: np.ndarray | None = None
        self.rule = "last-node"

    def __len__(self) -> int:
        return len(self.histories)

    @property
    def size(self) -> int:
        return len(self.histories)

    def state(self, node: int) -> int:
        return self.histories[node][-1]

    def path(self, node: int) -> list[int]:
        out = [node]
        while self.parent[out[-1]] >= 0:
            out.append(int(self.parent[out[-1]]))
        return out[::-1]

    def nodes_at_depth(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.level == k)

    def node(self, history: Sequence[int]) -> int:
        try:
            return self.index[tuple(int(z) for z in history)]
        except KeyError:
            raise InvalidArgument(f"history {tuple(history)} is not in the tree") from None

    def relative_paths(self) -> list[tuple[int, ...]]:
        return [h[1:] for h in self.histories]

    def set_populations(self, populations: np.ndarray, rule: str | None = None) -> None:
        self.populations = np.array(populations, dtype=float)
        if rule is not None:
            self.rule = check_rule(rule)
        self.refresh_continuations()

    def refresh_continuations(self) -> None:
        fn = CONTINUATION_RULES[self.rule]
        self.continuations = np.array([fn(self, int(leaf)) for leaf in self.leaves])

    def copy(self) -> "ForesightTree":
        t = ForesightTree.__new__(ForesightTree)
        t.__dict__.update(self.__dict__)
        if self.populations is not None:
            t.populations = self.populations.copy()
        if self.continuations is not None:
            t.continuations = self.continuations.copy()
        return t


def build_tree(
    root_state: int,
    depth: int,
    chain: AggregateChain,
    population: np.ndarray | None = None,
    rule: str = "last-node",
) -> ForesightTree:
    """Tree skeleton; every node starts at ``population`` when one is given."""
    root_state = chain.check_state(root_state)
    if isinstance(depth, bool) or not isinstance(depth, (int, np.integer)) or depth < 0:
        raise InvalidArgument(f"foresight depth must be a nonnegative integer, got {depth!r}")
    tree = ForesightTree(root_state, int(depth), chain.size)
    tree.rule = check_rule(rule)
    if population is not None:
        s = validate_population(population)
        tree.set_populations(np.tile(s, (tree.size, 1)))
    return tree


def continuation_state(leaf_history: Sequence[int], tree: ForesightTree, rule: str = "last-node") -> np.ndarray:
    """Frozen population assumed beyond the window below a depth-N leaf."""
    check_rule(rule)
    node = tree.node(leaf_history)
    if tree.level[node] != tree.depth:
        raise InvalidArgument(f"history {tuple(leaf_history)} is not a depth-{tree.depth} leaf")
    if tree.populations is None:
        raise InvalidArgument("tree has no populations")
    return CONTINUATION_RULES[rule](tree, node)


def l1(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(np.asarray(a) - np.asarray(b)).sum())
