"""Bounded foresight equilibria as fixed points of the tree population map.

``phi_operator`` pushes every node population forward under the policy that is
optimal against the current tree; an equilibrium is a tree it leaves
unchanged.  ``solve_nbfe`` iterates it with damping.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dp
from .core import (
    ForesightTree,
    InvalidArgument,
    ModelSpec,
    build_tree,
    check_rule,
    push_forward,
    validate_population,
)


@dataclass
class SolveConfig:
    tol: float = 1e-6
    max_iter: int = 500
    damping: float = 0.5
    continuation_rule: str = "last-node"
    dp_tol: float = dp.DEFAULT_TOL
    dp_max_iter: int = dp.DEFAULT_MAX_ITER
    eval_sweeps: int = 0
    # halve the damping whenever the gap fails to shrink, down to damping_floor
    adaptive_damping: bool = False
    damping_floor: float = 1.0 / 64

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidArgument(f"solver tol must be positive, got {self.tol}")
        if not 0 < self.damping <= 1:
            raise InvalidArgument(f"damping must lie in (0, 1], got {self.damping}")
        if self.max_iter < 1:
            raise InvalidArgument("max_iter must be at least 1")
        if self.dp_tol <= 0:
            raise InvalidArgument("dp_tol must be positive")
        if self.adaptive_damping and not 0 < self.damping_floor <= self.damping:
            raise InvalidArgument("damping_floor must lie in (0, damping]")
        if self.eval_sweeps < 0:
            raise InvalidArgument("eval_sweeps must be nonnegative")
        check_rule(self.continuation_rule)


@dataclass
class EquilibriumResult:
    tree: ForesightTree
    values: dp.ValueTable
    policy: dp.PolicyTable
    residual: float
    iterations: int
    converged: bool
    trace: list[float] = field(default_factory=list)
    tails: list = field(default_factory=list, repr=False)

    @property
    def root_policy(self) -> np.ndarray:
        return self.policy.actions[0]


def phi_operator(tree: ForesightTree, policy: dp.PolicyTable, spec: ModelSpec) -> ForesightTree:
    """Populations implied by ``policy``; the root population is kept as is."""
    out = tree.copy()
    pops = out.populations
    for k in range(tree.depth):
        for node in tree.nodes_at_depth(k):
            z = tree.state(node)
            for zn, child in enumerate(tree.children[node]):
                pops[child] = push_forward(pops[node], z, zn, policy.actions[node], spec)
    out.refresh_continuations()
    return out


def _max_l1(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).sum(axis=1).max())


def solve_nbfe(
    root_state: int,
    s0: np.ndarray,
    N: int,
    spec: ModelSpec,
    cfg: SolveConfig | None = None,
    init: np.ndarray | None = None,
    warm_tails: list[np.ndarray] | None = None,
) -> EquilibriumResult:
    """Damped iteration of (solve the tree DP, apply ``phi_operator``).

    ``init`` optionally supplies starting populations for every node (row 0 is
    overwritten by ``s0``); otherwise every node starts at ``s0``.  The
    residual is the largest L1 gap between a node population and its image
    under the map, so a converged result is a fixed point to within ``tol``.
    """
    cfg = cfg or SolveConfig()
    s0 = validate_population(s0, spec.n_states)
    tree = build_tree(root_state, N, spec.chain, s0, cfg.continuation_rule)
    if init is not None:
        pops = np.array(init, dtype=float)
        if pops.shape != tree.populations.shape:
            raise InvalidArgument(f"initial populations must have shape {tree.populations.shape}")
        pops[0] = s0
        tree.set_populations(pops)
    lam = cfg.damping
    prev = np.inf
    trace: list[float] = []
    warm = warm_tails
    cache: dict = {}
    for it in range(1, cfg.max_iter + 1):
        if len(cache) > 8 * max(1, len(tree.leaves)):
            cache.clear()
        values, policy, tails = dp.solve_tree(
            tree, spec, tol=cfg.dp_tol, max_iter=cfg.dp_max_iter, eval_sweeps=cfg.eval_sweeps, warm=warm, cache=cache
        )
        warm = [t.values for t in tails]
        image = phi_operator(tree, policy, spec)
        gap = _max_l1(image.populations, tree.populations)
        trace.append(gap)
        if gap < cfg.tol:
            return EquilibriumResult(tree, values, policy, gap, it, True, trace, tails)
        if it == cfg.max_iter:
            break
        if cfg.adaptive_damping and gap >= prev:
            lam = max(lam * 0.5, cfg.damping_floor)
        prev = gap
        new = lam * image.populations + (1.0 - lam) * tree.populations
        new[0] = s0
        tree = tree.copy()
        tree.set_populations(new)
    return EquilibriumResult(tree, values, policy, gap, cfg.max_iter, False, trace, tails)


def check_consistency(result: EquilibriumResult, spec: ModelSpec) -> tuple[float, float, float]:
    """Residuals of the three equilibrium conditions: optimality, population, information."""
    tree = result.tree
    optimality = dp.bellman_residual(result.values, tree, spec)
    image = phi_operator(tree, result.policy, spec)
    population = _max_l1(image.populations, tree.populations)
    fresh = tree.copy()
    fresh.refresh_continuations()
    if len(tree.leaves):
        information = float(np.abs(fresh.continuations - tree.continuations).sum(axis=1).max())
    else:
        information = 0.0
    return optimality, population, information
