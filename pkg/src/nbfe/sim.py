"""Rolling-horizon simulation.

Every period the equilibrium is re-solved at the realised ``(z_t, s_t)``, the
root policy is applied, and the aggregate chain and the population advance
one step.  Aggregate and idiosyncratic randomness come from separate streams
derived from the path seed, so runs that differ only in foresight see the
same shocks.
"""
from __future__ import annotations

import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import InvalidArgument, ModelSpec, l1, push_forward, uniform_population, validate_population
from .equilibrium import EquilibriumResult, SolveConfig, solve_nbfe

MODES = ("histogram", "agents")


@dataclass
class EnsembleConfig:
    n_paths: int = 1
    horizon: int = 100
    foresight: int = 0
    base_seed: int = 0
    model: str = ""
    solve: SolveConfig = field(default_factory=SolveConfig)
    burn_in: int = 100
    mode: str = "histogram"
    n_agents: int = 1000
    keep_snapshots: bool = True

    def __post_init__(self):
        if self.n_paths < 1:
            raise InvalidArgument("n_paths must be at least 1")
        if self.horizon < 1:
            raise InvalidArgument("horizon must be at least 1")
        if self.foresight < 0:
            raise InvalidArgument("foresight must be nonnegative")
        if self.burn_in < 0:
            raise InvalidArgument("burn_in must be nonnegative")
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "agents" and self.n_agents < 1:
            raise InvalidArgument("n_agents must be positive")


@dataclass
class SimulationRecord:
    path_id: int
    seed: int
    foresight: int
    z: np.ndarray  # (T + 1,) realised aggregate states, z[T] drives the last step
    populations: np.ndarray  # (T + 1, n) realised populations
    stats: np.ndarray  # (T + 1,) aggregate statistic of each population
    node_paths: list  # relative shock history of every snapshot node
    leaf_nodes: np.ndarray  # snapshot node index of each depth-N leaf
    snapshot_stats: np.ndarray  # (T, m) statistic at every tree node
    continuation_stats: np.ndarray  # (T, n_leaves)
    residuals: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    snapshots: np.ndarray | None = None  # (T, m, n) node populations
    continuations: np.ndarray | None = None  # (T, n_leaves, n)
    seconds: np.ndarray | None = None  # wall clock per period, not part of the data

    @property
    def horizon(self) -> int:
        return len(self.z) - 1

    def node_index(self, rel_path) -> int:
        return self.node_paths.index(tuple(rel_path))


def aggregate_path(chain_P: np.ndarray, z0: int, horizon: int, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(chain_P, axis=1)
    u = rng.random(horizon)
    z = np.empty(horizon + 1, dtype=int)
    z[0] = z0
    for t in range(horizon):
        z[t + 1] = min(int(np.searchsorted(cum[z[t]], u[t], side="right")), len(cum) - 1)
    return z


def streams(path_seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    agg, idio = np.random.SeedSequence(path_seed).spawn(2)
    return np.random.default_rng(agg), np.random.default_rng(idio)


def _shift(result: EquilibriumResult, child: int) -> tuple[np.ndarray | None, list | None]:
    """Warm start for next period: the subtree below ``child``, leaves copied down."""
    tree = result.tree
    N = tree.depth
    tails = [t.values for t in result.tails]
    if N == 0:
        return None, tails
    root = tree.root_state
    new_paths = [h[1:] for h in tree.histories]  # same shape, new root = child
    init = np.empty_like(tree.populations)
    warm = []
    for i, rel in enumerate(new_paths):
        old = (root, child) + rel
        if len(old) - 1 > N:
            old = old[:-1]
        init[i] = tree.populations[tree.index[old]]
        if len(rel) == N:
            leaf = int(np.flatnonzero(tree.leaves == tree.index[old])[0])
            warm.append(tails[leaf])
    return init, warm


def simulate_path(
    spec: ModelSpec,
    s0: np.ndarray,
    z0: int,
    cfg: EnsembleConfig,
    path_seed: int,
    path_id: int = 0,
) -> SimulationRecord:
    s0 = validate_population(s0, spec.n_states)
    z0 = spec.chain.check_state(z0)
    T, N, n = cfg.horizon, cfg.foresight, spec.n_states
    rng_agg, rng_idio = streams(path_seed)
    z = aggregate_path(spec.chain.transition, z0, T, rng_agg)
    pops = np.empty((T + 1, n))
    agents = None
    if cfg.mode == "agents":
        # deterministic quantile placement keeps the initial panel seed-free
        q = (np.arange(cfg.n_agents) + 0.5) / cfg.n_agents
        agents = np.minimum(np.searchsorted(np.cumsum(s0), q), n - 1)
        s = np.bincount(agents, minlength=n) / cfg.n_agents
    else:
        s = s0.copy()
    pops[0] = s
    snaps_stat, cont_stat, snaps, conts = [], [], [], []
    res_l, conv_l, it_l, sec_l = [], [], [], []
    init = warm = None
    node_paths = leaf_nodes = None
    for t in range(T):
        t0 = time.perf_counter()
        res = solve_nbfe(int(z[t]), s, N, spec, cfg.solve, init=init, warm_tails=warm)
        sec_l.append(time.perf_counter() - t0)
        tree = res.tree
        if node_paths is None:
            node_paths = tree.relative_paths()
            leaf_nodes = tree.leaves.copy()
        snaps_stat.append([spec.aggregate_stat(p) for p in tree.populations])
        cont_stat.append([spec.aggregate_stat(p) for p in tree.continuations])
        if cfg.keep_snapshots:
            snaps.append(tree.populations.copy())
            conts.append(tree.continuations.copy())
        res_l.append(res.residual)
        conv_l.append(res.converged)
        it_l.append(res.iterations)
        g = res.root_policy
        if spec.check_policy is not None:
            spec.check_policy(g, s, int(z[t]))
        if agents is None:
            s = push_forward(s, int(z[t]), int(z[t + 1]), g, spec)
        else:
            br = spec.branches(int(z[t]), int(z[t + 1]), s)
            probs = br.probs[agents, g[agents]]
            pick = (rng_idio.random(len(agents))[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
            pick = np.minimum(pick, probs.shape[1] - 1)
            agents = br.targets[agents, g[agents], pick]
            s = np.bincount(agents, minlength=n) / len(agents)
        pops[t + 1] = s
        init, warm = _shift(res, int(z[t + 1]))
    return SimulationRecord(
        path_id=path_id,
        seed=path_seed,
        foresight=N,
        z=z,
        populations=pops,
        stats=np.array([spec.aggregate_stat(p) for p in pops]),
        node_paths=node_paths,
        leaf_nodes=leaf_nodes,
        snapshot_stats=np.array(snaps_stat),
        continuation_stats=np.array(cont_stat),
        residuals=np.array(res_l),
        converged=np.array(conv_l, dtype=bool),
        iterations=np.array(it_l, dtype=int),
        snapshots=np.array(snaps) if cfg.keep_snapshots else None,
        continuations=np.array(conts) if cfg.keep_snapshots else None,
        seconds=np.array(sec_l),
    )


def path_seed(cfg: EnsembleConfig, i: int) -> int:
    return cfg.base_seed + i


# fork-inherited state for worker processes; specs hold closures and do not pickle
_WORK: dict = {}


def _run_path(i: int) -> SimulationRecord:
    spec, s0, z0, cfg = _WORK["job"]
    return simulate_path(spec, s0, z0, cfg, path_seed(cfg, i), path_id=i)


def simulate_ensemble(
    cfg: EnsembleConfig, spec: ModelSpec, s0: np.ndarray, z0: int, threads: int = 1
) -> list[SimulationRecord]:
    """``cfg.n_paths`` independent paths; path ``i`` uses seed ``base_seed + i``."""
    s0 = validate_population(s0, spec.n_states)
    if threads <= 1 or cfg.n_paths == 1:
        return [simulate_path(spec, s0, z0, cfg, path_seed(cfg, i), path_id=i) for i in range(cfg.n_paths)]
    _WORK["job"] = (spec, s0, z0, cfg)
    try:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=threads, mp_context=ctx) as pool:
            out = list(pool.map(_run_path, range(cfg.n_paths)))
    finally:
        _WORK.pop("job", None)
    return sorted(out, key=lambda r: r.path_id)


SHARED_FIELDS = ("n_paths", "horizon", "base_seed", "burn_in", "mode", "n_agents", "model")


def shared_shock_ensemble(
    cfgs: list[EnsembleConfig], spec: ModelSpec, s0: np.ndarray, z0: int, threads: int = 1
) -> dict[int, list[SimulationRecord]]:
    """Ensembles that differ only in foresight, run on identical shock streams."""
    if not cfgs:
        raise InvalidArgument("need at least one ensemble config")
    ref = cfgs[0]
    for c in cfgs[1:]:
        for name in SHARED_FIELDS:
            if getattr(c, name) != getattr(ref, name):
                raise InvalidArgument(f"ensemble configs disagree on shared field {name!r}")
        if c.solve != ref.solve:
            raise InvalidArgument("ensemble configs disagree on the solver settings")
    Ns = [c.foresight for c in cfgs]
    if len(set(Ns)) != len(Ns):
        raise InvalidArgument(f"duplicate foresight values in {Ns}")
    return {c.foresight: simulate_ensemble(c, spec, s0, z0, threads) for c in cfgs}


def policy_stationary(spec: ModelSpec, z: int, policy: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Long-run histogram of the chain induced by ``policy`` with the kernel frozen at ``s``."""
    n = spec.n_states
    K = spec.kernel_matrix(z, z, s)
    rows = np.arange(n) * spec.n_actions + policy
    T = sp.csr_matrix(K[rows] if not sp.issparse(K) else K[rows])
    A = (sp.identity(n, format="csr") - T.T).tolil()
    A[0, :] = 1.0
    b = np.zeros(n)
    b[0] = 1.0
    pi = spla.spsolve(A.tocsc(), b)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def stationary_population(
    spec: ModelSpec,
    z: int,
    cfg: SolveConfig | None = None,
    s0: np.ndarray | None = None,
    max_iter: int = 500,
) -> np.ndarray:
    """Population left unchanged by the zero-foresight policy with the shock held at ``z``.

    With a one-state chain this is a fixed point of the tree map for every
    foresight depth.  Each step moves a damped distance towards the long-run
    histogram of the current policy.  Raises if no fixed point is found, which
    happens when the grid policy jumps across the fixed point.
    """
    cfg = cfg or SolveConfig()
    z = spec.chain.check_state(z)
    s = uniform_population(spec.n_states) if s0 is None else validate_population(s0, spec.n_states)
    lam = cfg.damping
    warm = None
    gap = prev = np.inf
    for _ in range(max_iter):
        res = solve_nbfe(z, s, 0, spec, replace(cfg, max_iter=1), warm_tails=warm)
        warm = [t.values for t in res.tails]
        gap = l1(push_forward(s, z, z, res.root_policy, spec), s)
        if gap < cfg.tol:
            return s
        if gap > prev:
            lam *= 0.5
        prev = gap
        target = policy_stationary(spec, z, res.root_policy, s)
        s = lam * target + (1 - lam) * s
        s = s / s.sum()
    raise RuntimeError(f"stationary population search did not converge (gap {gap:.2e})")
