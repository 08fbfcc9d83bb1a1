"""Agent dynamic programs on a foresight tree.

Beyond the foresight window the population is frozen, which leaves an ordinary
discounted problem over (grid point, aggregate state) solved by value
iteration.  Inside the window values are obtained by one backward pass through
the tree.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import ContractViolation, ConvergenceError, ForesightTree, InvalidArgument, ModelSpec

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000


@dataclass
class TailSolution:
    values: np.ndarray  # (n_states, n_z)
    policy: np.ndarray  # (n_states, n_z)
    residual: float
    iterations: int
    trace: list[float] = field(default_factory=list)

    def __iter__(self):
        return iter((self.values, self.policy))


@dataclass
class ValueTable:
    values: np.ndarray  # (n_nodes, n_states)
    tails: np.ndarray  # (n_leaves, n_states, n_z)


@dataclass
class PolicyTable:
    actions: np.ndarray  # (n_nodes, n_states) action indices
    tails: np.ndarray  # (n_leaves, n_states, n_z)


def _stack(blocks):
    if any(sp.issparse(b) for b in blocks):
        return sp.hstack(blocks, format="csr")
    return np.hstack(blocks)


class ExpectationOperator:
    """Stacked ``P(z, z') K(z, z')`` blocks (z' major) stored as distinct rows plus a row map.

    Many models share next-period laws across states (savings problems depend
    on the chosen asset, not on current wealth), so only distinct rows are kept.
    """

    def __init__(self, matrix):
        if sp.issparse(matrix):
            m = sp.csr_matrix(matrix)
            m.sum_duplicates()
            m.sort_indices()
            seen: dict[bytes, int] = {}
            rowmap = np.empty(m.shape[0], dtype=np.int64)
            keep = []
            ptr, ind, dat = m.indptr, m.indices, m.data
            for i in range(m.shape[0]):
                a, b = ptr[i], ptr[i + 1]
                key = ind[a:b].tobytes() + dat[a:b].tobytes()
                j = seen.get(key)
                if j is None:
                    j = seen[key] = len(keep)
                    keep.append(i)
                rowmap[i] = j
            self.unique = m[np.array(keep)]
        else:
            self.unique, rowmap = np.unique(np.asarray(matrix), axis=0, return_inverse=True)
        self.rowmap = np.asarray(rowmap).reshape(-1)
        self.shape = (len(self.rowmap), self.unique.shape[1])

    def __matmul__(self, vec: np.ndarray) -> np.ndarray:
        return np.asarray(self.unique @ vec).reshape(-1)[self.rowmap]

    def rows(self, idx: np.ndarray):
        return self.unique[self.rowmap[idx]]


def expectation_operator(spec: ModelSpec, z: int, s: np.ndarray) -> ExpectationOperator:
    """Expectation operator for current aggregate state ``z``; cached when the kernel ignores ``s``."""
    key = ("expect", z)
    if not spec.kernel_uses_population and key in spec._cache:
        return spec._cache[key]
    P = spec.chain.transition
    op = ExpectationOperator(_stack([P[z, zn] * spec.kernel_matrix(z, zn, s) for zn in range(spec.chain.size)]))
    if not spec.kernel_uses_population:
        spec._cache[key] = op
    return op


class FrozenProblem:
    """Payoffs and stacked transition operators at one frozen population."""

    def __init__(self, spec: ModelSpec, s: np.ndarray):
        self.spec = spec
        self.s = s
        nz = spec.chain.size
        self.rewards = [spec.rewards(z, s) for z in range(nz)]
        # ops[z] maps stacked next-period values (z' major) to E[V' | x, a, z]
        self.ops = [expectation_operator(spec, z, s) for z in range(nz)]
        self._policy_key: bytes | None = None

    def q_values(self, z: int, v_next: np.ndarray) -> np.ndarray:
        """Bellman right-hand side for every (x, a) given next values ``(n, n_z)``."""
        spec = self.spec
        ev = self.ops[z] @ v_next.T.reshape(-1)
        return self.rewards[z] + spec.discount * np.asarray(ev).reshape(spec.n_states, spec.n_actions)

    def apply(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        nz = self.spec.chain.size
        tv = np.empty_like(v)
        g = np.empty(v.shape, dtype=int)
        for z in range(nz):
            q = self.q_values(z, v)
            g[:, z] = q.argmax(axis=1)
            tv[:, z] = q[np.arange(q.shape[0]), g[:, z]]
        return tv, g

    def evaluate(self, v: np.ndarray, g: np.ndarray, sweeps: int) -> np.ndarray:
        """``sweeps`` applications of the fixed-policy operator."""
        spec = self.spec
        n, na, nz = spec.n_states, spec.n_actions, spec.chain.size
        key = g.tobytes()
        if self._policy_key != key:
            rows = [np.arange(n) * na + g[:, z] for z in range(nz)]
            r = np.concatenate([self.rewards[z][np.arange(n), g[:, z]] for z in range(nz)])
            blocks = [self.ops[z].rows(rows[z]) for z in range(nz)]
            pg = sp.vstack(blocks, format="csr") if sp.issparse(blocks[0]) else np.vstack(blocks)
            self._policy_key, self._policy_system = key, (r, pg)
        r, pg = self._policy_system
        flat = v.T.reshape(-1)
        beta = spec.discount
        for _ in range(sweeps):
            flat = r + beta * (pg @ flat)
        return np.asarray(flat).reshape(nz, n).T.copy()


def solve_stationary_tail(
    s_c: np.ndarray,
    spec: ModelSpec,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    v0: np.ndarray | None = None,
    eval_sweeps: int = 0,
    criterion: str = "residual",
    problem: FrozenProblem | None = None,
) -> TailSolution:
    """Value iteration for the problem with the population frozen at ``s_c``.

    Stops once the sup-norm Bellman residual of the current iterate is below
    ``tol`` (``criterion="residual"``) or once the contraction bound
    ``residual / (1 - beta)`` on its distance to the fixed point is
    (``criterion="error_bound"``).  The returned values are that iterate and
    the policy is greedy with respect to them.  With ``eval_sweeps > 0`` each maximisation
    is followed by that many fixed-policy sweeps (modified policy iteration);
    the stopping test is unchanged.
    """
    if tol <= 0:
        raise InvalidArgument("tol must be positive")
    if criterion not in ("residual", "error_bound"):
        raise InvalidArgument(f"unknown stopping criterion {criterion!r}")
    beta = spec.discount
    prob = problem if problem is not None else FrozenProblem(spec, s_c)
    n, nz = spec.n_states, spec.chain.size
    v = np.zeros((n, nz)) if v0 is None else np.array(v0, dtype=float)
    scale = 1.0 / (1.0 - beta) if criterion == "error_bound" else 1.0
    trace: list[float] = []
    for it in range(max_iter + 1):
        tv, g = prob.apply(v)
        res = float(np.max(np.abs(tv - v)))
        trace.append(res)
        if scale * res < tol and res < tol:
            return TailSolution(v, g, res, it, trace)
        if it == max_iter:
            break
        v = tv
        if eval_sweeps:
            v = prob.evaluate(v, g, eval_sweeps)
    raise ConvergenceError(
        f"value iteration did not reach tol={tol} in {max_iter} iterations (residual {res:.3e})",
        res,
        max_iter,
    )


def _node_problem(spec: ModelSpec, z: int, s: np.ndarray):
    return spec.rewards(z, s), expectation_operator(spec, z, s)


def node_q_values(spec: ModelSpec, z: int, s: np.ndarray, v_children: np.ndarray) -> np.ndarray:
    """Right-hand side at a tree node; ``v_children[:, z']`` is the child value for ``z'``."""
    r, op = _node_problem(spec, z, s)
    ev = op @ v_children.T.reshape(-1)
    return r + spec.discount * np.asarray(ev).reshape(spec.n_states, spec.n_actions)


def backward_induction(
    tree: ForesightTree, spec: ModelSpec, tails: list[TailSolution]
) -> tuple[ValueTable, PolicyTable]:
    """Values and policies at every node of ``tree``.

    Depth-N nodes take the stationary tail value at their own aggregate state
    (population frozen at the leaf's continuation state).  Shallower nodes
    maximise payoff at the node population plus the discounted expectation of
    the child values, the children being valued at their own populations.
    """
    if tree.populations is None:
        raise ContractViolation("tree has no populations")
    if tails is None or len(tails) != len(tree.leaves):
        raise ContractViolation(
            f"need one tail solution per depth-{tree.depth} leaf ({len(tree.leaves)}), got "
            f"{0 if tails is None else len(tails)}"
        )
    n, m = spec.n_states, tree.size
    values = np.empty((m, n))
    actions = np.empty((m, n), dtype=int)
    for j, leaf in enumerate(tree.leaves):
        if tails[j] is None:
            raise ContractViolation(f"missing tail for leaf {tree.histories[leaf]}")
        z = tree.state(leaf)
        values[leaf] = tails[j].values[:, z]
        actions[leaf] = tails[j].policy[:, z]
    for k in range(tree.depth - 1, -1, -1):
        for node in tree.nodes_at_depth(k):
            z = tree.state(node)
            q = node_q_values(spec, z, tree.populations[node], values[tree.children[node]].T)
            a = q.argmax(axis=1)
            actions[node] = a
            values[node] = q[np.arange(n), a]
    vt = ValueTable(values, np.array([t.values for t in tails]))
    pt = PolicyTable(actions, np.array([t.policy for t in tails]))
    return vt, pt


def bellman_residual(values: ValueTable, tree: ForesightTree, spec: ModelSpec) -> float:
    """Largest violation of the tree and tail Bellman equations."""
    n = spec.n_states
    worst = 0.0
    for j, leaf in enumerate(tree.leaves):
        tail = values.tails[j]
        prob = FrozenProblem(spec, tree.continuations[j])
        tv, _ = prob.apply(tail)
        worst = max(worst, float(np.max(np.abs(tv - tail))))
        worst = max(worst, float(np.max(np.abs(values.values[leaf] - tail[:, tree.state(leaf)]))))
    for k in range(tree.depth):
        for node in tree.nodes_at_depth(k):
            q = node_q_values(
                spec, tree.state(node), tree.populations[node], values.values[tree.children[node]].T
            )
            rhs = q.max(axis=1)
            worst = max(worst, float(np.max(np.abs(values.values[node] - rhs))))
    return worst


def solve_tree(
    tree: ForesightTree,
    spec: ModelSpec,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    eval_sweeps: int = 0,
    warm: list[np.ndarray] | None = None,
    cache: dict[bytes, TailSolution] | None = None,
) -> tuple[ValueTable, PolicyTable, list[TailSolution]]:
    """Tails at every leaf's continuation state, then backward induction.

    Leaves with bit-identical continuation states share one tail solve;
    ``cache`` carries solved tails across calls.
    """
    tails = []
    cache = {} if cache is None else cache
    for j in range(len(tree.leaves)):
        s_c = tree.continuations[j]
        key = s_c.tobytes()
        if key in cache:
            tails.append(cache[key])
            continue
        v0 = None if warm is None else warm[j]
        sol = solve_stationary_tail(s_c, spec, tol=tol, max_iter=max_iter, v0=v0, eval_sweeps=eval_sweeps)
        cache[key] = sol
        tails.append(sol)
    vt, pt = backward_induction(tree, spec, tails)
    return vt, pt, tails
