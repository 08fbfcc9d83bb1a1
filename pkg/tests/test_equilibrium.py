import numpy as np
import pytest

from nbfe import dp
from nbfe.core import (
    AggregateChain,
    Branches,
    InvalidArgument,
    ModelSpec,
    StateGrid,
    build_tree,
    push_forward,
    uniform_population,
)
from nbfe.equilibrium import SolveConfig, check_consistency, phi_operator, solve_nbfe
from nbfe.models import CapacityParams, build_capacity
from toy import oracle_phi_limit, random_toy


def identity_spec(n=4, nz=2):
    targets = np.broadcast_to(np.arange(n)[:, None, None], (n, 2, 1)).copy()
    return ModelSpec(
        name="identity",
        grid=StateGrid(np.arange(n, dtype=float)),
        chain=AggregateChain(np.arange(nz, dtype=float), np.full((nz, nz), 1.0 / nz)),
        actions=np.array([0.0, 1.0]),
        discount=0.9,
        payoff=lambda z, s: np.tile([0.0, 1.0], (n, 1)),
        feasible=lambda z, s: np.ones((n, 2), dtype=bool),
        kernel=lambda z, zn, s: Branches(targets, np.ones((n, 2, 1))),
        aggregate_stat=lambda s: float(s @ np.arange(n)),
    )


def static_policy_fixed_point(toy):
    """Population left unchanged by the (population-independent) optimal policy."""
    sol = dp.solve_stationary_tail(uniform_population(toy.n), toy.spec(), tol=1e-13)
    g = sol.policy[:, 0]
    T = toy.K[0, 0, np.arange(toy.n), g]
    w, vecs = np.linalg.eig(T.T)
    pi = np.real(vecs[:, np.argmin(np.abs(w - 1))])
    return pi / pi.sum()


def test_phi_identity_kernel(rng):
    spec = identity_spec()
    tree = build_tree(0, 2, spec.chain, uniform_population(4))
    pops = rng.dirichlet(np.ones(4), size=tree.size)
    tree.set_populations(pops)
    _, pt, _ = dp.solve_tree(tree, spec)
    out = phi_operator(tree, pt, spec)
    for node in range(1, tree.size):
        assert np.array_equal(out.populations[node], out.populations[tree.parent[node]])
    assert np.allclose(out.populations, pops[0], atol=1e-15)
    assert np.allclose(out.populations.sum(axis=1), 1.0, atol=1e-12)


def test_phi_keeps_root_and_mass(rng):
    toy = random_toy(rng, n=4, na=3)
    spec = toy.spec()
    tree = build_tree(1, 2, spec.chain, uniform_population(4))
    tree.set_populations(rng.dirichlet(np.ones(4), size=tree.size))
    _, pt, _ = dp.solve_tree(tree, spec)
    out = phi_operator(tree, pt, spec)
    assert np.array_equal(out.populations[0], tree.populations[0])
    assert np.allclose(out.populations.sum(axis=1), 1.0, atol=1e-12)
    for node in range(1, tree.size):
        par = tree.parent[node]
        expect = push_forward(out.populations[par], tree.state(par), tree.state(node), pt.actions[par], spec)
        assert np.array_equal(out.populations[node], expect)


def test_phi_leaves_oracle_fixed_point_unchanged(rng):
    toy = random_toy(rng, n=3, na=2)
    spec = toy.spec()
    s0 = rng.dirichlet(np.ones(3))
    hist = build_tree(0, 1, spec.chain).histories
    start = {h: s0 for h in hist}
    limit = oracle_phi_limit(toy, 0, 1, s0, start, tol=1e-15)
    assert limit is not None
    tree = build_tree(0, 1, spec.chain, s0)
    tree.set_populations(np.array([limit[h] for h in hist]))
    _, pt, _ = dp.solve_tree(tree, spec, tol=1e-12)
    out = phi_operator(tree, pt, spec)
    assert np.max(np.abs(out.populations - tree.populations)) < 1e-12


def test_degenerate_chain_stationary_start_converges_at_once(rng):
    toy = random_toy(rng, n=4, na=3, nz=1, pressure=0.0)
    spec = toy.spec()
    s0 = static_policy_fixed_point(toy)
    for N in (0, 1, 3):
        res = solve_nbfe(0, s0, N, spec, SolveConfig(tol=1e-10))
        assert res.converged and res.iterations == 1
        assert np.allclose(res.tree.populations, s0, atol=1e-10)


def test_toy_depth_one_matches_dense_oracle(rng):
    toy = random_toy(rng, n=3, na=2)
    spec = toy.spec()
    s0 = rng.dirichlet(np.ones(3))
    res = solve_nbfe(0, s0, 1, spec, SolveConfig(tol=1e-10, dp_tol=1e-12))
    assert res.converged
    hist = res.tree.histories
    for _ in range(50):
        start = {h: rng.dirichlet(np.ones(3)) for h in hist}
        limit = oracle_phi_limit(toy, 0, 1, s0, start)
        assert limit is not None
        got = np.array([limit[h] for h in hist])
        assert np.abs(got - res.tree.populations).sum(axis=1).max() < 1e-6


def test_n0_is_single_node_tail(rng):
    toy = random_toy(rng)
    spec = toy.spec()
    s0 = rng.dirichlet(np.ones(toy.n))
    res = solve_nbfe(1, s0, 0, spec)
    assert res.tree.size == 1 and res.converged and res.iterations == 1
    assert np.array_equal(res.tree.populations[0], s0)
    tail = dp.solve_stationary_tail(s0, spec)
    assert np.array_equal(res.values.values[0], tail.values[:, 1])
    assert check_consistency(res, spec)[2] == 0.0


def test_consistency_residuals_and_perturbation(rng):
    toy = random_toy(rng, n=4, na=3)
    spec = toy.spec()
    res = solve_nbfe(0, uniform_population(4), 2, spec, SolveConfig(tol=1e-9))
    assert res.converged
    assert all(r < 1e-6 for r in check_consistency(res, spec))
    eps = 0.01
    bad = res.tree.copy()
    leaf = int(bad.leaves[1])
    pops = bad.populations.copy()
    i = int(np.argmax(pops[leaf]))
    j = (i + 1) % 4
    move = eps / 2
    pops[leaf, i] -= move
    pops[leaf, j] += move
    bad.set_populations(pops)
    perturbed = type(res)(bad, res.values, res.policy, res.residual, res.iterations, True)
    assert check_consistency(perturbed, spec)[1] >= eps - 1e-12


def test_root_anchoring_and_fixed_point_validation(rng):
    spec = build_capacity()
    s0 = rng.dirichlet(np.ones(spec.n_states))
    cfg = SolveConfig(tol=1e-7)
    res = solve_nbfe(1, s0, 2, spec, cfg)
    assert np.array_equal(res.tree.populations[0], s0)
    if res.converged:
        _, pt, _ = dp.solve_tree(res.tree, spec, tol=cfg.dp_tol)
        again = phi_operator(res.tree, pt, spec)
        assert np.abs(again.populations - res.tree.populations).sum(axis=1).max() < cfg.tol


def test_damping_neutral_at_fixed_point(rng):
    toy = random_toy(rng, n=4, na=3)
    spec = toy.spec()
    s0 = uniform_population(4)
    base = solve_nbfe(0, s0, 2, spec, SolveConfig(tol=1e-9))
    assert base.converged
    for lam in (0.3, 0.7, 1.0):
        res = solve_nbfe(0, s0, 2, spec, SolveConfig(tol=1e-6, damping=lam), init=base.tree.populations)
        assert res.converged and res.iterations == 1
        assert np.abs(res.tree.populations - base.tree.populations).max() < 1e-6
        assert np.array_equal(res.policy.actions, base.policy.actions)


def test_nonconvergence_is_flagged_not_raised(rng):
    toy = random_toy(rng, n=4, na=3, pressure=2.0)
    spec = toy.spec()
    s0 = uniform_population(4)
    res = solve_nbfe(0, s0, 2, spec, SolveConfig(tol=1e-14, max_iter=1, damping=0.01))
    assert not res.converged
    assert res.iterations == 1 and len(res.trace) == 1
    assert res.residual == res.trace[-1] >= 1e-14


def test_adaptive_damping_converges(rng):
    spec = build_capacity(CapacityParams(n_actions=11))
    s0 = uniform_population(spec.n_states)
    res = solve_nbfe(0, s0, 1, spec, SolveConfig(damping=1.0, adaptive_damping=True, max_iter=100))
    assert res.converged
    assert all(r < 1e-6 for r in check_consistency(res, spec))


def test_solve_config_validation():
    with pytest.raises(InvalidArgument):
        SolveConfig(tol=0)
    with pytest.raises(InvalidArgument):
        SolveConfig(damping=1.5)
    with pytest.raises(InvalidArgument):
        SolveConfig(damping=0.1, damping_floor=0.2, adaptive_damping=True)
    with pytest.raises(InvalidArgument):
        SolveConfig(continuation_rule="first-node")
    with pytest.raises(InvalidArgument):
        solve_nbfe(0, np.ones(3) / 3, 1, build_capacity())


def test_average_path_rule_solves(rng):
    toy = random_toy(rng, n=3, na=2)
    spec = toy.spec()
    res = solve_nbfe(0, uniform_population(3), 2, spec, SolveConfig(continuation_rule="average-path", tol=1e-9))
    assert res.converged
    for j, leaf in enumerate(res.tree.leaves):
        assert np.allclose(res.tree.continuations[j], res.tree.populations[res.tree.path(leaf)].mean(axis=0))
    assert all(r < 1e-6 for r in check_consistency(res, spec))
