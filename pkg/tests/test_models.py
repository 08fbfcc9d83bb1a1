import math

import numpy as np
import pytest

from nbfe.core import InvalidArgument, ModelError, point_mass, uniform_population
from nbfe.models import (
    CapacityParams,
    KSParams,
    QualityParams,
    build_capacity,
    build_ks,
    build_model,
    build_quality,
    investment_branches,
    investment_probabilities,
    ks_prices,
    ks_transitions,
    linear_split,
)


def test_ks_prices_reference_point():
    R, w = ks_prices(40.0, 1.0, KSParams())
    assert R == pytest.approx(1.00896, abs=5e-6)
    assert w == pytest.approx(2.415025, abs=5e-6)


def test_ks_prices_linear_in_z():
    p = KSParams()
    R1, w1 = ks_prices(37.0, 0.8, p)
    R2, w2 = ks_prices(37.0, 1.6, p)
    assert R2 - (1 - p.delta) == pytest.approx(2 * (R1 - (1 - p.delta)), rel=1e-14)
    assert w2 == pytest.approx(2 * w1, rel=1e-14)


def test_ks_prices_full_depreciation_limit():
    p = KSParams(delta=1.0)
    R, _ = ks_prices(10.0, 1e-12, p)
    assert 0 < R < 1e-11


def test_ks_prices_reject_nonpositive_capital():
    with pytest.raises(InvalidArgument):
        ks_prices(0.0, 1.0, KSParams())


def small_ks(**kw):
    base = dict(wealth_max=40.0, n_wealth=41, n_actions=41, wealth_curvature=1.0)
    base.update(kw)
    return build_ks(KSParams(**base))


def test_ks_log_consumption_example():
    # choose (K, z) so that R = 1.01 and w = 1.0
    alpha, delta = 0.36, 0.025
    K = alpha * 1.0 / ((1 - alpha) * (1.01 - 1 + delta))
    z = 1.0 / ((1 - alpha) * K**alpha)
    spec = small_ks(z_values=(z, 1.02 * z))
    s = np.zeros(spec.n_states)
    lo = math.floor(K)
    # grid point (wealth k, productivity e) sits at index 2k + e
    s[2 * lo + 1] = lo + 1 - K
    s[2 * (lo + 1) + 1] = K - lo
    assert spec.aggregate_stat(s) == pytest.approx(K, rel=1e-12)
    u = spec.payoff(0, s)
    x = 2 * 2 + 1  # wealth 2, employed (productivity 1)
    a = 1  # action grid is 0, 1, ..., 40
    assert spec.actions[a] == 1.0
    assert u[x, a] == pytest.approx(math.log(2.02), abs=1e-12)
    assert u[x, a] == pytest.approx(0.7031, abs=5e-5)


def test_ks_feasible_set_and_finite_payoff():
    spec = small_ks()
    s = uniform_population(spec.n_states)
    for z in range(2):
        mask = spec.feasible_mask(z, s)
        assert mask[:, 0].all()  # the borrowing limit is always affordable
        r = spec.rewards(z, s)
        assert np.isfinite(r[mask]).all()
        # the largest feasible action leaves strictly positive consumption
        top = mask.shape[1] - 1 - np.argmax(mask[:, ::-1], axis=1)
        c = np.exp(spec.payoff(z, s)[np.arange(spec.n_states), top])
        assert np.all(c > 0)


def test_ks_mean_wealth_of_uniform_histogram():
    spec = build_ks(KSParams(wealth_max=10.0, n_wealth=11, n_actions=11, wealth_curvature=1.0))
    assert spec.aggregate_stat(uniform_population(spec.n_states)) == pytest.approx(5.0, abs=1e-12)


def test_ks_employment_law():
    p = KSParams()
    agg, emp = ks_transitions(p)
    assert np.allclose(agg.sum(axis=1), 1.0)
    assert np.allclose(emp.sum(axis=3), 1.0)
    assert np.all(emp >= 0)
    u = {0: p.urate_bad, 1: p.urate_good}
    for z in (0, 1):
        for zn in (0, 1):
            nxt = u[z] * emp[z, zn, 0, 0] + (1 - u[z]) * emp[z, zn, 1, 0]
            assert nxt == pytest.approx(u[zn], abs=1e-12)
    assert emp[0, 0, 0, 0] == pytest.approx(1 - 1 / p.spell_mean_bad)


def test_ks_kernel_rows_and_mean_preserving_split():
    spec = build_ks(KSParams(n_wealth=30, n_actions=50))
    K = spec.kernel_matrix(0, 1, uniform_population(spec.n_states))
    assert np.allclose(np.asarray(K).sum(axis=1), 1.0, atol=1e-12)
    grid = np.array([0.0, 1.0, 3.0])
    lo, w = linear_split(grid, np.array([0.5, 2.0, 3.0]))
    assert np.allclose(grid[lo] * (1 - w) + grid[lo + 1] * w, [0.5, 2.0, 3.0])


def test_ks_top_of_grid_guard():
    spec = small_ks(wealth_max=5.0, n_wealth=6, n_actions=6)
    s = uniform_population(spec.n_states)
    policy = np.full(spec.n_states, spec.n_actions - 1)
    with pytest.raises(ModelError):
        spec.check_policy(policy, s, 0)
    spec.check_policy(np.zeros(spec.n_states, dtype=int), s, 0)


def test_investment_probabilities():
    down, stay, up = investment_probabilities(1.0, 0.7)
    assert (float(down), float(stay), float(up)) == pytest.approx((0.35, 0.50, 0.15), abs=1e-15)
    down, stay, up = investment_probabilities(0.0, 0.7)
    assert (float(down), float(stay), float(up)) == pytest.approx((0.7, 0.3, 0.0), abs=1e-15)


def test_investment_boundaries_redirect_to_stay():
    br = investment_branches(4, np.linspace(0, 1, 5), 0.7)
    M = br.matrix(5).reshape(5, 5, 5)
    assert np.allclose(M.sum(axis=2), 1.0, atol=1e-15)
    a = 1.0
    assert M[0, 4, 0] == pytest.approx((1 - 0.7 + 0.7 * a) / 2 + 0.7 / 2)
    assert M[4, 4, 4] == pytest.approx((1 - 0.7 + 0.7 * a) / 2 + 0.3 / 2)


def test_capacity_table_values():
    p = CapacityParams()
    assert float(p.inverse_demand(0.0)) == pytest.approx(7.5)
    assert float(p.inverse_demand(1.0)) == pytest.approx(6.7)
    spec = build_capacity(p)
    s = point_mass(spec.n_states, 2)
    assert spec.aggregate_stat(s) == 2.0
    u = spec.payoff(1, s)
    assert u[3, 0] == pytest.approx(35.4, abs=1e-12)
    assert u[3, -1] == pytest.approx(35.4 - 4.0, abs=1e-12)


def test_capacity_profit_decreasing_in_aggregate(rng):
    spec = build_capacity()
    for _ in range(20):
        s1, s2 = rng.dirichlet(np.ones(spec.n_states), size=2)
        if spec.aggregate_stat(s1) > spec.aggregate_stat(s2):
            s1, s2 = s2, s1
        assert np.all(spec.payoff(1, s1)[1:, 0] >= spec.payoff(1, s2)[1:, 0])


def test_capacity_validation():
    with pytest.raises(InvalidArgument):
        build_capacity(CapacityParams(market_size=0.01))
    with pytest.raises(InvalidArgument):
        build_capacity(CapacityParams(delta=1.0))
    with pytest.raises(InvalidArgument):
        build_capacity(CapacityParams(capacity_map="cube"))


def test_quality_examples():
    p = QualityParams(levels=2, scale=1.0, theta=0.5)
    spec = build_quality(p)
    u = spec.payoff(0, uniform_population(3))[:, 0]
    expected = math.sqrt(3) / ((1 + math.sqrt(2) + math.sqrt(3)) / 3)
    assert u[2] == pytest.approx(expected, abs=1e-12)
    assert u[2] == pytest.approx(1.253213, abs=5e-6)
    full = build_quality(QualityParams(scale=3.0))
    for x in range(full.n_states):
        assert full.payoff(1, point_mass(full.n_states, x))[x, 0] == pytest.approx(2 * 3.0)
    flat = build_quality(QualityParams(theta=0.0, scale=3.0))
    s = np.random.default_rng(1).dirichlet(np.ones(flat.n_states))
    assert np.allclose(flat.payoff(1, s)[:, 0], 6.0)


def test_quality_profit_monotone(rng):
    spec = build_quality()
    s = rng.dirichlet(np.ones(spec.n_states))
    assert np.all(np.diff(spec.payoff(0, s)[:, 0]) > 0)
    richer = np.roll(s, 1)
    richer[-1] += richer[0]
    richer[0] = 0.0
    assert spec.aggregate_stat(richer) > spec.aggregate_stat(s)
    assert np.all(spec.payoff(0, richer)[:, 0] < spec.payoff(0, s)[:, 0])


def test_quality_validation():
    with pytest.raises(InvalidArgument):
        build_quality(QualityParams(theta=1.0))
    with pytest.raises(InvalidArgument):
        build_quality(QualityParams(scale=0.0))


def test_build_model_by_name():
    spec = build_model("capacity", {"persistence": 0.6, "z_values": [1.0, 2.0]})
    assert spec.chain.transition[0, 0] == pytest.approx(0.6)
    with pytest.raises(InvalidArgument):
        build_model("capacity", {"persistance": 0.6})
    with pytest.raises(InvalidArgument):
        build_model("housing")
    with pytest.raises(InvalidArgument):
        build_model("ks", {"beta": 1.2})
