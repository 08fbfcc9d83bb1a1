import math
import random

import numpy as np
import pytest

from nbfe.analysis import (
    ensemble_reports,
    forecast_error,
    forecast_samples,
    rows_to_csv,
    series_rows,
    std_of_mean,
    summary_json,
)
from nbfe.core import InvalidArgument
from nbfe.sim import SimulationRecord


def synthetic(stats, z, N, snap=None, cont=None, path_id=0):
    """Record with a one-state grid whose statistic is given directly."""
    T = len(z) - 1
    paths = [()]
    frontier = [()]
    for _ in range(N):
        frontier = [p + (k,) for p in frontier for k in range(2)]
        paths.extend(frontier)
    leaves = np.array([i for i, p in enumerate(paths) if len(p) == N])
    snap = np.zeros((T, len(paths))) if snap is None else np.asarray(snap, dtype=float)
    cont = np.zeros((T, len(leaves))) if cont is None else np.asarray(cont, dtype=float)
    return SimulationRecord(
        path_id=path_id,
        seed=path_id,
        foresight=N,
        z=np.asarray(z),
        populations=np.ones((T + 1, 1)),
        stats=np.asarray(stats, dtype=float),
        node_paths=paths,
        leaf_nodes=leaves,
        snapshot_stats=snap,
        continuation_stats=cont,
        residuals=np.zeros(T),
        converged=np.ones(T, dtype=bool),
        iterations=np.ones(T, dtype=int),
    )


def test_std_of_mean_basics():
    assert std_of_mean(synthetic([2.0] * 6, [0] * 6, 0)) == 0.0
    # the final population is excluded: periods 0..T-1
    rec = synthetic([1.0, 3.0, 100.0], [0, 0, 0], 0)
    assert std_of_mean(rec) == pytest.approx(math.sqrt(2), abs=1e-15)
    with pytest.raises(InvalidArgument):
        std_of_mean(rec, burn_in=1)


def test_single_sample_relative_error():
    rec = synthetic([9.0, 1.0], [0, 0], 0, cont=[[1.05]])
    assert forecast_error(rec, 1) == pytest.approx(0.05, abs=1e-15)


def test_horizon_indices_are_consistent():
    # plant distinct values so any off-by-one shows up
    T, N = 5, 2
    z = [0, 1, 0, 1, 1, 0]
    stats = [10.0 + t for t in range(T + 1)]
    rec = synthetic(stats, z, N)
    for t in range(T):
        for i, p in enumerate(rec.node_paths):
            rec.snapshot_stats[t, i] = 1000 * t + 10 * len(p) + (p[-1] if p else 0)
        for k in range(len(rec.leaf_nodes)):
            rec.continuation_stats[t, k] = -(1000 * t + k)
    for j in (1, 2, 3):
        f, r = forecast_samples(rec, j)
        assert len(f) == T - j + 1
        for t in range(T - j + 1):
            future = tuple(z[t + 1 : t + 1 + j])
            assert r[t] == stats[t + j]
            if j <= N:
                assert f[t] == 1000 * t + 10 * j + future[-1]
            else:
                leaf = rec.node_paths.index(future[:N])
                k = list(rec.leaf_nodes).index(leaf)
                assert f[t] == -(1000 * t + k)


def test_exact_forecasts_give_zero_error():
    z = [0, 1, 1, 0]
    stats = [1.0, 2.0, 3.0, 4.0]
    rec = synthetic(stats, z, 1)
    for t in range(3):
        rec.snapshot_stats[t, rec.node_paths.index((z[t + 1],))] = stats[t + 1]
    assert forecast_error(rec, 1) == 0.0


def test_forecast_error_validation():
    rec = synthetic([1.0, 1.0], [0, 0], 0)
    with pytest.raises(InvalidArgument):
        forecast_error(rec, 0)
    with pytest.raises(InvalidArgument):
        forecast_error(rec, 2)


def make_paths(rng, n=4):
    out = []
    for i in range(n):
        T = 12
        z = rng.integers(0, 2, T + 1)
        rec = synthetic(1 + rng.random(T + 1), z, 1, snap=1 + rng.random((T, 3)), cont=1 + rng.random((T, 2)), path_id=i)
        out.append(rec)
    return out


def test_reports_one_path_and_duplicates(rng):
    rec = make_paths(rng, 1)[0]
    var, fe = ensemble_reports([rec], horizons=(1, 2))
    assert var.mean[1] == std_of_mean(rec)
    assert fe.mean[(1, 2)] == forecast_error(rec, 2)
    var2, fe2 = ensemble_reports([rec, rec], horizons=(1, 2))
    assert var2.mean[1] == pytest.approx(var.mean[1], rel=1e-15)
    assert fe2.mean[(1, 1)] == pytest.approx(fe.mean[(1, 1)], rel=1e-15)
    assert var2.paths[1] == 2


def test_reports_order_independent(rng):
    recs = make_paths(rng)
    var, fe = ensemble_reports(recs)
    shuffled = recs[:]
    random.Random(4).shuffle(shuffled)
    var2, fe2 = ensemble_reports(shuffled)
    assert list(var.rows()) == list(var2.rows())
    assert list(fe.rows()) == list(fe2.rows())
    assert summary_json(var, fe) == summary_json(var2, fe2)


def test_zero_realisations_are_excluded():
    rec = synthetic([1.0, 0.0, 2.0], [0, 0, 0], 0, cont=[[1.0], [1.0]])
    _, fe = ensemble_reports([rec], horizons=(1,))
    assert fe.excluded[(0, 1)] == 1 and fe.samples[(0, 1)] == 1
    assert fe.mean[(0, 1)] == pytest.approx(0.5)


def test_reports_reject_empty():
    with pytest.raises(InvalidArgument):
        ensemble_reports([])


def test_rows_to_csv():
    text = rows_to_csv([{"a": 1, "b": 2.5}])
    assert text == "a,b\n1,2.5\n"


def test_series_rows_annotation(rng):
    recs0 = make_paths(rng, 2)
    recs2 = [synthetic(r.stats * 2, r.z, 1, path_id=r.path_id) for r in recs0]
    rows = list(series_rows({0: recs0, 2: recs2}, low_state=0))
    assert len(rows) == 2 * 13
    for row in rows:
        assert row["low"] == int(row["z"] == 0)
        assert row["H_N2"] == pytest.approx(2 * row["H_N0"])
    bad = [synthetic(r.stats, 1 - r.z, 1, path_id=r.path_id) for r in recs0]
    with pytest.raises(InvalidArgument):
        list(series_rows({0: recs0, 1: bad}))
