"""Variability and forecast-error statistics of simulated paths."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .core import InvalidArgument
from .sim import SimulationRecord


def std_of_mean(record: SimulationRecord, burn_in: int = 0) -> float:
    """Sample standard deviation (n - 1) of the aggregate statistic over periods ``burn_in..T-1``."""
    series = np.asarray(record.stats[: record.horizon])[burn_in:]
    if len(series) < 2:
        raise InvalidArgument(
            f"need at least two periods after burn-in, have {len(series)} (T={record.horizon}, burn_in={burn_in})"
        )
    return float(np.std(series, ddof=1))


def forecast_samples(record: SimulationRecord, horizon: int, burn_in: int = 0):
    """Forecast and realised statistic for every usable period.

    The forecast made at ``t`` for ``t + j`` is the statistic of the snapshot
    node on the realised history; beyond the foresight window it is the
    continuation state below the realised depth-N prefix.
    """
    if horizon < 1:
        raise InvalidArgument(f"forecast horizon must be at least 1, got {horizon}")
    if len(record.snapshot_stats) == 0:
        raise InvalidArgument("record carries no forecast snapshots")
    T, N = record.horizon, record.foresight
    leaf_pos = {int(node): k for k, node in enumerate(record.leaf_nodes)}
    index = {p: i for i, p in enumerate(record.node_paths)}
    forecast, realised = [], []
    for t in range(burn_in, T - horizon + 1):
        future = tuple(int(z) for z in record.z[t + 1 : t + 1 + horizon])
        if horizon <= N:
            f = record.snapshot_stats[t, index[future]]
        else:
            f = record.continuation_stats[t, leaf_pos[index[future[:N]]]]
        forecast.append(f)
        realised.append(record.stats[t + horizon])
    return np.array(forecast), np.array(realised)


def _relative_errors(record, horizon, burn_in):
    f, r = forecast_samples(record, horizon, burn_in)
    keep = r != 0
    return np.abs(f[keep] - r[keep]) / r[keep], int((~keep).sum())


def forecast_error(record: SimulationRecord, horizon: int, burn_in: int = 0) -> float:
    """Mean relative gap between forecast and realised statistic ``horizon`` periods ahead."""
    err, _ = _relative_errors(record, horizon, burn_in)
    if len(err) == 0:
        raise InvalidArgument("no usable periods for this horizon")
    return float(err.mean())


@dataclass
class VariabilityReport:
    burn_in: int
    per_path: dict[int, list[float]] = field(default_factory=dict)

    @property
    def mean(self) -> dict[int, float]:
        return {N: float(np.mean(v)) for N, v in sorted(self.per_path.items())}

    @property
    def paths(self) -> dict[int, int]:
        return {N: len(v) for N, v in sorted(self.per_path.items())}

    def rows(self):
        for N in sorted(self.per_path):
            v = self.per_path[N]
            yield {
                "foresight": N,
                "sigma_mean": float(np.mean(v)),
                "sigma_path_std": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0,
                "paths": len(v),
                "burn_in": self.burn_in,
            }


@dataclass
class ForecastErrorReport:
    burn_in: int
    per_path: dict[tuple[int, int], list[float]] = field(default_factory=dict)
    samples: dict[tuple[int, int], int] = field(default_factory=dict)
    excluded: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def mean(self) -> dict[tuple[int, int], float]:
        return {k: float(np.mean(v)) for k, v in sorted(self.per_path.items())}

    def rows(self):
        for (N, j) in sorted(self.per_path):
            v = self.per_path[(N, j)]
            yield {
                "foresight": N,
                "horizon": j,
                "error_mean": float(np.mean(v)),
                "paths": len(v),
                "samples": self.samples[(N, j)],
                "excluded": self.excluded[(N, j)],
            }


def ensemble_reports(
    records: list[SimulationRecord], burn_in: int = 0, horizons=(1, 2, 3), variability: bool = True
) -> tuple[VariabilityReport, ForecastErrorReport]:
    """Per-path statistics averaged with equal weight over paths, grouped by foresight.

    ``variability=False`` leaves the variability report empty, for records too
    short to carry a standard deviation.
    """
    if not records:
        raise InvalidArgument("empty ensemble")
    ordered = sorted(records, key=lambda r: (r.foresight, r.path_id))
    var = VariabilityReport(burn_in)
    fe = ForecastErrorReport(burn_in)
    per_path = defaultdict(list)
    samples = defaultdict(int)
    excluded = defaultdict(int)
    for rec in ordered:
        if variability:
            var.per_path.setdefault(rec.foresight, []).append(std_of_mean(rec, burn_in))
        for j in horizons:
            err, dropped = _relative_errors(rec, j, burn_in)
            if len(err):
                per_path[(rec.foresight, j)].append(float(err.mean()))
            samples[(rec.foresight, j)] += len(err)
            excluded[(rec.foresight, j)] += dropped
    fe.per_path = dict(per_path)
    fe.samples = dict(samples)
    fe.excluded = dict(excluded)
    return var, fe


def rows_to_csv(rows) -> str:
    rows = list(rows)
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def summary_json(var: VariabilityReport, fe: ForecastErrorReport) -> str:
    out = {
        "burn_in": var.burn_in,
        "variability": list(var.rows()),
        "forecast_error": list(fe.rows()),
    }
    return json.dumps(out, indent=2, sort_keys=True)


def series_rows(records_by_n: dict[int, list[SimulationRecord]], low_state: int = 0):
    """Aligned per-period statistic for every foresight on shared shock paths."""
    Ns = sorted(records_by_n)
    ref = records_by_n[Ns[0]]
    for i, rec in enumerate(ref):
        for t in range(rec.horizon + 1):
            row = {"path": rec.path_id, "t": t, "z": int(rec.z[t]), "low": int(rec.z[t] == low_state)}
            for N in Ns:
                other = records_by_n[N][i]
                if not np.array_equal(other.z, rec.z):
                    raise InvalidArgument("records do not share aggregate shock paths")
                row[f"H_N{N}"] = float(other.stats[t])
            yield row
