"""Run configuration and on-disk formats for records, trees and reports."""
from __future__ import annotations

import csv
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import InvalidArgument, ModelSpec
from .equilibrium import EquilibriumResult, SolveConfig
from .models import BUILDERS, build_model
from .sim import MODES, SimulationRecord

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SECTIONS = ("solver", "simulation", "output")
OUTPUT_FORMATS = ("csv", "ndjson", "json")


@dataclass
class SimulationSection:
    n_paths: int = 1
    horizon: int = 100
    foresight: list[int] = field(default_factory=lambda: [0])
    base_seed: int = 0
    burn_in: int = 100
    mode: str = "histogram"
    n_agents: int = 1000
    z0: int = 0
    initial: str = "uniform"
    horizons: list[int] = field(default_factory=lambda: [1, 2, 3])
    low_state: int = 0

    def validate(self) -> None:
        if self.n_paths < 1 or self.horizon < 1:
            raise InvalidArgument("n_paths and horizon must be at least 1")
        if not self.foresight or any(int(n) < 0 for n in self.foresight):
            raise InvalidArgument(f"foresight must be a nonempty list of nonnegative integers, got {self.foresight}")
        if len(set(self.foresight)) != len(self.foresight):
            raise InvalidArgument(f"duplicate foresight values {self.foresight}")
        if self.burn_in < 0:
            raise InvalidArgument("burn_in must be nonnegative")
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}")
        if self.initial not in ("uniform", "stationary"):
            raise InvalidArgument("initial must be 'uniform' or 'stationary'")
        if not self.horizons or min(self.horizons) < 1:
            raise InvalidArgument("forecast horizons must be positive")


@dataclass
class OutputSection:
    directory: str = ""
    formats: list[str] = field(default_factory=lambda: list(OUTPUT_FORMATS))
    snapshot_populations: bool = False

    def validate(self) -> None:
        bad = set(self.formats) - set(OUTPUT_FORMATS)
        if bad:
            raise InvalidArgument(f"unknown output formats {sorted(bad)}; choose from {OUTPUT_FORMATS}")


@dataclass
class RunConfig:
    model: str
    params: dict
    solver: SolveConfig = field(default_factory=SolveConfig)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    output: OutputSection = field(default_factory=OutputSection)

    def build(self) -> ModelSpec:
        return build_model(self.model, self.params)

    def effective(self) -> dict:
        """Fully defaulted configuration; loading it back gives an equal config."""
        params = asdict(BUILDERS[self.model][0].from_dict(self.params))
        return {
            self.model: _plain(params),
            "solver": asdict(self.solver),
            "simulation": asdict(self.simulation),
            "output": asdict(self.output),
        }


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _section(cls, data: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise InvalidArgument(f"unknown keys in [{name}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidArgument(f"[{name}]: {exc}") from None


def parse_config(data: dict) -> RunConfig:
    models = [k for k in data if k in BUILDERS]
    unknown = set(data) - set(BUILDERS) - set(SECTIONS)
    if unknown:
        raise InvalidArgument(f"unknown config sections: {sorted(unknown)}")
    if len(models) != 1:
        raise InvalidArgument(f"need exactly one model section out of {sorted(BUILDERS)}, found {models}")
    model = models[0]
    params = dict(data[model])
    # validates keys and values now rather than at first use
    build_model(model, params)
    sim = dict(data.get("simulation", {}))
    if isinstance(sim.get("foresight"), int):
        sim["foresight"] = [sim["foresight"]]
    cfg = RunConfig(
        model=model,
        params=params,
        solver=_section(SolveConfig, data.get("solver", {}), "solver"),
        simulation=_section(SimulationSection, sim, "simulation"),
        output=_section(OutputSection, data.get("output", {}), "output"),
    )
    cfg.simulation.validate()
    cfg.output.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise InvalidArgument(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text.decode())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise InvalidArgument(f"cannot parse {path}: {exc}") from None
    return parse_config(data)


# --------------------------------------------------------------------------
# writers
# --------------------------------------------------------------------------


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(rows, path: Path, header: list[str] | None = None) -> None:
    rows = list(rows)
    header = header or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def history_label(rel) -> str:
    """Shock history as a string, ``"-"`` for the root."""
    return "-".join(str(z) for z in rel) if rel else "-"


def tree_json(result: EquilibriumResult, spec: ModelSpec) -> dict:
    tree = result.tree
    return {
        "root_state": tree.root_state,
        "depth": tree.depth,
        "continuation_rule": tree.rule,
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "residual": float(result.residual),
        "nodes": [
            {
                "history": history_label(rel),
                "level": int(tree.level[i]),
                "state": int(tree.state(i)),
                "stat": spec.aggregate_stat(tree.populations[i]),
                "population": tree.populations[i].tolist(),
            }
            for i, rel in enumerate(tree.relative_paths())
        ],
        "continuations": [
            {
                "history": history_label(tree.relative_paths()[leaf]),
                "stat": spec.aggregate_stat(tree.continuations[j]),
                "population": tree.continuations[j].tolist(),
            }
            for j, leaf in enumerate(tree.leaves)
        ],
    }


def _coords(spec: ModelSpec, x: int) -> dict:
    pt = np.atleast_1d(spec.grid.points[x])
    labels = spec.grid.labels or tuple(f"x{k}" for k in range(len(pt)))
    return {lab: float(v) for lab, v in zip(labels, pt)}


def policy_rows(result: EquilibriumResult, spec: ModelSpec):
    tree = result.tree
    actions = np.asarray(spec.actions)
    for i, rel in enumerate(tree.relative_paths()):
        for x in range(spec.n_states):
            a = int(result.policy.actions[i, x])
            row = {"node": i, "history": history_label(rel), "x": x}
            row.update(_coords(spec, x))
            row.update({"action_index": a, "action": float(np.atleast_1d(actions[a])[0])})
            yield row


def population_rows(spec: ModelSpec, s: np.ndarray):
    for x in range(spec.n_states):
        row = {"x": x}
        row.update(_coords(spec, x))
        row["mass"] = float(s[x])
        yield row


def record_lines(rec: SimulationRecord):
    """One JSON object per simulated period."""
    for t in range(rec.horizon + 1):
        obj = {
            "path": rec.path_id,
            "seed": rec.seed,
            "foresight": rec.foresight,
            "t": t,
            "z": int(rec.z[t]),
            "stat": float(rec.stats[t]),
        }
        if t < rec.horizon:
            obj.update(
                residual=float(rec.residuals[t]),
                converged=bool(rec.converged[t]),
                iterations=int(rec.iterations[t]),
            )
        yield json.dumps(obj, sort_keys=True)


def snapshot_json(records: list[SimulationRecord], with_populations: bool = False) -> dict:
    """Forecast snapshots keyed ``"path/t/history"``."""
    out = {}
    for rec in records:
        labels = [history_label(p) for p in rec.node_paths]
        leaf_labels = [labels[int(i)] for i in rec.leaf_nodes]
        for t in range(rec.horizon):
            for i, lab in enumerate(labels):
                entry = {"stat": float(rec.snapshot_stats[t, i])}
                if with_populations and rec.snapshots is not None:
                    entry["population"] = rec.snapshots[t, i].tolist()
                out[f"{rec.path_id}/{t}/{lab}"] = entry
            for j, lab in enumerate(leaf_labels):
                out[f"{rec.path_id}/{t}/{lab}"]["continuation_stat"] = float(rec.continuation_stats[t, j])
    return {"foresight": records[0].foresight if records else None, "snapshots": out}


def write_records(records: list[SimulationRecord], out: Path, formats, with_populations=False) -> list[Path]:
    if not records:
        return []
    N = records[0].foresight
    written = []
    if "ndjson" in formats:
        p = out / f"records_N{N}.ndjson"
        with open(p, "w") as fh:
            for rec in records:
                for line in record_lines(rec):
                    fh.write(line + "\n")
        written.append(p)
    if "csv" in formats:
        p = out / f"paths_N{N}.csv"
        write_csv(
            ({"path": r.path_id, "t": t, "z": int(r.z[t]), "H": float(r.stats[t])} for r in records for t in range(r.horizon + 1)),
            p,
            ["path", "t", "z", "H"],
        )
        written.append(p)
    if "json" in formats:
        p = out / f"snapshots_N{N}.json"
        dump_json(snapshot_json(records, with_populations), p)
        written.append(p)
    return written


def read_records(directory: Path) -> dict[int, list[SimulationRecord]]:
    """Rebuild statistic-level records from ``records_N*.ndjson`` and ``snapshots_N*.json``."""
    found: dict[int, list[SimulationRecord]] = {}
    for rec_path in sorted(directory.glob("records_N*.ndjson")):
        N = int(rec_path.stem.split("_N")[1])
        snap_path = directory / f"snapshots_N{N}.json"
        if not snap_path.exists():
            raise InvalidArgument(f"missing forecast sidecar {snap_path.name} next to {rec_path.name}")
        rows: dict[int, list[dict]] = {}
        for line in rec_path.read_text().splitlines():
            if line.strip():
                obj = json.loads(line)
                rows.setdefault(obj["path"], []).append(obj)
        snaps = json.loads(snap_path.read_text())["snapshots"]
        records = []
        for pid, rs in sorted(rows.items()):
            rs.sort(key=lambda r: r["t"])
            T = len(rs) - 1
            labels = sorted({k.split("/", 2)[2] for k in snaps if k.startswith(f"{pid}/0/")}, key=_label_order)
            node_paths = [tuple(int(c) for c in lab.split("-")) if lab != "-" else () for lab in labels]
            leaf_idx = [i for i, p in enumerate(node_paths) if len(p) == N]
            snap_stats = np.array([[snaps[f"{pid}/{t}/{lab}"]["stat"] for lab in labels] for t in range(T)])
            cont_stats = np.array(
                [[snaps[f"{pid}/{t}/{labels[i]}"]["continuation_stat"] for i in leaf_idx] for t in range(T)]
            )
            records.append(
                SimulationRecord(
                    path_id=pid,
                    seed=rs[0]["seed"],
                    foresight=N,
                    z=np.array([r["z"] for r in rs], dtype=int),
                    populations=np.empty((T + 1, 0)),
                    stats=np.array([r["stat"] for r in rs]),
                    node_paths=node_paths,
                    leaf_nodes=np.array(leaf_idx, dtype=int),
                    snapshot_stats=snap_stats.reshape(T, len(labels)),
                    continuation_stats=cont_stats.reshape(T, len(leaf_idx)),
                    residuals=np.array([r["residual"] for r in rs[:-1]]),
                    converged=np.array([r["converged"] for r in rs[:-1]], dtype=bool),
                    iterations=np.array([r["iterations"] for r in rs[:-1]], dtype=int),
                )
            )
        found[N] = records
    if not found:
        raise InvalidArgument(f"no records_N*.ndjson files in {directory}")
    return found


def _label_order(label: str):
    if label == "-":
        return (0, ())
    parts = tuple(int(c) for c in label.split("-"))
    return (len(parts), parts)
