"""Command-line front end: ``nbfe solve|simulate|compare|report``.

Exit codes: 0 when every equilibrium solve converged, 2 when some did not
(artifacts are still written), 1 on configuration or usage errors.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import ensemble_reports, series_rows
from .core import ContractViolation, ConvergenceError, InvalidArgument, ModelError, uniform_population
from .equilibrium import solve_nbfe
from .io import (
    RunConfig,
    dump_json,
    load_config,
    policy_rows,
    population_rows,
    read_records,
    tree_json,
    write_csv,
    write_records,
)
from .sim import EnsembleConfig, shared_shock_ensemble, stationary_population

OUT_ENV = "NBFE_OUT"
EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED = 0, 1, 2


class UsageError(Exception):
    pass


def _foresight_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None
    if not values or min(values) < 0:
        raise argparse.ArgumentTypeError("foresight values must be nonnegative integers")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nbfe", description="Bounded foresight equilibrium solver and simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="TOML or JSON run configuration")
        p.add_argument("--foresight", type=_foresight_list, help="comma separated N values, e.g. 0,1,2")
        p.add_argument("--seed", type=int, help="override simulation.base_seed")
        p.add_argument("--threads", type=int, default=None, help="worker processes (default: all cores)")
        p.add_argument("--out", help=f"output directory (default: [output].directory, then ${OUT_ENV})")

    common(sub.add_parser("solve", help="solve one equilibrium per foresight value"))
    common(sub.add_parser("simulate", help="run ensembles and write records and reports"))
    common(sub.add_parser("compare", help="shared-shock comparison across foresight values"))
    rep = sub.add_parser("report", help="recompute reports from records in an output directory")
    common(rep, config_required=False)
    rep.add_argument("--records", help="directory holding records_N*.ndjson (default: the output directory)")
    rep.add_argument("--burn-in", type=int, default=None)
    return parser


def _resolve(args, cfg: RunConfig | None) -> tuple[RunConfig | None, Path]:
    if cfg is not None:
        sim = cfg.simulation
        if args.foresight is not None:
            sim = replace(sim, foresight=list(args.foresight))
        if args.seed is not None:
            sim = replace(sim, base_seed=args.seed)
        sim.validate()
        cfg = replace(cfg, simulation=sim)
    out = args.out or (cfg.output.directory if cfg else "") or os.environ.get(OUT_ENV, "")
    if not out:
        raise UsageError(f"no output directory: pass --out, set [output].directory or ${OUT_ENV}")
    out_path = Path(out)
    try:
        out_path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out_path}: {exc}") from None
    if not os.access(out_path, os.W_OK):
        raise UsageError(f"output directory {out_path} is not writable")
    return cfg, out_path


def _threads(args) -> int:
    if args.threads is None:
        return os.cpu_count() or 1
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")
    return args.threads


def _initial(cfg: RunConfig, spec):
    if cfg.simulation.initial == "uniform":
        return uniform_population(spec.n_states)
    return stationary_population(spec, cfg.simulation.z0, cfg.solver)


def _metadata(out: Path, command: str, started: float, extra: dict) -> None:
    meta = {
        "command": command,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "seconds": round(time.time() - started, 3),
        "host": platform.node(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "package_version": __version__,
    }
    meta.update(extra)
    dump_json(meta, out / "metadata.json")


def ensemble_configs(cfg: RunConfig) -> list[EnsembleConfig]:
    sim = cfg.simulation
    return [
        EnsembleConfig(
            n_paths=sim.n_paths,
            horizon=sim.horizon,
            foresight=int(N),
            base_seed=sim.base_seed,
            model=cfg.model,
            solve=cfg.solver,
            burn_in=sim.burn_in,
            mode=sim.mode,
            n_agents=sim.n_agents,
            keep_snapshots=cfg.output.snapshot_populations,
        )
        for N in sim.foresight
    ]


def _write_reports(records_by_n: dict, out: Path, burn_in: int, horizons) -> None:
    records = [r for N in sorted(records_by_n) for r in records_by_n[N]]
    shortest = min(r.horizon for r in records)
    if shortest - burn_in < 2:
        print(f"warning: burn_in={burn_in} leaves {max(0, shortest - burn_in)} periods; reports use burn_in=0", file=sys.stderr)
        burn_in = 0
    if shortest < 2:
        print("warning: fewer than two periods per path; variability report left empty", file=sys.stderr)
    var, fe = ensemble_reports(records, burn_in, horizons=tuple(horizons), variability=shortest >= 2)
    write_csv(var.rows(), out / "variability.csv", ["foresight", "sigma_mean", "sigma_path_std", "paths", "burn_in"])
    write_csv(fe.rows(), out / "forecast_error.csv", ["foresight", "horizon", "error_mean", "paths", "samples", "excluded"])
    dump_json(
        {"burn_in": burn_in, "variability": list(var.rows()), "forecast_error": list(fe.rows())},
        out / "summary.json",
    )


def cmd_solve(cfg: RunConfig, out: Path, threads: int) -> int:
    spec = cfg.build()
    s0 = _initial(cfg, spec)
    z0 = cfg.simulation.z0
    status = EXIT_OK
    write_csv(population_rows(spec, s0), out / "initial_population.csv")
    for N in cfg.simulation.foresight:
        res = solve_nbfe(z0, s0, int(N), spec, cfg.solver)
        dump_json(tree_json(res, spec), out / f"tree_N{N}.json")
        write_csv(policy_rows(res, spec), out / f"policy_N{N}.csv")
        with open(out / f"residuals_N{N}.log", "w") as fh:
            for k, gap in enumerate(res.trace, 1):
                fh.write(f"{k} {gap:.12e}\n")
        if res.converged:
            print(f"N={N}: converged in {res.iterations} iterations, residual {res.residual:.3e}")
        else:
            print(f"N={N}: not converged after {res.iterations} iterations, residual {res.residual:.3e}", file=sys.stderr)
            status = EXIT_NONCONVERGED
    return status


def _status(records_by_n: dict) -> int:
    bad = sum(int((~r.converged).sum()) for recs in records_by_n.values() for r in recs)
    total = sum(len(r.converged) for recs in records_by_n.values() for r in recs)
    if bad:
        print(f"{bad} of {total} period solves did not converge (flagged in the records)", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, out: Path, threads: int) -> int:
    spec = cfg.build()
    s0 = _initial(cfg, spec)
    by_n = shared_shock_ensemble(ensemble_configs(cfg), spec, s0, cfg.simulation.z0, threads)
    for N in sorted(by_n):
        write_records(by_n[N], out, cfg.output.formats, cfg.output.snapshot_populations)
    _write_reports(by_n, out, cfg.simulation.burn_in, cfg.simulation.horizons)
    write_csv(series_rows(by_n, cfg.simulation.low_state), out / "series.csv")
    return _status(by_n)


def cmd_compare(cfg: RunConfig, out: Path, threads: int) -> int:
    # identical pipeline; the aligned series carries the comparison
    return cmd_simulate(cfg, out, threads)


def cmd_report(args, cfg: RunConfig | None, out: Path) -> int:
    src = Path(args.records) if args.records else out
    echoed = src / "effective_config.json"
    if cfg is None and echoed.exists():
        cfg = load_config(echoed)
    by_n = read_records(src)
    if args.foresight is not None:
        missing = set(args.foresight) - set(by_n)
        if missing:
            raise UsageError(f"no records for foresight {sorted(missing)} in {src}")
        by_n = {N: by_n[N] for N in args.foresight}
    burn_in = args.burn_in if args.burn_in is not None else (cfg.simulation.burn_in if cfg else 0)
    horizons = cfg.simulation.horizons if cfg else [1, 2, 3]
    low = cfg.simulation.low_state if cfg else 0
    _write_reports(by_n, out, burn_in, horizons)
    write_csv(series_rows(by_n, low), out / "series.csv")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "compare": cmd_compare}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    started = time.time()
    try:
        cfg = load_config(args.config) if args.config else None
        cfg, out = _resolve(args, cfg)
        threads = _threads(args)
        if cfg is not None:
            dump_json(cfg.effective(), out / "effective_config.json")
        if args.command == "report":
            status = cmd_report(args, cfg, out)
        else:
            status = COMMANDS[args.command](cfg, out, threads)
    except (InvalidArgument, ModelError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractViolation, ConvergenceError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    _metadata(out, args.command, started, {"threads": threads, "exit_code": status})
    return status


if __name__ == "__main__":
    sys.exit(main())
