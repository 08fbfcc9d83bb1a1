"""Run a shared-shock comparison across foresight depths and print the report tables.

    python scripts/compare_foresight.py configs/capacity_desk.toml --out runs/cap
"""
import argparse
import csv
import sys
from pathlib import Path

from nbfe.cli import main as nbfe_main


def table(path: Path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--out", required=True)
    ap.add_argument("--foresight", default=None, help="comma separated, overrides the config")
    ap.add_argument("--threads", default=None)
    args = ap.parse_args(argv)

    cmd = ["compare", "--config", args.config, "--out", args.out]
    if args.foresight:
        cmd += ["--foresight", args.foresight]
    if args.threads:
        cmd += ["--threads", args.threads]
    status = nbfe_main(cmd)
    if status == 1:
        return status

    out = Path(args.out)
    print("\nstd of the aggregate statistic")
    for row in table(out / "variability.csv"):
        print(f"  N={row['foresight']}  {float(row['sigma_mean']):.4f}  (across paths {float(row['sigma_path_std']):.4f}, {row['paths']} paths)")
    print("\nmean relative forecast error")
    for row in table(out / "forecast_error.csv"):
        print(f"  N={row['foresight']} j={row['horizon']}  {100 * float(row['error_mean']):.3f}%")
    if status == 2:
        print("\nsome periods did not converge; they are flagged in the records", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
