"""Run the four bias-table designs and print each report.

Usage: python scripts/bias_tables.py [--reps N] [--seed S] [--jobs J] [--out-dir DIR]
"""

import argparse
from pathlib import Path

from semdrop.errors import HarnessError
from semdrop.simulation import SimDesign, run_replications

DESIGNS = [
    ("complete covariates, n = 25", dict(n=25, method="complete-covariates")),
    ("complete covariates, n = 50", dict(n=50, method="complete-covariates")),
    ("MAR covariates, n = 25, regression", dict(n=25, method="regression")),
    ("MAR covariates, n = 25, PMM", dict(n=25, method="pmm")),
    ("MAR covariates, n = 50, regression", dict(n=50, method="regression")),
    ("MAR covariates, n = 50, PMM", dict(n=50, method="pmm")),
]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", type=Path)
    args = p.parse_args()
    for title, kw in DESIGNS:
        design = SimDesign(replications=args.reps, **kw)
        try:
            report = run_replications(design, seed=args.seed, jobs=args.jobs)
        except HarnessError as exc:
            print(f"{title}: {exc}")
            report = exc.report
        print(report.to_text(title))
        if args.out_dir:
            args.out_dir.mkdir(parents=True, exist_ok=True)
            stem = title.replace(",", "").replace(" = ", "").replace(" ", "_")
            (args.out_dir / f"{stem}.csv").write_text(report.to_csv())


if __name__ == "__main__":
    main()
