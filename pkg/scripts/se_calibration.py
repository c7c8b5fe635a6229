"""Median Louis SE against the empirical SD of the estimates over repeated fits.

Usage: python scripts/se_calibration.py [--fits N] [--method M] [--m M] [--eta E0 E1] [--seed S] [--jobs J]
"""

import argparse

import numpy as np

from semdrop.sem import SemConfig
from semdrop.simulation import SimDesign, se_calibration


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--fits", type=int, default=100)
    p.add_argument("--n", type=int, default=25)
    p.add_argument("--t", type=int, default=3)
    p.add_argument("--psi", type=float, nargs=3, default=(-0.5, 0.05, -0.05))
    p.add_argument("--eta", type=float, nargs=2, default=(-2.5, 0.03))
    p.add_argument("--method", default="regression")
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--burnin", type=int, default=50)
    p.add_argument("--mse-samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--jobs", type=int, default=1)
    a = p.parse_args()
    design = SimDesign(n=a.n, t=a.t, psi=tuple(a.psi), eta=tuple(a.eta), method=a.method, m=a.m,
                       sem=SemConfig(n_iterations=a.iters, burn_in=a.burnin), m_se=a.mse_samples)
    rep = se_calibration(design, a.fits, seed=a.seed, jobs=a.jobs)
    print(f"fits: {a.fits}  attempts: {rep.attempts}  failed: {len(rep.failures)}  "
          f"NaN SE rows: {int(np.isnan(rep.se).any(axis=1).sum())}")
    print(f"{'parameter':<10}{'median SE':>12}{'SD':>12}{'ratio':>8}")
    for name, se, sd, r in zip(rep.names, rep.median_se, rep.empirical_sd, rep.ratio):
        print(f"{name:<10}{se:>12.4f}{sd:>12.4f}{r:>8.3f}")


if __name__ == "__main__":
    main()
