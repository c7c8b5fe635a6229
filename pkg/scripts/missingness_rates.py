"""Realised dropout and covariate-missing rates under the default design.

The covariate rate is compared with its quadrature value
E[expit(eta0 + eta1 y_1)], y_1 ~ N(beta0, beta1^2 + sigma^2).
"""

import argparse

import numpy as np
from scipy import integrate
from scipy.special import expit
from scipy.stats import norm

from semdrop.data import CovariateMissingnessParams, DropoutParams
from semdrop.simulation import SimDesign, apply_covariate_mar, apply_response_dropout, generate_complete


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=10**6)
    p.add_argument("--seed", type=int, default=2026)
    args = p.parse_args()
    design = SimDesign(n=args.n)
    g_data, g_drop, g_mar = (np.random.default_rng(s) for s in np.random.SeedSequence(args.seed).spawn(3))
    ds = generate_complete(design, g_data)
    dropped = apply_response_dropout(ds, DropoutParams(*design.psi), g_drop)
    counts = np.bincount(dropped.dropout, minlength=design.t + 2)[2 : design.t + 1]
    print(f"subjects: {args.n}")
    print(f"dropouts: {int(counts.sum())} (rate {counts.sum() / args.n:.3g}); by occasion 2..{design.t}: "
          f"{counts.tolist()}")
    eta = CovariateMissingnessParams(*design.eta)
    masked = apply_covariate_mar(ds, eta, g_mar)
    sd = np.hypot(design.beta[1], design.sigma)
    quad, _ = integrate.quad(lambda y: expit(eta.eta0 + eta.eta1 * y) * norm.pdf(y, design.beta[0], sd),
                             -np.inf, np.inf)
    print(f"covariate missing rate: {(~masked.x_mask).mean():.5f} (quadrature {quad:.5f})")


if __name__ == "__main__":
    main()
