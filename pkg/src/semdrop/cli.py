"""Command-line front end: ``simulate``, ``fit``, ``impute`` and ``se``.

Precedence of settings: command-line flags, then the JSON file given by
``--config`` (keys are flag names without leading dashes), then defaults.

Seeding: the user seed is the root of every stream.  ``simulate`` derives a
stream per replication (see :mod:`semdrop.simulation`); ``fit`` and ``se``
use ``default_rng(seed)`` and spawn imputation, chain and SE streams from it.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    DropoutParams,
    ResponseModelParams,
    atomic_write_text,
    format_float,
    read_dataset,
    dataset_to_csv,
)
from .errors import SemDropError
from .estimate import fit
from .imputation import impute_once, multiple_impute
from .louis import monte_carlo_information, pack_params, param_names, standard_errors
from .sem import SemConfig
from .simulation import SIM_METHODS, SimDesign, run_replications

log = logging.getLogger("semdrop")

DEFAULTS = {
    "n": None,
    "t": 5,
    "reps": 2000,
    "method": "regression",
    "m": 10,
    "k0": 5,
    "iters": 500,
    "burnin": 100,
    "mse_samples": 200,
    "seed": 1,
    "jobs": 1,
    "input": None,
    "estimates": None,
    "out_dir": ".",
    "mar_literal": False,
    "psi": [-17.0, 0.11, 0.13],
    "eta": [-5.0, 0.06],
}


def _add(p, *flags, key, help, **kw):
    default = DEFAULTS.get(key)
    suffix = f" (default: {default})" if default not in (None, False) else ""
    p.add_argument(*flags, dest=key, default=None, help=help + suffix, **kw)


def _common(p, methods):
    _add(p, "--method", key="method", choices=methods, help="covariate imputation method")
    _add(p, "--m", key="m", type=int, help="number of imputations")
    _add(p, "--k0", key="k0", type=int, help="PMM donor-pool size")
    _add(p, "--seed", key="seed", type=int, help="root seed (64-bit unsigned)")
    _add(p, "--jobs", key="jobs", type=int, help="worker processes")
    _add(p, "--config", key="config", help="JSON file with default settings")
    _add(p, "--out-dir", key="out_dir", help="output directory")


def _sem_flags(p):
    _add(p, "--iters", key="iters", type=int, help="SEM iterations per chain")
    _add(p, "--burnin", key="burnin", type=int, help="burn-in iterations discarded")
    _add(p, "--mse-samples", key="mse_samples", type=int, help="Monte Carlo samples for Louis SEs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semdrop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the replication study")
    _add(sim, "--n", key="n", type=int, help="subjects per data set (required)")
    _add(sim, "--t", key="t", type=int, help="occasions")
    _add(sim, "--reps", key="reps", type=int, help="replications")
    _add(sim, "--psi", key="psi", type=float, nargs=3, metavar="PSI", help="dropout logit coefficients")
    _add(sim, "--eta", key="eta", type=float, nargs=2, metavar="ETA", help="covariate-missingness logit")
    sim.add_argument("--mar-literal", dest="mar_literal", action="store_const", const=True, default=None,
                     help="covariate missingness driven by the previous subject's covariate")
    _common(sim, SIM_METHODS)
    _sem_flags(sim)

    fit_p = sub.add_parser("fit", help="estimate the model on a dataset CSV")
    _add(fit_p, "--input", key="input", help="dataset CSV (required)")
    _common(fit_p, ("regression", "pmm"))
    _sem_flags(fit_p)

    imp = sub.add_parser("impute", help="write multiply imputed datasets")
    _add(imp, "--input", key="input", help="dataset CSV (required)")
    _common(imp, ("regression", "pmm"))

    se = sub.add_parser("se", help="Louis standard errors at given estimates")
    _add(se, "--input", key="input", help="dataset CSV (required)")
    _add(se, "--estimates", key="estimates", help="estimates.csv written by 'fit' (required)")
    _common(se, ("regression", "pmm"))
    _add(se, "--mse-samples", key="mse_samples", type=int, help="Monte Carlo samples for Louis SEs")
    return parser


def resolve(parser, args) -> dict:
    """Merge flags over the config file over defaults and validate."""
    given = {k: v for k, v in vars(args).items() if v is not None}
    conf = {}
    if "config" in given:
        try:
            raw = json.loads(Path(given["config"]).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read --config: {exc}")
        if not isinstance(raw, dict):
            parser.error("--config must hold a JSON object")
        conf = {k.lstrip("-").replace("-", "_"): v for k, v in raw.items()}
    cfg = dict(DEFAULTS)
    cfg.update({k: v for k, v in conf.items() if k in DEFAULTS})
    cfg.update(given)
    cmd = cfg["command"]
    if cmd == "simulate" and cfg["n"] is None:
        parser.error("simulate: the following argument is required: --n")
    if cmd in ("fit", "impute", "se") and cfg["input"] is None:
        parser.error(f"{cmd}: the following argument is required: --input")
    if cmd == "se" and cfg["estimates"] is None:
        parser.error("se: the following argument is required: --estimates")
    for key in ("input", "estimates"):
        if cfg.get(key) is not None and not Path(cfg[key]).is_file():
            parser.error(f"--{key}: no such file: {cfg[key]}")
    if not 0 <= int(cfg["seed"]) < 2**64:
        parser.error("--seed must be a 64-bit unsigned integer")
    if int(cfg["jobs"]) < 1:
        parser.error("--jobs must be >= 1")
    if cmd != "simulate" and cfg["method"] not in ("regression", "pmm"):
        parser.error(f"{cmd}: --method must be regression or pmm")
    return cfg


def _sem_config(cfg) -> SemConfig:
    return SemConfig(n_iterations=int(cfg["iters"]), burn_in=int(cfg["burnin"]))


def _csv_text(rows) -> str:
    out = io.StringIO()
    csv.writer(out, lineterminator="\n").writerows(rows)
    return out.getvalue()


def chain_csv(chain, k: int) -> str:
    header = ["iter", *[f"beta{i}" for i in range(k + 1)], "sigma", "rho", "psi0", "psi1", "psi2",
              "accept_attempts"]
    rows = [header]
    for i in range(chain.n_iterations):
        vals = [*chain.theta[i], *chain.psi[i]]
        rows.append([i + 1, *map(format_float, vals), int(chain.attempts[i])])
    return _csv_text(rows)


def estimates_csv(names, estimates, se, pvals) -> str:
    rows = [["parameter", "estimate", "se", "p_value"]]
    for i, name in enumerate(names):
        rows.append([name, format_float(estimates[i]),
                     format_float(se[i]) if se is not None else "NA",
                     format_float(pvals[i]) if pvals is not None else "NA"])
    return _csv_text(rows)


def read_estimates(path, k: int):
    """Parse an estimates CSV into ``(theta, psi-or-None)``."""
    with open(path, newline="") as fh:
        rows = {r["parameter"]: r["estimate"] for r in csv.DictReader(fh)}
    try:
        theta_names = param_names(k, include_dropout=False)
        theta = ResponseModelParams.from_vector([float(rows[nm]) for nm in theta_names])
        psi_vals = [rows.get(nm, "NA") for nm in ("psi0", "psi1", "psi2")]
        psi = None if "NA" in psi_vals else DropoutParams(*map(float, psi_vals))
    except (KeyError, ValueError) as exc:
        raise SemDropError(f"{path}: malformed estimates file ({exc})") from exc
    return theta, psi


def cmd_simulate(cfg) -> int:
    design = SimDesign(
        n=int(cfg["n"]), t=int(cfg["t"]), psi=tuple(cfg["psi"]), eta=tuple(cfg["eta"]),
        m=int(cfg["m"]), replications=int(cfg["reps"]), method=cfg["method"],
        mar_literal=bool(cfg["mar_literal"]), k0=int(cfg["k0"]), sem=_sem_config(cfg),
        m_se=int(cfg["mse_samples"]),
    )
    report = run_replications(design, seed=int(cfg["seed"]), jobs=int(cfg["jobs"]))
    out = Path(cfg["out_dir"])
    title = f"n = {design.n}, method = {design.method}, replications = {design.replications}"
    atomic_write_text(out / "report.csv", report.to_csv())
    atomic_write_text(out / "report.txt", report.to_text(title))
    sys.stdout.write(report.to_text(title))
    return 0


def cmd_fit(cfg) -> int:
    ds = read_dataset(cfg["input"])
    rng = np.random.default_rng(int(cfg["seed"]))
    res = fit(ds, cfg["method"], int(cfg["m"]), _sem_config(cfg), rng, k0=int(cfg["k0"]),
              m_se=int(cfg["mse_samples"]), jobs=int(cfg["jobs"]))
    out = Path(cfg["out_dir"])
    names = param_names(ds.k)
    est = np.full(len(names), np.nan)
    se = np.full(len(names), np.nan)
    pv = np.full(len(names), np.nan)
    p = len(res.names)
    est[:p] = res.estimates
    if res.se is not None:
        se[:p], pv[:p] = res.se, res.p_values
    atomic_write_text(out / "estimates.csv", estimates_csv(names, est, se, pv))
    for j, chain in enumerate(res.chains, start=1):
        atomic_write_text(out / f"chain_imp{j}.csv", chain_csv(chain, ds.k))
    if res.psi_hat is None:
        log.warning("no dropout events at risk: dropout parameters are not estimable")
    if res.se_error:
        sys.stderr.write(f"warning: standard errors unavailable: {res.se_error}\n")
    sys.stdout.write(estimates_csv(names, est, se, pv))
    return 0


def cmd_impute(cfg) -> int:
    ds = read_dataset(cfg["input"])
    rng = np.random.default_rng(int(cfg["seed"]))
    out = Path(cfg["out_dir"])
    stem = Path(cfg["input"]).stem
    for j, x in enumerate(multiple_impute(ds, cfg["method"], int(cfg["m"]), rng, int(cfg["k0"])), start=1):
        atomic_write_text(out / f"{stem}_imp{j}.csv", dataset_to_csv(ds.with_covariates(x)))
    return 0


def cmd_se(cfg) -> int:
    ds = read_dataset(cfg["input"])
    theta, psi = read_estimates(cfg["estimates"], ds.k)
    rng_imp, rng_se = np.random.default_rng(int(cfg["seed"])).spawn(2)
    if not ds.covariates_complete():
        ds = ds.with_covariates(impute_once(ds, cfg["method"], rng_imp, int(cfg["k0"])))
    info = monte_carlo_information(theta, psi, ds, int(cfg["mse_samples"]), rng_se)
    est = pack_params(theta, psi)
    se, pv = standard_errors(info.info, est)
    text = estimates_csv(info.names, est, se, pv)
    atomic_write_text(Path(cfg["out_dir"]) / "se.csv", text)
    sys.stdout.write(text)
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "impute": cmd_impute, "se": cmd_se}


def main(argv=None) -> int:
    level = os.environ.get("SEMDROP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = resolve(parser, args)
    try:
        return COMMANDS[cfg["command"]](cfg)
    except (SemDropError, OSError) as exc:
        sys.stderr.write(f"semdrop {cfg['command']}: error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
