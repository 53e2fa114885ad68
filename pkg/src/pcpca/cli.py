"""Command-line entry point multiplexing all workflows.

Exit codes: 0 success, 1 numeric/runtime failure, 2 argument or config
error, 3 infeasible contrast weight (distinct so sweep scripts can detect
the feasibility boundary). Every run echoes its resolved configuration as
JSON to stderr, and errors add a machine-readable JSON line there too.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import dataset
from .errors import InfeasibleGammaError, PcpcaError
from .estimators import (PcpcaModel, fit_pcpca, gamma_from_prime, generate,
                         heldout_log_likelihood, project)
from .evalkit import ExperimentSpec, run_experiment, write_report
from .gibbs import GibbsConfig, PriorBox, sample_gibbs
from .missing import OptimizerConfig, fit_missing, impute_matrix
from .spectral import gamma_mle_report

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3


def _add_csv_flags(parser):
    parser.add_argument("--header", action="store_true",
                        help="first CSV row is a header (default: no header)")
    parser.add_argument("--na-token", default="",
                        help="token marking missing cells (default: empty cell)")


def _add_pair_flags(parser):
    parser.add_argument("--fg", required=True, help="foreground CSV path")
    parser.add_argument("--bg", required=True, help="background CSV path")
    _add_csv_flags(parser)


def _add_gamma_flags(parser):
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--gamma-prime", type=float, default=None,
                       help="sample-size-adjusted contrast weight "
                            "(default: 0.5)")
    group.add_argument("--gamma-raw", type=float, default=None,
                       help="raw contrast weight; escape hatch overriding "
                            "--gamma-prime (default: unset)")


def _resolve_gamma(args, n, m):
    if args.gamma_raw is not None:
        return float(args.gamma_raw)
    gp = 0.5 if args.gamma_prime is None else args.gamma_prime
    return gamma_from_prime(gp, n, m)


def _load_pair(args):
    fg = dataset.load_csv(args.fg, missing_token=args.na_token,
                          header=args.header)
    bg = dataset.load_csv(args.bg, missing_token=args.na_token,
                          header=args.header)
    return dataset.make_pair(fg, bg)


def _echo_config(args):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print(json.dumps({"resolved_config": resolved}, default=str),
          file=sys.stderr)


def _write_latents(path, Z):
    np.savetxt(path, Z, delimiter=",")


def cmd_fit(args):
    pair = _load_pair(args)
    gamma = _resolve_gamma(args, pair.n, pair.m)
    model = fit_pcpca(pair, args.d, gamma)
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write(model.to_json())
    print(json.dumps({"model": args.output, "sigma2": model.sigma2,
                      "gamma": model.gamma, "gamma_prime": model.gamma_prime}))
    return EXIT_OK


def cmd_fit_missing(args):
    fg = dataset.load_csv(args.fg, missing_token=args.na_token,
                          header=args.header)
    bg = dataset.load_csv(args.bg, missing_token=args.na_token,
                          header=args.header)
    pair = dataset.make_pair(fg, bg)
    gamma = _resolve_gamma(args, pair.n, pair.m)
    config = OptimizerConfig(step_size=args.step_size,
                             max_iters=args.max_iters,
                             grad_tol=args.grad_tol)
    model, trace = fit_missing(pair, args.d, gamma, config=config,
                               seed=args.seed)
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write(model.to_json())
    print(json.dumps({
        "model": args.output, "sigma2": model.sigma2,
        "converged": bool(trace.converged),
        "iterations": int(trace.iterations_used),
        "final_objective": float(trace.objectives[-1]),
    }))
    return EXIT_OK


def cmd_transform(args):
    with open(args.model, encoding="utf-8") as fh:
        model = PcpcaModel.from_json(fh.read())
    data = dataset.load_csv(args.data, missing_token=args.na_token,
                            header=args.header)
    if not data.fully_observed:
        raise ValueError("transform requires fully observed data; "
                         "run impute first")
    centered = data.values - model.feature_mean
    Z = project(model, centered, mode=args.mode)
    _write_latents(args.output, Z)
    print(json.dumps({"latents": args.output, "shape": list(Z.shape),
                      "mode": args.mode}))
    return EXIT_OK


def cmd_generate(args):
    with open(args.model, encoding="utf-8") as fh:
        model = PcpcaModel.from_json(fh.read())
    synth = generate(model, args.count, seed=args.seed,
                     add_noise=args.add_noise)
    dataset.save_csv(synth, args.output)
    print(json.dumps({"generated": args.output, "count": args.count}))
    return EXIT_OK


def cmd_score(args):
    with open(args.model, encoding="utf-8") as fh:
        model = PcpcaModel.from_json(fh.read())
    data = dataset.load_csv(args.test, missing_token=args.na_token,
                            header=args.header)
    if not data.fully_observed:
        raise ValueError("score requires fully observed data")
    ll = heldout_log_likelihood(model, data.values - model.feature_mean)
    print(json.dumps({"heldout_log_likelihood": ll,
                      "n_samples": data.n_samples}))
    return EXIT_OK


def cmd_gamma_report(args):
    pair = _load_pair(args)
    report = gamma_mle_report(pair, args.d)
    print(report.to_json())
    return EXIT_OK


def cmd_impute(args):
    with open(args.model, encoding="utf-8") as fh:
        model = PcpcaModel.from_json(fh.read())
    data = dataset.load_csv(args.data, missing_token=args.na_token,
                            header=args.header)
    centered = np.where(data.mask, data.observed_values() - model.feature_mean,
                        0.0)
    filled, stdev = impute_matrix(model, centered, data.mask)
    out = dataset.DataMatrix(values=filled + model.feature_mean)
    dataset.save_csv(out, args.output)
    if args.stdev_out:
        np.savetxt(args.stdev_out, stdev, delimiter=",")
    n_filled = int((~data.mask).sum())
    print(json.dumps({"imputed": args.output, "cells_filled": n_filled}))
    return EXIT_OK


def cmd_gibbs_sample(args):
    pair = _load_pair(args)
    gamma = _resolve_gamma(args, pair.n, pair.m)
    prior_box = None
    if args.w_bound is not None:
        prior_box = PriorBox(w_bound=args.w_bound,
                             sigma2_low=args.sigma2_low,
                             sigma2_high=args.sigma2_high)
    config = GibbsConfig(
        learning_rate_w=args.learning_rate,
        n_samples=args.n_samples,
        burn_in=args.burn_in,
        thinning=args.thinning,
        target_accept=args.target_accept,
        prior_box=prior_box,
        seed=args.seed,
    )
    chain = sample_gibbs(pair, args.d, gamma, model_kind=args.kind,
                         config=config)
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write(chain.to_json(indent=2))
    print(json.dumps({"chain": args.output, "states": len(chain),
                      "acceptance_rate": chain.acceptance_rate}))
    return EXIT_OK


def cmd_experiment(args):
    with open(args.config, encoding="utf-8") as fh:
        spec = ExperimentSpec.from_json(fh.read())
    report = run_experiment(spec)
    path = write_report(report, args.output)
    print(json.dumps({"report": str(path), "cells": len(report.cells)}))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pcpca",
        description="Probabilistic contrastive PCA workflows",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("fit", help="closed-form fit on fully observed data")
    _add_pair_flags(p)
    _add_gamma_flags(p)
    p.add_argument("-d", type=int, required=True, help="latent dimension")
    p.add_argument("-o", "--output", required=True, help="model JSON path")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("fit-missing",
                       help="gradient-ascent fit on partially observed data")
    _add_pair_flags(p)
    _add_gamma_flags(p)
    p.add_argument("-d", type=int, required=True, help="latent dimension")
    p.add_argument("-o", "--output", required=True, help="model JSON path")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default: 0)")
    p.add_argument("--step-size", type=float, default=1e-2,
                   help="optimizer step size (default: 0.01)")
    p.add_argument("--max-iters", type=int, default=2000,
                   help="maximum iterations (default: 2000)")
    p.add_argument("--grad-tol", type=float, default=1e-5,
                   help="gradient max-norm stop threshold (default: 1e-5)")
    p.set_defaults(func=cmd_fit_missing)

    p = sub.add_parser("transform", help="project data to latent coordinates")
    p.add_argument("--model", required=True, help="model JSON path")
    p.add_argument("--data", required=True, help="data CSV path")
    p.add_argument("--mode", choices=["posterior_mean", "orthonormal"],
                   default="posterior_mean",
                   help="projection rule (default: posterior_mean)")
    p.add_argument("-o", "--output", required=True, help="latent CSV path")
    _add_csv_flags(p)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("generate", help="draw synthetic foreground samples")
    p.add_argument("--model", required=True, help="model JSON path")
    p.add_argument("--count", type=int, required=True,
                   help="number of samples to draw")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default: 0)")
    p.add_argument("--add-noise", action="store_true",
                   help="add the fitted isotropic noise (default: off)")
    p.add_argument("-o", "--output", required=True, help="output CSV path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("score", help="held-out log likelihood of test data")
    p.add_argument("--model", required=True, help="model JSON path")
    p.add_argument("--test", required=True, help="test CSV path")
    _add_csv_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("gamma-report",
                       help="print all feasibility bounds on gamma")
    _add_pair_flags(p)
    p.add_argument("-d", type=int, required=True, help="latent dimension")
    p.set_defaults(func=cmd_gamma_report)

    p = sub.add_parser("impute",
                       help="replace unobserved cells by conditional means")
    p.add_argument("--model", required=True, help="model JSON path")
    p.add_argument("--data", required=True, help="CSV with missing cells")
    p.add_argument("-o", "--output", required=True, help="imputed CSV path")
    p.add_argument("--stdev-out", default=None,
                   help="optional CSV of per-cell conditional stdevs "
                        "(default: not written)")
    _add_csv_flags(p)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("gibbs-sample", help="sample the Gibbs posterior")
    _add_pair_flags(p)
    _add_gamma_flags(p)
    p.add_argument("--kind", choices=["pcpca", "cpca"], default="pcpca",
                   help="parameter space to sample (default: pcpca)")
    p.add_argument("-d", type=int, required=True, help="latent dimension")
    p.add_argument("--n-samples", type=int, default=5000,
                   help="total MCMC iterations (default: 5000)")
    p.add_argument("--burn-in", type=int, default=1000,
                   help="iterations discarded (default: 1000)")
    p.add_argument("--thinning", type=int, default=1,
                   help="keep every k-th state (default: 1)")
    p.add_argument("--learning-rate", type=float, default=1.0,
                   help="Gibbs tempering weight w (default: 1.0)")
    p.add_argument("--target-accept", type=float, default=0.3,
                   help="adaptation target acceptance (default: 0.3)")
    p.add_argument("--w-bound", type=float, default=None,
                   help="half-width of the uniform prior on W entries "
                        "(default: derived from data)")
    p.add_argument("--sigma2-low", type=float, default=1e-4,
                   help="prior lower bound on sigma2 (default: 1e-4)")
    p.add_argument("--sigma2-high", type=float, default=10.0,
                   help="prior upper bound on sigma2 (default: 10.0)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default: 0)")
    p.add_argument("-o", "--output", required=True, help="chain JSON path")
    p.set_defaults(func=cmd_gibbs_sample)

    p = sub.add_parser("experiment", help="run a declarative experiment spec")
    p.add_argument("--config", required=True, help="experiment spec JSON")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help; pass through.
        return int(exc.code or 0)
    _echo_config(args)
    try:
        return args.func(args)
    except InfeasibleGammaError as exc:
        _emit_error(exc)
        return EXIT_INFEASIBLE
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        _emit_error(exc)
        return EXIT_USAGE
    except PcpcaError as exc:
        _emit_error(exc)
        return EXIT_RUNTIME
    except (np.linalg.LinAlgError, FloatingPointError, OverflowError) as exc:
        _emit_error(exc)
        return EXIT_RUNTIME


def _emit_error(exc):
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
          file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
