"""Batch command line interface.

Subcommands cover the whole pipeline: ``simulate`` writes a synthetic
dataset with known ground truth, ``fit`` samples the posterior and writes a
draw file, ``predict`` and ``aggregate`` emit quantile tables, ``validate``
runs the holdout or cross-validation exercise, and ``check-gradients``
verifies the analytic gradient. Every output gets a manifest recording the
resolved configuration, input digests, seed, and version.

Exit codes: 0 success, 1 internal failure, 2 input or configuration error,
3 nonconvergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .aggregation import aggregate_global, aggregate_regions
from .data_model import (AUX_FILE, NMR_FILE, OBS_FILE, SBR_FILE,
                         atomic_write_text, load_directory, write_inputs)
from .errors import IpsbError, InvalidConfig
from .estimation import (QUANTILES, compute_weights, estimate_country,
                         write_estimate_table)
from .posterior import gradient_check
from .sampler import SamplerConfig, load_draws, run_hmc, save_draws
from .splines import build_basis
from .synthetic import (RegionPattern, ScenarioConfig, generate,
                        ground_truth_to_dict)
from .validation import build_report, holdout_split, kfold_split, score_observations

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2
EXIT_NONCONVERGED = 3

RHAT_LIMIT = 1.02


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def input_digests(data_dir):
    return {name: _sha256(os.path.join(data_dir, name))
            for name in (OBS_FILE, AUX_FILE, NMR_FILE, SBR_FILE)}


def write_manifest(path, command, config, digests, seed):
    manifest = {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "input_digests": digests,
        "seed": seed,
        "version": __version__,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_toml(path):
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def scenario_from_file(path) -> ScenarioConfig:
    """Build a scenario from a TOML file; omitted keys keep their defaults.

    ``[[patterns]]`` tables override the region templates with keys
    ``source_shares``, ``definition_shares``, ``income``.
    """
    raw = _load_toml(path)
    patterns = raw.pop("patterns", None)
    known = {f.name for f in dataclasses.fields(ScenarioConfig)}
    unknown = set(raw) - known
    if unknown:
        raise InvalidConfig(f"unknown scenario keys: {sorted(unknown)}")
    for key in ("places_per_country", "years", "sigma_eps", "obs_prob",
                "coverage", "crvs_coverage", "total_stillbirths", "nmr_level",
                "nmr_slope", "aux_nu"):
        if key in raw:
            raw[key] = tuple(raw[key])
    config = ScenarioConfig(**raw)
    if patterns is not None:
        config.patterns = tuple(
            RegionPattern(source_shares=tuple(p["source_shares"]),
                          definition_shares=tuple(p["definition_shares"]),
                          income=p["income"])
            for p in patterns)
    return config.validate()


def _add_data_arg(parser):
    parser.add_argument("--data", required=True,
                        help="directory holding the four canonical input files")
    parser.add_argument("--window", nargs=2, type=int, required=True,
                        metavar=("FIRST", "LAST"),
                        help="estimation window in integer years")
    parser.add_argument("--undefined-definition", default="treat_as_late",
                        choices=("treat_as_late", "exclude"))


def _add_sampler_args(parser):
    parser.add_argument("--chains", type=int, default=4)
    parser.add_argument("--warmup", type=int, default=1000)
    parser.add_argument("--samples", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--target-accept", type=float, default=0.8)
    parser.add_argument("--max-leapfrog", type=int, default=1024)


def _sampler_config(args) -> SamplerConfig:
    return SamplerConfig(chains=args.chains, warmup=args.warmup,
                         samples=args.samples, seed=args.seed,
                         target_accept=args.target_accept,
                         max_leapfrog=args.max_leapfrog)


def _load(args):
    return load_directory(args.data, tuple(args.window),
                          undefined_definition=args.undefined_definition)


def cmd_simulate(args):
    config = scenario_from_file(args.config) if args.config else ScenarioConfig()
    if args.seed is not None:
        config.seed = args.seed
    inputs, truth = generate(config)
    paths = write_inputs(inputs, args.out)
    truth_path = os.path.join(args.out, "ground_truth.json")
    atomic_write_text(truth_path,
                      json.dumps(ground_truth_to_dict(truth), sort_keys=True) + "\n")
    config_dict = dataclasses.asdict(config)
    config_dict["patterns"] = [dataclasses.asdict(p) for p in config.patterns]
    write_manifest(os.path.join(args.out, "manifest.json"), "simulate",
                   config_dict, input_digests(args.out), config.seed)
    print(f"wrote {len(inputs.observations)} observations, "
          f"{len(inputs.aux)} auxiliary records to {args.out}")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return EXIT_OK


def cmd_fit(args):
    inputs = _load(args)
    config = _sampler_config(args)
    draws = run_hmc(inputs, config)
    digests = input_digests(args.data)
    save_draws(draws, args.out, extra={
        "input_digests": digests,
        "window": list(args.window),
        "undefined_definition": args.undefined_definition,
    })
    write_manifest(args.out + ".manifest.json", "fit",
                   dataclasses.asdict(config), digests, config.seed)

    worst = int(np.argmax(draws.rhat))
    n_bad = int((draws.rhat >= RHAT_LIMIT).sum())
    print(f"chains {config.chains}, kept {config.samples} draws each, "
          f"dimension {draws.dim}")
    print(f"max R-hat {draws.rhat.max():.4f} ({draws.param_names[worst]}); "
          f"{n_bad} parameters at or above {RHAT_LIMIT}")
    print(f"min bulk ESS {draws.ess.min():.0f}; divergences "
          f"{[s.divergences for s in draws.chain_stats]}")
    print(f"draws written to {args.out}")
    if n_bad and not args.allow_nonconverged:
        print("nonconverged: rerun with more draws or --allow-nonconverged",
              file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _check_digests(draws, data_dir):
    recorded = draws.meta.get("input_digests")
    if recorded and recorded != input_digests(data_dir):
        raise InvalidConfig(
            "input files changed since the draw file was written")


def cmd_predict(args):
    inputs = _load(args)
    draws = load_draws(args.draws)
    _check_digests(draws, args.data)
    os.makedirs(args.out, exist_ok=True)

    h = inputs.index
    basis = build_basis(h.year_min, h.year_max)
    weights = compute_weights(inputs)
    places, countries = [], []
    for ci, country in enumerate(h.countries):
        est = estimate_country(draws, country, inputs, weights=weights,
                               seed=args.seed + ci, basis=basis)
        countries.append(est)
    from .estimation import predict_place
    for place in h.places:
        places.append(predict_place(draws, place, inputs, basis=basis))

    place_path = os.path.join(args.out, "place_estimates.csv")
    country_path = os.path.join(args.out, "country_estimates.csv")
    write_estimate_table(places, place_path, "place")
    write_estimate_table(countries, country_path, "country")
    digests = input_digests(args.data)
    write_manifest(os.path.join(args.out, "predict.manifest.json"), "predict",
                   {"draws": args.draws, "window": list(args.window),
                    "quantiles": list(QUANTILES)},
                   digests, args.seed)
    print(f"wrote {place_path} and {country_path}")
    return EXIT_OK


def cmd_aggregate(args):
    inputs = _load(args)
    draws = load_draws(args.draws)
    _check_digests(draws, args.data)

    h = inputs.index
    basis = build_basis(h.year_min, h.year_max)
    weights = compute_weights(inputs)
    estimates = [estimate_country(draws, c, inputs, weights=weights,
                                  seed=args.seed + ci, basis=basis)
                 for ci, c in enumerate(h.countries)]
    region_map = {h.countries[c]: h.regions[h.country_region[c]]
                  for c in range(h.n_countries)}
    regions = aggregate_regions(estimates, inputs.covariates, region_map)
    regions.append(aggregate_global(estimates, inputs.covariates))
    write_estimate_table(regions, args.out, "region")
    digests = input_digests(args.data)
    write_manifest(args.out + ".manifest.json", "aggregate",
                   {"draws": args.draws, "window": list(args.window),
                    "quantiles": list(QUANTILES)},
                   digests, args.seed)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_validate(args):
    inputs = _load(args)
    config = _sampler_config(args)
    if args.mode == "holdout":
        train, test = holdout_split(inputs, args.cutoff)
        fitted = run_hmc(train, config)
        scored = score_observations(test, fitted, train, seed=args.seed)
    else:
        pairs = kfold_split(inputs, args.k, args.seed)
        scored = []
        for fold, (train, test) in enumerate(pairs):
            fold_config = dataclasses.replace(config, seed=config.seed + fold)
            fitted = run_hmc(train, fold_config)
            scored.extend(score_observations(test, fitted, train,
                                             seed=args.seed + fold))
    report = build_report(scored)
    report.to_csv(args.out)
    write_manifest(args.out + ".manifest.json", "validate",
                   {"mode": args.mode, "cutoff": args.cutoff, "k": args.k,
                    "sampler": dataclasses.asdict(config),
                    "window": list(args.window)},
                   input_digests(args.data), args.seed)
    for row in report.rows:
        print(f"{row.region}: mae {row.mae:.3f} coverage {row.coverage95:.3f} "
              f"n {row.n}")
    print(f"report written to {args.out}")
    return EXIT_OK


def cmd_check_gradients(args):
    inputs = _load(args)
    report = gradient_check(inputs, n_points=args.points, seed=args.seed)
    status = "ok" if report.passed else "FAILED"
    print(f"{status}: max relative error {report.max_rel_err:.3g} over "
          f"{report.n_points} points (worst {report.worst_coord}, "
          f"tolerance {report.tolerance:g})")
    return EXIT_OK if report.passed else EXIT_INTERNAL


def cmd_dump_basis(args):
    basis = build_basis(args.window[0], args.window[1])
    rows = ["year," + ",".join(f"k{h}" for h in range(basis.n_coef))]
    for i, year in enumerate(basis.grid):
        rows.append(f"{int(year)}," + ",".join(repr(v) for v in basis.B[i]))
    atomic_write_text(args.out, "\n".join(rows) + "\n")
    print(f"wrote {basis.B.shape[0]}x{basis.B.shape[1]} basis table to {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ipsb",
        description="Estimate the intrapartum share of stillbirths.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", help="scenario TOML; defaults used if omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the scenario seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="sample the posterior")
    _add_data_arg(p)
    _add_sampler_args(p)
    p.add_argument("--out", required=True, help="draw file to write")
    p.add_argument("--allow-nonconverged", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="place and country estimate tables")
    _add_data_arg(p)
    p.add_argument("--draws", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for the unobserved components")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("aggregate", help="region estimate table")
    _add_data_arg(p)
    p.add_argument("--draws", required=True)
    p.add_argument("--out", required=True, help="region table to write")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("validate", help="holdout or k-fold evaluation")
    _add_data_arg(p)
    _add_sampler_args(p)
    p.add_argument("--mode", choices=("holdout", "kfold"), required=True)
    p.add_argument("--cutoff", type=float, default=2017.0,
                   help="holdout cutoff year")
    p.add_argument("--k", type=int, default=10, help="number of folds")
    p.add_argument("--out", required=True, help="report file to write")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("check-gradients", help="finite-difference verification")
    _add_data_arg(p)
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check_gradients)

    p = sub.add_parser("dump-basis", help="write the spline basis matrix")
    p.add_argument("--window", nargs=2, type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_basis)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InvalidConfig, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except IpsbError as err:
        kind = type(err).__name__
        print(f"error ({kind}): {err}", file=sys.stderr)
        if kind in ("DivergenceStorm",):
            return EXIT_NONCONVERGED
        if kind in ("MalformedRecord", "MissingCovariate", "HierarchyConflict",
                    "WindowTooShort", "TooFewObservations", "EmptyTrain",
                    "EmptyTest", "MissingSBR"):
            return EXIT_INPUT
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
