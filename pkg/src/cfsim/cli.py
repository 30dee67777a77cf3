"""Command-line entry point: simulate, gen-space, estimate-dd, replay.

Exit codes: 0 success, 1 replay divergence, 2 configuration error,
3 data error, 4 assumption-validation failure under --strict-assumptions.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .ddestimate import (
    CorpusFormatError,
    RatingsCorpus,
    default_radius_grid,
    estimate_item_dds,
    inverse_n_grid,
)
from .engine import AuditError, RunTrace, replay
from .itemspace import (
    ConstructionError,
    ParameterError,
    make_cluster_measure,
    make_user_cluster_measure,
    measure_to_json,
    validate_assumptions,
)
from .metrics import (
    bounds_overlay,
    cold_start_time,
    mean_curve_to_csv,
    mean_regret,
)
from .runner import (
    ConfigError,
    build_measure,
    build_run,
    config_hash,
    resolve_scale,
    run_many,
    _portable_config,
)
from .similarity import TheoryConstants

EXIT_OK = 0
EXIT_DIVERGED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ASSUMPTIONS = 4


def _parse_seeds(text: str) -> list[int]:
    text = text.strip()
    if ":" in text:
        a, b = text.split(":", 1)
        return list(range(int(a), int(b)))
    if "," in text:
        return [int(s) for s in text.split(",") if s.strip()]
    return list(range(int(text)))


def _measure_spec(args) -> dict | str:
    if args.measure == "uniform":
        return {"kind": "uniform", "n_users": args.n_users}
    return args.measure  # a JSON file path


def cmd_simulate(args) -> int:
    config = {
        "algo": args.algo,
        "measure": _measure_spec(args),
        "n_users": args.n_users,
        "nu": args.nu,
        "d": args.d,
        "k_clusters": args.k,
        "horizon": args.horizon,
        "seeds": _parse_seeds(args.seeds),
        "scale": args.scale,
        "stride": args.stride,
        "epoch_failure": args.epoch_failure,
    }
    try:
        measure = build_measure(config["measure"])
    except (ConfigError, ParameterError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if measure.n_users != args.n_users:
        config["n_users"] = measure.n_users
    try:
        report = validate_assumptions(measure, args.nu, sample_budget=2000)
    except ParameterError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if not (report.a2_user_ok and report.a2_item_ok):
        msg = (
            "assumption check: "
            f"user band ok={report.a2_user_ok}, item band ok={report.a2_item_ok}"
        )
        if args.strict_assumptions:
            print(f"assumption failure: {msg}", file=sys.stderr)
            return EXIT_ASSUMPTIONS
        print(f"warning: {msg}", file=sys.stderr)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    try:
        curves = run_many(config, out_dir=out_dir, workers=args.workers)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if len(curves) >= 2:
        mean = mean_regret(curves)
        mean_curve_to_csv(mean, os.path.join(out_dir, "mean_curve.csv"))
        estimate = cold_start_time(mean)
        with open(os.path.join(out_dir, "cold_start.json"), "w") as fh:
            json.dump(estimate.to_json(), fh, indent=2)
    tc = TheoryConstants(
        d=args.d, nu=args.nu, n_users=measure.n_users,
        scale=resolve_scale(args.scale),
    )
    with open(os.path.join(out_dir, "bounds_overlay.json"), "w") as fh:
        json.dump(bounds_overlay(tc).to_json(), fh, indent=2)
    run_manifest = {
        "version": __version__,
        "config": _portable_config(config),
        "config_hash": config_hash(_portable_config(config)),
        "n_seeds": len(config["seeds"]),
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(run_manifest, fh, indent=2)
    print(f"wrote {len(curves)} runs to {out_dir}")
    return EXIT_OK


def cmd_gen_space(args) -> int:
    try:
        if args.kind == "cluster":
            generated = make_cluster_measure(
                K=args.k, n_users=args.n_users, nu=args.nu,
                depth=args.depth, seed=args.seed,
            )
        else:
            generated = make_user_cluster_measure(
                K=args.k, n_users=args.n_users, nu=args.nu, seed=args.seed,
            )
    except (ConstructionError, ParameterError) as e:
        print(f"construction error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    with open(args.out, "w") as fh:
        json.dump(measure_to_json(generated.measure), fh)
    report_path = os.path.splitext(args.out)[0] + "_report.json"
    report = generated.report.summary()
    report["params"] = generated.params
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2)
    print(
        f"wrote measure spec to {args.out} "
        f"(d_exact={generated.d_exact:.4f}, report at {report_path})"
    )
    return EXIT_OK


def cmd_estimate_dd(args) -> int:
    if not (0 <= args.delta < 0.5):
        print("config error: noise probability must lie in [0, 1/2)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        corpus = RatingsCorpus.from_csv(args.ratings, args.binarize_threshold)
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CorpusFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    radii = (
        inverse_n_grid(corpus.n_users)
        if args.grid_inverse_n
        else default_radius_grid(args.grid_points)
    )
    result = estimate_item_dds(
        corpus, delta=args.delta, min_co=args.min_co, radii=radii
    )
    os.makedirs(args.out, exist_ok=True)
    result.to_item_csv(os.path.join(args.out, "item_dd.csv"))
    result.to_histogram_json(os.path.join(args.out, "dd_histogram.json"))
    print(
        f"estimated {corpus.n_items} items; histogram mode {result.mode():.3f}; "
        f"outputs in {args.out}"
    )
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        with open(args.manifest) as fh:
            manifest = json.load(fh)
    except (FileNotFoundError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    config = manifest["config"]
    seed = int(manifest["seed"])
    stored = RunTrace.from_csv(args.trace)
    try:
        report = replay(
            stored,
            build=lambda: build_run(config, seed),
            horizon_t=int(config["horizon"]),
            expected_version=manifest.get("version"),
            actual_version=__version__,
        )
    except AuditError as e:
        print(f"audit error: {e}", file=sys.stderr)
        return EXIT_DATA
    if report.ok:
        print("replay identical")
        return EXIT_OK
    print(f"replay diverged: {report.detail}", file=sys.stderr)
    return EXIT_DIVERGED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfsim",
        description="Online collaborative-filtering simulation toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run seeded simulations and emit curves")
    sim.add_argument("--algo", required=True,
                     choices=["random", "oracle", "user_user", "item_item"])
    sim.add_argument("--measure", required=True,
                     help="'uniform' or a measure-spec JSON path")
    sim.add_argument("--n-users", type=int, default=100)
    sim.add_argument("--nu", type=float, default=0.1)
    sim.add_argument("--d", type=float, default=1.0)
    sim.add_argument("--k", type=int, default=2,
                     help="cluster prior for the user-user baseline")
    sim.add_argument("--horizon", type=int, required=True,
                     help="recommendations per user")
    sim.add_argument("--seeds", default="1",
                     help="'N' for 0..N-1, 'a:b' for a range, or 'a,b,c'")
    sim.add_argument("--scale", default="paper", choices=["paper", "desk"])
    sim.add_argument("--stride", type=int, default=None,
                     help="curve grid stride in steps (default N/10)")
    sim.add_argument("--epoch-failure", default="finish",
                     choices=["finish", "reuse"])
    sim.add_argument("--workers", type=int, default=1)
    sim.add_argument("--strict-assumptions", action="store_true")
    sim.add_argument("--out", default=os.environ.get("CFSIM_OUT", "cfsim_out"))
    sim.set_defaults(func=cmd_simulate)

    gen = sub.add_parser("gen-space", help="generate a measure spec JSON")
    gen.add_argument("--k", type=int, required=True)
    gen.add_argument("--n-users", type=int, required=True)
    gen.add_argument("--nu", type=float, required=True)
    gen.add_argument("--depth", type=int, default=1)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--kind", default="cluster",
                     choices=["cluster", "user-clusters"])
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_space)

    dd = sub.add_parser("estimate-dd", help="estimate per-item doubling dimensions")
    dd.add_argument("--ratings", required=True, help="CSV of user_id,item_id,rating")
    dd.add_argument("--delta", type=float, required=True,
                    help="per-entry noise probability")
    dd.add_argument("--min-co", type=int, default=20)
    dd.add_argument("--binarize-threshold", type=float, default=0.0,
                    help="ratings above this map to +1")
    dd.add_argument("--grid-points", type=int, default=101)
    dd.add_argument("--grid-inverse-n", action="store_true",
                    help="use the {0, 1/N, ..., 1} radius grid")
    dd.add_argument("--out", default=os.environ.get("CFSIM_OUT", "cfsim_out"))
    dd.set_defaults(func=cmd_estimate_dd)

    rep = sub.add_parser("replay", help="verify a trace reproduces from its manifest")
    rep.add_argument("--manifest", required=True)
    rep.add_argument("--trace", required=True)
    rep.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
