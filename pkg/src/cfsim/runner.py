"""Config-driven run execution: one place that builds measures, algorithms,
and environments from a plain dict, so runs are reproducible from their
manifests and seed batches can execute in worker processes.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from typing import Optional

import numpy as np

from . import __version__
from .algorithms import (
    ItemItemCF,
    ItemItemConfig,
    OracleRecommender,
    RandomRecommender,
    Recommender,
    UserUserRecommender,
)
from .engine import Environment, RunTrace, run
from .itemspace import (
    ItemMeasure,
    UniformCube,
    make_cluster_measure,
    make_user_cluster_measure,
    measure_from_json,
    measure_to_json,
)
from .metrics import RegretCurve, regret
from .similarity import SCALE_PRESETS, ScaleConfig


class ConfigError(ValueError):
    """A run configuration fails schema validation."""


def resolve_scale(spec) -> ScaleConfig:
    if spec is None:
        return SCALE_PRESETS["paper"]
    if isinstance(spec, str):
        if spec not in SCALE_PRESETS:
            raise ConfigError(f"unknown scale preset {spec!r}")
        return SCALE_PRESETS[spec]
    if isinstance(spec, ScaleConfig):
        return spec
    if isinstance(spec, dict):
        base = SCALE_PRESETS.get(spec.get("name", "paper"), SCALE_PRESETS["paper"])
        fields = {k: v for k, v in spec.items()}
        merged = {**asdict(base), **fields}
        return ScaleConfig(**merged)
    raise ConfigError(f"bad scale spec {spec!r}")


def build_measure(spec) -> ItemMeasure:
    if isinstance(spec, ItemMeasure):
        return spec
    if isinstance(spec, str):
        with open(spec) as fh:
            return measure_from_json(json.load(fh))
    if isinstance(spec, dict):
        kind = spec.get("kind", spec.get("variant"))
        if kind in ("finite_mixture", "uniform_cube"):
            return measure_from_json(spec)
        if kind == "uniform":
            return UniformCube(int(spec["n_users"]))
        if kind == "cluster":
            return make_cluster_measure(
                K=int(spec["K"]), n_users=int(spec["n_users"]),
                nu=float(spec["nu"]), depth=int(spec.get("depth", 1)),
                seed=int(spec.get("seed", 0)),
            ).measure
        if kind == "user_cluster":
            return make_user_cluster_measure(
                K=int(spec["K"]), n_users=int(spec["n_users"]),
                nu=float(spec["nu"]), seed=int(spec.get("seed", 0)),
                like_mass=spec.get("like_mass"),
                flip_weight=spec.get("flip_weight"),
            ).measure
        raise ConfigError(f"unknown measure kind {kind!r}")
    raise ConfigError(f"bad measure spec {spec!r}")


def build_algo(config: dict) -> Recommender:
    name = config.get("algo")
    nu = float(config.get("nu", 0.1))
    if name == "random":
        return RandomRecommender()
    if name == "oracle":
        return OracleRecommender()
    if name == "user_user":
        return UserUserRecommender(
            k_clusters=int(config.get("k_clusters", 2)), nu=nu
        )
    if name == "item_item":
        return ItemItemCF(ItemItemConfig(
            d=float(config.get("d", 1.0)),
            nu=nu,
            scale=resolve_scale(config.get("scale")),
            epoch_failure=config.get("epoch_failure", "finish"),
            blocks_with_replacement=bool(
                config.get("blocks_with_replacement", False)
            ),
        ))
    raise ConfigError(f"unknown algorithm {name!r}")


def validate_config(config: dict) -> dict:
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    missing = [k for k in ("algo", "measure", "horizon") if k not in config]
    if missing:
        raise ConfigError(f"config missing keys: {', '.join(missing)}")
    if config["algo"] not in ("random", "oracle", "user_user", "item_item"):
        raise ConfigError(f"unknown algorithm {config['algo']!r}")
    horizon = config["horizon"]
    if not isinstance(horizon, int) or horizon < 0:
        raise ConfigError("horizon must be a nonnegative integer")
    seeds = config.get("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a list of integers")
    return config


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def build_run(config: dict, seed: int) -> tuple[Environment, Recommender]:
    measure = build_measure(config["measure"])
    env = Environment(measure, seed=seed)
    algo = build_algo(config).bind(env)
    return env, algo


def run_seed(
    config: dict,
    seed: int,
    out_dir: Optional[str] = None,
    keep_trace: bool = False,
) -> dict:
    """Execute one seeded run; returns curve arrays and optional artifacts."""
    env, algo = build_run(config, seed)
    horizon = int(config["horizon"])
    trace = run(env, algo, horizon)
    stride = int(config.get("stride") or max(1, env.n_users // 10))
    curve = regret(trace, stride=stride)
    result = {
        "seed": seed,
        "algo": algo.algo_id,
        "t_grid": curve.t_grid,
        "r": curve.r,
        "n_users": env.n_users,
        "n_items": env.n_items(),
        "bad_count": env.bad_count,
    }
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        trace_path = os.path.join(out_dir, f"trace_seed{seed}.csv")
        trace.to_csv(trace_path)
        manifest = {
            "version": __version__,
            "seed": seed,
            "config": _portable_config(config),
            "config_hash": config_hash(_portable_config(config)),
        }
        with open(os.path.join(out_dir, f"manifest_seed{seed}.json"), "w") as fh:
            json.dump(manifest, fh, indent=2)
        result["trace_path"] = trace_path
    if keep_trace:
        result["trace"] = trace
    return result


def _portable_config(config: dict) -> dict:
    """Config with live objects replaced by their serializable forms."""
    out = dict(config)
    measure = config.get("measure")
    if isinstance(measure, ItemMeasure):
        out["measure"] = measure_to_json(measure)
    scale = config.get("scale")
    if isinstance(scale, ScaleConfig):
        out["scale"] = asdict(scale)
    return out


def _worker(payload):
    config, seed, out_dir = payload
    res = run_seed(config, seed, out_dir=out_dir)
    return {
        "seed": res["seed"], "algo": res["algo"],
        "t_grid": np.asarray(res["t_grid"]), "r": np.asarray(res["r"]),
        "n_users": res["n_users"], "n_items": res["n_items"],
    }


def run_many(
    config: dict,
    seeds: Optional[list[int]] = None,
    out_dir: Optional[str] = None,
    workers: int = 1,
) -> list[RegretCurve]:
    """Run every seed (optionally in a bounded worker pool) and collect curves."""
    config = validate_config(dict(config))
    seeds = config.get("seeds", [0]) if seeds is None else seeds
    portable = _portable_config(config)
    payloads = [(portable, s, out_dir) for s in seeds]
    if workers <= 1 or len(seeds) <= 1:
        results = [_worker(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker, payloads))
    return [
        RegretCurve(
            t_grid=r["t_grid"], r=r["r"], n_users=r["n_users"],
            seed=r["seed"], algo_id=r["algo"],
        )
        for r in results
    ]
