"""Command-line front end: simulate, fit, decode, eval, compare.

Every command takes a JSON spec describing inputs and settings; all
randomness flows from explicit seeds, so a command re-run with the same
spec and seeds writes identical bytes (wall-clock-budgeted fits excepted,
since their iteration counts depend on the machine).

Exit codes: 0 success, 1 domain or estimation error, 2 I/O or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .estimation import EMMonotonicityError, FitConfig, FitTrace, fit
from .evalmetrics import (EvalReport, aggregate, location_error,
                          location_error_points, weight_distance)
from .features import FeatureSet, ZoneMap, single_distance_feature
from .grid import GridSpec, TowerSpec
from .inference import forward_backward, viterbi
from .model import ModelParams
from .scenario import ScenarioDir, read_path_csv, write_path_csv, write_scenario
from .synth import SynthSpec, make_scenario

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_CONFIG = 2


class ConfigError(Exception):
    """Bad or missing input file or setting (exit code 2)."""


def _load_spec(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"spec file {p} not found")
    try:
        with open(p, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"spec file {p} is not valid JSON: {e}") from e


def _parse_seeds(text: str) -> list[int]:
    """Parse ``a..b`` (inclusive) or a comma-separated list."""
    text = text.strip()
    if ".." in text:
        a, b = text.split("..", 1)
        lo, hi = int(a), int(b)
        if hi < lo:
            raise ConfigError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(s) for s in text.split(",") if s]


def _synth_spec_from_json(cfg: dict, base: Path, seed=None) -> SynthSpec:
    g = cfg["grid"]
    mask = None
    if g.get("mask"):
        mpath = Path(g["mask"])
        if not mpath.is_absolute():
            mpath = base / mpath
        if not mpath.is_file():
            raise ConfigError(f"mask file {mpath} not found")
        mask = np.loadtxt(mpath, delimiter=",", dtype=int, ndmin=2) != 0
    grid = GridSpec(origin=g["origin"], cell_size=g["cell_size"],
                    n_rows=g["n_rows"], n_cols=g["n_cols"],
                    move_radius=g["move_radius"], valid_mask=mask)
    towers = [TowerSpec(id=int(t["id"]), position=(float(t["x"]), float(t["y"])))
              for t in cfg["towers"]]
    return SynthSpec(
        grid=grid, towers=towers,
        n_features=int(cfg["n_features"]), n_steps=int(cfg["n_steps"]),
        true_mu=np.asarray(cfg["true_mu"], dtype=float),
        true_kappa=np.asarray(cfg["true_kappa"], dtype=float),
        seed=int(cfg["seed"] if seed is None else seed),
        weight_range=tuple(cfg.get("weight_range", (-10.0, 10.0))),
        feature_range=tuple(cfg.get("feature_range", (0.0, 1.0))),
        dropout=float(cfg.get("dropout", 0.0)),
    )


def cmd_simulate(args) -> int:
    cfg = _load_spec(args.spec)
    base = Path(args.spec).parent
    out = Path(args.out or "scenario")
    seeds = _parse_seeds(args.seeds) if args.seeds else [None]
    for seed in seeds:
        spec = _synth_spec_from_json(cfg, base, seed=seed)
        sc = make_scenario(spec)
        target = out if seed is None else out / f"seed_{seed}"
        write_scenario(target, sc)
        print(f"scenario {target}: |Q|={spec.grid.n_states} T={spec.n_steps} "
              f"K={spec.n_features} N={len(spec.towers)} seed={spec.seed}")
    return EXIT_OK


def _zone_map(cfg: dict) -> ZoneMap | None:
    z = cfg.get("zones")
    return ZoneMap.from_config(z) if z else None


def _init_params(cfg: dict, fs: FeatureSet, n_towers: int) -> ModelParams:
    init = cfg.get("init", {})
    if "params" in init:
        p = Path(init["params"])
        if not p.is_file():
            raise ConfigError(f"init params file {p} not found")
        return ModelParams.load(p)
    lam0 = float(init.get("lambda", 0.0))
    mu0 = float(init.get("mu", 0.0))
    kappa0 = float(init.get("kappa", 0.0))
    return ModelParams(np.full((fs.n_zones, fs.n_features), lam0),
                       np.full(n_towers, mu0), np.full(n_towers, kappa0))


def _fit_config(cfg: dict, algo: str, seed: int,
                init_params: ModelParams) -> FitConfig:
    max_time = cfg.get("max_time")
    max_iters = cfg.get("max_iters")
    return FitConfig(
        algo=algo, init_params=init_params,
        max_time=None if max_time is None else float(max_time),
        max_iters=None if max_iters is None else int(max_iters),
        num_burn=int(cfg["num_burn"]) if algo == "sg" else None,
        seed=seed, trace_every=int(cfg.get("trace_every", 1)),
        c1=float(cfg.get("c1", 1e-4)), c2=float(cfg.get("c2", 0.9)),
    )


def _write_fit_outputs(out: Path, params: ModelParams, trace: FitTrace) -> None:
    out.mkdir(parents=True, exist_ok=True)
    params.save(out / "params.json")
    trace.to_csv(out / "trace.csv")
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    for row in trace.rows:
        row.params.save(ck / f"iter_{row.iteration:06d}.json")


def cmd_fit(args) -> int:
    cfg = _load_spec(args.spec)
    sc = ScenarioDir(cfg["scenario"], zone_map=_zone_map(cfg))
    algo = args.algo or cfg.get("algo", "em")
    seeds = (_parse_seeds(args.seeds) if args.seeds
             else [int(s) for s in cfg.get("seeds", [cfg.get("seed", 0)])])
    out = Path(args.out or "fit_out")
    init = _init_params(cfg, sc.features, len(sc.towers))
    rows = []
    for seed in seeds:
        fc = _fit_config(cfg, algo, seed, init)
        params, trace = fit(fc, sc.features, sc.towers, sc.obs)
        _write_fit_outputs(out / f"seed_{seed}", params, trace)
        rows.append((seed, trace.iterations, trace.rows[-1].objective))
        print(f"fit {algo} seed={seed}: iterations={trace.iterations} "
              f"objective={trace.rows[-1].objective!r}")
    with open(out / "summary.csv", "w", encoding="utf-8") as f:
        f.write("seed,algo,iterations,final_objective\n")
        for seed, iters, obj in rows:
            f.write(f"{seed},{algo},{iters},{obj!r}\n")
    return EXIT_OK


def _check_dims(params: ModelParams, fs: FeatureSet, n_towers: int) -> None:
    if params.n_features != fs.n_features:
        raise ValueError(f"params have {params.n_features} features, "
                         f"scenario has {fs.n_features}")
    if params.n_towers != n_towers:
        raise ValueError(f"params have {params.n_towers} towers, "
                         f"scenario has {n_towers}")
    if params.n_zones != fs.n_zones:
        raise ValueError(f"params have {params.n_zones} zones, "
                         f"zone map has {fs.n_zones}")


def cmd_decode(args) -> int:
    cfg = _load_spec(args.spec)
    sc = ScenarioDir(cfg["scenario"], zone_map=_zone_map(cfg))
    ppath = Path(cfg["params"])
    if not ppath.is_file():
        raise ConfigError(f"params file {ppath} not found")
    params = ModelParams.load(ppath)
    _check_dims(params, sc.features, len(sc.towers))
    out = Path(args.out or "decode_out")
    out.mkdir(parents=True, exist_ok=True)
    mode = cfg.get("mode", "viterbi")
    if mode == "viterbi":
        path = viterbi(params, sc.features, sc.towers, sc.obs)
    elif mode == "marginal":
        tables = forward_backward(params, sc.features, sc.towers, sc.obs)
        path = np.argmax(tables.log_gamma, axis=1)
    else:
        raise ConfigError(f"unknown decode mode {mode!r}")
    write_path_csv(path, sc.grid, out / "path.csv")
    if cfg.get("dump_marginals"):
        tables = forward_backward(params, sc.features, sc.towers, sc.obs)
        tables.dump_marginals(out / "marginals.csv")
    print(f"decoded {len(path)} steps -> {out / 'path.csv'}")
    return EXIT_OK


def _evaluate(sc: ScenarioDir, est_path: np.ndarray,
              params: ModelParams | None) -> EvalReport:
    truth = sc.true_path
    if truth is not None:
        err = location_error(est_path, truth, sc.grid)
    else:
        gps = sc.gps
        if gps is None:
            raise ValueError("scenario has neither true_path.csv nor gps.csv")
        err = location_error_points(est_path, gps, sc.grid)
    loglik = float("nan")
    wdist = None
    if params is not None:
        _check_dims(params, sc.features, len(sc.towers))
        loglik = forward_backward(params, sc.features, sc.towers, sc.obs).loglik
        tp = sc.true_params
        if tp is not None and tp.lam.shape == params.lam.shape:
            wdist = weight_distance(params.lam, tp.lam)
    return EvalReport(mean_location_error=err, observed_loglik=loglik,
                      weight_l2_distance=wdist)


def cmd_eval(args) -> int:
    cfg = _load_spec(args.spec)
    sc = ScenarioDir(cfg["scenario"], zone_map=_zone_map(cfg))
    ppath = Path(cfg["path"])
    if not ppath.is_file():
        raise ConfigError(f"decoded path {ppath} not found")
    est = read_path_csv(ppath)
    params = None
    if cfg.get("params"):
        pfile = Path(cfg["params"])
        if not pfile.is_file():
            raise ConfigError(f"params file {pfile} not found")
        params = ModelParams.load(pfile)
    report = _evaluate(sc, est, params)
    out = Path(args.out or "eval_out")
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    with open(out / "report.csv", "w", encoding="utf-8") as f:
        f.write(EvalReport.csv_header() + "\n" + report.csv_row() + "\n")
    print(f"eval: location_error={report.mean_location_error!r} "
          f"loglik={report.observed_loglik!r}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_spec(args.spec)
    sc = ScenarioDir(cfg["scenario"], zone_map=_zone_map(cfg))
    configs = cfg.get("configs")
    if not configs or len(configs) < 1:
        raise ConfigError("compare needs a non-empty configs list")
    seeds = (_parse_seeds(args.seeds) if args.seeds
             else [int(s) for s in cfg.get("seeds", [0])])
    out = Path(args.out or "compare_out")
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for c in configs:
        label = c.get("label", c["algo"])
        if c.get("features") == "distance":
            fs = single_distance_feature(sc.grid)
        else:
            fs = sc.features
        init = _init_params({**cfg, **c}, fs, len(sc.towers))
        reports = []
        for seed in seeds:
            fc = _fit_config(c, c["algo"], seed, init)
            params, trace = fit(fc, fs, sc.towers, sc.obs)
            est = viterbi(params, fs, sc.towers, sc.obs)
            truth = sc.true_path
            if truth is not None:
                err = location_error(est, truth, sc.grid)
            else:
                err = location_error_points(est, sc.gps or {}, sc.grid)
            tp = sc.true_params
            wdist = (weight_distance(params.lam, tp.lam)
                     if tp is not None and tp.lam.shape == params.lam.shape
                     else None)
            rep = EvalReport(mean_location_error=err,
                             observed_loglik=trace.rows[-1].objective,
                             weight_l2_distance=wdist)
            reports.append(rep)
            results.append({"label": label, "seed": seed,
                            "iterations": trace.iterations, **rep.to_json()})
        agg = aggregate(reports)
        results.append({"label": label, "seed": "mean",
                        "iterations": None, **agg.to_json()})
    with open(out / "compare.csv", "w", encoding="utf-8") as f:
        f.write("label,seed,iterations," + EvalReport.csv_header() + "\n")
        for r in results:
            it = "" if r["iterations"] is None else r["iterations"]
            w = ("" if r["weight_l2_distance"] is None
                 else repr(r["weight_l2_distance"]))
            f.write(f"{r['label']},{r['seed']},{it},"
                    f"{r['mean_location_error']!r},{w},"
                    f"{r['observed_loglik']!r}\n")
    with open(out / "compare.json", "w", encoding="utf-8") as f:
        json.dump(results, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"compare: {len(configs)} configs x {len(seeds)} seeds -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="telemovr",
        description="Feature-based state space model toolkit for "
                    "radio-telemetry tracking")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, func in (("simulate", cmd_simulate), ("fit", cmd_fit),
                       ("decode", cmd_decode), ("eval", cmd_eval),
                       ("compare", cmd_compare)):
        p = sub.add_parser(name)
        p.add_argument("--spec", required=True, help="JSON spec file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seeds", help="seed range a..b or comma list")
        p.add_argument("--algo", choices=("em", "sg"),
                       help="override the spec's algorithm")
        p.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, OSError, KeyError) as e:
        print(f"config/io error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, EMMonotonicityError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
