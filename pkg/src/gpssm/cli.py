"""Command-line driver: simulate, learn, predict, evaluate, bench.

Every command exits 0 on success. On failure it prints one JSON error
record to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import benchmark as bm
from .io import ConfigError, load_config, read_dataset, write_dataset, write_json
from .kernels import HyperPriors, LogNormalPrior
from .pgas import PgasConfig, chain_diagnostics, read_chain, run_pgas
from .predict import (
    align_sign,
    mode_fractions,
    predictive_mixture,
    rmse_prediction,
    rmse_smoothing,
    thin_chain,
    write_predictions_csv,
)

log = logging.getLogger("gpssm")

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def _model_and_spec(cfg):
    spec = bm.BenchmarkSpec(**cfg["benchmark"])
    priors = bm.default_priors()
    for name, p in cfg["priors"].items():
        if name not in priors:
            raise ConfigError(f"priors.{name}", "not a hyperparameter of the benchmark model")
        cur = priors[name]
        priors[name] = LogNormalPrior(p.get("median", cur.median), p.get("log_sd", cur.log_sd))
    return spec, bm.benchmark_model(spec, HyperPriors(priors))


def _pgas_config(cfg) -> PgasConfig:
    try:
        return PgasConfig(**cfg["pgas"])
    except ValueError as exc:
        raise ConfigError("pgas", str(exc)) from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    overrides = {
        "seed": args.seed, "n_particles": args.particles, "n_iterations": args.iterations,
        "burn_in": args.burn_in, "prior": args.prior, "n_inducing": args.m,
    }
    return load_config(args.config, overrides)


def cmd_simulate(args, cfg):
    spec, _ = _model_and_spec(cfg)
    seed = cfg["pgas"].get("seed", 0)
    train, test = spec.datasets(seed)
    out = _out_dir(args)
    write_dataset(out / "train.csv", train)
    write_dataset(out / "test.csv", test)
    return {"train": str(out / "train.csv"), "test": str(out / "test.csv"), "seed": seed}


def cmd_learn(args, cfg):
    _, model = _model_and_spec(cfg)
    config = _pgas_config(cfg)
    if config.prior == "fic" and config.inducing_bounds is None and config.inducing_strategy == "grid":
        config.inducing_bounds = [[-20.0, 20.0], [-1.0, 1.0]]
    data = read_dataset(args.data)
    out = _out_dir(args)
    chain_path = out / "chain.jsonl"

    def report(s):
        print(json.dumps({"iteration": s.iteration, "log_joint": round(s.log_joint, 4),
                          "seconds": round(s.seconds, 4)}), flush=True)

    chain = run_pgas(model, data, config, chain_path=chain_path, callback=report)
    diag = chain_diagnostics(chain, config.burn_in)
    write_json(out / "diagnostics.json", diag)
    return {"chain": str(chain_path), "n_samples": len(chain)}


def _post_burn_in(args, cfg, model):
    chain = read_chain(args.chain, model)
    burn = cfg["pgas"].get("burn_in", PgasConfig.burn_in)
    if burn >= len(chain):
        raise ConfigError("pgas.burn_in", f"burn-in {burn} leaves no samples of {len(chain)}")
    post = chain[burn:]
    keep = cfg.get("keep")
    if keep is not None:
        if not 1 <= keep <= len(post):
            raise ConfigError("keep", f"must be in [1, {len(post)}]")
        post = thin_chain(post, keep, seed=cfg["pgas"].get("seed", 0))
    return post


def cmd_predict(args, cfg):
    _, model = _model_and_spec(cfg)
    train = read_dataset(args.data)
    post = _post_burn_in(args, cfg, model)
    xs = np.linspace(args.x_min, args.x_max, args.nx)
    us = np.linspace(args.u_min, args.u_max, args.nu)
    X, U = np.meshgrid(xs, us, indexing="ij")
    x_star, u_star = X.reshape(-1, 1), U.reshape(-1, 1)
    mix = predictive_mixture(model, post, train.inputs, x_star, u_star)
    out = _out_dir(args)
    write_predictions_csv(out / "predictions.csv", x_star, u_star, mix, components=args.components)
    return {"predictions": str(out / "predictions.csv"), "n_points": int(x_star.shape[0])}


def cmd_evaluate(args, cfg):
    spec, model = _model_and_spec(cfg)
    train = read_dataset(args.data)
    test = read_dataset(args.test)
    post = _post_burn_in(args, cfg, model)
    report = {
        "rmse_prediction": rmse_prediction(model, post, train.inputs, test),
        "rmse_smoothing": rmse_smoothing(post, train.states),
        "n_samples": len(post),
        "seed": cfg["pgas"].get("seed", 0),
    }
    if model.is_sign_symmetric and train.states is not None:
        aligned = align_sign(post, train.states)
        report["rmse_prediction_aligned"] = rmse_prediction(model, aligned, train.inputs, test)
        report["rmse_smoothing_aligned"] = rmse_smoothing(aligned, train.states)
        report["max_minor_mode_fraction"] = float(mode_fractions(aligned).max())
    report["baselines"] = bm.evaluate_baselines(spec, train, test)
    out = _out_dir(args)
    write_json(out / "report.json", report)
    return report


def cmd_bench(args, cfg):
    spec, model = _model_and_spec(cfg)
    out = _out_dir(args)
    priors = [args.prior] if args.prior else ["dense", "fic"]
    summary = {}
    for prior in priors:
        pcfg = dict(cfg["pgas"], prior=prior)
        if prior == "fic":
            pcfg.setdefault("inducing_bounds", [[-20.0, 20.0], [-1.0, 1.0]])
        config = _pgas_config({"pgas": pcfg})
        summary[prior] = bm.run_protocol(
            spec, config, model=model, test_points=cfg.get("test_points"),
            n_jobs=args.jobs or cfg.get("n_jobs", 1),
            callback=lambda r: print(json.dumps(r.to_dict(), default=float), flush=True),
        )
    write_json(out / "bench.json", summary)
    return {prior: {k: summary[prior][k] for k in ("rmse_prediction", "rmse_smoothing")}
            for prior in summary}


COMMANDS = {
    "simulate": cmd_simulate,
    "learn": cmd_learn,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--particles", type=int)
    common.add_argument("--iterations", type=int)
    common.add_argument("--burn-in", type=int, dest="burn_in")
    common.add_argument("--prior", choices=["dense", "fic"])
    common.add_argument("--m", type=int, help="number of inducing inputs for --prior fic")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gpssm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write benchmark train/test CSVs")
    s = sub.add_parser("learn", parents=[common], help="run PGAS on a dataset")
    s.add_argument("data")
    s = sub.add_parser("predict", parents=[common], help="predictive mixture on a grid")
    s.add_argument("chain")
    s.add_argument("data", help="training dataset the chain was learned on")
    s.add_argument("--x-min", type=float, default=-20.0)
    s.add_argument("--x-max", type=float, default=20.0)
    s.add_argument("--nx", type=int, default=81)
    s.add_argument("--u-min", type=float, default=-1.0)
    s.add_argument("--u-max", type=float, default=1.0)
    s.add_argument("--nu", type=int, default=21)
    s.add_argument("--components", action="store_true", help="also write per-sample moments")
    s = sub.add_parser("evaluate", parents=[common], help="RMSE report with baselines")
    s.add_argument("chain")
    s.add_argument("data", help="training dataset (with ground-truth states)")
    s.add_argument("test", help="test dataset with true f values")
    s = sub.add_parser("bench", parents=[common], help="full repeated benchmark protocol")
    s.add_argument("--jobs", type=int, help="repeats run in this many worker processes")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = _load(args)
        result = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        _error(args.command, "config", str(exc), key=exc.key)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        _error(args.command, type(exc).__name__, str(exc))
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable record
        _error(args.command, type(exc).__name__, str(exc))
        return EXIT_RUNTIME
    print(json.dumps({"status": "ok", "command": args.command,
                      "seconds": round(time.perf_counter() - t0, 3), "result": result},
                     default=float))
    return 0


def _error(command, kind, message, **extra):
    rec = {"status": "error", "command": command, "error": kind, "message": message}
    rec.update(extra)
    print(json.dumps(rec), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
