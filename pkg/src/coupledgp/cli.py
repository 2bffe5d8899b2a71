"""Command-line entry point: ``coupledgp <subcommand>``.

Subcommands mirror the experiment stages; ``run-all`` chains them from a
config file. Files exchanged between stages live in ``--out``:

    data.csv         x1,x2,y
    truth.csv        f1,f2 (noiseless latents, from ``generate``)
    hypers.json      fitted kernel hyperparameters and noise level
    state_<model>_<M>.json   trained variational posteriors
    evaluation.json  metrics and per-point arrays
    report.csv / report.json
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .exact import fit_hyperparameters
from .experiment import (
    ExperimentConfig,
    ExperimentReport,
    emit_report,
    evaluate_models,
    generate_toy,
    hypers_from_dict,
    hypers_to_dict,
    load_report,
    model_name,
    read_dataset,
    run_experiment,
    state_from_dict,
    state_to_dict,
    train_variational,
    write_dataset,
)
from .kernels import SqExpHyper
from .training import TrainConfig

logger = logging.getLogger("coupledgp")

_CONFIG_TYPES = {
    "seed": int,
    "n": int,
    "noise_std": float,
    "iterations": int,
    "learning_rate": float,
    "final_learning_rate": float,
    "batch_size": int,
    "n_mc": int,
    "n_holdout": int,
    "init_variance": float,
    "init_lengthscale": float,
    "init_noise_std": float,
    "restarts": int,
    "out": str,
    "format": str,
}
_CONFIG_BOOLS = {"optimize_inducing", "whitened", "holdout"}
_CONFIG_LISTS = {"m": int, "models": str}


def read_config(path) -> dict:
    """Parse an INI file with an ``[experiment]`` section of key = value lines.

    List-valued keys (``m``, ``models``) are comma separated; ``none`` clears
    an optional value.
    """
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    if not parser.has_section("experiment"):
        raise ValueError(f"{path}: missing [experiment] section")
    section = parser["experiment"]
    out = {}
    for key, raw in section.items():
        if key in _CONFIG_BOOLS:
            out[key] = section.getboolean(key)
        elif key in _CONFIG_LISTS:
            out[key] = tuple(_CONFIG_LISTS[key](v.strip()) for v in raw.split(",") if v.strip())
        elif key in _CONFIG_TYPES:
            out[key] = None if raw.strip().lower() == "none" else _CONFIG_TYPES[key](raw)
        else:
            raise ValueError(f"{path}: unknown key {key!r}")
    return out


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_hypers(path):
    d = json.loads(Path(path).read_text())
    return hypers_from_dict(d)


def cmd_generate(args):
    out = _out_dir(args)
    data, F = generate_toy(args.seed, args.n, args.noise_std)
    write_dataset(out / "data.csv", data)
    np.savetxt(out / "truth.csv", F, delimiter=",", header="f1,f2", comments="", fmt="%.17g")
    print(out / "data.csv")


def cmd_fit_hypers(args):
    out = _out_dir(args)
    data = read_dataset(args.data or out / "data.csv")
    init = [SqExpHyper.create(args.init_variance, args.init_lengthscale)] * data.num_latents
    fit = fit_hyperparameters(
        np.asarray(data.X), np.asarray(data.y), init, args.init_noise_std, restarts=args.restarts, seed=args.seed
    )
    path = out / "hypers.json"
    path.write_text(json.dumps(hypers_to_dict(fit.hypers, fit.noise_std, fit.log_evidence), indent=1) + "\n")
    print(f"log evidence {fit.log_evidence:.6f}; noise std {fit.noise_std:.6f}")


def _kinds(models, allowed=("coupled", "mf")):
    kinds = models or list(allowed)
    return [k for k in kinds if k in allowed]


def cmd_train(args):
    out = _out_dir(args)
    data = read_dataset(args.data or out / "data.csv")
    hypers, noise = _load_hypers(args.hypers or out / "hypers.json")
    config = TrainConfig(
        iterations=args.iters,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        n_mc=args.n_mc,
        seed=args.seed,
    )
    for kind in _kinds(args.model):
        for m in args.m or [10, 30]:
            if m < 1:
                raise SystemExit(f"--m must be >= 1, got {m}")
            t0 = time.perf_counter()
            result, _ = train_variational(data, hypers, noise, kind, m, config)
            payload = state_to_dict(result.state)
            payload["best_elbo"] = result.best_elbo
            payload["trace"] = [list(t) for t in result.trace]
            path = out / f"state_{kind}_{m}.json"
            path.write_text(json.dumps(payload) + "\n")
            print(f"{model_name(kind, m)}: bound {result.best_elbo:.4f} ({time.perf_counter() - t0:.1f}s) -> {path}")


def cmd_evaluate(args):
    out = _out_dir(args)
    data = read_dataset(args.data or out / "data.csv")
    hypers, noise = _load_hypers(args.hypers or out / "hypers.json")
    kinds = args.model or ["exact", "coupled", "mf"]
    states = {}
    for kind in _kinds(kinds):
        for path in sorted(out.glob(f"state_{kind}_*.json"), key=lambda p: int(p.stem.rsplit("_", 1)[1])):
            m = int(path.stem.rsplit("_", 1)[1])
            if args.m and m not in args.m:
                continue
            states[model_name(kind, m)] = state_from_dict(json.loads(path.read_text()))
    holdout = generate_toy(args.seed + 1, data.n)[0] if args.holdout else None
    report = ExperimentReport(metadata={"n": data.n, "seed": args.seed})
    evaluate_models(data, hypers, noise, states, "exact" in kinds, holdout, report)
    (out / "evaluation.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    for r in report.rows:
        print(f"{r.model}: rmse {r.rmse:.4f}  corr {r.mean_corr:.4f}  -bound {r.neg_bound:.3f}")


def cmd_report(args):
    out = _out_dir(args)
    report = load_report(out / "evaluation.json")
    for p in emit_report(report, out, args.format):
        print(p)


def cmd_run_all(args):
    values = read_config(args.config) if args.config else {}
    overrides = {
        "seed": args.seed,
        "n": args.n,
        "m": tuple(args.m) if args.m else None,
        "models": tuple(args.model) if args.model else None,
        "iterations": args.iters,
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "holdout": True if args.holdout else None,
        "out": args.out,
        "format": args.format,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    config = ExperimentConfig(**values)
    report = run_experiment(config, config.out)
    for r in report.rows:
        print(
            f"{r.model:10s} rmse {r.rmse:.4f}  sd(sum) {r.sqrt_mean_var_sum:.4f}  "
            f"corr {r.mean_corr:+.4f}  sd(diff) {r.sqrt_mean_var_diff:.4f}  -bound {r.neg_bound:.3f}"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coupledgp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default="results"):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=out_default)

    p = sub.add_parser("generate", help="sample the toy additive dataset")
    common(p)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--noise-std", type=float, default=0.5)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit-hypers", help="maximize the exact evidence over hyperparameters")
    common(p)
    p.add_argument("--data")
    p.add_argument("--init-variance", type=float, default=1.0)
    p.add_argument("--init-lengthscale", type=float, default=1.0)
    p.add_argument("--init-noise-std", type=float, default=1.0)
    p.add_argument("--restarts", type=int, default=3)
    p.set_defaults(func=cmd_fit_hypers)

    def training_flags(p):
        p.add_argument("--data")
        p.add_argument("--hypers")
        p.add_argument("--model", action="append", choices=["exact", "mf", "coupled"])
        p.add_argument("--m", action="append", type=int)

    p = sub.add_parser("train", help="train variational posteriors with hypers held fixed")
    common(p)
    training_flags(p)
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-mc", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compute metrics for the exact model and trained states")
    common(p)
    training_flags(p)
    p.add_argument("--holdout", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="write report.csv / report.json from evaluation.json")
    p.add_argument("--out", default="results")
    p.add_argument("--format", choices=["csv", "json", "both"], default="both")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run-all", help="full pipeline from a config file")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--m", action="append", type=int)
    p.add_argument("--model", action="append", choices=["exact", "mf", "coupled"])
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--holdout", action="store_true")
    p.add_argument("--out")
    p.add_argument("--format", choices=["csv", "json", "both"])
    p.set_defaults(func=cmd_run_all)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
