"""Toy conjugate additive experiment: data, metrics, pipeline and reports."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import jax.numpy as jnp
import numpy as np

from .exact import AdditiveExactModel, exact_log_evidence, exact_pointwise, fit_hyperparameters
from .kernels import SqExpHyper
from .likelihoods import Gaussian
from .sparse import InducingSet, project
from .training import Dataset, ModelState, TrainConfig, elbo, initial_state, optimize
from .variational import CoupledGaussian, MeanFieldGaussian, predictive_marginals

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["model", "rmse", "sqrt_mean_var_sum", "mean_corr", "sqrt_mean_var_diff", "neg_bound"]
DATA_COLUMNS = ["x1", "x2", "y"]


class DegenerateVariance(ValueError):
    """A marginal posterior variance is too small for a correlation to be defined."""


def true_latents(X):
    X = np.asarray(X, dtype=float)
    return np.stack([np.sin(X[:, 0]) ** 3, np.cos(3.0 * X[:, 1])], axis=1)


def generate_toy(seed: int = 0, n: int = 500, noise_std: float = 0.5):
    """x1, x2 ~ U[-3, 3]; y = sin(x1)^3 + cos(3 x2) + N(0, noise_std^2).

    Returns the dataset and the noiseless latent values, shape (n, 2).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-3.0, 3.0, size=(n, 2))
    noise = rng.standard_normal(n)
    F = true_latents(X)
    y = F.sum(axis=1) + noise_std * noise
    return Dataset.create(X, y), F


@dataclass
class MetricsRow:
    model: str
    rmse: float
    sqrt_mean_var_sum: float
    mean_corr: float
    sqrt_mean_var_diff: float
    neg_bound: float


def pointwise_stats(cov):
    """Per-point var(f1 + f2), var(f1 - f2) and correlation from (N, 2, 2) blocks."""
    cov = np.asarray(cov, dtype=float)
    v1, v2, c12 = cov[:, 0, 0], cov[:, 1, 1], cov[:, 0, 1]
    if np.any(v1 < 1e-12) or np.any(v2 < 1e-12):
        raise DegenerateVariance("marginal variance below 1e-12; correlation undefined")
    return v1 + v2 + 2 * c12, v1 + v2 - 2 * c12, c12 / np.sqrt(v1 * v2)


def compute_metrics(model: str, mean, cov, y, neg_bound: float) -> MetricsRow:
    mean = np.asarray(mean, dtype=float)
    if mean.shape[1] != 2:
        raise ValueError("metrics are defined for two latents")
    var_sum, var_diff, corr = pointwise_stats(cov)
    resid = np.asarray(y, dtype=float) - mean.sum(axis=1)
    return MetricsRow(
        model=model,
        rmse=float(np.sqrt(np.mean(resid**2))),
        sqrt_mean_var_sum=float(np.sqrt(np.mean(var_sum))),
        mean_corr=float(np.mean(corr)),
        sqrt_mean_var_diff=float(np.sqrt(np.mean(var_diff))),
        neg_bound=float(neg_bound),
    )


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)
    holdout_rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    # model name -> {"mean", "std", "corr", and "inducing" for variational models}
    per_point: dict = field(default_factory=dict)
    failure: str | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        return json.loads(json.dumps(out, default=_jsonable))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(
            rows=[MetricsRow(**r) for r in d.get("rows", [])],
            holdout_rows=[MetricsRow(**r) for r in d.get("holdout_rows", [])],
            metadata=d.get("metadata", {}),
            per_point=d.get("per_point", {}),
            failure=d.get("failure"),
        )

    def row(self, model: str) -> MetricsRow:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)


def _jsonable(x):
    if isinstance(x, (np.ndarray, jnp.ndarray)):
        return np.asarray(x).tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"cannot serialize {type(x)}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    n: int = 500
    m: tuple = (10, 30)
    noise_std: float = 0.5
    iterations: int = 5000
    learning_rate: float = 1e-2
    final_learning_rate: float | None = None
    batch_size: int | None = None
    n_mc: int = 1
    optimize_inducing: bool = True
    whitened: bool = True
    holdout: bool = False
    n_holdout: int = 500
    init_variance: float = 1.0
    init_lengthscale: float = 1.0
    init_noise_std: float = 1.0
    restarts: int = 3
    models: tuple = ("exact", "coupled", "mf")
    out: str = "results"
    format: str = "both"

    def __post_init__(self):
        self.m = tuple(int(v) for v in self.m)
        self.models = tuple(self.models)
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not self.m or any(v < 1 for v in self.m):
            raise ValueError(f"inducing counts must be >= 1, got {self.m}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.format not in ("csv", "json", "both"):
            raise ValueError(f"unknown format {self.format!r}")
        unknown = set(self.models) - {"exact", "coupled", "mf"}
        if unknown:
            raise ValueError(f"unknown models {sorted(unknown)}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations,
            learning_rate=self.learning_rate,
            final_learning_rate=self.final_learning_rate,
            batch_size=self.batch_size,
            n_mc=self.n_mc,
            seed=self.seed,
            optimize_inducing=self.optimize_inducing,
            whitened=self.whitened,
        )


def model_name(kind: str, m: int | None = None) -> str:
    return {"exact": "Exact", "coupled": f"VCGP[{m}]", "mf": f"MF[{m}]"}[kind]


# ---------------------------------------------------------------------------
# serialization of datasets, hyperparameters and trained states
# ---------------------------------------------------------------------------


def write_dataset(path, data: Dataset) -> None:
    X, y = np.asarray(data.X), np.asarray(data.y)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATA_COLUMNS)
        for (x1, x2), yi in zip(X, y):
            w.writerow([repr(float(x1)), repr(float(x2)), repr(float(yi))])


def read_dataset(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != DATA_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(DATA_COLUMNS)}, got {','.join(header)}")
        rows = [[float(v) for v in r] for r in reader if r]
    arr = np.array(rows, dtype=float).reshape(-1, 3)
    return Dataset.create(arr[:, :2], arr[:, 2])


def hypers_to_dict(hypers, noise_std: float, log_evidence: float | None = None) -> dict:
    return {
        "variance": [float(np.exp(h.log_variance)) for h in hypers],
        "lengthscale": [float(np.exp(h.log_lengthscale)) for h in hypers],
        "log_variance": [float(h.log_variance) for h in hypers],
        "log_lengthscale": [float(h.log_lengthscale) for h in hypers],
        "noise_std": float(noise_std),
        "log_evidence": log_evidence,
    }


def hypers_from_dict(d: dict):
    hypers = tuple(
        SqExpHyper(jnp.asarray(a, dtype=float), jnp.asarray(b, dtype=float))
        for a, b in zip(d["log_variance"], d["log_lengthscale"])
    )
    return hypers, float(d["noise_std"])


def state_to_dict(state: ModelState) -> dict:
    q = state.q
    if isinstance(q, MeanFieldGaussian):
        qd = {
            "kind": "mf",
            "means": [np.asarray(v).tolist() for v in q.means],
            "scale_offdiags": [np.asarray(v).tolist() for v in q.scale_offdiags],
            "scale_logdiags": [np.asarray(v).tolist() for v in q.scale_logdiags],
        }
    else:
        qd = {
            "kind": "coupled",
            "mean": np.asarray(q.mean).tolist(),
            "scale_offdiag": np.asarray(q.scale_offdiag).tolist(),
            "scale_logdiag": np.asarray(q.scale_logdiag).tolist(),
        }
    return {
        "hypers": hypers_to_dict(state.hypers, float("nan")),
        "inducing": [np.asarray(z).tolist() for z in state.inducing.locations],
        "q": qd,
    }


def state_from_dict(d: dict) -> ModelState:
    hypers, _ = hypers_from_dict(d["hypers"])
    inducing = InducingSet(tuple(jnp.asarray(z, dtype=float) for z in d["inducing"]))
    qd = d["q"]
    if qd["kind"] == "mf":
        q = MeanFieldGaussian(
            tuple(jnp.asarray(v, dtype=float) for v in qd["means"]),
            tuple(jnp.asarray(v, dtype=float).reshape(len(m), len(m)) for v, m in zip(qd["scale_offdiags"], qd["means"])),
            tuple(jnp.asarray(v, dtype=float) for v in qd["scale_logdiags"]),
        )
    else:
        D = len(qd["mean"])
        q = CoupledGaussian(
            jnp.asarray(qd["mean"], dtype=float),
            jnp.asarray(qd["scale_offdiag"], dtype=float).reshape(D, D),
            jnp.asarray(qd["scale_logdiag"], dtype=float),
        )
    return ModelState(hypers, inducing, q)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def exact_outputs(data: Dataset, hypers, noise_std: float, X_eval=None):
    model = AdditiveExactModel.build(np.asarray(data.X), np.asarray(data.y), hypers, noise_std)
    X_eval = np.asarray(data.X) if X_eval is None else np.asarray(X_eval)
    mean, cov = exact_pointwise(model, X_eval)
    return mean, cov, exact_log_evidence(model)


def variational_outputs(state: ModelState, X_eval):
    proj = project(state.inducing, state.hypers, jnp.asarray(X_eval))
    pred = predictive_marginals(state.q, proj)
    return np.asarray(pred.mean), np.asarray(pred.cov)


def _per_point(mean, cov, inducing=None) -> dict:
    _, _, corr = pointwise_stats(cov)
    out = {
        "mean": np.asarray(mean).tolist(),
        "std": np.sqrt(np.stack([cov[:, 0, 0], cov[:, 1, 1]], axis=1)).tolist(),
        "corr": np.asarray(corr).tolist(),
    }
    if inducing is not None:
        out["inducing"] = [np.asarray(z).tolist() for z in inducing.locations]
    return out


def train_variational(data, hypers, noise_std, kind, m, train_config: TrainConfig):
    spec = Gaussian.create(noise_std, (1.0, 1.0))
    state = initial_state(data, hypers, m, coupled=(kind == "coupled"))
    result = optimize(state, data, spec, train_config)
    return result, spec


def evaluate_models(
    data: Dataset,
    hypers,
    noise_std: float,
    states: dict,
    include_exact: bool = True,
    holdout: Dataset | None = None,
    report: ExperimentReport | None = None,
) -> ExperimentReport:
    """Metrics rows and per-point arrays for the exact model and trained states.

    ``states`` maps a model name such as ``"VCGP[30]"`` to its trained state.
    """
    report = ExperimentReport() if report is None else report
    spec = Gaussian.create(noise_std, (1.0, 1.0))
    y = np.asarray(data.y)
    if include_exact:
        mean, cov, logev = exact_outputs(data, hypers, noise_std)
        report.rows.append(compute_metrics("Exact", mean, cov, y, -logev))
        report.per_point["Exact"] = _per_point(mean, cov)
        if holdout is not None:
            hm, hc, _ = exact_outputs(data, hypers, noise_std, holdout.X)
            report.holdout_rows.append(compute_metrics("Exact", hm, hc, np.asarray(holdout.y), -logev))
    for name, state in states.items():
        bound = float(elbo(state, data, spec))
        mean, cov = variational_outputs(state, data.X)
        report.rows.append(compute_metrics(name, mean, cov, y, -bound))
        report.per_point[name] = _per_point(mean, cov, state.inducing)
        if holdout is not None:
            hm, hc = variational_outputs(state, holdout.X)
            report.holdout_rows.append(compute_metrics(name, hm, hc, np.asarray(holdout.y), -bound))
    return report


def _sort_rows(rows):
    def key(r):
        kind = 0 if r.model == "Exact" else 1 if r.model.startswith("VCGP") else 2
        m = int(r.model.split("[")[1].rstrip("]")) if "[" in r.model else 0
        return kind, m

    return sorted(rows, key=key)


def run_experiment(config: ExperimentConfig, out_dir=None) -> ExperimentReport:
    """Generate, fit hyperparameters, train, evaluate and (optionally) write the report.

    If a stage fails, whatever was computed is still written with the
    failure recorded, and the exception is re-raised.
    """
    t_start = time.perf_counter()
    report = ExperimentReport()
    report.metadata = {
        "seed": config.seed,
        "n": config.n,
        "m": list(config.m),
        "iterations": config.iterations,
        "learning_rate": config.learning_rate,
        "final_learning_rate": config.final_learning_rate,
        "batch_size": config.batch_size,
        "n_mc": config.n_mc,
        "noise_std_generating": config.noise_std,
        "wall_clock": {},
    }
    clock = report.metadata["wall_clock"]
    try:
        data, _ = generate_toy(config.seed, config.n, config.noise_std)
        holdout = generate_toy(config.seed + 1, config.n_holdout, config.noise_std)[0] if config.holdout else None

        t0 = time.perf_counter()
        init = [SqExpHyper.create(config.init_variance, config.init_lengthscale)] * 2
        fit = fit_hyperparameters(
            np.asarray(data.X), np.asarray(data.y), init, config.init_noise_std, restarts=config.restarts, seed=config.seed
        )
        clock["fit_hypers"] = time.perf_counter() - t0
        hypers = tuple(SqExpHyper(jnp.asarray(h.log_variance), jnp.asarray(h.log_lengthscale)) for h in fit.hypers)
        report.metadata["hypers"] = hypers_to_dict(hypers, fit.noise_std, fit.log_evidence)

        states = {}
        for kind in ("coupled", "mf"):
            if kind not in config.models:
                continue
            for m in config.m:
                name = model_name(kind, m)
                t0 = time.perf_counter()
                result, _ = train_variational(data, hypers, fit.noise_std, kind, m, config.train_config())
                clock[name] = time.perf_counter() - t0
                states[name] = result.state
                logger.info("%s: bound %.4f", name, result.best_elbo)

        evaluate_models(data, hypers, fit.noise_std, states, "exact" in config.models, holdout, report)
        report.rows = _sort_rows(report.rows)
        report.holdout_rows = _sort_rows(report.holdout_rows)
    except Exception as exc:
        report.failure = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        clock["total"] = time.perf_counter() - t_start
        if out_dir is not None:
            emit_report(report, out_dir, config.format)
    return report


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def write_report_csv(rows: Sequence[MetricsRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r.model] + [_fmt(getattr(r, c)) for c in REPORT_COLUMNS[1:]])


def emit_report(report: ExperimentReport, out_dir, fmt: str = "both") -> list:
    """Write report.csv and/or report.json into ``out_dir``; returns the paths."""
    if fmt not in ("csv", "json", "both"):
        raise ValueError(f"unknown format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    if fmt in ("csv", "both"):
        p = out / "report.csv"
        write_report_csv(report.rows, p)
        paths.append(p)
        if report.holdout_rows:
            p = out / "report_holdout.csv"
            write_report_csv(report.holdout_rows, p)
            paths.append(p)
    if fmt in ("json", "both"):
        p = out / "report.json"
        p.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        paths.append(p)
    return paths


def load_report(path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))


def strip_wall_clock(d: dict) -> dict:
    d = json.loads(json.dumps(d))
    d.get("metadata", {}).pop("wall_clock", None)
    return d
