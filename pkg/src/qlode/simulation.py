"""Synthetic data generation and replicated estimation studies."""

from __future__ import annotations

import csv
import io
import itertools
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bspline import build_basis, design_matrix
from .data import Dataset, format_float
from .errors import ConfigurationError, QlodeError
from .estimator import FitConfig, fit
from .models import OdeModel, StateCondition, get_model
from .reference import Trajectory, analytic_first_order, nls_fit, rk4_dense

__all__ = [
    "Variant",
    "StudyConfig",
    "ReplicateResult",
    "StudyReport",
    "truth_function",
    "generate_dataset",
    "rmse_metrics",
    "run_replicate",
    "run_study",
    "summarize",
]

SAMPLINGS = ("uniform", "equispaced")


def truth_function(model: OdeModel, theta, x0, T: float, n_steps: int | None = None):
    """Noiseless states as a callable ``times -> (n, d)``.

    The first-order example uses its closed form; every other model RK4.
    """
    theta = tuple(float(v) for v in theta)
    x0 = tuple(float(v) for v in np.atleast_1d(x0))
    if model.name == "first_order":
        return lambda t: analytic_first_order(t, theta, x0[0]).states
    return rk4_dense(model, theta, x0, (0.0, T), n_steps)


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def generate_dataset(model: OdeModel, theta, x0, N: int, noise_sd, domain, seed,
                     sampling: str = "uniform", observed=None, truth=None) -> Dataset:
    """Observe the true states of ``model`` at ``N`` times with Gaussian noise.

    Uniform sampling draws one sorted set of times shared by all observed
    states. ``seed`` is anything accepted by ``numpy.random.default_rng``
    (or a Generator).  ``truth`` may pass a precomputed ``truth_function``.
    """
    if sampling not in SAMPLINGS:
        raise ConfigurationError(f"sampling must be one of {SAMPLINGS}, got {sampling!r}")
    if N < 1:
        raise ConfigurationError("N must be >= 1")
    T = float(domain[1]) if np.ndim(domain) else float(domain)
    observed = tuple(model.observed if observed is None else observed)
    sd = np.broadcast_to(np.asarray(noise_sd, dtype=float), (len(observed),))
    if np.any(sd < 0):
        raise ConfigurationError("noise_sd must be non-negative")
    rng = _rng(seed)
    if sampling == "uniform":
        times = np.sort(rng.uniform(0.0, T, N))
    else:
        times = np.linspace(0.0, T, N)
    truth = truth or truth_function(model, theta, x0, T)
    states = truth(times)
    values = tuple(states[:, j] + sd[i] * rng.standard_normal(N) for i, j in enumerate(observed))
    return Dataset(observed, tuple(times for _ in observed), values)


def rmse_metrics(data: Dataset, truth, fitted, bases=None):
    """``(rmse_y, rmse_x)`` pooled over all observations of the observed states.

    ``truth`` is a callable ``times -> (n, d)`` or a Trajectory sampled at the
    (shared) observation times; ``fitted`` is a FitResult, a callable of the
    same form as ``truth``, or a stacked coefficient vector with its ``bases``.
    """
    if hasattr(fitted, "states"):
        fitted = fitted.states
    elif not callable(fitted):
        if bases is None:
            raise ConfigurationError("a coefficient vector needs its bases")
        fitted = _spline_states(np.asarray(fitted, dtype=float), bases)
    if isinstance(truth, Trajectory):
        traj = truth

        def truth(t):
            if t.shape != traj.times.shape or not np.allclose(t, traj.times):
                raise ConfigurationError("truth trajectory is not sampled at the observation times")
            return traj.states
    sq_y = sq_x = 0.0
    n = 0
    for j, t, y in zip(data.states, data.times, data.values):
        xt = fitted(t)[:, j]
        sq_y += float(np.sum((y - xt) ** 2))
        sq_x += float(np.sum((truth(t)[:, j] - xt) ** 2))
        n += t.size
    return np.sqrt(sq_y / n), np.sqrt(sq_x / n)


def _spline_states(alpha, bases):
    offsets = np.concatenate([[0], np.cumsum([b.K for b in bases])])
    if alpha.size != offsets[-1]:
        raise ConfigurationError(f"coefficient vector has length {alpha.size}, bases need {offsets[-1]}")

    def states(t):
        return np.column_stack([design_matrix(b, t) @ alpha[offsets[j]:offsets[j + 1]]
                                for j, b in enumerate(bases)])
    return states


@dataclass(frozen=True)
class Variant:
    """One estimator setting applied to every replicate."""

    method: str = "ql"  # ql | nls
    known_x0: bool = False
    strategy: str = "psmooth"
    init_scale: float = 1.0

    @property
    def label(self) -> str:
        name = self.method + ("-known" if self.known_x0 else "")
        if self.method == "ql":
            name += f"[{self.strategy}]"
        if self.init_scale != 1.0:
            name += f"@{self.init_scale:g}"
        return name


@dataclass
class StudyConfig:
    model: str
    theta: tuple[float, ...]
    x0: tuple[float, ...]
    noise_sd: float
    T: float
    n_internal: int
    order: int = 4
    sizes: tuple[int, ...] = (50, 100)
    replicates: int = 100
    seed: int = 0
    sampling: str = "uniform"
    observed: tuple[int, ...] | None = None
    methods: tuple[str, ...] = ("ql",)
    known_x0: tuple[bool, ...] = (False,)
    strategies: tuple[str, ...] = ("psmooth",)
    init_scales: tuple[float, ...] = (1.0,)
    init_gamma: float = 1e6
    gamma_mode: str = "schall"
    unobserved_init: str = "zero"
    compute_se: bool = True
    max_iter: int = 200
    n_steps: int | None = None
    workers: int | None = None
    label: str = ""

    def validate(self):
        model = self.get_model()
        if self.replicates < 1:
            raise ConfigurationError("replicates must be >= 1")
        if not self.noise_sd > 0:
            raise ConfigurationError("noise_sd must be positive")
        if len(self.theta) != model.q or len(self.x0) != model.d:
            raise ConfigurationError(f"{model.name} needs {model.q} parameters and {model.d} initial values")
        if self.sampling not in SAMPLINGS:
            raise ConfigurationError(f"sampling must be one of {SAMPLINGS}")
        if not self.sizes or min(self.sizes) < 1:
            raise ConfigurationError("sizes must be positive")
        for m in self.methods:
            if m not in ("ql", "nls"):
                raise ConfigurationError(f"unknown method {m!r}")
        if "nls" in self.methods and model.d != len(model.observed) and model.name != "first_order":
            warnings.warn("NLS baseline on a partially observed system fits all initial values", stacklevel=2)
        return model

    def get_model(self) -> OdeModel:
        return get_model(self.model, self.observed)

    def variants(self) -> list[Variant]:
        out = []
        for method, known in itertools.product(self.methods, self.known_x0):
            if method == "nls":
                for scale in self.init_scales:
                    out.append(Variant("nls", known, "psmooth", scale))
                continue
            for strategy, scale in itertools.product(self.strategies, self.init_scales):
                out.append(Variant("ql", known, strategy, scale))
        return out


@dataclass
class ReplicateResult:
    variant: str
    N: int
    replicate: int
    theta: np.ndarray
    theta_se: np.ndarray
    x0: np.ndarray
    tau: float
    gamma_bar: float
    iterations: int
    converged: bool
    rmse_y: float
    rmse_x: float
    constraint_residual: float = float("nan")
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.converged and not self.error


def _fit_config(cfg: StudyConfig, model: OdeModel, variant: Variant) -> FitConfig:
    bases = tuple(build_basis((0.0, cfg.T), cfg.n_internal, cfg.order) for _ in range(model.d))
    conditions = ()
    if variant.known_x0:
        conditions = tuple(StateCondition(0.0, j, float(v)) for j, v in enumerate(cfg.x0))
    return FitConfig(
        bases=bases,
        init_theta=tuple(variant.init_scale * np.asarray(cfg.theta, dtype=float)),
        init_alpha=variant.strategy,
        init_gamma=cfg.init_gamma,
        gamma_mode=cfg.gamma_mode,
        unobserved_init=cfg.unobserved_init,
        constraint_mode="lagrange" if variant.known_x0 else "none",
        conditions=conditions,
        max_iter=cfg.max_iter,
        compute_se=cfg.compute_se,
    )


def run_replicate(cfg: StudyConfig, N: int, replicate: int, truth=None) -> list[ReplicateResult]:
    """Generate one dataset and apply every variant to it."""
    model = cfg.get_model()
    truth = truth or truth_function(model, cfg.theta, cfg.x0, cfg.T, cfg.n_steps)
    rng = np.random.default_rng([cfg.seed, N, replicate])
    data = generate_dataset(model, cfg.theta, cfg.x0, N, cfg.noise_sd, cfg.T, rng, cfg.sampling,
                            truth=truth)
    out = []
    for variant in cfg.variants():
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = _apply(cfg, model, variant, data, truth)
        except QlodeError as exc:
            q, d = model.q, model.d
            res = ReplicateResult(variant.label, N, replicate, np.full(q, np.nan), np.full(q, np.nan),
                                  np.full(d, np.nan), np.nan, np.nan, 0, False, np.nan, np.nan,
                                  error=f"{type(exc).__name__}: {exc}")
        res.N, res.replicate = N, replicate
        out.append(res)
    return out


def _apply(cfg, model, variant, data, truth) -> ReplicateResult:
    init_theta = variant.init_scale * np.asarray(cfg.theta, dtype=float)
    if variant.method == "nls":
        closed = None
        if model.name == "first_order":
            closed = lambda t, th, x0: analytic_first_order(t, th, x0[0]).states  # noqa: E731
        r = nls_fit(data, init_theta, cfg.x0, model=model, closed_form=closed, domain=(0.0, cfg.T),
                    fix_x0=variant.known_x0, n_steps=cfg.n_steps)
        if closed is not None:
            fitted = lambda t: closed(t, r.theta, r.x0)  # noqa: E731
        else:
            fitted = rk4_dense(model, r.theta, r.x0, (0.0, cfg.T), cfg.n_steps)
        ry, rx = rmse_metrics(data, truth, fitted)
        return ReplicateResult(variant.label, 0, 0, r.theta, r.theta_se, r.x0, r.tau, np.nan,
                               r.nfev, r.converged, ry, rx)
    fc = _fit_config(cfg, model, variant)
    r = fit(model, data, fc)
    ry, rx = rmse_metrics(data, truth, r)
    resid = max((rec.constraint_residual for rec in r.trace), default=np.nan) if variant.known_x0 else np.nan
    return ReplicateResult(variant.label, 0, 0, r.theta_hat, r.theta_se, r.states([0.0])[0], r.tau,
                           r.gamma_bar, r.iterations, r.converged, ry, rx, constraint_residual=resid)


def _worker(args):
    cfg, N, rep = args
    return run_replicate(cfg, N, rep)


def _workers(cfg: StudyConfig) -> int:
    if cfg.workers is not None:
        return max(1, int(cfg.workers))
    env = os.environ.get("QLODE_THREADS")
    return max(1, int(env)) if env else 1


@dataclass
class StudyReport:
    config: StudyConfig
    results: list[ReplicateResult] = field(repr=False)
    rows: list[dict] = field(default_factory=list, repr=False)
    runs: list[dict] = field(default_factory=list, repr=False)
    notes: list[str] = field(default_factory=list)

    def table(self, variant: str, N: int) -> list[dict]:
        return [r for r in self.rows if r["estimator"] == variant and r["N"] == N]

    def row(self, variant: str, N: int, parameter: str) -> dict:
        for r in self.rows:
            if r["estimator"] == variant and r["N"] == N and r["parameter"] == parameter:
                return r
        raise KeyError((variant, N, parameter))

    def run_summary(self, variant: str, N: int) -> dict:
        for r in self.runs:
            if r["estimator"] == variant and r["N"] == N:
                return r
        raise KeyError((variant, N))

    def results_for(self, variant: str, N: int) -> list[ReplicateResult]:
        return [r for r in self.results if r.variant == variant and r.N == N]

    # -- output ----------------------------------------------------------------

    ROW_FIELDS = ("estimator", "N", "parameter", "truth", "mean", "bias", "bias_pct", "rmse", "std",
                  "mean_se", "n_used")
    RUN_FIELDS = ("estimator", "N", "n_runs", "n_converged", "n_failed", "rmse_y", "rmse_x",
                  "iterations", "gamma_bar", "tau", "max_constraint_residual")

    def parameters_csv(self) -> str:
        return _csv(self.rows, self.ROW_FIELDS)

    def runs_csv(self) -> str:
        return _csv(self.runs, self.RUN_FIELDS)

    def replicates_csv(self) -> str:
        model = self.config.get_model()
        fields = (["estimator", "N", "replicate", "converged", "iterations"]
                  + list(model.param_names) + [f"se_{p}" for p in model.param_names]
                  + [f"x0_{s}" for s in model.state_names]
                  + ["tau", "gamma_bar", "rmse_y", "rmse_x", "constraint_residual", "error"])
        recs = []
        for r in self.results:
            rec = {"estimator": r.variant, "N": r.N, "replicate": r.replicate, "converged": r.converged,
                   "iterations": r.iterations, "tau": r.tau, "gamma_bar": r.gamma_bar, "rmse_y": r.rmse_y,
                   "rmse_x": r.rmse_x, "constraint_residual": r.constraint_residual, "error": r.error}
            for k, p in enumerate(model.param_names):
                rec[p] = r.theta[k]
                rec[f"se_{p}"] = r.theta_se[k]
            for k, s in enumerate(model.state_names):
                rec[f"x0_{s}"] = r.x0[k]
            recs.append(rec)
        return _csv(recs, fields)

    def text(self) -> str:
        """Aligned tables, one block per estimator and sample size."""
        out = []
        title = self.config.label or self.config.model
        out.append(f"# {title}: {self.config.replicates} replicates, seed {self.config.seed}")
        out.extend(f"# {n}" for n in self.notes)
        for run in self.runs:
            v, N = run["estimator"], run["N"]
            out.append("")
            out.append(f"{v}  N={N}  converged {run['n_converged']}/{run['n_runs']}"
                       f"  failed {run['n_failed']}")
            head = ["parameter", "truth", "bias%", "RMSE", "std dev", "mean SE"]
            body = [[r["parameter"], _fmt(r["truth"]), _fmt(r["bias_pct"], "{:.3f}"), _fmt(r["rmse"]),
                     _fmt(r["std"]), _fmt(r["mean_se"])] for r in self.table(v, N)]
            body.append(["RMSE(y)", "", "", _fmt(run["rmse_y"]), "", ""])
            body.append(["RMSE(x)", "", "", _fmt(run["rmse_x"]), "", ""])
            body.append(["# iter", "", "", _fmt(run["iterations"], "{:.1f}"), "", ""])
            body.append(["gamma", "", "", _fmt(run["gamma_bar"]), "", ""])
            out.append(_align([head] + body))
        return "\n".join(out) + "\n"

    def combined_text(self) -> str:
        """One column per (estimator, N) with bias/SE/RMSE/std rows."""
        cols = [(r["estimator"], r["N"]) for r in self.runs]
        params = list(dict.fromkeys(r["parameter"] for r in self.rows))
        head = [""] + [f"{v} N={N}" for v, N in cols]
        body = []
        for p in params:
            for stat, key, fmt in (("bias%", "bias_pct", "{:.3f}"), ("SE", "mean_se", None),
                                   ("RMSE", "rmse", None), ("std dev", "std", None)):
                line = [f"{p} {stat}"]
                for v, N in cols:
                    try:
                        line.append(_fmt(self.row(v, N, p)[key], fmt))
                    except KeyError:
                        line.append("")
                body.append(line)
        for label, key, fmt in (("RMSE(y)", "rmse_y", None), ("RMSE(x)", "rmse_x", None),
                                ("# iter", "iterations", "{:.1f}"), ("gamma", "gamma_bar", None)):
            body.append([label] + [_fmt(self.run_summary(v, N)[key], fmt) for v, N in cols])
        return _align([head] + body) + "\n"

    def write(self, out_dir, stem: str = "study") -> list:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            f"{stem}_parameters.csv": self.parameters_csv(),
            f"{stem}_runs.csv": self.runs_csv(),
            f"{stem}_replicates.csv": self.replicates_csv(),
            f"{stem}_report.txt": self.text(),
            f"{stem}_table.txt": self.combined_text(),
        }
        for name, text in files.items():
            (out / name).write_text(text, encoding="utf-8", newline="")
        return [out / n for n in files]


def _fmt(x, fmt=None) -> str:
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return "n/a"
    if isinstance(x, (int, np.integer)):
        return str(x)
    return fmt.format(x) if fmt else f"{x:.3E}"


def _align(rows) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(c).rjust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def _csv(records, fields) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for rec in records:
        row = []
        for f in fields:
            v = rec.get(f, "")
            if isinstance(v, (float, np.floating)):
                v = format_float(v) if np.isfinite(v) else "nan"
            row.append(v)
        w.writerow(row)
    return buf.getvalue()


def _stats(values, truth, ses=None) -> dict:
    values = np.asarray(values, dtype=float)
    n = values.size
    mean = float(values.mean()) if n else np.nan
    bias = mean - truth
    return {
        "truth": float(truth),
        "mean": mean,
        "bias": bias,
        "bias_pct": 100.0 * bias / truth if truth != 0 else np.nan,
        "rmse": float(np.sqrt(np.mean((values - truth) ** 2))) if n else np.nan,
        "std": float(values.std(ddof=1)) if n > 1 else np.nan,
        "mean_se": float(np.nanmean(ses)) if ses is not None and np.any(np.isfinite(ses)) else np.nan,
        "n_used": n,
    }


def summarize(cfg: StudyConfig, results: list[ReplicateResult]) -> StudyReport:
    """Aggregate replicate results; order of ``results`` does not matter."""
    model = cfg.get_model()
    results = sorted(results, key=lambda r: (r.variant, r.N, r.replicate))
    rows, runs = [], []
    tau_true = 1.0 / cfg.noise_sd**2
    for variant in cfg.variants():
        v = variant.label
        for N in cfg.sizes:
            group = [r for r in results if r.variant == v and r.N == N]
            used = [r for r in group if r.ok]
            for k, p in enumerate(model.param_names):
                rows.append({"estimator": v, "N": N, "parameter": p,
                             **_stats([r.theta[k] for r in used], cfg.theta[k],
                                      [r.theta_se[k] for r in used])})
            if not variant.known_x0:
                for k, s in enumerate(model.state_names):
                    rows.append({"estimator": v, "N": N, "parameter": f"{s}(0)",
                                 **_stats([r.x0[k] for r in used], cfg.x0[k])})
            rows.append({"estimator": v, "N": N, "parameter": "tau",
                         **_stats([r.tau for r in used], tau_true)})
            mean = (lambda xs: float(np.mean(xs)) if len(xs) else np.nan)
            runs.append({
                "estimator": v, "N": N, "n_runs": len(group), "n_converged": len(used),
                "n_failed": sum(1 for r in group if r.error),
                "rmse_y": mean([r.rmse_y for r in used]),
                "rmse_x": mean([r.rmse_x for r in used]),
                "iterations": mean([r.iterations for r in used]),
                "gamma_bar": mean([r.gamma_bar for r in used]),
                "tau": mean([r.tau for r in used]),
                "max_constraint_residual": float(np.nanmax([r.constraint_residual for r in used]))
                if used and variant.known_x0 else np.nan,
            })
    notes = []
    if cfg.replicates == 1:
        notes.append("single replicate: std dev not available")
    return StudyReport(cfg, results, rows, runs, notes)


def run_study(cfg: StudyConfig) -> StudyReport:
    """Run every (N, replicate) and aggregate.

    Each replicate draws from its own stream keyed by (seed, N, replicate),
    so results do not depend on worker count or replicate count.
    """
    cfg.validate()
    tasks = [(cfg, N, rep) for N in cfg.sizes for rep in range(cfg.replicates)]
    workers = _workers(cfg)
    results: list[ReplicateResult] = []
    if workers == 1:
        model = cfg.get_model()
        truth = truth_function(model, cfg.theta, cfg.x0, cfg.T, cfg.n_steps)
        for _, N, rep in tasks:
            results.extend(run_replicate(cfg, N, rep, truth))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for chunk in pool.map(_worker, tasks):
                results.extend(chunk)
    return summarize(cfg, results)
