"""Command-line front end: ``qlode simulate | fit | study | presets``.

Exit codes: 0 success (including a fit that did not converge), 1 usage or
configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, preset_names, preset_path
from .data import Dataset, format_float, read_dataset, write_dataset
from .errors import ConfigurationError, DataError, DomainError, NumericalError, QlodeError
from .estimator import FitResult, fit
from .simulation import generate_dataset, run_study, truth_function

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRID_POINTS = 512


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load(args) -> RunConfig:
    if bool(args.config) == bool(args.preset):
        raise ConfigurationError("give exactly one of --config or --preset")
    return load_config(args.config or preset_path(args.preset))


def _write(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8", newline="")
    except OSError as exc:
        raise ConfigurationError(f"cannot write {path}: {exc}") from None


# -- simulate ------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out: Path, seed: int | None = None) -> Path:
    """Write noisy observations to ``out`` and noiseless states to ``<out>_truth.csv``."""
    setup = cfg.simulation_setup()
    model = cfg.get_model()
    truth = truth_function(model, setup.theta, setup.x0, cfg.T, setup.n_steps)
    data = generate_dataset(model, setup.theta, setup.x0, setup.N, setup.noise_sd, cfg.T,
                            setup.seed if seed is None else seed, setup.sampling, truth=truth)
    _write(out, data.to_csv())
    grid = np.linspace(0.0, cfg.T, setup.truth_points)
    states = truth(grid)
    dense = Dataset(tuple(range(model.d)), tuple(grid for _ in range(model.d)),
                    tuple(states[:, j] for j in range(model.d)))
    sidecar = out.with_name(out.stem + "_truth.csv")
    _write(sidecar, dense.to_csv())
    return sidecar


# -- fit -----------------------------------------------------------------------

def summary_csv(result: FitResult, model) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "value", "se"])
    for p, v, s in zip(result.param_names, result.theta_hat, result.theta_se):
        w.writerow([p, format_float(v), format_float(s)])
    for j, tau in zip(result.observed, result.tau_hat):
        w.writerow([f"tau[{model.state_names[j]}]", format_float(tau), ""])
    for j, g in enumerate(result.gamma_hat):
        w.writerow([f"gamma[{model.state_names[j]}]", format_float(g), ""])
    w.writerow(["ed", format_float(result.ed), ""])
    w.writerow(["rss", format_float(result.rss), ""])
    w.writerow(["n_obs", result.n_obs, ""])
    w.writerow(["iterations", result.iterations, ""])
    w.writerow(["converged", str(result.converged).lower(), ""])
    return buf.getvalue()


def trace_csv(result: FitResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = len(result.gamma_hat)
    w.writerow(["iteration", *result.param_names, *[f"gamma{j + 1}" for j in range(d)],
                *[f"tau{j + 1}" for j in result.observed], "ed", "penalty", "ode_misfit", "rss", "nfev",
                "constraint_residual"])
    for rec in result.trace:
        w.writerow([rec.iteration, *map(format_float, rec.theta), *map(format_float, rec.gamma),
                    *map(format_float, rec.tau), format_float(rec.ed), format_float(rec.penalty),
                    format_float(rec.ode_misfit), format_float(rec.rss), rec.nfev,
                    format_float(rec.constraint_residual)])
    return buf.getvalue()


def states_csv(result: FitResult, T: float) -> str:
    grid = np.linspace(0.0, T, GRID_POINTS)
    x = result.states(grid)
    return Dataset(tuple(range(x.shape[1])), tuple(grid for _ in range(x.shape[1])),
                   tuple(x[:, j] for j in range(x.shape[1]))).to_csv()


def coefficients_csv(result: FitResult) -> str:
    return "coefficient\n" + "".join(format_float(a) + "\n" for a in result.alpha_hat)


def _read_restart(path: Path, model):
    """Estimates of a previous ``fit`` output directory, used as starting values."""
    try:
        with open(path / "summary.csv", encoding="utf-8") as fh:
            rows = {r["name"]: r["value"] for r in csv.DictReader(fh)}
        alpha = np.loadtxt(path / "coefficients.csv", skiprows=1, ndmin=1)
        theta = tuple(float(rows[p]) for p in model.param_names)
        gamma = tuple(float(rows[f"gamma[{s}]"]) for s in model.state_names)
        tau = tuple(float(rows[f"tau[{model.state_names[j]}]"]) for j in model.observed)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot restart from {path}: {exc}") from None
    return theta, gamma, tau, alpha


def cmd_fit(cfg: RunConfig, data_path: Path | None, out: Path, restart: Path | None = None) -> FitResult:
    model = cfg.get_model()
    fc = cfg.fit_config()
    data_path = data_path or cfg.data_path()
    if data_path is None:
        raise ConfigurationError("no data: pass --data or set [fit] data")
    data = read_dataset(data_path)
    data.check_against(model.d, cfg.T, observed=model.observed)
    if restart is not None:
        theta, gamma, tau, alpha = _read_restart(restart, model)
        tau = tuple(tau[model.observed.index(j)] for j in data.states)
        fc.init_theta, fc.init_gamma, fc.init_tau = theta, gamma, tau
        fc.init_alpha, fc.alpha0 = "given", alpha
    result = fit(model, data, fc)
    _write(out / "summary.csv", summary_csv(result, model))
    _write(out / "trace.csv", trace_csv(result))
    _write(out / "states.csv", states_csv(result, cfg.T))
    _write(out / "coefficients.csv", coefficients_csv(result))
    return result


# -- study ---------------------------------------------------------------------

def cmd_study(cfg: RunConfig, out: Path, replicates: int | None = None, workers: int | None = None,
              seed: int | None = None, sizes=None):
    sc = cfg.study_config()
    if sizes:
        sc.sizes = tuple(sizes)
    if replicates is not None:
        sc.replicates = replicates
    if workers is not None:
        sc.workers = workers
    if seed is not None:
        sc.seed = seed
    sc.validate()
    report = run_study(sc)
    try:
        report.write(out)
    except OSError as exc:
        raise ConfigurationError(f"cannot write study output to {out}: {exc}") from None
    return report


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qlode", description="Quasilinearized ODE-penalized spline estimation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def source(p):
        p.add_argument("--config", type=Path, help="TOML run configuration")
        p.add_argument("--preset", help="bundled configuration name (see 'qlode presets')")

    p = sub.add_parser("simulate", help="simulate a dataset")
    source(p)
    p.add_argument("--out", type=Path, required=True, help="output CSV (truth goes to <out>_truth.csv)")
    p.add_argument("--seed", type=int, help="override [simulate] seed")

    p = sub.add_parser("fit", help="fit a model to a dataset")
    source(p)
    p.add_argument("--data", type=Path, help="dataset CSV (defaults to [fit] data)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--restart", type=Path, help="start from the estimates in a previous fit output directory")

    p = sub.add_parser("study", help="run a replicated simulation study")
    source(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--replicates", type=int, help="override [study] replicates")
    p.add_argument("--workers", type=int, help="worker processes (default: QLODE_THREADS or 1)")
    p.add_argument("--seed", type=int, help="override [study] seed")
    p.add_argument("--sizes", type=int, nargs="+", help="override [study] sample sizes")

    sub.add_parser("presets", help="list bundled configurations")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "presets":
            print("\n".join(preset_names()))
            return EXIT_OK
        cfg = _load(args)
        if args.command == "simulate":
            sidecar = cmd_simulate(cfg, args.out, args.seed)
            print(f"wrote {args.out} and {sidecar}")
        elif args.command == "fit":
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                res = cmd_fit(cfg, args.data, args.out, args.restart)
            for w in caught:
                print(f"warning: {w.message}", file=sys.stderr)
            names = ", ".join(f"{p}={v:.6g}" for p, v in zip(res.param_names, res.theta_hat))
            state = "converged" if res.converged else "did NOT converge"
            print(f"{state} after {res.iterations} iterations: {names}")
            print(f"wrote {args.out}/summary.csv, trace.csv, states.csv, coefficients.csv")
        elif args.command == "study":
            report = cmd_study(cfg, args.out, args.replicates, args.workers, args.seed, args.sizes)
            print(report.combined_text(), end="")
            print(f"wrote study files to {args.out}")
    except ConfigurationError as exc:
        print(f"qlode: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DomainError) as exc:
        print(f"qlode: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"qlode: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except QlodeError as exc:
        print(f"qlode: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
