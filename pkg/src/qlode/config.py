"""TOML run configurations and bundled presets.

A run file has up to five tables::

    [model]     name, observed (1-based), T
    [basis]     n_internal, order
    [simulate]  theta, x0, N, noise_sd, seed, sampling, truth_points
    [fit]       init_theta, init_alpha, ..., conditions, data
    [study]     theta, x0, noise_sd, sizes, replicates, seed, ...

Unknown keys are rejected and missing required keys are reported by name.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .bspline import build_basis
from .errors import ConfigurationError
from .estimator import FitConfig
from .models import MODELS, OdeModel, StateCondition, get_model
from .simulation import StudyConfig

__all__ = ["RunConfig", "SimulationSetup", "load_config", "parse_config", "preset_names", "preset_path",
           "fixture_path"]

_MISSING = object()

SCHEMA = {
    "model": {"name": _MISSING, "observed": None, "T": _MISSING},
    "basis": {"n_internal": _MISSING, "order": 4},
    "simulate": {"theta": _MISSING, "x0": _MISSING, "N": _MISSING, "noise_sd": _MISSING,
                 "seed": _MISSING, "sampling": "uniform", "truth_points": 1001, "n_steps": None},
    "fit": {"init_theta": _MISSING, "init_alpha": "psmooth", "unobserved_init": "zero", "init_tau": None,
            "init_gamma": 1e6, "gamma_mode": "schall", "gamma_pooling": "pooled",
            "tau_pooling": "pooled", "constraint_mode": "none", "kappa": 1e6, "conditions": [],
            "convergence_tol": 1e-4, "max_iter": 200, "per_span": None, "compute_se": True,
            "search_point": "current", "data": None},
    "study": {"theta": _MISSING, "x0": _MISSING, "noise_sd": _MISSING, "seed": _MISSING,
              "sizes": [50, 100], "replicates": 100, "sampling": "uniform", "methods": ["ql"],
              "known_x0": [False], "strategies": ["psmooth"], "init_scales": [1.0], "init_gamma": 1e6,
              "gamma_mode": "schall", "unobserved_init": "zero", "compute_se": True, "max_iter": 200,
              "n_steps": None, "workers": None, "label": ""},
}
CONDITION_KEYS = {"t0", "state", "value"}


def _section(raw: dict, name: str, where: str) -> dict | None:
    if name not in raw:
        return None
    table = raw[name]
    if not isinstance(table, dict):
        raise ConfigurationError(f"{where}: [{name}] must be a table")
    schema = SCHEMA[name]
    unknown = sorted(set(table) - set(schema))
    if unknown:
        raise ConfigurationError(f"{where}: unknown key(s) in [{name}]: {', '.join(unknown)}")
    missing = [k for k, v in schema.items() if v is _MISSING and k not in table]
    if missing:
        raise ConfigurationError(f"{where}: missing required key(s) in [{name}]: {', '.join(missing)}")
    return {k: table.get(k, v) for k, v in schema.items()}


def _floats(values, key) -> tuple[float, ...]:
    if isinstance(values, (int, float)) and not isinstance(values, bool):
        values = [values]
    try:
        return tuple(float(v) for v in values)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key} must be a number or a list of numbers") from None


@dataclass
class SimulationSetup:
    theta: tuple[float, ...]
    x0: tuple[float, ...]
    N: int
    noise_sd: tuple[float, ...]
    seed: int
    sampling: str = "uniform"
    truth_points: int = 1001
    n_steps: int | None = None


@dataclass
class RunConfig:
    model: dict
    basis: dict | None = None
    simulate: dict | None = None
    fit: dict | None = None
    study: dict | None = None
    source: Path | None = None
    base_dir: Path | None = field(default=None, repr=False)

    def _need(self, name):
        table = getattr(self, name)
        if table is None:
            raise ConfigurationError(f"{self.source or 'config'}: missing [{name}] table")
        return table

    @property
    def T(self) -> float:
        return float(self.model["T"])

    def get_model(self) -> OdeModel:
        obs = self.model["observed"]
        if obs is not None:
            obs = tuple(int(j) - 1 for j in obs)
        return get_model(self.model["name"], obs)

    def bases(self, d: int):
        b = self._need("basis")
        return tuple(build_basis((0.0, self.T), int(b["n_internal"]), int(b["order"])) for _ in range(d))

    def simulation_setup(self) -> SimulationSetup:
        s = self._need("simulate")
        model = self.get_model()
        theta, x0 = _floats(s["theta"], "theta"), _floats(s["x0"], "x0")
        if len(theta) != model.q or len(x0) != model.d:
            raise ConfigurationError(f"[simulate] {model.name} needs {model.q} theta and {model.d} x0 values")
        return SimulationSetup(theta=theta, x0=x0, N=int(s["N"]), noise_sd=_floats(s["noise_sd"], "noise_sd"),
                            seed=int(s["seed"]), sampling=str(s["sampling"]),
                            truth_points=int(s["truth_points"]), n_steps=s["n_steps"])

    def fit_config(self) -> FitConfig:
        f = self._need("fit")
        model = self.get_model()
        conditions = []
        for c in f["conditions"]:
            if not isinstance(c, dict) or set(c) != CONDITION_KEYS:
                raise ConfigurationError(f"each condition needs exactly the keys {sorted(CONDITION_KEYS)}")
            conditions.append(StateCondition(float(c["t0"]), int(c["state"]) - 1, float(c["value"])))
        init_tau = f["init_tau"]
        cfg = FitConfig(
            bases=self.bases(model.d),
            init_theta=_floats(f["init_theta"], "init_theta"),
            init_alpha=f["init_alpha"],
            unobserved_init=f["unobserved_init"],
            init_tau=None if init_tau is None else _floats(init_tau, "init_tau"),
            init_gamma=_floats(f["init_gamma"], "init_gamma"),
            gamma_mode=f["gamma_mode"],
            gamma_pooling=f["gamma_pooling"],
            tau_pooling=f["tau_pooling"],
            constraint_mode=f["constraint_mode"],
            kappa=float(f["kappa"]),
            conditions=tuple(conditions),
            convergence_tol=float(f["convergence_tol"]),
            max_iter=int(f["max_iter"]),
            per_span=None if f["per_span"] is None else int(f["per_span"]),
            compute_se=bool(f["compute_se"]),
            search_point=f["search_point"],
        )
        cfg.validate(model)
        return cfg

    def data_path(self) -> Path | None:
        f = self._need("fit")
        if f["data"] is None:
            return None
        p = Path(f["data"])
        return p if p.is_absolute() else (self.base_dir or Path.cwd()) / p

    def study_config(self) -> StudyConfig:
        s = self._need("study")
        b = self._need("basis")
        obs = self.model["observed"]
        cfg = StudyConfig(
            model=self.model["name"],
            theta=_floats(s["theta"], "theta"),
            x0=_floats(s["x0"], "x0"),
            noise_sd=float(s["noise_sd"]),
            T=self.T,
            n_internal=int(b["n_internal"]),
            order=int(b["order"]),
            sizes=tuple(int(n) for n in s["sizes"]),
            replicates=int(s["replicates"]),
            seed=int(s["seed"]),
            sampling=str(s["sampling"]),
            observed=None if obs is None else tuple(int(j) - 1 for j in obs),
            methods=tuple(s["methods"]),
            known_x0=tuple(bool(k) for k in s["known_x0"]),
            strategies=tuple(s["strategies"]),
            init_scales=_floats(s["init_scales"], "init_scales"),
            init_gamma=float(s["init_gamma"]),
            gamma_mode=str(s["gamma_mode"]),
            unobserved_init=str(s["unobserved_init"]),
            compute_se=bool(s["compute_se"]),
            max_iter=int(s["max_iter"]),
            n_steps=s["n_steps"],
            workers=s["workers"],
            label=str(s["label"]),
        )
        cfg.validate()
        return cfg


def parse_config(raw: dict, where: str = "config", base_dir: Path | None = None) -> RunConfig:
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigurationError(f"{where}: unknown table(s): {', '.join(unknown)}")
    model = _section(raw, "model", where)
    if model is None:
        raise ConfigurationError(f"{where}: missing [model] table")
    if model["name"] not in MODELS:
        raise ConfigurationError(f"{where}: unknown model {model['name']!r}; choose from {sorted(MODELS)}")
    if not float(model["T"]) > 0:
        raise ConfigurationError(f"{where}: T must be positive")
    return RunConfig(
        model=model,
        basis=_section(raw, "basis", where),
        simulate=_section(raw, "simulate", where),
        fit=_section(raw, "fit", where),
        study=_section(raw, "study", where),
        source=Path(where),
        base_dir=base_dir,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    return parse_config(raw, str(path), base_dir=path.parent)


def preset_names() -> list[str]:
    root = resources.files("qlode") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def preset_path(name: str) -> Path:
    path = Path(str(resources.files("qlode") / "presets" / f"{name}.toml"))
    if not path.is_file():
        raise ConfigurationError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return path


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("qlode") / "data" / name))
