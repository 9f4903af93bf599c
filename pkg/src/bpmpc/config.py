"""Experiment configuration: load, validate, dump, and build problem objects.

The on-disk format is INI with one section per concern. Every value is parsed
as JSON when possible (numbers, lists, booleans, ``null``) and kept as a plain
string otherwise. A JSON document with the same nested layout is accepted too.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from bpmpc.closed_loop import LINEARIZATION_CHOICES, ClosedLoopProblem
from bpmpc.dynamics import CartPendulum, CartPendulumParams, LinearPlant
from bpmpc.errors import ConfigError
from bpmpc.mpc import (
    CholeskyParameterization,
    FixedParameterization,
    MpcDefinition,
    box_polytope,
    dare_terminal_cost,
)
from bpmpc.tuner import Box, TuneConfig

MODEL_TYPES = ("cart_pendulum", "linear", "double_integrator")
MODES = ("hard", "soft")
PARAMETERIZATIONS = ("cholesky", "fixed")
BUNDLED_DIR = Path(__file__).with_name("configs")


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``bundled_config("swingup_a")``."""
    path = BUNDLED_DIR / f"{name}.cfg"
    if not path.is_file():
        known = sorted(q.stem for q in BUNDLED_DIR.glob("*.cfg"))
        raise ConfigError("<file>", f"no bundled config {name!r}; available: {known}")
    return path


@dataclass
class ExperimentSection:
    name: str = "experiment"
    seed: int = 0
    output: str = "out"


@dataclass
class ModelSection:
    type: str = "cart_pendulum"
    dt: float = 0.015
    m: float = 1.0
    J: float = 1.0
    mu: float = 0.1
    g: float = 9.81
    A: list = None
    B: list = None
    c: list = None


@dataclass
class MpcSection:
    N: int = 11
    Qx: list = None
    state_lower: list = None
    state_upper: list = None
    input_lower: list = None
    input_upper: list = None
    mode: str = "hard"
    c1: float = 0.0
    c2: float = 0.0
    parameterization: str = "cholesky"
    ru_floor: float = 1e-6
    ridge: float = 1e-8
    init_ru: float = 1e-6


@dataclass
class ClosedLoopSection:
    T: int = 170
    x0: list = None
    Qx: list = None
    input_weight: float = 0.0
    linearization: str = "shifted"
    tune_initial_guess: bool = False
    noise_max: float = 0.0
    noise_mask: list = None


@dataclass
class TunerSection:
    rho: float = 5e-4
    eta: float = 0.51
    max_iters: int = 500
    grad_tol: float = 0.0
    param_tol: float = 0.0
    penalty_linear: float = 0.0
    penalty_quadratic: float = 0.0
    projection_lower: list = None
    projection_upper: list = None
    param_cap: float = 1e6


@dataclass
class SolverSection:
    tol: float = 1e-9
    gamma: float = 1.0
    beta: float = 0.0


SECTIONS = {
    "experiment": ExperimentSection,
    "model": ModelSection,
    "mpc": MpcSection,
    "closed_loop": ClosedLoopSection,
    "tuner": TunerSection,
    "solver": SolverSection,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    model: ModelSection = field(default_factory=ModelSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    closed_loop: ClosedLoopSection = field(default_factory=ClosedLoopSection)
    tuner: TunerSection = field(default_factory=TunerSection)
    solver: SolverSection = field(default_factory=SolverSection)

    # ---- dimensions ------------------------------------------------------

    @property
    def n_x(self) -> int:
        if self.model.type == "cart_pendulum":
            return 4
        if self.model.type == "double_integrator":
            return 4
        return len(self.model.A)

    @property
    def n_u(self) -> int:
        if self.model.type == "cart_pendulum":
            return 1
        if self.model.type == "double_integrator":
            return 2
        return len(self.model.B[0])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        new = from_dict(self.to_dict())
        setattr(new, section, dataclasses.replace(getattr(new, section), **changes))
        validate(new)
        return new


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

def _coerce(section: str, f: dataclasses.Field, value):
    where = f"{section}.{f.name}"
    if value is None:
        return None
    kind = f.type
    try:
        if kind == "int":
            if isinstance(value, bool) or float(value) != int(value):
                raise ValueError
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if kind == "bool":
            if not isinstance(value, bool):
                raise ValueError
            return value
        if kind == "str":
            if not isinstance(value, str):
                raise ValueError
            return value
        if kind == "list":
            if not isinstance(value, list):
                raise ValueError
            return json.loads(json.dumps(value))
    except (TypeError, ValueError):
        raise ConfigError(where, f"expected {kind}, got {value!r}") from None
    raise ConfigError(where, f"unsupported field type {kind}")


def from_dict(data: dict) -> ExperimentConfig:
    """Build and validate a config from a nested ``{section: {key: value}}`` dict."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a mapping of sections")
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    parts = {}
    for name, cls in SECTIONS.items():
        raw = data.get(name) or {}
        known = {f.name: f for f in fields(cls)}
        extra = set(raw) - set(known)
        if extra:
            raise ConfigError(f"{name}.{sorted(extra)[0]}", "unknown key")
        parts[name] = cls(**{k: _coerce(name, known[k], v) for k, v in raw.items()})
    cfg = ExperimentConfig(**parts)
    validate(cfg)
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def loads(text: str) -> ExperimentConfig:
    """Parse INI text (or a JSON document)."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            return from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError("<json>", str(exc)) from None
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<ini>", str(exc)) from None
    data = {s: {k: _parse_value(v) for k, v in parser.items(s)} for s in parser.sections()}
    return from_dict(data)


def load(path) -> ExperimentConfig:
    """Load a config file; a bare name such as ``swingup_a`` selects a bundled config."""
    path = Path(path)
    if not path.exists() and path.suffix == "" and path.name == str(path):
        path = bundled_config(path.name)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from None
    return loads(text)


def dumps(cfg: ExperimentConfig, fmt: str = "ini") -> str:
    """Serialize to INI (default) or JSON. ``loads(dumps(cfg))`` equals ``cfg``."""
    data = cfg.to_dict()
    if fmt == "json":
        return json.dumps(data, indent=2) + "\n"
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in data.items():
        parser[section] = {}
        for key, value in values.items():
            if value is None:
                continue
            plain = isinstance(value, str) and _parse_value(value) == value and not any(ch in value for ch in "#;")
            text = value if plain else json.dumps(value)
            parser[section][key] = text
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------

def _matrix(value, shape, where):
    try:
        a = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(where, "not a numeric array") from None
    if a.shape != shape:
        raise ConfigError(where, f"expected shape {shape}, got {a.shape}")
    if not np.isfinite(a).all():
        raise ConfigError(where, "entries must be finite")
    return a


def _square_or_diag(value, n, where):
    a = np.asarray(value, dtype=float)
    if a.ndim == 1:
        a = np.diag(_matrix(value, (n,), where))
    else:
        a = _matrix(value, (n, n), where)
    if not np.allclose(a, a.T):
        raise ConfigError(where, "must be symmetric")
    if np.linalg.eigvalsh(a).min() < 0:
        raise ConfigError(where, "must be positive semidefinite")
    return a


def _bounds(lower, upper, n, where):
    if lower is None and upper is None:
        return None
    lo = np.full(n, -np.inf) if lower is None else _bounds_vector(lower, n, f"{where}_lower")
    hi = np.full(n, np.inf) if upper is None else _bounds_vector(upper, n, f"{where}_upper")
    if np.any(lo > hi):
        raise ConfigError(f"{where}_lower", "lower bound exceeds upper bound")
    return lo, hi


def _bounds_vector(value, n, where):
    # null entries mean "unbounded"
    if not isinstance(value, list) or len(value) != n:
        raise ConfigError(where, f"expected a list of length {n}")
    out = np.empty(n)
    for i, v in enumerate(value):
        if v is None:
            out[i] = np.nan
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            out[i] = v
        else:
            raise ConfigError(where, f"entry {i} is not a number")
    return out


def _fill(lo_hi):
    lo, hi = lo_hi
    return np.where(np.isnan(lo), -np.inf, lo), np.where(np.isnan(hi), np.inf, hi)


def validate(cfg: ExperimentConfig) -> None:
    """Check ranges and cross-section dimensions. Raises :class:`ConfigError`."""
    m, mpc, cl, tu, so = cfg.model, cfg.mpc, cfg.closed_loop, cfg.tuner, cfg.solver
    if cfg.experiment.seed < 0:
        raise ConfigError("experiment.seed", "must be nonnegative")
    if m.type not in MODEL_TYPES:
        raise ConfigError("model.type", f"must be one of {MODEL_TYPES}")
    if not m.dt > 0:
        raise ConfigError("model.dt", "must be positive")
    for name in ("m", "J", "mu", "g"):
        if not getattr(m, name) > 0:
            raise ConfigError(f"model.{name}", "must be positive")
    if m.type == "cart_pendulum" and not m.m * m.J > m.mu ** 2:
        raise ConfigError("model.mu", "m J - mu^2 must be positive")
    if m.type == "linear":
        if m.A is None or m.B is None:
            raise ConfigError("model.A" if m.A is None else "model.B", "required for a linear model")
        A = np.asarray(m.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
            raise ConfigError("model.A", "must be a nonempty square matrix")
        B = np.asarray(m.B, dtype=float)
        if B.ndim != 2 or B.shape[0] != A.shape[0] or B.shape[1] == 0:
            raise ConfigError("model.B", f"must have {A.shape[0]} rows")
        _matrix(m.A, A.shape, "model.A")
        _matrix(m.B, B.shape, "model.B")
        if m.c is not None:
            _matrix(m.c, (A.shape[0],), "model.c")
    n_x, n_u = cfg.n_x, cfg.n_u

    if mpc.N < 1:
        raise ConfigError("mpc.N", "horizon N must be at least 1")
    if mpc.Qx is None:
        raise ConfigError("mpc.Qx", "required")
    _square_or_diag(mpc.Qx, n_x, "mpc.Qx")
    _bounds(mpc.state_lower, mpc.state_upper, n_x, "mpc.state")
    _bounds(mpc.input_lower, mpc.input_upper, n_u, "mpc.input")
    if mpc.mode not in MODES:
        raise ConfigError("mpc.mode", f"must be one of {MODES}")
    if mpc.c1 < 0 or mpc.c2 < 0:
        raise ConfigError("mpc.c1" if mpc.c1 < 0 else "mpc.c2", "must be nonnegative")
    if mpc.mode == "soft" and mpc.c1 == 0:
        raise ConfigError("mpc.c1", "soft mode needs a positive quadratic slack weight")
    if mpc.parameterization not in PARAMETERIZATIONS:
        raise ConfigError("mpc.parameterization", f"must be one of {PARAMETERIZATIONS}")
    if not mpc.ru_floor > 0:
        raise ConfigError("mpc.ru_floor", "must be positive")
    if not mpc.ridge > 0:
        raise ConfigError("mpc.ridge", "must be positive")
    if not mpc.init_ru >= mpc.ru_floor:
        raise ConfigError("mpc.init_ru", "must be at least ru_floor")

    if cl.T < 0:
        raise ConfigError("closed_loop.T", "must be nonnegative")
    if cl.x0 is None:
        raise ConfigError("closed_loop.x0", "required")
    _matrix(cl.x0, (n_x,), "closed_loop.x0")
    if cl.Qx is not None:
        _square_or_diag(cl.Qx, n_x, "closed_loop.Qx")
    if cl.input_weight < 0:
        raise ConfigError("closed_loop.input_weight", "must be nonnegative")
    if cl.linearization not in LINEARIZATION_CHOICES:
        raise ConfigError("closed_loop.linearization", f"must be one of {LINEARIZATION_CHOICES}")
    if cl.noise_max < 0:
        raise ConfigError("closed_loop.noise_max", "must be nonnegative")
    if cl.noise_mask is not None:
        _matrix(cl.noise_mask, (n_x,), "closed_loop.noise_mask")

    if not tu.rho > 0:
        raise ConfigError("tuner.rho", "must be positive")
    if not 0.5 < tu.eta <= 1.0:
        raise ConfigError("tuner.eta", "must lie in (0.5, 1]")
    if tu.max_iters < 0:
        raise ConfigError("tuner.max_iters", "must be nonnegative")
    for name in ("grad_tol", "param_tol", "penalty_linear", "penalty_quadratic"):
        if getattr(tu, name) < 0:
            raise ConfigError(f"tuner.{name}", "must be nonnegative")
    if not tu.param_cap > 0:
        raise ConfigError("tuner.param_cap", "must be positive")
    n_p = n_params(cfg)
    _bounds(tu.projection_lower, tu.projection_upper, n_p, "tuner.projection")

    if not so.tol > 0:
        raise ConfigError("solver.tol", "must be positive")
    if not so.gamma > 0:
        raise ConfigError("solver.gamma", "must be positive")
    if not 0.0 <= so.beta <= 1.0:
        raise ConfigError("solver.beta", "must lie in [0, 1]")


def n_params(cfg: ExperimentConfig) -> int:
    n_x = cfg.n_x
    n_mpc = 1 + n_x * (n_x + 1) // 2 if cfg.mpc.parameterization == "cholesky" else 0
    n_guess = 0
    if cfg.closed_loop.tune_initial_guess:
        n_guess = (cfg.mpc.N + 1) * n_x + cfg.mpc.N * cfg.n_u
        if cfg.mpc.mode == "soft":
            n_guess += _n_state_rows(cfg) * (cfg.mpc.N + 1)
    return n_mpc + n_guess


def _n_state_rows(cfg):
    b = _bounds(cfg.mpc.state_lower, cfg.mpc.state_upper, cfg.n_x, "mpc.state")
    if b is None:
        return 0
    lo, hi = _fill(b)
    return int(np.isfinite(lo).sum() + np.isfinite(hi).sum())


# --------------------------------------------------------------------------
# Builders
# --------------------------------------------------------------------------

def build_plant(cfg: ExperimentConfig):
    m = cfg.model
    if m.type == "cart_pendulum":
        return CartPendulum(CartPendulumParams(m=m.m, J=m.J, mu=m.mu, g=m.g, dt=m.dt))
    if m.type == "double_integrator":
        blk_A = np.array([[1.0, m.dt], [0.0, 1.0]])
        blk_B = np.array([[0.5 * m.dt ** 2], [m.dt]])
        return LinearPlant(np.kron(np.eye(2), blk_A), np.kron(np.eye(2), blk_B))
    return LinearPlant(np.asarray(m.A, float), np.asarray(m.B, float), None if m.c is None else np.asarray(m.c, float))


def mpc_state_cost(cfg: ExperimentConfig) -> np.ndarray:
    return _square_or_diag(cfg.mpc.Qx, cfg.n_x, "mpc.Qx")


def dare_solution(cfg: ExperimentConfig, plant=None) -> np.ndarray:
    """Terminal cost from the Riccati equation of the plant linearized at the origin."""
    plant = build_plant(cfg) if plant is None else plant
    A, B = plant.jacobians(np.zeros(cfg.n_x), np.zeros(cfg.n_u))
    return dare_terminal_cost(A, B, mpc_state_cost(cfg), cfg.mpc.init_ru * np.eye(cfg.n_u))


def build_definition(cfg: ExperimentConfig, plant=None, parameterization=None) -> MpcDefinition:
    mpc, n_x, n_u = cfg.mpc, cfg.n_x, cfg.n_u
    if parameterization is None:
        if mpc.parameterization == "cholesky":
            parameterization = CholeskyParameterization(n_x, n_u, ru_floor=mpc.ru_floor, ridge=mpc.ridge)
        else:
            parameterization = FixedParameterization(dare_solution(cfg, plant), mpc.init_ru * np.eye(n_u))
    Hx = hx = Hu = hu = None
    b = _bounds(mpc.state_lower, mpc.state_upper, n_x, "mpc.state")
    if b is not None:
        Hx, hx = box_polytope(*_fill(b))
    b = _bounds(mpc.input_lower, mpc.input_upper, n_u, "mpc.input")
    if b is not None:
        Hu, hu = box_polytope(*_fill(b))
    return MpcDefinition(
        N=mpc.N, n_x=n_x, n_u=n_u, Qx=mpc_state_cost(cfg), parameterization=parameterization,
        Hx=Hx, hx=hx, Hu=Hu, hu=hu, soft=mpc.mode == "soft", c1=mpc.c1, c2=mpc.c2,
    )


def build_problem(cfg: ExperimentConfig, parameterization=None) -> ClosedLoopProblem:
    plant = build_plant(cfg)
    defn = build_definition(cfg, plant, parameterization)
    cl, so = cfg.closed_loop, cfg.solver
    Qx = None if cl.Qx is None else _square_or_diag(cl.Qx, cfg.n_x, "closed_loop.Qx")
    return ClosedLoopProblem(
        defn=defn, plant=plant, x0=np.asarray(cl.x0, float), T=cl.T, Qx=Qx,
        input_weight=cl.input_weight, linearization=cl.linearization,
        tune_initial_guess=cl.tune_initial_guess, gamma=so.gamma, beta=so.beta, qp_tol=so.tol,
    )


def initial_params(cfg: ExperimentConfig, problem: ClosedLoopProblem) -> np.ndarray:
    """Riccati-initialized parameters (plus the default initial guess when it is tunable)."""
    par = problem.defn.parameterization
    parts = []
    if isinstance(par, CholeskyParameterization):
        parts.append(par.params_for(dare_solution(cfg, problem.plant), cfg.mpc.init_ru))
    if problem.tune_initial_guess:
        parts.append(problem.y_init)
    return np.concatenate(parts) if parts else np.zeros(0)


def build_tune_config(cfg: ExperimentConfig, penalties: bool = True) -> TuneConfig:
    tu = cfg.tuner
    projection = None
    b = _bounds(tu.projection_lower, tu.projection_upper, n_params(cfg), "tuner.projection")
    if b is not None:
        projection = Box(*_fill(b))
    return TuneConfig(
        rho=tu.rho, eta=tu.eta, max_iters=tu.max_iters, grad_tol=tu.grad_tol, param_tol=tu.param_tol,
        projection=projection,
        penalty_c3_linear=tu.penalty_linear if penalties else 0.0,
        penalty_quadratic=tu.penalty_quadratic if penalties else 0.0,
        param_cap=tu.param_cap, mode=cfg.mpc.mode,
    )


def noise_sequence(cfg: ExperimentConfig, seed: int = None):
    """Uniform additive state noise in ``[0, noise_max]`` on the masked entries, or ``None``."""
    cl = cfg.closed_loop
    if cl.noise_max == 0.0:
        return None
    rng = np.random.default_rng(cfg.experiment.seed if seed is None else seed)
    mask = np.ones(cfg.n_x) if cl.noise_mask is None else np.asarray(cl.noise_mask, float)
    return rng.uniform(0.0, cl.noise_max, size=(cl.T + 1, cfg.n_x)) * mask
