"""Experiment configuration: one strict JSON document per experiment.

Unknown keys, wrong types and inconsistent cross-references raise
`ConfigError` before any computation starts.  See ``configs/`` for examples
and README for the schema.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
import zlib
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ConfigError
from .hamiltonian import SYSTEMS
from .reduced import REGIMES

__all__ = [
    "SystemConfig",
    "ObservableConfig",
    "SamplerConfig",
    "MatricesConfig",
    "ClosureSection",
    "InitialConfig",
    "TimeGrid",
    "ResolveConfig",
    "TuneConfig",
    "VerifyConfig",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "config_hash",
    "substream_seed",
]

OBSERVABLE_KINDS = ("position", "momentum", "position_square")


@dataclass
class SystemConfig:
    name: str
    params: dict = field(default_factory=dict)


@dataclass
class ObservableConfig:
    kind: str
    index: int
    center: Union[float, str] = 0.0  # a number or "equilibrium" (sample mean)
    id: Optional[str] = None


@dataclass
class SamplerConfig:
    count: int = 100_000
    burn_in: int = 500
    thinning: int = 10
    proposal_scale: float = 0.5
    analytic_gaussian: bool = False
    chains: int = 256
    chain_group: int = 64
    ess_floor: float = 0.05


@dataclass
class MatricesConfig:
    """Explicit near-equilibrium matrices (skip sampling)."""

    C: list
    J: Optional[list] = None
    D: Optional[list] = None


@dataclass
class ClosureSection:
    regime: str = "near_G"
    epsilon: float = 0.5
    t_span: list = field(default_factory=lambda: [0.0, 10.0])
    dt: Optional[float] = None
    scheme: str = "rk4"
    record_every: int = 1
    provider: str = "gaussian"  # far/adiabatic regimes: "gaussian" or "monte_carlo"
    switch_threshold: float = 1e-2


@dataclass
class InitialConfig:
    lambda0: list
    M0: Optional[list] = None


@dataclass
class TimeGrid:
    start: float = 0.0
    stop: float = 10.0
    step: float = 0.1

    def values(self) -> np.ndarray:
        k = int(round((self.stop - self.start) / self.step))
        return self.start + self.step * np.arange(k + 1)


@dataclass
class ResolveConfig:
    n_traj: int = 4096
    dt: float = 0.005
    t_grid: TimeGrid = field(default_factory=TimeGrid)
    energy_bound: float = 1e-4


@dataclass
class TuneConfig:
    bracket: list = field(default_factory=lambda: [0.001, 1.0])
    closure_dt: float = 0.01
    window_entropy_fraction: Optional[float] = 0.05
    max_error: Optional[float] = None


@dataclass
class VerifyConfig:
    C: float = 1.0
    D: float = 1.0
    epsilon: float = 0.5
    lambda0: float = 1.0
    t_end: float = 4.0
    riccati_dt: float = 1e-3
    hj_points: int = 2000
    hj_range: list = field(default_factory=lambda: [-0.5, 1.5])
    penalty_b: float = 1e3
    spd_instances: int = 20
    spd_dim: int = 3
    perturb_D: float = 0.0
    d_check_samples: int = 20_000


@dataclass
class ExperimentConfig:
    system: Optional[SystemConfig] = None
    observables: list = field(default_factory=list)
    beta: float = 1.0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    matrices: Optional[MatricesConfig] = None
    closure: ClosureSection = field(default_factory=ClosureSection)
    initial: Optional[InitialConfig] = None
    resolve: ResolveConfig = field(default_factory=ResolveConfig)
    tune: TuneConfig = field(default_factory=TuneConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    seed: int = 0
    workers: int = 1
    output: Optional[str] = None

    @property
    def m(self) -> int:
        if self.observables:
            return len(self.observables)
        if self.matrices is not None:
            return len(self.matrices.C)
        return 0


def _is_number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _check_type(value, tp, path):
    origin = typing.get_origin(tp)
    if origin is Union:
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _check_type(value, a, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(f"{path}: invalid value {value!r}")
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is float:
        if not _is_number(value):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if tp is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _check_type(data[f.name], hints[f.name], f"{path}.{f.name}")
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"{path}: missing required key {f.name!r}")
    return cls(**kwargs)


def _matrix(x, m, path, square=True):
    try:
        arr = np.asarray(x, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: not a numeric matrix") from None
    if arr.shape != ((m, m) if square else (m,)):
        raise ConfigError(f"{path}: expected shape {(m, m) if square else (m,)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{path}: non-finite entries")
    return arr


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.system is not None and cfg.system.name not in SYSTEMS:
        raise ConfigError(f"system.name: unknown system {cfg.system.name!r}; known {sorted(SYSTEMS)}")
    obs = []
    for i, o in enumerate(cfg.observables):
        o = _build(ObservableConfig, o, f"observables[{i}]") if isinstance(o, dict) else o
        if o.kind not in OBSERVABLE_KINDS:
            raise ConfigError(f"observables[{i}].kind: unknown {o.kind!r}; expected {OBSERVABLE_KINDS}")
        if isinstance(o.center, str) and o.center != "equilibrium":
            raise ConfigError(f"observables[{i}].center: number or 'equilibrium'")
        obs.append(o)
    cfg.observables = obs
    ids = [o.id or f"{o.kind}{o.index}" for o in obs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"observables: duplicate ids {ids}")
    if cfg.system is not None:
        n = cfg.system.params.get("n", 1)
        for i, o in enumerate(obs):
            if not 0 <= o.index < n:
                raise ConfigError(f"observables[{i}].index {o.index} out of range for n={n}")
    if cfg.beta <= 0:
        raise ConfigError("beta must be positive")
    s = cfg.sampler
    if s.count < 1 or s.burn_in < 1 or s.thinning < 1 or s.chains < 1 or s.chain_group < 1:
        raise ConfigError("sampler: count, burn_in, thinning, chains, chain_group must be >= 1")
    if s.proposal_scale <= 0 or not 0 < s.ess_floor < 1:
        raise ConfigError("sampler: proposal_scale > 0 and 0 < ess_floor < 1 required")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    m = cfg.m
    if cfg.matrices is not None:
        if obs and len(cfg.matrices.C) != len(obs):
            raise ConfigError("matrices.C size does not match the observable list")
        C = _matrix(cfg.matrices.C, m, "matrices.C")
        if not np.allclose(C, C.T) or np.linalg.eigvalsh(C).min() <= 0:
            raise ConfigError("matrices.C must be symmetric positive-definite")
        if cfg.matrices.J is not None:
            J = _matrix(cfg.matrices.J, m, "matrices.J")
            if not np.allclose(J, -J.T):
                raise ConfigError("matrices.J must be antisymmetric")
        if cfg.matrices.D is not None:
            D = _matrix(cfg.matrices.D, m, "matrices.D")
            if not np.allclose(D, D.T) or np.linalg.eigvalsh(D).min() < -1e-12:
                raise ConfigError("matrices.D must be symmetric positive-semidefinite")
    c = cfg.closure
    if c.regime not in REGIMES:
        raise ConfigError(f"closure.regime: unknown {c.regime!r}; expected {REGIMES}")
    if c.scheme not in ("rk4", "adaptive"):
        raise ConfigError("closure.scheme must be 'rk4' or 'adaptive'")
    if c.provider not in ("gaussian", "monte_carlo"):
        raise ConfigError("closure.provider must be 'gaussian' or 'monte_carlo'")
    if len(c.t_span) != 2 or not all(_is_number(x) for x in c.t_span) or not c.t_span[1] > c.t_span[0]:
        raise ConfigError("closure.t_span must be [t0, t1] with t1 > t0")
    if c.regime == "adiabatic":
        if c.epsilon != 0:
            raise ConfigError("closure.epsilon must be 0 for the adiabatic regime")
    elif not 0 < c.epsilon <= 1:
        raise ConfigError("closure.epsilon must lie in (0, 1]")
    if c.dt is not None and c.dt <= 0:
        raise ConfigError("closure.dt must be positive")
    if c.record_every < 1:
        raise ConfigError("closure.record_every must be >= 1")
    if cfg.initial is not None:
        if m and len(cfg.initial.lambda0) != m:
            raise ConfigError(f"initial.lambda0 has length {len(cfg.initial.lambda0)}, expected {m}")
        _matrix(cfg.initial.lambda0, len(cfg.initial.lambda0), "initial.lambda0", square=False)
        if cfg.initial.M0 is not None:
            M0 = _matrix(cfg.initial.M0, len(cfg.initial.lambda0), "initial.M0")
            if not np.allclose(M0, M0.T) or np.linalg.eigvalsh(M0).min() <= 0:
                raise ConfigError("initial.M0 must be symmetric positive-definite")
            if c.regime in ("even_analytic",):
                raise ConfigError("even_analytic needs fully specified initial data (omit initial.M0)")
        elif c.regime == "near_M":
            raise ConfigError("near_M cannot start from fully specified data; give initial.M0 or use near_G")
    r = cfg.resolve
    if r.n_traj < 2 or r.dt <= 0 or r.energy_bound <= 0:
        raise ConfigError("resolve: n_traj >= 2, dt > 0, energy_bound > 0 required")
    g = r.t_grid
    if not g.step > 0 or not g.stop > g.start or g.start < 0:
        raise ConfigError("resolve.t_grid: need 0 <= start < stop and step > 0")
    if abs(g.step / r.dt - round(g.step / r.dt)) > 1e-6 or abs(g.start / r.dt - round(g.start / r.dt)) > 1e-6:
        raise ConfigError("resolve.t_grid must lie on multiples of resolve.dt")
    t = cfg.tune
    if len(t.bracket) != 2 or not all(_is_number(x) for x in t.bracket) or not 0 < t.bracket[0] < t.bracket[1] <= 1:
        raise ConfigError("tune.bracket must satisfy 0 < lo < hi <= 1")
    if t.closure_dt <= 0 or abs(g.step / t.closure_dt - round(g.step / t.closure_dt)) > 1e-6:
        raise ConfigError("tune.closure_dt must divide resolve.t_grid.step")
    if t.window_entropy_fraction is not None and not 0 < t.window_entropy_fraction < 1:
        raise ConfigError("tune.window_entropy_fraction must lie in (0, 1)")
    v = cfg.verify
    if v.C <= 0 or v.D < 0 or not 0 < v.epsilon <= 1 or v.t_end <= 0 or v.riccati_dt <= 0:
        raise ConfigError("verify: C > 0, D >= 0, 0 < epsilon <= 1, t_end > 0, riccati_dt > 0 required")
    if v.hj_points < 5 or len(v.hj_range) != 2 or not v.hj_range[0] < v.lambda0 < v.hj_range[1]:
        raise ConfigError("verify: hj_points >= 5 and hj_range must contain lambda0")
    if v.spd_instances < 0 or v.spd_dim < 1 or v.d_check_samples < 20:
        raise ConfigError("verify: spd_instances >= 0, spd_dim >= 1, d_check_samples >= 20 required")


def parse_config(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "config")
    _validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(data)


def config_hash(cfg: ExperimentConfig) -> str:
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def substream_seed(root: int, name: str) -> int:
    """Independent 63-bit seed for the named component stream."""
    state = np.random.SeedSequence([int(root), zlib.crc32(name.encode())]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
