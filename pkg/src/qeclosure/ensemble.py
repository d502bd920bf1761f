"""Equilibrium / quasi-equilibrium sampling and Monte Carlo moment estimation.

The quasi-equilibrium density at natural parameter ``lam`` is
``exp(lam.A(z) - phi(lam)) rho_eq(z)`` with ``rho_eq`` canonical at inverse
temperature ``beta``.  Expectations under it are taken either by reweighting a
cached equilibrium batch or by sampling the tilted density directly.
"""

from __future__ import annotations

import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateObservablesError, LowOverlapError, SamplingError
from .hamiltonian import HamiltonianSystem, ObservableSet, evaluate_observables, liouville_values

__all__ = [
    "EquilibriumSpec",
    "SampleBatch",
    "MomentSet",
    "sample_equilibrium",
    "resample_quasi_equilibrium",
    "log_partition_shift",
    "reweight",
    "estimate_moments",
    "moment_statistics",
    "block_standard_errors",
    "write_batch",
    "read_batch",
    "N_BLOCKS",
]

N_BLOCKS = 10
COND_LIMIT = 1e10


@dataclass(frozen=True)
class EquilibriumSpec:
    """Canonical ensemble and sampler settings.

    ``chains`` random-walk chains are advanced in lockstep, ``chain_group`` at a
    time; each group draws from its own counter-based stream so the output does
    not depend on how many worker threads process the groups.
    """

    beta: float = 1.0
    burn_in: int = 500
    thinning: int = 10
    proposal_scale: float = 0.5
    analytic_gaussian: bool = False
    chains: int = 256
    chain_group: int = 64
    ess_floor: float = 0.05

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.burn_in < 1 or self.thinning < 1:
            raise ValueError("burn_in and thinning must be >= 1")
        if self.chains < 1 or self.chain_group < 1:
            raise ValueError("chains and chain_group must be >= 1")
        if not 0 <= self.ess_floor < 1:
            raise ValueError("ess_floor must be a fraction in [0, 1)")


@dataclass
class SampleBatch:
    points: np.ndarray
    log_weights: np.ndarray
    lambda_tag: np.ndarray
    seed: Optional[int] = None
    beta: float = 1.0
    diagnostics: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.log_weights = np.asarray(self.log_weights, dtype=float).reshape(-1)
        self.lambda_tag = np.atleast_1d(np.asarray(self.lambda_tag, dtype=float))
        if len(self.log_weights) != len(self.points):
            raise ValueError("one log-weight per point required")

    @property
    def count(self) -> int:
        return len(self.points)

    @property
    def n(self) -> int:
        return self.points.shape[1] // 2

    @property
    def weights(self) -> np.ndarray:
        lw = self.log_weights - self.log_weights.max()
        w = np.exp(lw)
        return w / w.sum()

    @property
    def ess(self) -> float:
        w = self.weights
        return float(1.0 / np.sum(w * w))

    @property
    def is_equilibrium(self) -> bool:
        return not np.any(self.lambda_tag)

    def observables(self, obs_set: ObservableSet) -> np.ndarray:
        key = ("A", id(obs_set))
        if key not in self._cache:
            self._cache[key] = evaluate_observables(obs_set, self.points)
        return self._cache[key]

    def liouville(self, system: HamiltonianSystem, obs_set: ObservableSet) -> np.ndarray:
        key = ("LA", id(system), id(obs_set))
        if key not in self._cache:
            self._cache[key] = np.stack(
                [liouville_values(system, o, self.points) for o in obs_set], axis=-1)
        return self._cache[key]


# --- sampling ----------------------------------------------------------------


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *keys])))


def _tilt(lam):
    """``lam`` as an array, or None when there is no tilt."""
    if lam is None:
        return None
    lam = np.asarray(lam, dtype=float)
    return lam if np.any(lam) else None


def _exact_gaussian(system, spec, obs_set, lam, count, seed):
    if system.hessian is None:
        raise SamplingError(f"analytic_gaussian requested but {system.label!r} is not quadratic")
    dim = 2 * system.n
    precision = spec.beta * system.hessian
    linear = np.zeros(dim)
    if lam is not None:
        if not obs_set.is_quadratic:
            raise SamplingError("exact tilted sampling needs observables with a quadratic form")
        for lk, obs in zip(lam, obs_set):
            Q, b, _ = obs.quadratic
            precision = precision - lk * Q
            linear = linear + lk * b
    try:
        chol = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        raise SamplingError("tilted density is not normalizable (precision not positive-definite)") from None
    mean = np.linalg.solve(precision, linear)
    rng = _stream(seed, 0)
    xi = rng.standard_normal((count, dim))
    # z = mean + L^{-T} xi has covariance precision^{-1}
    pts = mean + np.linalg.solve(chol.T, xi.T).T
    return pts, {"method": "exact_gaussian"}


def _metropolis(system, spec, obs_set, lam, count, seed, workers=1):
    dim = 2 * system.n
    beta = spec.beta
    if system.quadratic_part is not None:
        cov = np.linalg.inv(beta * system.quadratic_part)
        precond = np.linalg.cholesky(0.5 * (cov + cov.T))
    else:
        precond = np.eye(dim) / np.sqrt(beta)

    def log_target(z):
        out = -beta * system.energy(z)
        if lam is not None:
            out = out + evaluate_observables(obs_set, z) @ lam
        return out

    chains = min(spec.chains, count)
    per_chain = -(-count // chains)
    groups = [(g, min(spec.chain_group, chains - g)) for g in range(0, chains, spec.chain_group)]

    def run_group(args):
        start, size = args
        rng = _stream(seed, 1, start)
        z = rng.standard_normal((size, dim)) @ precond.T
        lp = log_target(z)
        if not np.all(np.isfinite(lp)):
            raise SamplingError(f"non-finite energy at initial chain states of {system.label!r}")
        out = np.empty((size, per_chain, dim))
        accepted = 0
        proposed = 0
        rejected_nonfinite = 0
        total = spec.burn_in + per_chain * spec.thinning
        k = 0
        for step in range(total):
            prop = z + spec.proposal_scale * (rng.standard_normal((size, dim)) @ precond.T)
            lp_prop = log_target(prop)
            bad = ~np.isfinite(lp_prop)
            rejected_nonfinite += int(bad.sum())
            lp_prop = np.where(bad, -np.inf, lp_prop)
            accept = np.log(rng.random(size)) < lp_prop - lp
            z = np.where(accept[:, None], prop, z)
            lp = np.where(accept, lp_prop, lp)
            if step >= spec.burn_in:
                accepted += int(accept.sum())
                proposed += size
                if (step - spec.burn_in + 1) % spec.thinning == 0:
                    out[:, k] = z
                    k += 1
        return out.reshape(size * per_chain, dim), accepted, proposed, rejected_nonfinite

    if workers > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_group, groups))
    else:
        results = [run_group(g) for g in groups]
    pts = np.concatenate([r[0] for r in results])[:count]
    accepted = sum(r[1] for r in results)
    proposed = sum(r[2] for r in results)
    rate = accepted / proposed if proposed else float("nan")
    diag = {
        "method": "metropolis",
        "acceptance_rate": rate,
        "chains": chains,
        "rejected_nonfinite": sum(r[3] for r in results),
        "warnings": [],
    }
    if not 0.1 <= rate <= 0.9:
        msg = f"Metropolis acceptance rate {rate:.3f} outside [0.1, 0.9]; adjust proposal_scale"
        diag["warnings"].append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return pts, diag


def _draw(system, spec, obs_set, lam, count, seed, workers):
    if count < 1:
        raise ValueError("count must be >= 1")
    tilt = _tilt(lam)
    if spec.analytic_gaussian:
        pts, diag = _exact_gaussian(system, spec, obs_set, tilt, count, seed)
    else:
        pts, diag = _metropolis(system, spec, obs_set, tilt, count, seed, workers)
    energies = system.energy(pts)
    if not np.all(np.isfinite(energies)):
        raise SamplingError(f"non-finite energy in samples of {system.label!r}")
    return pts, diag


def sample_equilibrium(system: HamiltonianSystem, spec: EquilibriumSpec, count: int, seed: int,
                       workers: int = 1, m: int = 1) -> SampleBatch:
    """Draw ``count`` points from the canonical ensemble (uniform weights).

    ``m`` only sizes the zero ``lambda_tag`` of the returned batch.
    """
    pts, diag = _draw(system, spec, None, None, count, seed, workers)
    return SampleBatch(pts, np.zeros(len(pts)), np.zeros(m), seed, spec.beta, diag)


def resample_quasi_equilibrium(system: HamiltonianSystem, spec: EquilibriumSpec, obs_set: ObservableSet,
                               lam, count: int, seed: int, workers: int = 1) -> SampleBatch:
    """Uniform-weight draws targeting ``exp(lam.A - beta H)`` directly."""
    lam = np.asarray(lam, dtype=float).reshape(obs_set.m)
    pts, diag = _draw(system, spec, obs_set, lam, count, seed, workers)
    return SampleBatch(pts, np.zeros(len(pts)), lam.copy(), seed, spec.beta, diag)


# --- reweighting ---------------------------------------------------------------


def _require_equilibrium(batch):
    if not batch.is_equilibrium:
        raise ValueError("reweighting needs a batch sampled at lambda = 0")


def _tilted_log_weights(batch, obs_set, lam, ess_floor):
    _require_equilibrium(batch)
    lam = np.asarray(lam, dtype=float).reshape(obs_set.m)
    base = batch.log_weights - logsumexp(batch.log_weights)
    x = batch.observables(obs_set) @ lam
    phi = float(logsumexp(base + x))
    logw = base + x - phi
    ess = float(np.exp(2 * logsumexp(logw) - logsumexp(2 * logw)))
    if ess < ess_floor * batch.count:
        raise LowOverlapError(
            f"reweighted ESS {ess:.1f} below floor {ess_floor * batch.count:.1f} at lambda={lam}; "
            "use resample_quasi_equilibrium", ess=ess)
    return logw, phi


def log_partition_shift(batch: SampleBatch, obs_set: ObservableSet, lam, ess_floor: float = 0.05) -> float:
    """``phi(lam) = log <exp(lam.A)>_eq`` by log-mean-exp over an equilibrium batch."""
    if not np.any(lam):
        return 0.0
    return _tilted_log_weights(batch, obs_set, lam, ess_floor)[1]


def reweight(batch: SampleBatch, obs_set: ObservableSet, lam, ess_floor: float = 0.05) -> SampleBatch:
    lam = np.asarray(lam, dtype=float).reshape(obs_set.m)
    if not np.any(lam):
        _require_equilibrium(batch)
        out = SampleBatch(batch.points, batch.log_weights.copy(), lam.copy(), batch.seed, batch.beta,
                          dict(batch.diagnostics))
    else:
        logw, phi = _tilted_log_weights(batch, obs_set, lam, ess_floor)
        out = SampleBatch(batch.points, logw, lam.copy(), batch.seed, batch.beta,
                          dict(batch.diagnostics, phi=phi))
    out._cache.update(batch._cache)
    return out


# --- moments -------------------------------------------------------------------


@dataclass
class MomentSet:
    """All lambda-dependent statistics at one natural parameter."""

    lam: np.ndarray
    a: np.ndarray
    phi: float
    C: np.ndarray
    drift: np.ndarray
    D: np.ndarray
    w: float
    grad_w: Optional[np.ndarray] = None
    hess_w: Optional[np.ndarray] = None
    std_errors: dict = field(default_factory=dict)
    ess: float = float("nan")

    @property
    def m(self) -> int:
        return self.lam.size

    def to_dict(self) -> dict:
        def enc(x):
            return None if x is None else np.asarray(x, dtype=float).tolist()

        return {
            "lambda": enc(self.lam), "a": enc(self.a), "phi": self.phi, "C": enc(self.C),
            "drift": enc(self.drift), "D": enc(self.D), "w": self.w,
            "grad_w": enc(self.grad_w), "hess_w": enc(self.hess_w),
            "std_errors": {k: enc(v) for k, v in self.std_errors.items()}, "ess": self.ess,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MomentSet":
        def dec(x):
            return None if x is None else np.asarray(x, dtype=float)

        return cls(dec(d["lambda"]), dec(d["a"]), d["phi"], dec(d["C"]), dec(d["drift"]), dec(d["D"]),
                   d["w"], dec(d.get("grad_w")), dec(d.get("hess_w")),
                   {k: dec(v) for k, v in d.get("std_errors", {}).items()}, d.get("ess", float("nan")))


def _check_cov(C):
    cond = np.linalg.cond(C)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise DegenerateObservablesError(f"observable covariance is singular (condition number {cond:.3g})")


def moment_statistics(A: np.ndarray, LA: np.ndarray, w: np.ndarray, check: bool = True) -> dict:
    """Weighted ``a, C, drift, D`` from per-sample ``A`` and ``LA`` (``w`` sums to 1)."""
    a = w @ A
    dA = A - a
    C = dA.T @ (w[:, None] * dA)
    C = 0.5 * (C + C.T)
    if check:
        _check_cov(C)
    drift = w @ LA
    cross = LA.T @ (w[:, None] * dA)  # <LA (A - a)^T>
    qla = LA - dA @ np.linalg.solve(C, cross.T)
    D = qla.T @ (w[:, None] * qla)
    D = 0.5 * (D + D.T)
    return {"a": a, "C": C, "drift": drift, "D": D}


def block_standard_errors(stat_fn, n_items: int, n_blocks: int = N_BLOCKS) -> dict:
    """Batch-means standard errors: ``stat_fn(slice)`` returns a dict of arrays."""
    if n_items < 2 * n_blocks:
        return {}
    edges = np.linspace(0, n_items, n_blocks + 1).astype(int)
    blocks = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        try:
            blocks.append(stat_fn(slice(lo, hi)))
        except DegenerateObservablesError:
            return {}
    return {k: np.std([np.asarray(b[k], dtype=float) for b in blocks], axis=0, ddof=1) / np.sqrt(n_blocks)
            for k in blocks[0]}


def _moments_from_arrays(lam, A, LA, logw, phi, n_blocks=N_BLOCKS):
    w = np.exp(logw - logsumexp(logw))
    stats = moment_statistics(A, LA, w)
    w_val = 0.5 * float(lam @ stats["D"] @ lam)

    def on_block(sl):
        lw = logw[sl]
        wb = np.exp(lw - logsumexp(lw))
        s = moment_statistics(A[sl], LA[sl], wb)
        s["w"] = 0.5 * float(lam @ s["D"] @ lam)
        return s

    se = block_standard_errors(on_block, len(A), n_blocks)
    return MomentSet(lam.copy(), stats["a"], phi, stats["C"], stats["drift"], stats["D"], w_val,
                     std_errors=se, ess=float(1.0 / np.sum(w * w)))


def estimate_moments(system: HamiltonianSystem, obs_set: ObservableSet, lam, batch: SampleBatch,
                     spec: Optional[EquilibriumSpec] = None, resample_count: Optional[int] = None,
                     seed: Optional[int] = None, ess_floor: Optional[float] = None) -> MomentSet:
    """Moments at ``lam`` from a batch tagged ``lam`` or an equilibrium batch.

    An equilibrium batch is reweighted; if its overlap is too poor and ``spec``
    is given, a fresh chain targeting ``lam`` is run instead (``phi`` is then
    unavailable and reported as NaN).
    """
    lam = np.asarray(lam, dtype=float).reshape(obs_set.m)
    floor = ess_floor if ess_floor is not None else (spec.ess_floor if spec else 0.05)
    if batch.lambda_tag.shape == lam.shape and np.array_equal(batch.lambda_tag, lam):
        phi = 0.0 if not np.any(lam) else batch.diagnostics.get("phi", float("nan"))
        return _moments_from_arrays(lam, batch.observables(obs_set), batch.liouville(system, obs_set),
                                    batch.log_weights, phi)
    try:
        rw = reweight(batch, obs_set, lam, floor)
    except LowOverlapError:
        if spec is None:
            raise
        fresh = resample_quasi_equilibrium(system, spec, obs_set, lam, resample_count or batch.count,
                                           seed if seed is not None else (batch.seed or 0) + 1)
        return estimate_moments(system, obs_set, lam, fresh)
    return _moments_from_arrays(lam, rw.observables(obs_set), rw.liouville(system, obs_set),
                                rw.log_weights, rw.diagnostics.get("phi", 0.0))


# --- batch cache file ------------------------------------------------------------

_MAGIC = b"QEBATCH1"
_HEADER = struct.Struct("<8sIQdqI")  # magic, n, count, beta, seed, m


def write_batch(path, batch: SampleBatch) -> None:
    """Columnar little-endian float64 cache: header, lambda_tag, q/p columns, log-weights."""
    seed = -1 if batch.seed is None else int(batch.seed)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, batch.n, batch.count, float(batch.beta), seed, batch.lambda_tag.size))
        fh.write(batch.lambda_tag.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(batch.points.T).astype("<f8").tobytes())
        fh.write(batch.log_weights.astype("<f8").tobytes())


def read_batch(path) -> SampleBatch:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, n, count, beta, seed, m = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a batch cache file")
    off = _HEADER.size
    lam = np.frombuffer(raw, "<f8", m, off)
    off += 8 * m
    cols = np.frombuffer(raw, "<f8", 2 * n * count, off).reshape(2 * n, count)
    off += 8 * 2 * n * count
    logw = np.frombuffer(raw, "<f8", count, off)
    return SampleBatch(cols.T.copy(), logw.copy(), lam.copy(), None if seed < 0 else seed, beta)
