"""Lack-of-fit Lagrangian, its Legendre dual, the adiabatic drift and its
derivatives, closure-potential derivatives and the near-equilibrium matrices.

Moment information reaches the closure through a *provider*: any object with
``moments(lam, crn=False) -> MomentSet``.  `MonteCarloProvider` reweights one
cached equilibrium batch (common random numbers for finite differences);
`GaussianLinearProvider` gives exact moments for linear observables of a
quadratic Hamiltonian.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .ensemble import (
    EquilibriumSpec,
    MomentSet,
    SampleBatch,
    _moments_from_arrays,
    block_standard_errors,
    estimate_moments,
    moment_statistics,
    resample_quasi_equilibrium,
)
from .errors import DegenerateObservablesError, LowOverlapError
from .hamiltonian import HamiltonianSystem, ObservableSet

__all__ = [
    "NearEqMatrices",
    "ConjugatePair",
    "residual_at",
    "lagrangian_eval",
    "legendre_mu",
    "hamiltonian_eval",
    "adiabatic_drift",
    "drift_jacobian",
    "closure_potential_derivatives",
    "near_eq_matrices",
    "default_step",
    "MonteCarloProvider",
    "GaussianLinearProvider",
]


def _solve_C(C, rhs):
    try:
        return np.linalg.solve(C, rhs)
    except np.linalg.LinAlgError:
        raise DegenerateObservablesError("Fisher matrix C is singular") from None


def _vec(x, m):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != m:
        raise ValueError(f"expected a {m}-vector, got size {x.size}")
    return x


# --- pointwise and algebraic operations --------------------------------------


def residual_at(obs_values, la_values, moments: MomentSet, lam, lam_dot) -> np.ndarray:
    """Liouville residual ``lam_dot.(A - a) + lam.LA`` at sample point(s).

    ``obs_values``/``la_values`` are ``A(z)`` and ``LA(z)`` with trailing axis ``m``.
    """
    m = moments.m
    lam = _vec(lam, m)
    lam_dot = _vec(lam_dot, m)
    A = np.asarray(obs_values, dtype=float)
    LA = np.asarray(la_values, dtype=float)
    if A.shape[-1] != m or LA.shape[-1] != m:
        raise ValueError(f"observable arrays must have trailing dimension {m}")
    return (A - moments.a) @ lam_dot + LA @ lam


def lagrangian_eval(moments: MomentSet, lam, lam_dot, epsilon: float) -> float:
    """``(lam_dot - f).C.(lam_dot - f)/2 + epsilon^2 w`` with ``f = C^{-1} drift``."""
    m = moments.m
    lam_dot = _vec(lam_dot, m)
    dev = lam_dot - _solve_C(moments.C, moments.drift)
    return 0.5 * float(dev @ moments.C @ dev) + epsilon**2 * moments.w


def hamiltonian_eval(moments: MomentSet, lam, mu, epsilon: float) -> float:
    """``mu.C^{-1}.mu/2 + drift.C^{-1}.mu - epsilon^2 w``."""
    mu = _vec(mu, moments.m)
    cinv_mu = _solve_C(moments.C, mu)
    return 0.5 * float(mu @ cinv_mu) + float(moments.drift @ cinv_mu) - epsilon**2 * moments.w


@dataclass(frozen=True)
class ConjugatePair:
    mu: np.ndarray
    hamiltonian_value: float


def legendre_mu(moments: MomentSet, lam, lam_dot, epsilon: float = 1.0) -> ConjugatePair:
    lam_dot = _vec(lam_dot, moments.m)
    mu = moments.C @ lam_dot - moments.drift
    return ConjugatePair(mu, hamiltonian_eval(moments, lam, mu, epsilon))


def adiabatic_drift(moments: MomentSet) -> np.ndarray:
    """``f(lam) = C^{-1} <LA>``, the ``d lam/dt`` of the adiabatic closure."""
    return _solve_C(moments.C, moments.drift)


def default_step(lam, rel: float = 1e-3) -> np.ndarray:
    return rel * (1.0 + np.abs(np.asarray(lam, dtype=float)))


def _probe(provider, lam, direction):
    try:
        return provider.moments(lam, crn=True)
    except LowOverlapError as exc:
        raise LowOverlapError(f"finite-difference probe along direction {direction} failed: {exc}",
                              ess=exc.ess, direction=direction) from exc


def drift_jacobian(provider, lam, step=None) -> np.ndarray:
    """Central-difference Jacobian ``df_i/dlam_j`` of the adiabatic drift."""
    lam = np.asarray(lam, dtype=float).reshape(-1)
    m = lam.size
    h = default_step(lam) if step is None else np.broadcast_to(np.asarray(step, dtype=float), (m,))
    if np.any(h <= 0):
        raise ValueError("finite-difference step must be positive")
    jac = np.empty((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = h[j]
        fp = adiabatic_drift(_probe(provider, lam + e, j))
        fm = adiabatic_drift(_probe(provider, lam - e, j))
        jac[:, j] = (fp - fm) / (2 * h[j])
    return jac


def closure_potential_derivatives(provider, lam, step=None):
    """Gradient and (symmetrized) Hessian of ``w`` by central differences."""
    lam = np.asarray(lam, dtype=float).reshape(-1)
    m = lam.size
    h = default_step(lam) if step is None else np.broadcast_to(np.asarray(step, dtype=float), (m,))
    if np.any(h <= 0):
        raise ValueError("finite-difference step must be positive")
    w0 = _probe(provider, lam, None).w
    grad = np.empty(m)
    hess = np.empty((m, m))
    wp = np.empty(m)
    wm = np.empty(m)
    for i in range(m):
        e = np.zeros(m)
        e[i] = h[i]
        wp[i] = _probe(provider, lam + e, i).w
        wm[i] = _probe(provider, lam - e, i).w
        grad[i] = (wp[i] - wm[i]) / (2 * h[i])
        hess[i, i] = (wp[i] - 2 * w0 + wm[i]) / h[i] ** 2
    for i in range(m):
        for j in range(i + 1, m):
            ei = np.zeros(m)
            ej = np.zeros(m)
            ei[i] = h[i]
            ej[j] = h[j]
            wpp = _probe(provider, lam + ei + ej, (i, j)).w
            wpm = _probe(provider, lam + ei - ej, (i, j)).w
            wmp = _probe(provider, lam - ei + ej, (i, j)).w
            wmm = _probe(provider, lam - ei - ej, (i, j)).w
            hess[i, j] = hess[j, i] = (wpp - wpm - wmp + wmm) / (4 * h[i] * h[j])
    return grad, 0.5 * (hess + hess.T)


# --- near-equilibrium matrices ----------------------------------------------------


@dataclass
class NearEqMatrices:
    """Constant linear-response matrices ``C``, ``J``, ``D`` (and the cross-check ``D_alt``)."""

    C: np.ndarray
    Jmat: np.ndarray
    D: np.ndarray
    D_alt: Optional[np.ndarray] = None
    std_errors: dict = field(default_factory=dict)
    ess: float = float("nan")
    mean: Optional[np.ndarray] = None

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.Jmat = np.atleast_2d(np.asarray(self.Jmat, dtype=float))
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        if self.D_alt is None:
            self.D_alt = self.D.copy()
        else:
            self.D_alt = np.atleast_2d(np.asarray(self.D_alt, dtype=float))

    @property
    def m(self) -> int:
        return self.C.shape[0]

    def j_is_zero(self, n_sigma: float = 4.0) -> bool:
        se = self.std_errors.get("Jmat")
        if se is None:
            return bool(np.allclose(self.Jmat, 0.0))
        return bool(np.all(np.abs(self.Jmat) <= n_sigma * se))

    def d_consistent(self, n_sigma: float = 3.0) -> bool:
        se = self.std_errors.get("D_minus_D_alt")
        diff = np.abs(self.D - self.D_alt)
        if se is None:
            return bool(np.allclose(diff, 0.0, atol=1e-12))
        return bool(np.max(diff - n_sigma * se) <= 0.0)

    def to_dict(self) -> dict:
        return {
            "C": self.C.tolist(), "J": self.Jmat.tolist(), "D": self.D.tolist(), "D_alt": self.D_alt.tolist(),
            "std_errors": {k: np.asarray(v).tolist() for k, v in self.std_errors.items()},
            "ess": self.ess, "mean": None if self.mean is None else np.asarray(self.mean).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NearEqMatrices":
        return cls(d["C"], d["J"], d["D"], d.get("D_alt"),
                   {k: np.asarray(v) for k, v in d.get("std_errors", {}).items()},
                   d.get("ess", float("nan")), None if d.get("mean") is None else np.asarray(d["mean"]))


def _near_eq_stats(A, LA, w, check=True):
    mean = w @ A
    dA = A - mean
    C = dA.T @ (w[:, None] * dA)
    C = 0.5 * (C + C.T)
    if check:
        cond = np.linalg.cond(C)
        if not np.isfinite(cond) or cond > 1e10:
            raise DegenerateObservablesError(f"equilibrium covariance singular (cond {cond:.3g})")
    cross = LA.T @ (w[:, None] * dA)  # <LA A^T>
    J = 0.5 * (cross - cross.T)
    qla = LA - dA @ np.linalg.solve(C, cross.T)
    D = qla.T @ (w[:, None] * qla)
    D = 0.5 * (D + D.T)
    lala = LA.T @ (w[:, None] * LA)
    D_alt = 0.5 * (lala + lala.T) + J @ np.linalg.solve(C, J)
    D_alt = 0.5 * (D_alt + D_alt.T)
    return {"C": C, "Jmat": J, "D": D, "D_alt": D_alt, "D_minus_D_alt": D - D_alt, "mean": mean}


def near_eq_matrices(system: HamiltonianSystem, eq_batch: SampleBatch, obs_set: ObservableSet) -> NearEqMatrices:
    """``C = <AA^T>``, ``J = <(LA)A^T>``, ``D = <(QLA)(QLA)^T>`` at equilibrium.

    ``A`` is centered by its sample mean; ``J`` is antisymmetrized.
    """
    if not eq_batch.is_equilibrium:
        raise ValueError("near_eq_matrices needs an equilibrium batch")
    A = eq_batch.observables(obs_set)
    LA = eq_batch.liouville(system, obs_set)
    w = eq_batch.weights
    stats = _near_eq_stats(A, LA, w)

    def on_block(sl):
        ww = w[sl] / w[sl].sum()
        s = _near_eq_stats(A[sl], LA[sl], ww)
        s.pop("mean")
        return s

    se = block_standard_errors(on_block, len(A))
    return NearEqMatrices(stats["C"], stats["Jmat"], stats["D"], stats["D_alt"], se,
                          float(1.0 / np.sum(w * w)), stats["mean"])


# --- providers ------------------------------------------------------------------


class GaussianLinearProvider:
    """Exact moments for linear observables of a quadratic Hamiltonian.

    Tilting a Gaussian by ``lam.A`` shifts its mean only, so ``a = C lam``,
    ``phi = lam.C.lam/2``, ``drift = J lam`` and ``D(lam) = D0 + (J lam)(J lam)^T``
    with ``C, J, D0`` the equilibrium matrices.
    """

    def __init__(self, C, J, D0):
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        self.J = np.atleast_2d(np.asarray(J, dtype=float))
        self.D0 = np.atleast_2d(np.asarray(D0, dtype=float))
        self.id = "gaussian-linear"

    @classmethod
    def from_matrices(cls, mats: NearEqMatrices) -> "GaussianLinearProvider":
        return cls(mats.C, mats.Jmat, mats.D)

    def moments(self, lam, crn: bool = False) -> MomentSet:
        lam = np.asarray(lam, dtype=float).reshape(-1)
        drift = self.J @ lam
        D = self.D0 + np.outer(drift, drift)
        return MomentSet(lam.copy(), self.C @ lam, 0.5 * float(lam @ self.C @ lam), self.C.copy(), drift, D,
                         0.5 * float(lam @ D @ lam), self.D0 @ lam, 0.5 * (self.D0 + self.D0.T), {}, float("inf"))


class MonteCarloProvider:
    """Moments at any ``lam`` from one cached equilibrium batch.

    Reweighting is used while the effective sample size stays above
    ``ess_floor * count``; otherwise (unless ``crn`` is requested) a fresh
    chain targeting ``lam`` is run.  Results are memoized; with
    ``cache_radius > 0`` queries are snapped to a grid of that spacing.
    """

    def __init__(self, system: HamiltonianSystem, obs_set: ObservableSet, eq_batch: SampleBatch,
                 spec: Optional[EquilibriumSpec] = None, resample_count: Optional[int] = None,
                 seed: int = 0, ess_floor: Optional[float] = None, cache_radius: float = 0.0,
                 with_errors: bool = False):
        if not eq_batch.is_equilibrium:
            raise ValueError("provider needs an equilibrium batch")
        self.system = system
        self.obs_set = obs_set
        self.batch = eq_batch
        self.spec = spec
        self.resample_count = resample_count or eq_batch.count
        self.seed = seed
        self.ess_floor = ess_floor if ess_floor is not None else (spec.ess_floor if spec else 0.05)
        self.cache_radius = cache_radius
        self.with_errors = with_errors
        self._A = eq_batch.observables(obs_set)
        self._LA = eq_batch.liouville(system, obs_set)
        self._base = eq_batch.log_weights - logsumexp(eq_batch.log_weights)
        self._cache = {}
        self._lock = threading.Lock()
        self.resampled = 0
        self.id = f"monte-carlo(seed={eq_batch.seed}, count={eq_batch.count})"

    def _key(self, lam):
        if self.cache_radius > 0:
            lam = np.round(lam / self.cache_radius) * self.cache_radius
        return lam, tuple(lam.tolist())

    def moments(self, lam, crn: bool = False) -> MomentSet:
        lam, key = self._key(np.asarray(lam, dtype=float).reshape(-1))
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        x = self._A @ lam
        phi = float(logsumexp(self._base + x))
        logw = self._base + x - phi
        ess = float(np.exp(2 * logsumexp(logw) - logsumexp(2 * logw)))
        if ess >= self.ess_floor * len(logw):
            if self.with_errors:
                ms = _moments_from_arrays(lam, self._A, self._LA, logw, phi)
            else:
                ms = _fast_moments(lam, self._A, self._LA, logw, phi, ess)
        elif crn or self.spec is None:
            raise LowOverlapError(f"reweighted ESS {ess:.1f} below floor at lambda={lam}", ess=ess)
        else:
            fresh = resample_quasi_equilibrium(self.system, self.spec, self.obs_set, lam,
                                               self.resample_count, self.seed + 1 + self.resampled)
            self.resampled += 1
            ms = estimate_moments(self.system, self.obs_set, lam, fresh)
        with self._lock:
            self._cache[key] = ms
        return ms


def _fast_moments(lam, A, LA, logw, phi, ess):
    w = np.exp(logw)
    s = moment_statistics(A, LA, w)
    return MomentSet(lam.copy(), s["a"], phi, s["C"], s["drift"], s["D"], 0.5 * float(lam @ s["D"] @ lam),
                     ess=ess)


def with_derivatives(provider, lam, step=None) -> MomentSet:
    """Moments at ``lam`` with ``grad_w`` and ``hess_w`` filled in."""
    ms = provider.moments(lam)
    if ms.grad_w is not None and ms.hess_w is not None:
        return ms
    grad, hess = closure_potential_derivatives(provider, lam, step)
    return replace(ms, grad_w=grad, hess_w=hess)
