"""Canonical Hamiltonian systems, resolved observables and their Liouville action.

Phase points are stored as flat arrays ``z = (q, p)`` of length ``2n``; every
function here also accepts a stack of points with shape ``(N, 2n)`` and then
returns one value per row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EvaluationError, UnsupportedSchemeError

__all__ = [
    "PhaseVector",
    "HamiltonianSystem",
    "Observable",
    "ObservableSet",
    "liouville_apply",
    "liouville_values",
    "time_reverse",
    "symplectic_step",
    "evolve",
    "evaluate_observables",
    "harmonic_oscillator",
    "harmonic_chain",
    "fpu_chain",
    "make_system",
    "position",
    "momentum",
    "position_square",
    "linear_observable",
    "make_observable",
    "observable_set",
    "chain_stiffness",
    "SYSTEMS",
]


@dataclass(frozen=True)
class PhaseVector:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        if q.shape != p.shape or q.ndim != 1:
            raise ValueError(f"q and p must be 1-d of equal length, got {q.shape} and {p.shape}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise ValueError("phase vector entries must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return self.q.size

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])

    @classmethod
    def from_array(cls, z) -> "PhaseVector":
        z = np.asarray(z, dtype=float)
        n = z.size // 2
        return cls(z[:n], z[n:])


def _as_points(z) -> np.ndarray:
    if isinstance(z, PhaseVector):
        return z.as_array()
    return np.asarray(z, dtype=float)


@dataclass
class HamiltonianSystem:
    """A canonical Hamiltonian ``H(q, p)`` with analytic gradient.

    Separable systems have ``H = |p|^2 / 2 + V(q)`` (unit masses) and provide
    ``potential_gradient``; only those can be integrated by `symplectic_step`.
    ``hessian`` is the constant Hessian of ``H`` for purely quadratic systems
    and enables exact Gaussian sampling.  ``quadratic_part`` is the Hessian of
    the harmonic part of ``H`` (used as a sampler preconditioner).
    """

    n: int
    energy: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    separable: bool
    label: str
    potential_gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hessian: Optional[np.ndarray] = None
    quadratic_part: Optional[np.ndarray] = None
    params: dict = field(default_factory=dict)

    def flow(self, z) -> np.ndarray:
        """Hamiltonian vector field ``J grad H``."""
        g = self.gradient(_as_points(z))
        n = self.n
        return np.concatenate([g[..., n:], -g[..., :n]], axis=-1)


@dataclass
class Observable:
    """A resolved variable ``A_k(z)`` with gradient and time-reversal parity.

    ``quadratic`` optionally records ``A(z) = z.Q.z/2 + b.z + c`` as a tuple
    ``(Q, b, c)``; the samplers use it for exact Gaussian draws.
    """

    id: str
    parity: str
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    quadratic: Optional[tuple] = None

    def __post_init__(self):
        if self.parity not in ("even", "odd", "unknown"):
            raise ValueError(f"parity must be even/odd/unknown, got {self.parity!r}")


@dataclass
class ObservableSet:
    observables: list

    def __post_init__(self):
        self.observables = list(self.observables)
        ids = [o.id for o in self.observables]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate observable ids: {ids}")

    @property
    def m(self) -> int:
        return len(self.observables)

    @property
    def ids(self) -> list:
        return [o.id for o in self.observables]

    @property
    def all_even(self) -> bool:
        return all(o.parity == "even" for o in self.observables)

    @property
    def is_quadratic(self) -> bool:
        return all(o.quadratic is not None for o in self.observables)

    def __iter__(self):
        return iter(self.observables)

    def __len__(self):
        return self.m

    def gram_condition(self, points) -> float:
        """Condition number of the centered Gram matrix over ``points``."""
        values = evaluate_observables(self, points)
        values = values - values.mean(axis=0)
        return float(np.linalg.cond(values.T @ values / len(values)))


def liouville_values(system: HamiltonianSystem, obs: Observable, z) -> np.ndarray:
    """``{F, H}`` at one point or a stack of points."""
    pts = _as_points(z)
    n = system.n
    gf = obs.gradient(pts)
    gh = system.gradient(pts)
    out = np.sum(gf[..., :n] * gh[..., n:] - gf[..., n:] * gh[..., :n], axis=-1)
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(out)))[0][0]
        where = pts if pts.ndim == 1 else pts[bad]
        raise EvaluationError(f"non-finite Liouville action of observable {obs.id!r} at z={where}")
    return out


def liouville_apply(system: HamiltonianSystem, obs: Observable, z) -> float:
    """Poisson bracket ``{F, H}(z) = grad F . J grad H`` at a single point."""
    return float(liouville_values(system, obs, _as_points(z).reshape(-1)))


def time_reverse(z):
    """``(q, p) -> (q, -p)``; returns the same type it was given."""
    if isinstance(z, PhaseVector):
        return PhaseVector(z.q, -z.p)
    pts = np.array(z, dtype=float, copy=True)
    n = pts.shape[-1] // 2
    pts[..., n:] *= -1.0
    return pts


def symplectic_step(system: HamiltonianSystem, z, dt: float):
    """One velocity-Verlet step of size ``dt``."""
    if not system.separable or system.potential_gradient is None:
        raise UnsupportedSchemeError(
            f"velocity Verlet requires a separable system; {system.label!r} is not")
    if dt <= 0:
        raise ValueError("dt must be positive")
    as_pv = isinstance(z, PhaseVector)
    out = evolve(system, _as_points(z), dt, 1)
    return PhaseVector.from_array(out) if as_pv else out


def evolve(system: HamiltonianSystem, z, dt: float, steps: int) -> np.ndarray:
    """``steps`` Verlet steps on a point or stack of points (kicks fused)."""
    if not system.separable or system.potential_gradient is None:
        raise UnsupportedSchemeError(
            f"velocity Verlet requires a separable system; {system.label!r} is not")
    pts = np.array(z, dtype=float, copy=True)
    if steps <= 0:
        return pts
    n = system.n
    q = pts[..., :n]
    p = pts[..., n:]
    grad_v = system.potential_gradient
    p -= 0.5 * dt * grad_v(q)
    for _ in range(steps - 1):
        q += dt * p
        p -= dt * grad_v(q)
    q += dt * p
    p -= 0.5 * dt * grad_v(q)
    return pts


def evaluate_observables(obs_set: ObservableSet, z) -> np.ndarray:
    pts = _as_points(z)
    return np.stack([o.value(pts) for o in obs_set], axis=-1)


# --- system catalog ---------------------------------------------------------


def _quadratic_system(K: np.ndarray, label: str, params: dict) -> HamiltonianSystem:
    K = np.asarray(K, dtype=float)
    n = K.shape[0]

    def energy(z):
        q, p = z[..., :n], z[..., n:]
        return 0.5 * np.sum(p * p, axis=-1) + 0.5 * np.einsum("...i,ij,...j->...", q, K, q)

    def grad_v(q):
        return q @ K

    def gradient(z):
        return np.concatenate([grad_v(z[..., :n]), z[..., n:]], axis=-1)

    hess = np.zeros((2 * n, 2 * n))
    hess[:n, :n] = K
    hess[n:, n:] = np.eye(n)
    return HamiltonianSystem(n, energy, gradient, True, label, grad_v, hess, hess.copy(), params)


def harmonic_oscillator(omega: float = 1.0) -> HamiltonianSystem:
    return _quadratic_system(np.array([[omega**2]]), "harmonic_oscillator", {"omega": omega})


def chain_stiffness(n: int, spring: float = 1.0, pinning: float = 0.0) -> np.ndarray:
    """Fixed-end nearest-neighbour stiffness ``spring*tridiag(-1, 2, -1) + pinning*I``."""
    K = spring * (2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1))
    return K + pinning * np.eye(n)


def harmonic_chain(n: int, spring: float = 1.0, pinning: float = 0.0, stiffness=None) -> HamiltonianSystem:
    if stiffness is not None:
        K = np.asarray(stiffness, dtype=float)
        if K.shape != (n, n) or not np.allclose(K, K.T):
            raise ValueError("stiffness must be a symmetric n x n matrix")
        if np.linalg.eigvalsh(K).min() <= 0:
            raise ValueError("stiffness must be positive-definite")
    else:
        K = chain_stiffness(n, spring, pinning)
    return _quadratic_system(K, "harmonic_chain", {"n": n, "spring": spring, "pinning": pinning})


def fpu_chain(n: int, quartic: float = 0.25, spring: float = 1.0) -> HamiltonianSystem:
    """Fixed-end FPU-beta chain, ``V = sum_i spring*r_i^2/2 + quartic*r_i^4/4``.

    The ``n + 1`` bonds are ``r_i = q_{i+1} - q_i`` with ``q_0 = q_{n+1} = 0``.
    """

    def bonds(q):
        pad = np.zeros(q.shape[:-1] + (1,))
        full = np.concatenate([pad, q, pad], axis=-1)
        return np.diff(full, axis=-1)

    def potential(q):
        r = bonds(q)
        return np.sum(0.5 * spring * r**2 + 0.25 * quartic * r**4, axis=-1)

    def grad_v(q):
        r = bonds(q)
        tension = spring * r + quartic * r**3
        return tension[..., :-1] - tension[..., 1:]

    def energy(z):
        return 0.5 * np.sum(z[..., n:] ** 2, axis=-1) + potential(z[..., :n])

    def gradient(z):
        return np.concatenate([grad_v(z[..., :n]), z[..., n:]], axis=-1)

    quad = np.zeros((2 * n, 2 * n))
    quad[:n, :n] = chain_stiffness(n, spring)
    quad[n:, n:] = np.eye(n)
    return HamiltonianSystem(n, energy, gradient, True, "fpu_chain", grad_v, None, quad,
                             {"n": n, "quartic": quartic, "spring": spring})


SYSTEMS = {
    "harmonic_oscillator": harmonic_oscillator,
    "harmonic_chain": harmonic_chain,
    "fpu_chain": fpu_chain,
}


def make_system(name: str, **params) -> HamiltonianSystem:
    try:
        factory = SYSTEMS[name]
    except KeyError:
        raise ValueError(f"unknown system {name!r}; known: {sorted(SYSTEMS)}") from None
    return factory(**params)


# --- observable constructors -------------------------------------------------


def linear_observable(coeffs, offset: float = 0.0, id: str = "linear", parity: str = "unknown") -> Observable:
    """``A(z) = coeffs . z - offset``."""
    b = np.asarray(coeffs, dtype=float)
    dim = b.size

    def value(z):
        return z @ b - offset

    def gradient(z):
        return np.broadcast_to(b, np.shape(z)).copy()

    return Observable(id, parity, value, gradient, (np.zeros((dim, dim)), b, -offset))


def position(index: int, n: int, id: Optional[str] = None) -> Observable:
    b = np.zeros(2 * n)
    b[index] = 1.0
    return linear_observable(b, id=id or f"q{index}", parity="even")


def momentum(index: int, n: int, id: Optional[str] = None) -> Observable:
    b = np.zeros(2 * n)
    b[n + index] = 1.0
    return linear_observable(b, id=id or f"p{index}", parity="odd")


def position_square(index: int, n: int, center: float = 0.0, id: Optional[str] = None) -> Observable:
    """``A(z) = q_index^2 - center``."""

    def value(z):
        return z[..., index] ** 2 - center

    def gradient(z):
        g = np.zeros(np.shape(z))
        g[..., index] = 2.0 * z[..., index]
        return g

    Q = np.zeros((2 * n, 2 * n))
    Q[index, index] = 2.0
    return Observable(id or f"q{index}^2", "even", value, gradient, (Q, np.zeros(2 * n), -center))


def make_observable(kind: str, n: int, index: int, center: float = 0.0, id: Optional[str] = None) -> Observable:
    if not 0 <= index < n:
        raise ValueError(f"observable index {index} out of range for n={n}")
    if kind == "position":
        return position(index, n, id)
    if kind == "momentum":
        return momentum(index, n, id)
    if kind == "position_square":
        return position_square(index, n, center, id)
    raise ValueError(f"unknown observable kind {kind!r}")


def observable_set(specs: Sequence[dict], n: int) -> ObservableSet:
    return ObservableSet([make_observable(n=n, **s) for s in specs])
