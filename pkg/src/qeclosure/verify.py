"""Independent oracles for the closure.

* `resolve_ensemble`: Verlet simulation of an ensemble drawn from the
  quasi-equilibrium density, giving the true macrostate ``a_exact(t)``.
* `even_mode_decomposition` / `analytic_even_solution`: closed-form sech/tanh
  solution when every resolved variable is even under time reversal (J = 0).
* `hj_solve_1d`: Lax-Friedrichs solver for the scalar value function.
* `tune_epsilon`: golden-section fit of epsilon against resolved data.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import eigh

from .closure import NearEqMatrices
from .ensemble import EquilibriumSpec, resample_quasi_equilibrium
from .errors import DomainError, IntegrityError, WrongRegimeError
from .hamiltonian import HamiltonianSystem, ObservableSet, evaluate_observables, evolve
from .reduced import ClosureConfig, ClosureTrajectory, InitialCondition, integrate_near_G

__all__ = [
    "ResolvedRun",
    "resolve_ensemble",
    "EvenModeDecomposition",
    "even_mode_decomposition",
    "analytic_even_solution",
    "HJGrid",
    "HJResult",
    "hj_solve_1d",
    "EpsilonFit",
    "tune_epsilon",
    "relative_l2",
    "near_closure_runner",
    "exact_entropy_series",
    "relaxation_window",
    "time_scale_diagnostics",
]


# --- resolved ensemble ----------------------------------------------------------


@dataclass
class ResolvedRun:
    times: np.ndarray
    a_exact: np.ndarray
    std_errors: np.ndarray
    n_traj: int
    dt: float
    energy_drift: float
    seed: int
    lambda0: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.a_exact.shape[1]

    def lambda_exact(self, C) -> np.ndarray:
        return np.linalg.solve(np.atleast_2d(C), self.a_exact.T).T

    def to_csv(self, path) -> None:
        m = self.m
        header = ["t"] + [f"a_exact[{i}]" for i in range(m)] + [f"std_errors[{i}]" for i in range(m)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(header)
            for k, t in enumerate(self.times):
                writer.writerow([format(float(x), ".17g") for x in (t, *self.a_exact[k], *self.std_errors[k])])

    def metadata(self) -> dict:
        return {"n_traj": self.n_traj, "dt": self.dt, "energy_drift": self.energy_drift, "seed": self.seed,
                "lambda0": None if self.lambda0 is None else np.asarray(self.lambda0).tolist(), **self.meta}

    def write(self, csv_path, json_path) -> None:
        self.to_csv(csv_path)
        with open(json_path, "w") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, csv_path, json_path=None) -> "ResolvedRun":
        data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        m = (data.shape[1] - 1) // 2
        meta = {}
        if json_path is not None:
            with open(json_path) as fh:
                meta = json.load(fh)
        lam0 = meta.pop("lambda0", None)
        return cls(data[:, 0], data[:, 1:1 + m], data[:, 1 + m:], int(meta.pop("n_traj", 0)),
                   float(meta.pop("dt", float("nan"))), float(meta.pop("energy_drift", float("nan"))),
                   meta.pop("seed", None), None if lam0 is None else np.asarray(lam0), meta)


def _step_counts(t_grid, dt):
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size < 1 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    steps = np.diff(np.concatenate([[0.0], t_grid])) / dt
    counts = np.rint(steps).astype(int)
    if t_grid[0] < 0 or np.any(np.abs(steps - counts) > 1e-6):
        raise ValueError("t_grid must start at t >= 0 and lie on multiples of dt")
    return counts


def resolve_ensemble(system: HamiltonianSystem, spec: EquilibriumSpec, obs_set: ObservableSet, lambda0,
                     n_traj: int, t_grid, dt: float, seed: int, workers: int = 1,
                     energy_bound: float = 1e-4) -> ResolvedRun:
    """Mean of ``A`` along Verlet trajectories started from ``rho~(.; lambda0)``.

    ``energy_drift`` is ``max |E(t) - E(0)| / mean |E(0)|`` over trajectories
    and recorded times.
    """
    counts = _step_counts(t_grid, dt)
    t_grid = np.asarray(t_grid, dtype=float)
    batch = resample_quasi_equilibrium(system, spec, obs_set, lambda0, n_traj, seed, workers)
    z0 = batch.points
    n_chunks = max(1, min(workers, n_traj))
    bounds = np.linspace(0, n_traj, n_chunks + 1).astype(int)

    def run(chunk):
        z = z0[bounds[chunk]:bounds[chunk + 1]]
        e0 = system.energy(z)
        A = np.empty((len(t_grid), len(z), obs_set.m))
        drift = 0.0
        for k, c in enumerate(counts):
            z = evolve(system, z, dt, int(c))
            A[k] = evaluate_observables(obs_set, z)
            drift = max(drift, float(np.max(np.abs(system.energy(z) - e0))))
        return A, drift, float(np.sum(np.abs(e0)))

    if n_chunks > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(n_chunks)))
    else:
        parts = [run(0)]
    A = np.concatenate([p[0] for p in parts], axis=1)
    scale = sum(p[2] for p in parts) / n_traj
    drift = max(p[1] for p in parts) / max(scale, 1e-300)
    if drift > energy_bound:
        raise IntegrityError(f"relative energy drift {drift:.3e} exceeds {energy_bound:.1e}; use a smaller dt")
    a = A.mean(axis=1)
    se = A.std(axis=1, ddof=1) / np.sqrt(n_traj) if n_traj > 1 else np.full_like(a, np.inf)
    return ResolvedRun(t_grid, a, se, n_traj, float(dt), drift, seed, np.asarray(lambda0, dtype=float),
                       {"sampler": batch.diagnostics.get("method"),
                        "acceptance_rate": batch.diagnostics.get("acceptance_rate")})


# --- even-variable closed form -------------------------------------------------------


@dataclass
class EvenModeDecomposition:
    """``W^T C W = I``, ``W^T D W = diag(Delta)``; ``C^{-1} = W W^T``."""

    W: np.ndarray
    Delta: np.ndarray

    @property
    def m(self) -> int:
        return len(self.Delta)

    @property
    def plateau_times(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.Delta > 0, 1.0 / np.sqrt(self.Delta), np.inf)

    @property
    def W_inv(self) -> np.ndarray:
        return np.linalg.inv(self.W)

    @property
    def C(self) -> np.ndarray:
        Wi = self.W_inv
        return Wi.T @ Wi

    @property
    def D(self) -> np.ndarray:
        Wi = self.W_inv
        return Wi.T @ np.diag(self.Delta) @ Wi

    def psi(self, tau: float) -> np.ndarray:
        Wi = self.W_inv
        return Wi.T @ np.diag(1.0 / np.cosh(np.sqrt(self.Delta) * tau)) @ self.W.T

    def K(self, tau: float) -> np.ndarray:
        r = np.sqrt(self.Delta)
        Wi = self.W_inv
        return Wi.T @ np.diag(r * np.tanh(r * tau)) @ Wi

    @property
    def K_inf(self) -> np.ndarray:
        Wi = self.W_inv
        return Wi.T @ np.diag(np.sqrt(self.Delta)) @ Wi


def even_mode_decomposition(mats: NearEqMatrices, n_sigma: float = 4.0) -> EvenModeDecomposition:
    """Generalized eigenproblem ``D w = Delta C w`` (Cholesky reduction in LAPACK)."""
    if not mats.j_is_zero(n_sigma):
        raise WrongRegimeError("J is significantly nonzero; the even-variable solution does not apply")
    C = 0.5 * (mats.C + mats.C.T)
    D = 0.5 * (mats.D + mats.D.T)
    Delta, W = eigh(D, C)
    Delta = np.clip(Delta, 0.0, None)
    return EvenModeDecomposition(W, Delta)


def analytic_even_solution(decomp: EvenModeDecomposition, epsilon: float, t_grid, lambda0,
                           t0: Optional[float] = None) -> ClosureTrajectory:
    """Closed-form fully-specified trajectory; ``extras["transport"]`` holds ``eps K(eps (t - t0))``."""
    t = np.asarray(t_grid, dtype=float)
    t0 = float(t[0]) if t0 is None else float(t0)
    lam0 = np.atleast_1d(np.asarray(lambda0, dtype=float))
    W, Wi = decomp.W, decomp.W_inv
    C, D = decomp.C, decomp.D
    r = np.sqrt(decomp.Delta)
    tau = epsilon * (t - t0)
    a0 = C @ lam0
    # a(t) = W^{-T} sech(r tau) W^T a0 ; lam = C^{-1} a = W sech(r tau) W^T a0
    modes = W.T @ a0
    sech = 1.0 / np.cosh(np.outer(tau, r))
    a = (sech * modes) @ Wi
    lam = (sech * modes) @ W.T
    # G = W diag(tanh(eps r s)/(eps r)) W^T, with the r -> 0 (or eps -> 0) limit s
    s = t - t0
    arg = np.outer(s, epsilon * r)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(arg > 0, np.tanh(arg) / np.where(arg > 0, epsilon * r, 1.0), s[:, None])
    G = np.einsum("ij,kj,lj->kil", W, g, W)
    K = np.einsum("ji,ki,il->kjl", Wi.T, r * np.tanh(np.outer(tau, r)), Wi)
    M = np.full_like(G, np.nan)
    for k in range(len(t)):
        if np.all(g[k] > 0):
            M[k] = Wi.T @ np.diag(1.0 / g[k]) @ Wi
    entropy = -0.5 * np.einsum("ki,ij,kj->k", lam, C, lam)
    rate = epsilon**2 * np.einsum("ki,ij,kjl,lm,km->k", lam, C, G, D, lam)
    cfg = ClosureConfig(epsilon=epsilon, regime="even_analytic",
                        t_span=(t0, float(t[-1]) if t[-1] > t0 else t0 + 1.0))
    return ClosureTrajectory(t, lam, a, M, G, entropy, rate, cfg,
                             {"regime": "even_analytic", "Delta": decomp.Delta.tolist()},
                             {"transport": epsilon * K, "psi_diag": sech})


# --- Hamilton-Jacobi oracle ---------------------------------------------------------


@dataclass(frozen=True)
class HJGrid:
    """Uniform grid for the scalar value function.

    ``dt=None`` picks each step adaptively from the Lax-Friedrichs condition
    ``alpha dt <= safety dx`` with ``alpha = max |dH/dmu|``.  With a fixed
    ``dt`` the artificial viscosity ``dissipation = alpha dx / 2`` must be
    given, and ``dt <= safety dx^2 / (2 dissipation)`` is checked here.
    """

    lambda_range: tuple
    n_points: int = 2000
    dt: Optional[float] = None
    dissipation: Optional[float] = None
    penalty_b: float = 1e3
    safety: float = 0.5

    def __post_init__(self):
        lo, hi = self.lambda_range
        if not hi > lo or self.n_points < 5:
            raise ValueError("need lambda_range with hi > lo and at least 5 points")
        if not 0 < self.safety <= 1:
            raise ValueError("safety must lie in (0, 1]")
        if self.dt is not None:
            if self.dissipation is None or self.dissipation <= 0:
                raise ValueError("a fixed dt needs a positive dissipation")
            if self.dt > self.safety * self.dx**2 / (2.0 * self.dissipation):
                raise ValueError(f"CFL violated: dt={self.dt:.3e} > {self.safety * self.dx**2 / (2 * self.dissipation):.3e}")

    @property
    def dx(self) -> float:
        lo, hi = self.lambda_range
        return (hi - lo) / (self.n_points - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(*self.lambda_range, self.n_points)


@dataclass
class HJResult:
    t: np.ndarray
    lambda_grid: np.ndarray
    minimizer: np.ndarray
    curvature: np.ndarray
    values: Optional[np.ndarray] = None
    steps: int = 0

    def surface_to_csv(self, path) -> None:
        if self.values is None:
            raise ValueError("value surface was not stored (keep_surface=False)")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(["t", "lambda", "v"])
            for k, t in enumerate(self.t):
                for x, v in zip(self.lambda_grid, self.values[k]):
                    writer.writerow([format(float(t), ".17g"), format(float(x), ".17g"), format(float(v), ".17g")])


def _tabulate(coefficients, nodes):
    """``C(lam)``, ``drift(lam)``, ``w(lam)`` on the grid (scalar observable)."""
    if isinstance(coefficients, NearEqMatrices):
        if coefficients.m != 1:
            raise ValueError("the Hamilton-Jacobi oracle handles m = 1 only")
        C, J, D = float(coefficients.C[0, 0]), float(coefficients.Jmat[0, 0]), float(coefficients.D[0, 0])
        return np.full_like(nodes, C), J * nodes, 0.5 * D * nodes**2
    C = np.empty_like(nodes)
    drift = np.empty_like(nodes)
    w = np.empty_like(nodes)
    for i, x in enumerate(nodes):
        ms = coefficients.moments(np.array([x]))
        if ms.m != 1:
            raise ValueError("the Hamilton-Jacobi oracle handles m = 1 only")
        C[i], drift[i], w[i] = ms.C[0, 0], ms.drift[0], ms.w
    return C, drift, w


def _argmin_parabolic(v, nodes, dx):
    i = int(np.argmin(v))
    if i == 0 or i == len(v) - 1:
        raise DomainError(f"value-function minimizer reached the grid boundary at lambda={nodes[i]:.4g}")
    vm, v0, vp = v[i - 1], v[i], v[i + 1]
    d2 = vm - 2.0 * v0 + vp
    shift = 0.5 * (vm - vp) / d2 if d2 > 0 else 0.0
    return nodes[i] + shift * dx, d2 / dx**2


def hj_solve_1d(coefficients, epsilon: float, grid: HJGrid, lambda0: float, t_grid,
                keep_surface: bool = False) -> HJResult:
    """Explicit Lax-Friedrichs integration of ``v_t + H(lam, v_lam) = 0``.

    ``H(lam, mu) = mu^2 / (2C) + drift mu / C - eps^2 w`` and
    ``v(lam, t0) = b (lam - lam0)^2 / 2``.  Boundary values are extrapolated
    quadratically from the interior (outflow).  Returns the parabolic
    sub-grid minimizer and the second-difference curvature at each time in
    ``t_grid``.
    """
    nodes = grid.nodes
    dx = grid.dx
    C, drift, w = _tabulate(coefficients, nodes)
    eps2 = epsilon**2
    t_grid = np.asarray(t_grid, dtype=float)
    v = 0.5 * grid.penalty_b * (nodes - lambda0) ** 2
    t = float(t_grid[0])
    mins, curvs, surf = [], [], []
    steps = 0

    def record():
        lam_hat, curv = _argmin_parabolic(v, nodes, dx)
        mins.append(lam_hat)
        curvs.append(curv)
        if keep_surface:
            surf.append(v.copy())

    record()
    for t_next in t_grid[1:]:
        while t < t_next - 1e-14:
            mu = np.empty_like(v)
            mu[1:-1] = (v[2:] - v[:-2]) / (2 * dx)
            mu[0], mu[-1] = mu[1], mu[-2]
            speed = np.abs(mu + drift) / C
            alpha = float(speed.max())
            if grid.dt is None:
                dt = grid.safety * dx / max(alpha, 1e-12)
                nu = 0.5 * alpha * dx
            else:
                dt = grid.dt
                nu = grid.dissipation
                if alpha * dx > 2.0 * nu * (1 + 1e-12):
                    raise ValueError("Lax-Friedrichs monotonicity lost: increase dissipation or refine dt")
            dt = min(dt, t_next - t)
            H = 0.5 * mu**2 / C + drift * mu / C - eps2 * w
            new = v.copy()
            new[1:-1] = v[1:-1] - dt * H[1:-1] + dt * nu * (v[2:] - 2 * v[1:-1] + v[:-2]) / dx**2
            new[0] = 3 * new[1] - 3 * new[2] + new[3]
            new[-1] = 3 * new[-2] - 3 * new[-3] + new[-4]
            v = new
            t += dt
            steps += 1
        t = float(t_next)
        record()
    return HJResult(t_grid, nodes, np.array(mins), np.array(curvs),
                    np.array(surf) if keep_surface else None, steps)


# --- epsilon tuning -----------------------------------------------------------------


@dataclass
class EpsilonFit:
    epsilon_star: float
    objective: float
    bracket: tuple
    evaluations: int
    history: list = field(default_factory=list)
    non_unimodal: bool = False

    def to_dict(self) -> dict:
        return {"epsilon_star": self.epsilon_star, "objective": self.objective, "bracket": list(self.bracket),
                "evaluations": self.evaluations, "non_unimodal": self.non_unimodal,
                "history": [[e, o] for e, o in self.history]}


def relative_l2(a_hat, a_exact, mask=None) -> float:
    """``sum_t |a_hat - a_exact|^2 / sum_t |a_exact|^2``."""
    a_hat = np.asarray(a_hat, dtype=float)
    a_exact = np.asarray(a_exact, dtype=float)
    if mask is not None:
        a_hat, a_exact = a_hat[mask], a_exact[mask]
    return float(np.sum((a_hat - a_exact) ** 2) / np.sum(a_exact**2))


def near_closure_runner(mats: NearEqMatrices, lambda0, t_grid, dt: float = 1e-2) -> Callable:
    """``eps -> a_hat(t_grid)`` from `integrate_near_G` with fully specified data at ``t_grid[0]``."""
    t_grid = np.asarray(t_grid, dtype=float)
    init = InitialCondition(lambda0)
    ratio = np.diff(t_grid) / dt
    stride = int(round(ratio[0])) if len(ratio) else 1
    if len(ratio) and (np.any(np.abs(ratio - stride) > 1e-6) or stride < 1):
        raise ValueError("t_grid must be uniform with spacing a multiple of dt")

    def run(eps):
        cfg = ClosureConfig(epsilon=float(eps), regime="near_G", t_span=(t_grid[0], t_grid[-1]), dt=dt,
                            record_every=stride)
        return integrate_near_G(mats, init, cfg).a_hat

    return run


def tune_epsilon(resolved: ResolvedRun, runner: Callable, bracket=(0.001, 1.0), tol: float = 1e-3,
                 mask=None) -> EpsilonFit:
    """Golden-section search for the epsilon minimizing `relative_l2` against ``resolved.a_exact``.

    ``runner(eps)`` returns ``a_hat`` on ``resolved.times`` (or a trajectory).
    """
    lo, hi = map(float, bracket)
    if not 0 < lo < hi <= 1:
        raise ValueError(f"bracket must satisfy 0 < lo < hi <= 1, got {bracket}")
    history = []

    def objective(eps):
        out = runner(eps)
        a_hat = out.a_hat if isinstance(out, ClosureTrajectory) else out
        val = relative_l2(a_hat, resolved.a_exact, mask)
        history.append((float(eps), val))
        return val

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = objective(c), objective(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = objective(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = objective(d)
    eps_star = 0.5 * (a + b)
    f_star = objective(eps_star)
    f_lo, f_hi = objective(lo), objective(hi)
    non_unimodal = f_lo < f_star and f_hi < f_star
    if non_unimodal:
        warnings.warn("objective looks non-unimodal: both bracket ends beat the interior optimum", RuntimeWarning,
                      stacklevel=2)
    return EpsilonFit(eps_star, f_star, (lo, hi), len(history), history, non_unimodal)


# --- entropy and time-scale diagnostics ----------------------------------------------


def exact_entropy_series(resolved: ResolvedRun, mats: NearEqMatrices):
    """``s_ex = -a^T C^{-1} a / 2`` along the resolved run and its differenced rate."""
    lam = resolved.lambda_exact(mats.C)
    s = -0.5 * np.einsum("ki,ki->k", lam, resolved.a_exact)
    if len(s) < 2:
        return s, np.zeros_like(s)
    rate = np.gradient(s, resolved.times, edge_order=2 if len(s) > 2 else 1)
    return s, rate


def relaxation_window(resolved: ResolvedRun, mats: NearEqMatrices, fraction: float = 0.05) -> np.ndarray:
    """Mask of times up to the first one where ``|s_ex|`` falls to ``fraction`` of ``|s_ex(t0)|``.

    Finite chains show recurrences after the first relaxation; the window
    keeps comparisons to the initial decay.  All times are kept if the
    threshold is never reached.
    """
    s, _ = exact_entropy_series(resolved, mats)
    hit = np.nonzero(np.abs(s[1:]) <= fraction * abs(s[0]))[0]
    if len(hit) == 0:
        return np.ones(len(s), dtype=bool)
    return resolved.times <= resolved.times[hit[0] + 1]


def time_scale_diagnostics(mats: NearEqMatrices, epsilon: Optional[float] = None,
                           resolved: Optional[ResolvedRun] = None) -> dict:
    """Both plateau-time conventions, plus a 1/e relaxation time of ``|a_exact|`` when available."""
    decomp = even_mode_decomposition(mats)
    out = {
        "plateau_times_mode": decomp.plateau_times.tolist(),
        "plateau_times_reciprocal": np.sqrt(decomp.Delta).tolist(),
    }
    if epsilon is not None and epsilon > 0:
        out["plateau_times_physical"] = (decomp.plateau_times / epsilon).tolist()
    if resolved is not None:
        norm = np.linalg.norm(resolved.a_exact, axis=1)
        below = np.nonzero(norm <= norm[0] / math.e)[0]
        out["relaxation_time"] = float(resolved.times[below[0]]) if len(below) else None
    return out
