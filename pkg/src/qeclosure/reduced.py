"""Closed reduced dynamics for the best-fit parameter and its Riccati matrix.

Regimes:

* ``near_G`` / ``near_M``: constant-coefficient linear-response equations in
  the covariance-like ``G = M^{-1}`` or the value-function Hessian ``M``.
* ``far_local_quadratic``: lambda-dependent coefficients from a moment
  provider under the local quadratic approximation of the value function.
* ``adiabatic``: the epsilon = 0 moment closure ``d lam/dt = f(lam)``.

Fixed-step classical RK4 is the default; ``scheme="adaptive"`` hands the
flat state to scipy's DOP853.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .closure import NearEqMatrices, adiabatic_drift, closure_potential_derivatives, drift_jacobian
from .errors import IntegrationError, SingularityError

__all__ = [
    "ClosureConfig",
    "InitialCondition",
    "ClosureState",
    "ClosureTrajectory",
    "integrate_near_G",
    "integrate_near_M",
    "integrate_far",
    "integrate_adiabatic",
    "entropy_and_rate",
    "REGIMES",
]

REGIMES = ("far_local_quadratic", "near_M", "near_G", "adiabatic", "even_analytic")


@dataclass(frozen=True)
class ClosureConfig:
    epsilon: float
    regime: str = "near_G"
    t_span: tuple = (0.0, 10.0)
    dt: Optional[float] = None
    scheme: str = "rk4"
    rtol: float = 1e-9
    atol: float = 1e-12
    record_every: int = 1
    spd_tol: float = 1e-8
    switch_threshold: float = 1e-2

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.scheme not in ("rk4", "adaptive"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        t0, t1 = self.t_span
        if not t1 > t0:
            raise ValueError("t_span must satisfy t1 > t0")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        object.__setattr__(self, "t_span", (float(t0), float(t1)))

    @property
    def step(self) -> float:
        if self.dt is not None:
            return self.dt
        return 0.01 if self.epsilon == 0 else min(0.01, 0.01 / self.epsilon)


@dataclass(frozen=True)
class InitialCondition:
    """``lambda0`` plus either a finite SPD ``M0`` or ``None`` (fully specified, ``G0 = 0``)."""

    lambda0: np.ndarray
    M0: Optional[np.ndarray] = None

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lambda0, dtype=float))
        object.__setattr__(self, "lambda0", lam)
        if self.M0 is not None:
            M0 = np.atleast_2d(np.asarray(self.M0, dtype=float))
            if M0.shape != (lam.size, lam.size):
                raise ValueError("M0 must be m x m")
            if not np.allclose(M0, M0.T) or np.linalg.eigvalsh(M0).min() <= 0:
                raise ValueError("M0 must be symmetric positive-definite")
            object.__setattr__(self, "M0", M0)

    @property
    def fully_specified(self) -> bool:
        return self.M0 is None


@dataclass
class ClosureState:
    t: float
    lambda_hat: np.ndarray
    a_hat: np.ndarray
    M_hat: Optional[np.ndarray]
    G_hat: Optional[np.ndarray]
    entropy: float
    entropy_rate: float


@dataclass
class ClosureTrajectory:
    """Recorded closure states, stored column-wise."""

    t: np.ndarray
    lambda_hat: np.ndarray
    a_hat: np.ndarray
    M_hat: Optional[np.ndarray]
    G_hat: Optional[np.ndarray]
    entropy: np.ndarray
    entropy_rate: np.ndarray
    config: Optional[ClosureConfig] = None
    provenance: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    @property
    def m(self) -> int:
        return self.lambda_hat.shape[1]

    def state(self, i: int) -> ClosureState:
        return ClosureState(
            float(self.t[i]), self.lambda_hat[i], self.a_hat[i],
            None if self.M_hat is None else self.M_hat[i],
            None if self.G_hat is None else self.G_hat[i],
            float(self.entropy[i]), float(self.entropy_rate[i]))

    @property
    def states(self) -> list:
        return [self.state(i) for i in range(len(self))]

    @property
    def matrix_kind(self) -> Optional[str]:
        if self.provenance.get("regime") == "near_M":
            return "M_hat"
        if self.G_hat is not None:
            return "G_hat"
        if self.M_hat is not None:
            return "M_hat"
        return None

    def to_csv(self, path) -> None:
        """Columns ``t, lambda_hat[i], a_hat[i], entropy, entropy_rate`` then the matrix row-major."""
        m = self.m
        kind = self.matrix_kind
        header = ["t"] + [f"lambda_hat[{i}]" for i in range(m)] + [f"a_hat[{i}]" for i in range(m)]
        header += ["entropy", "entropy_rate"]
        mats = None
        if kind is not None:
            header += [f"{kind}[{i}][{j}]" for i in range(m) for j in range(m)]
            mats = getattr(self, kind).reshape(len(self), m * m)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(header)
            for k in range(len(self)):
                row = [self.t[k], *self.lambda_hat[k], *self.a_hat[k], self.entropy[k], self.entropy_rate[k]]
                if mats is not None:
                    row += list(mats[k])
                writer.writerow([_fmt(x) for x in row])

    def sidecar(self) -> dict:
        cfg = None if self.config is None else {k: (list(v) if isinstance(v, tuple) else v)
                                               for k, v in asdict(self.config).items()}
        return {"config": cfg, "provenance": self.provenance, "matrix": self.matrix_kind, "rows": len(self)}

    def write(self, csv_path, json_path) -> None:
        self.to_csv(csv_path)
        with open(json_path, "w") as fh:
            json.dump(self.sidecar(), fh, indent=2, sort_keys=True)


def _fmt(x) -> str:
    return format(float(x), ".17g")


# --- integration machinery ----------------------------------------------------------


def _rk4_step(rhs, t, y, h):
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _grid(config: ClosureConfig):
    t0, t1 = config.t_span
    n_steps = max(1, int(round((t1 - t0) / config.step)))
    return t0, (t1 - t0) / n_steps, n_steps


def _run(rhs, y0, config: ClosureConfig, check: Callable, post: Callable = None, on_fail=None):
    """Integrate ``y' = rhs(t, y)``; returns recorded times and states.

    ``check(t, y)`` raises on invalid states; ``post(y)`` may project the state
    (e.g. re-symmetrize) after each step.
    """
    t0, h, n_steps = _grid(config)
    ts = [t0]
    ys = [np.array(y0, dtype=float)]
    check(t0, ys[0])
    if config.scheme == "adaptive":
        t_eval = t0 + h * np.arange(0, n_steps + 1, config.record_every)
        if t_eval[-1] < t0 + h * n_steps:
            t_eval = np.append(t_eval, t0 + h * n_steps)
        sol = solve_ivp(rhs, (t0, t_eval[-1]), ys[0], method="DOP853", t_eval=t_eval,
                        rtol=config.rtol, atol=config.atol)
        if not sol.success:
            last = sol.y[:, -1] if sol.y.size else ys[0]
            raise IntegrationError(f"adaptive integration failed: {sol.message}", last_state=last)
        out_t, out_y = [], []
        for k in range(sol.y.shape[1]):
            y = sol.y[:, k] if post is None else post(sol.y[:, k])
            try:
                check(sol.t[k], y)
            except SingularityError as exc:
                if on_fail is not None:
                    on_fail(exc, np.array(out_t), np.array(out_y))
                raise
            out_t.append(sol.t[k])
            out_y.append(y)
        return np.array(out_t), np.array(out_y)
    y = ys[0]
    for k in range(1, n_steps + 1):
        t = t0 + k * h
        y = _rk4_step(rhs, t - h, y, h)
        if post is not None:
            y = post(y)
        if k % config.record_every == 0 or k == n_steps:
            try:
                check(t, y)
            except SingularityError as exc:
                if on_fail is not None:
                    on_fail(exc, np.array(ts), np.array(ys))
                raise
            ts.append(t)
            ys.append(y)
    return np.array(ts), np.array(ys)


def _sym(X):
    return 0.5 * (X + X.T)


def _split(y, m):
    return y[:m], y[m:].reshape(m, m)


def _symmetrizer(m):
    def post(y):
        lam, X = _split(y, m)
        return np.concatenate([lam, _sym(X).ravel()])
    return post


def _spd_check(m, tol, name, allow_zero=True):
    def check(t, y):
        _, X = _split(y, m)
        if not np.all(np.isfinite(X)):
            raise SingularityError(f"{name} became non-finite at t={t:.6g}", t=t)
        ev = np.linalg.eigvalsh(_sym(X))
        scale = max(abs(np.trace(X)), 1e-300)
        if ev.min() < -tol * scale or (not allow_zero and ev.min() <= 0):
            raise SingularityError(
                f"{name} lost positive-definiteness at t={t:.6g} (min eigenvalue {ev.min():.3e}); "
                "possible dynamic phase transition", t=t)
    return check


def _near_arrays(mats: NearEqMatrices):
    C = mats.C
    Ci = np.linalg.inv(C)
    return C, Ci, Ci @ mats.Jmat, mats.Jmat @ Ci, mats.D


def _near_entropy(C, D, lam, G, eps):
    s = -0.5 * np.einsum("ki,ij,kj->k", lam, C, lam)
    rate = eps**2 * np.einsum("ki,ij,kjl,lm,km->k", lam, C, G, D, lam)
    return s, rate


def _safe_inv(stack):
    out = np.full_like(stack, np.nan)
    for k, X in enumerate(stack):
        if np.all(np.isfinite(X)) and np.linalg.cond(X) < 1e14:
            out[k] = np.linalg.inv(X)
    return out


def _prefix_raiser(make_traj):
    def on_fail(exc, ts, ys):
        exc.prefix = make_traj(ts, ys) if len(ts) else None
    return on_fail


# --- near-equilibrium ---------------------------------------------------------------


def integrate_near_G(mats: NearEqMatrices, init: InitialCondition, config: ClosureConfig) -> ClosureTrajectory:
    """``lam' = (C^{-1}J - eps^2 G D) lam``, ``G' = C^{-1}JG - GJC^{-1} - eps^2 GDG + C^{-1}``."""
    m = mats.m
    C, Ci, CiJ, JCi, D = _near_arrays(mats)
    eps2 = config.epsilon**2
    G0 = np.zeros((m, m)) if init.fully_specified else np.linalg.inv(init.M0)

    def rhs(t, y):
        lam, G = _split(y, m)
        dlam = CiJ @ lam - eps2 * (G @ (D @ lam))
        dG = CiJ @ G - G @ JCi - eps2 * (G @ D @ G) + Ci
        return np.concatenate([dlam, dG.ravel()])

    def make(ts, ys):
        lam = ys[:, :m]
        G = ys[:, m:].reshape(-1, m, m)
        s, rate = _near_entropy(C, D, lam, G, config.epsilon)
        return ClosureTrajectory(ts, lam, lam @ C.T, _safe_inv(G), G, s, rate, config,
                                 {"regime": "near_G", "source": "near-equilibrium matrices"})

    y0 = np.concatenate([init.lambda0, G0.ravel()])
    ts, ys = _run(rhs, y0, config, _spd_check(m, config.spd_tol, "G_hat"), _symmetrizer(m), _prefix_raiser(make))
    return make(ts, ys)


def integrate_near_M(mats: NearEqMatrices, init: InitialCondition, config: ClosureConfig) -> ClosureTrajectory:
    """``lam' = (C^{-1}J - eps^2 M^{-1} D) lam``, ``M' = JC^{-1}M - MC^{-1}J - MC^{-1}M + eps^2 D``."""
    if init.fully_specified:
        raise ValueError("near_M needs a finite SPD M0; use integrate_near_G for fully specified data")
    m = mats.m
    C, Ci, CiJ, JCi, D = _near_arrays(mats)
    eps2 = config.epsilon**2

    def rhs(t, y):
        lam, M = _split(y, m)
        dlam = CiJ @ lam - eps2 * np.linalg.solve(M, D @ lam)
        dM = JCi @ M - M @ CiJ - M @ Ci @ M + eps2 * D
        return np.concatenate([dlam, dM.ravel()])

    def make(ts, ys):
        lam = ys[:, :m]
        M = ys[:, m:].reshape(-1, m, m)
        G = _safe_inv(M)
        s, rate = _near_entropy(C, D, lam, G, config.epsilon)
        return ClosureTrajectory(ts, lam, lam @ C.T, M, G, s, rate, config,
                                 {"regime": "near_M", "source": "near-equilibrium matrices"})

    y0 = np.concatenate([init.lambda0, init.M0.ravel()])
    ts, ys = _run(rhs, y0, config, _spd_check(m, config.spd_tol, "M_hat", allow_zero=False),
                  _symmetrizer(m), _prefix_raiser(make))
    return make(ts, ys)


# --- far from equilibrium ------------------------------------------------------------


def _far_coefficients(provider, lam, eps, step=None):
    ms = provider.moments(lam)
    f = adiabatic_drift(ms)
    jac = drift_jacobian(provider, lam, step)
    if eps == 0:
        grad = np.zeros_like(lam)
        hess = np.zeros((lam.size, lam.size))
    elif ms.grad_w is not None and ms.hess_w is not None:
        grad, hess = ms.grad_w, ms.hess_w
    else:
        grad, hess = closure_potential_derivatives(provider, lam, step)
    return ms, f, jac, grad, hess


def integrate_far(provider, init: InitialCondition, config: ClosureConfig, fd_step=None) -> ClosureTrajectory:
    """Local-quadratic closure with lambda-dependent coefficients.

    ``lam' = f - eps^2 M^{-1} grad w`` and
    ``M' = -F^T M - M F - M C^{-1} M + eps^2 hess w`` with ``F = df/dlam``.
    Fully specified initial data start in the equivalent G-form
    (``G' = F G + G F^T + C^{-1} - eps^2 G hess(w) G``, ``G0 = 0``) until the
    smallest eigenvalue of ``G`` exceeds ``config.switch_threshold``.
    """
    m = init.lambda0.size
    eps = config.epsilon
    eps2 = eps**2

    def rhs_G(t, y):
        lam, G = _split(y, m)
        ms, f, F, grad, hess = _far_coefficients(provider, lam, eps, fd_step)
        Ci = np.linalg.inv(ms.C)
        dlam = f - eps2 * (G @ grad)
        dG = F @ G + G @ F.T + Ci - eps2 * (G @ hess @ G)
        return np.concatenate([dlam, dG.ravel()])

    def rhs_M(t, y):
        lam, M = _split(y, m)
        ms, f, F, grad, hess = _far_coefficients(provider, lam, eps, fd_step)
        Ci = np.linalg.inv(ms.C)
        dlam = f - eps2 * np.linalg.solve(M, grad)
        dM = -F.T @ M - M @ F - M @ Ci @ M + eps2 * hess
        return np.concatenate([dlam, dM.ravel()])

    t0, h, n_steps = _grid(config)
    post = _symmetrizer(m)
    check_G = _spd_check(m, config.spd_tol, "G_hat")
    check_M = _spd_check(m, config.spd_tol, "M_hat", allow_zero=False)
    if init.fully_specified:
        form, y = "G", np.concatenate([init.lambda0, np.zeros(m * m)])
    else:
        form, y = "M", np.concatenate([init.lambda0, init.M0.ravel()])
    ts, ys, forms = [t0], [y], [form]
    switched_at = None

    def make(ts, ys, forms):
        ys = np.asarray(ys)
        lam = ys[:, :m]
        X = ys[:, m:].reshape(-1, m, m)
        G = np.where(np.array(forms)[:, None, None] == "G", X, _safe_inv(X))
        M = np.where(np.array(forms)[:, None, None] == "M", X, _safe_inv(X))
        a = np.empty_like(lam)
        s = np.empty(len(ts))
        rate = np.empty(len(ts))
        for k in range(len(ts)):
            ms, f, F, grad, hess = _far_coefficients(provider, lam[k], eps, fd_step)
            a[k] = ms.a
            s[k] = ms.phi - lam[k] @ ms.a
            dlam = f - eps2 * (G[k] @ grad)
            rate[k] = -lam[k] @ ms.C @ dlam
        prov = {"regime": "far_local_quadratic", "provider": getattr(provider, "id", type(provider).__name__),
                "switched_to_M_at": switched_at}
        return ClosureTrajectory(np.asarray(ts), lam, a, M, G, s, rate, config, prov)

    for k in range(1, n_steps + 1):
        t = t0 + k * h
        rhs = rhs_G if form == "G" else rhs_M
        y = post(_rk4_step(rhs, t - h, y, h))
        try:
            (check_G if form == "G" else check_M)(t, y)
        except SingularityError as exc:
            exc.prefix = make(ts, ys, forms)
            raise
        if form == "G":
            G = y[m:].reshape(m, m)
            if np.linalg.eigvalsh(G).min() > config.switch_threshold:
                y = np.concatenate([y[:m], np.linalg.inv(G).ravel()])
                form = "M"
                switched_at = t
        if k % config.record_every == 0 or k == n_steps:
            ts.append(t)
            ys.append(y)
            forms.append(form)
    return make(ts, ys, forms)


def integrate_adiabatic(provider, lambda0, config: ClosureConfig) -> ClosureTrajectory:
    """Instantaneous moment closure ``lam' = C^{-1} <LA>`` (entropy conserving)."""
    lam0 = np.atleast_1d(np.asarray(lambda0, dtype=float))
    m = lam0.size

    def rhs(t, lam):
        return adiabatic_drift(provider.moments(lam))

    def no_check(t, y):
        pass

    ts, lam = _run(rhs, lam0, config, no_check)
    a = np.empty_like(lam)
    s = np.empty(len(ts))
    rate = np.empty(len(ts))
    for k in range(len(ts)):
        ms = provider.moments(lam[k])
        a[k] = ms.a
        s[k] = ms.phi - lam[k] @ ms.a
        rate[k] = -lam[k] @ ms.drift
    return ClosureTrajectory(ts, lam, a, None, None, s, rate, config,
                             {"regime": "adiabatic", "provider": getattr(provider, "id", type(provider).__name__)})


def entropy_and_rate(state: ClosureState, mats_or_provider, epsilon: float):
    """Entropy (zero at equilibrium) and its rate of change for one state."""
    lam = np.asarray(state.lambda_hat, dtype=float)
    G = state.G_hat
    if G is None and state.M_hat is not None:
        G = np.linalg.inv(state.M_hat)
    if isinstance(mats_or_provider, NearEqMatrices):
        C, D = mats_or_provider.C, mats_or_provider.D
        s = -0.5 * float(lam @ C @ lam)
        rate = 0.0 if G is None else epsilon**2 * float(lam @ C @ G @ D @ lam)
        return s, rate
    ms = mats_or_provider.moments(lam)
    s = float(ms.phi - lam @ ms.a)
    if G is None:
        return s, float(-lam @ ms.drift)
    _, f, _, grad, _ = _far_coefficients(mats_or_provider, lam, epsilon)
    return s, float(-lam @ ms.C @ (f - epsilon**2 * G @ grad))
