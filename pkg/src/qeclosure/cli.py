"""Config-driven experiment runner.

    qeclosure {matrices,reduce,resolve,tune,verify} --config FILE --out DIR [--seed N] [--workers N]

Every command validates the whole config first, writes its artifacts into a
scratch directory and moves it to ``--out`` only on success, so failed runs
leave nothing behind.  ``manifest.json`` lists every emitted file with its
SHA-256 checksum.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .closure import GaussianLinearProvider, MonteCarloProvider, NearEqMatrices, near_eq_matrices
from .config import ConfigError, ExperimentConfig, config_hash, load_config, parse_config, substream_seed
from .ensemble import EquilibriumSpec, sample_equilibrium
from .hamiltonian import (
    ObservableSet,
    evaluate_observables,
    harmonic_oscillator,
    make_observable,
    make_system,
    position,
)
from .reduced import (
    ClosureConfig,
    InitialCondition,
    integrate_adiabatic,
    integrate_far,
    integrate_near_G,
    integrate_near_M,
)
from .verify import (
    HJGrid,
    ResolvedRun,
    analytic_even_solution,
    even_mode_decomposition,
    hj_solve_1d,
    near_closure_runner,
    relative_l2,
    relaxation_window,
    resolve_ensemble,
    time_scale_diagnostics,
    tune_epsilon,
)

__all__ = ["main", "run_command", "Pipeline", "COMMANDS"]

COMMANDS = ("matrices", "reduce", "resolve", "tune", "verify")

# which config sections each command needs
_REQUIRES = {
    "matrices": ("system", "observables"),
    "reduce": ("initial",),
    "resolve": ("system", "observables", "initial"),
    "tune": ("system", "observables", "initial"),
    "verify": (),
}


# --- serialization -------------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory: Path, command: str, cfg: ExperimentConfig) -> dict:
    files = {}
    for p in sorted(directory.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(directory).as_posix()] = sha256_file(p)
    manifest = {"toolkit": "qeclosure", "version": __version__, "command": command,
                "config_sha256": config_hash(cfg), "seed": cfg.seed, "workers": cfg.workers, "files": files}
    write_json(directory / "manifest.json", manifest)
    return manifest


# --- pipeline stages --------------------------------------------------------------------


class Pipeline:
    """Builds systems, samples, matrices and closures from one validated config.

    Results are cached on the instance so commands that chain stages (``tune``)
    sample only once.  Randomness comes from named sub-streams of ``cfg.seed``.
    """

    def __init__(self, cfg: ExperimentConfig, log=None):
        self.cfg = cfg
        self.log = log or (lambda msg: None)
        self._eq = None
        self._obs = None
        self._mats = None
        self.centers = None

    def seed(self, name: str) -> int:
        return substream_seed(self.cfg.seed, name)

    @property
    def system(self):
        s = self.cfg.system
        return make_system(s.name, **s.params)

    @property
    def spec(self) -> EquilibriumSpec:
        s = self.cfg.sampler
        return EquilibriumSpec(beta=self.cfg.beta, burn_in=s.burn_in, thinning=s.thinning,
                               proposal_scale=s.proposal_scale, analytic_gaussian=s.analytic_gaussian,
                               chains=s.chains, chain_group=s.chain_group, ess_floor=s.ess_floor)

    def equilibrium(self):
        if self._eq is None:
            t = time.perf_counter()
            self._eq = sample_equilibrium(self.system, self.spec, self.cfg.sampler.count, self.seed("sampler"),
                                          self.cfg.workers, m=len(self.cfg.observables))
            self.log(f"sampled {self._eq.count} equilibrium points in {time.perf_counter() - t:.1f}s")
        return self._eq

    def observables(self) -> ObservableSet:
        if self._obs is None:
            n = self.system.n
            specs = self.cfg.observables
            centers = [0.0] * len(specs)
            if any(o.center == "equilibrium" for o in specs):
                raw = ObservableSet([make_observable(o.kind, n, o.index, 0.0, o.id) for o in specs])
                means = self.equilibrium().observables(raw).mean(axis=0)
                centers = [float(means[i]) if o.center == "equilibrium" else float(o.center)
                           for i, o in enumerate(specs)]
            else:
                centers = [float(o.center) for o in specs]
            self.centers = centers
            self._obs = ObservableSet([make_observable(o.kind, n, o.index, c, o.id) for o, c in zip(specs, centers)])
        return self._obs

    def matrices(self) -> NearEqMatrices:
        if self._mats is None:
            mc = self.cfg.matrices
            if mc is not None:
                m = len(mc.C)
                self._mats = NearEqMatrices(mc.C, mc.J if mc.J is not None else np.zeros((m, m)),
                                            mc.D if mc.D is not None else np.zeros((m, m)))
            else:
                obs = self.observables()
                self._mats = near_eq_matrices(self.system, self.equilibrium(), obs)
        return self._mats

    def matrices_document(self) -> dict:
        doc = self.matrices().to_dict()
        if self.cfg.matrices is None:
            eq = self.equilibrium()
            doc["observables"] = self.observables().ids
            doc["centers"] = self.centers
            doc["sampler"] = {k: v for k, v in eq.diagnostics.items() if k != "warnings"}
            doc["d_consistent"] = self.matrices().d_consistent()
            doc["j_is_zero"] = self.matrices().j_is_zero()
        return doc

    def provider(self):
        if self.cfg.closure.provider == "gaussian":
            return GaussianLinearProvider.from_matrices(self.matrices())
        return MonteCarloProvider(self.system, self.observables(), self.equilibrium(), self.spec,
                                  seed=self.seed("resolver"))

    def closure_config(self, epsilon=None, regime=None, t_span=None, dt=None, record_every=None):
        c = self.cfg.closure
        return ClosureConfig(epsilon=c.epsilon if epsilon is None else epsilon, regime=regime or c.regime,
                             t_span=tuple(t_span or c.t_span), dt=c.dt if dt is None else dt, scheme=c.scheme,
                             record_every=record_every or c.record_every, switch_threshold=c.switch_threshold)

    def reduce(self, lambda0=None, **overrides):
        cfg = self.closure_config(**overrides)
        init = InitialCondition(self.cfg.initial.lambda0 if lambda0 is None else lambda0, self.cfg.initial.M0)
        if cfg.regime == "near_G":
            return integrate_near_G(self.matrices(), init, cfg)
        if cfg.regime == "near_M":
            return integrate_near_M(self.matrices(), init, cfg)
        if cfg.regime == "far_local_quadratic":
            return integrate_far(self.provider(), init, cfg)
        if cfg.regime == "adiabatic":
            return integrate_adiabatic(self.provider(), init.lambda0, cfg)
        decomp = even_mode_decomposition(self.matrices())
        t0, t1 = cfg.t_span
        n_out = int(round((t1 - t0) / cfg.step / cfg.record_every))
        return analytic_even_solution(decomp, cfg.epsilon, np.linspace(t0, t1, n_out + 1), init.lambda0)

    def resolve(self) -> ResolvedRun:
        r = self.cfg.resolve
        t = time.perf_counter()
        run = resolve_ensemble(self.system, self.spec, self.observables(), self.cfg.initial.lambda0, r.n_traj,
                               r.t_grid.values(), r.dt, self.seed("initial-conditions"), self.cfg.workers,
                               r.energy_bound)
        run.meta["observables"] = self.observables().ids
        run.meta["centers"] = self.centers
        self.log(f"resolved {r.n_traj} trajectories in {time.perf_counter() - t:.1f}s "
                 f"(energy drift {run.energy_drift:.2e})")
        return run

    def tune(self, resolved: ResolvedRun):
        """Fit epsilon on the relaxation window; closure starts from ``C^{-1} a_exact(t0)``."""
        mats = self.matrices()
        tc = self.cfg.tune
        lam0 = np.linalg.solve(mats.C, resolved.a_exact[0])
        runner = near_closure_runner(mats, lam0, resolved.times, tc.closure_dt)
        if tc.window_entropy_fraction is not None:
            mask = relaxation_window(resolved, mats, tc.window_entropy_fraction)
        else:
            mask = np.ones(len(resolved.times), dtype=bool)
        fit = tune_epsilon(resolved, runner, tuple(tc.bracket), mask=mask)
        a_hat = runner(fit.epsilon_star)
        objective = relative_l2(a_hat, resolved.a_exact, mask)
        report = {
            "epsilon_star": fit.epsilon_star,
            "interior": bool(tc.bracket[0] < fit.epsilon_star < tc.bracket[1]),
            "objective_squared_ratio": objective,
            "relative_l2_error": math.sqrt(objective),
            "window": [float(resolved.times[0]), float(resolved.times[mask][-1])],
            "window_points": int(mask.sum()),
            "noise_floor": math.sqrt(float(np.sum(resolved.std_errors[mask] ** 2) / np.sum(resolved.a_exact[mask] ** 2))),
            "lambda_hat0": lam0,
        }
        try:
            report["time_scales"] = time_scale_diagnostics(mats, fit.epsilon_star, resolved)
        except Exception as exc:  # odd observables: no even-mode diagnostics
            report["time_scales"] = {"unavailable": str(exc)}
        if tc.max_error is not None:
            report["max_error"] = tc.max_error
            report["passed"] = bool(report["relative_l2_error"] <= tc.max_error and report["interior"])
        traj = integrate_near_G(mats, InitialCondition(lam0), ClosureConfig(
            epsilon=fit.epsilon_star, regime="near_G", t_span=(resolved.times[0], resolved.times[-1]),
            dt=tc.closure_dt, record_every=int(round((resolved.times[1] - resolved.times[0]) / tc.closure_dt))))
        return fit, report, traj


# --- verify suite -------------------------------------------------------------------------


def _check(name, value, tolerance, passed, detail=""):
    return {"check": name, "value": value, "tolerance": tolerance, "passed": bool(passed), "detail": detail}


def verify_suite(cfg: ExperimentConfig, pipeline: Optional[Pipeline] = None) -> list:
    """Cross-oracle checks on the scalar even case plus D-consistency and an SPD sweep."""
    v = cfg.verify
    checks = []
    mats = NearEqMatrices([[v.C]], [[0.0]], [[v.D]])
    eps = v.epsilon
    r_out = max(1, int(round(0.1 / v.riccati_dt)))
    n_steps = int(round(v.t_end / v.riccati_dt))
    t_end = n_steps * v.riccati_dt
    g = integrate_near_G(mats, InitialCondition([v.lambda0]),
                         ClosureConfig(epsilon=eps, t_span=(0, t_end), dt=v.riccati_dt, record_every=r_out))
    an = analytic_even_solution(even_mode_decomposition(mats), eps, g.t, [v.lambda0])
    err = max(np.abs(g.lambda_hat - an.lambda_hat).max(), np.abs(g.G_hat - an.G_hat).max())
    checks.append(_check("riccati_vs_analytic", err, 1e-6, err <= 1e-6, "max abs error in lambda_hat, G_hat"))

    t_hj = g.t
    hj = hj_solve_1d(mats, eps, HJGrid(tuple(v.hj_range), v.hj_points, penalty_b=v.penalty_b), v.lambda0, t_hj)
    mm = integrate_near_M(mats, InitialCondition([v.lambda0], [[v.penalty_b]]),
                          ClosureConfig(epsilon=eps, regime="near_M", t_span=(0, t_end), dt=v.riccati_dt,
                                        record_every=r_out))
    e_min = float(np.max(np.abs(hj.minimizer - mm.lambda_hat[:, 0]) / np.abs(mm.lambda_hat[:, 0])))
    e_curv = float(np.max(np.abs(hj.curvature - mm.M_hat[:, 0, 0]) / np.abs(mm.M_hat[:, 0, 0])))
    checks.append(_check("hj_minimizer_vs_riccati", e_min, 0.02, e_min <= 0.02, "max relative error"))
    checks.append(_check("hj_curvature_vs_riccati", e_curv, 0.05, e_curv <= 0.05, "max relative error"))
    e_tri = float(np.max(np.abs(hj.minimizer - an.lambda_hat[:, 0]) / np.abs(an.lambda_hat[:, 0])))
    checks.append(_check("hj_minimizer_vs_analytic", e_tri, 0.02, e_tri <= 0.02,
                         "penalty start b vs fully specified start"))

    K = an.extras["transport"]
    sym = float(np.max(np.abs(K - np.swapaxes(K, 1, 2))))
    min_ev = float(min(np.linalg.eigvalsh(k).min() for k in K))
    checks.append(_check("transport_symmetric_psd", max(sym, -min_ev), 1e-12, sym <= 1e-12 and min_ev >= -1e-12))

    # D-consistency on sampled matrices (config system, else a harmonic oscillator with A = q)
    if pipeline is not None and cfg.system is not None and cfg.observables:
        sampled = pipeline.matrices()
    else:
        osc = harmonic_oscillator()
        eq = sample_equilibrium(osc, EquilibriumSpec(analytic_gaussian=True), v.d_check_samples,
                                substream_seed(cfg.seed, "sampler"))
        sampled = near_eq_matrices(osc, eq, ObservableSet([position(0, 1)]))
    if v.perturb_D:
        sampled = dataclasses.replace(sampled, D=sampled.D + v.perturb_D * np.eye(sampled.m))
    se = sampled.std_errors.get("D_minus_D_alt")
    diff = float(np.max(np.abs(sampled.D - sampled.D_alt)))
    bound = float(np.max(3 * se)) if se is not None else 0.0
    checks.append(_check("d_formula_consistency", diff, "3 sigma", sampled.d_consistent(3.0),
                         f"max |D - D_alt| vs 3 x block std error ({bound:.3g})"))

    rng = np.random.default_rng(substream_seed(cfg.seed, "verify"))
    worst_ev, worst_even, worst_general = 0.0, 0.0, 0.0
    for _ in range(v.spd_instances):
        m = v.spd_dim
        X = rng.normal(size=(m, m))
        Y = rng.normal(size=(m, m))
        S = rng.normal(size=(m, m))
        eps_i = float(rng.uniform(0.05, 1.0))
        lam0 = rng.normal(size=m)
        C, D = X @ X.T + 0.5 * np.eye(m), Y @ Y.T
        for J in (S - S.T, np.zeros((m, m))):
            tr = integrate_near_G(NearEqMatrices(C, J, D), InitialCondition(lam0),
                                  ClosureConfig(epsilon=eps_i, t_span=(0, 10), dt=1e-2))
            for G in tr.G_hat:
                worst_ev = min(worst_ev, np.linalg.eigvalsh(G).min() / max(np.trace(G), 1e-300))
            if np.any(J):
                worst_general = min(worst_general, float(tr.entropy_rate.min()))
            else:
                worst_even = min(worst_even, float(tr.entropy_rate.min()))
    checks.append(_check("spd_sweep", worst_ev, -1e-8, worst_ev >= -1e-8,
                         f"min eig(G)/trace(G) over {v.spd_instances} random (C, J, D) and J=0 instances, G(0)=0"))
    checks.append(_check("entropy_rate_even", worst_even, -1e-12, worst_even >= -1e-12,
                         "min entropy rate with J=0 (positive entropy production holds in the even regime)"))
    checks.append(_check("entropy_rate_general_info", worst_general, None, True,
                         "min entropy rate with random skew J; reported only, may be negative"))
    return checks


# --- commands -------------------------------------------------------------------------------


def _emit_trajectory(out: Path, name: str, traj) -> None:
    traj.write(out / f"{name}.csv", out / f"{name}.json")


def run_command(command: str, cfg: ExperimentConfig, out: Path, log=None) -> dict:
    """Run ``command`` writing into the (existing, empty) directory ``out``; returns a summary."""
    pipe = Pipeline(cfg, log)
    summary = {"command": command}
    if command == "matrices":
        write_json(out / "matrices.json", pipe.matrices_document())
        summary["d_consistent"] = pipe.matrices().d_consistent()
    elif command == "reduce":
        traj = pipe.reduce()
        mc_only = cfg.closure.regime in ("far_local_quadratic", "adiabatic") and cfg.closure.provider == "monte_carlo"
        if not mc_only:
            write_json(out / "matrices.json", pipe.matrices_document())
        _emit_trajectory(out, "trajectory", traj)
        summary["rows"] = len(traj)
    elif command == "resolve":
        run = pipe.resolve()
        run.write(out / "resolved.csv", out / "resolved.json")
        summary["energy_drift"] = run.energy_drift
    elif command == "tune":
        write_json(out / "matrices.json", pipe.matrices_document())
        run = pipe.resolve()
        run.write(out / "resolved.csv", out / "resolved.json")
        fit, report, traj = pipe.tune(run)
        write_json(out / "epsilon_fit.json", fit.to_dict())
        write_json(out / "report.json", report)
        _emit_trajectory(out, "trajectory", traj)
        summary.update({k: report[k] for k in ("epsilon_star", "relative_l2_error", "interior", "window")})
        if "passed" in report:
            summary["passed"] = report["passed"]
    elif command == "verify":
        checks = verify_suite(cfg, pipe if cfg.system is not None else None)
        report = {"checks": checks, "all_passed": all(c["passed"] for c in checks)}
        write_json(out / "verify_report.json", report)
        summary["checks"] = checks
        summary["all_passed"] = report["all_passed"]
    else:
        raise ConfigError(f"unknown command {command!r}")
    return summary


def _require(command: str, cfg: ExperimentConfig) -> None:
    for key in _REQUIRES[command]:
        if not getattr(cfg, key):
            raise ConfigError(f"'{command}' needs a non-empty '{key}' section")
    if command == "matrices" and cfg.matrices is not None:
        raise ConfigError("'matrices' estimates the matrices; remove the explicit 'matrices' section")
    if command == "reduce":
        regime = cfg.closure.regime
        needs_sampling = cfg.matrices is None or (regime in ("far_local_quadratic", "adiabatic")
                                                  and cfg.closure.provider == "monte_carlo")
        if needs_sampling and (cfg.system is None or not cfg.observables):
            raise ConfigError("'reduce' needs explicit matrices or a system with observables to sample")
        if regime == "even_analytic" and cfg.initial.M0 is not None:
            raise ConfigError("even_analytic needs fully specified initial data")
    if command in ("resolve", "tune"):
        make_system(cfg.system.name, **cfg.system.params)  # parameter errors surface before sampling


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists():
        if not out.is_dir():
            raise ConfigError(f"--out {out} exists and is not a directory")
        if any(out.iterdir()) and not force:
            raise ConfigError(f"--out {out} is not empty (use --force to replace)")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="qeclosure", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="experiment JSON file")
    parser.add_argument("--out", help="output directory (overrides config 'output')")
    parser.add_argument("--seed", type=int, help="root seed override")
    parser.add_argument("--workers", type=int, help="worker threads override")
    parser.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)

    def log(msg):
        if not args.quiet:
            print(msg, file=sys.stderr)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None:
            cfg.workers = args.workers
        cfg = parse_config(_clean(dataclasses.asdict(cfg)))  # re-validate overrides
        out_dir = args.out or cfg.output
        if not out_dir:
            raise ConfigError("no output directory: pass --out or set 'output'")
        cfg.output = None  # the destination is not part of the experiment identity
        out = Path(out_dir)
        _require(args.command, cfg)
        _prepare_out(out, args.force)
    except (ConfigError, ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    t0 = time.perf_counter()
    try:
        summary = run_command(args.command, cfg, scratch, log)
        write_json(scratch / "config.json", dataclasses.asdict(cfg))
        write_manifest(scratch, args.command, cfg)
        if out.exists():
            shutil.rmtree(out)
        os.replace(scratch, out)
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    summary["runtime_s"] = round(time.perf_counter() - t0, 2)
    print(json.dumps(_clean(summary), indent=2, sort_keys=True))
    if args.command == "verify" and not summary["all_passed"]:
        return 1
    if summary.get("passed") is False:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
